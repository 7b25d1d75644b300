fn main() {
    std::process::exit(crnet_cli::main_with_args(std::env::args_os()));
}
