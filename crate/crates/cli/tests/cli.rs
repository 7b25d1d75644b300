use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY: &str = r#"seed = 3
[data]
train_classes = 6
val_classes = 5
test_classes = 5
images_per_class = 25
[model.embedding]
widths = [4, 4, 8, 8]
[model.codec]
num_bases = 3
[model.relation]
hidden = 8
[episode]
episodes = 6
queries_per_class = 5
[train]
eval_every = 3
val_tasks = 4
[pretrain]
epochs = 1
[analysis]
meta_shift_tests = 5
fid_tests = 3
export_samples_per_class = 2
[eval]
num_tasks = 8
"#;

struct Run {
    _tmp: TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("tiny.toml"), TINY).unwrap();
        Run { _tmp: tmp, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn crnet(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_crnet"))
            .current_dir(&self.root)
            .args(["--config", "tiny.toml", "--out-dir", "out"])
            .args(args)
            .env_remove("CRNET_OUT_DIR")
            .env_remove("CRNET_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.crnet(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.out().join(rel)).unwrap()
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn rows(csv: &str) -> Vec<&str> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

fn meta<'a>(csv: &'a str, key: &str) -> &'a str {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("# {key}=")))
        .unwrap_or_else(|| panic!("no `{key}` metadata"))
}

#[test]
fn generate_is_reproducible_and_matches_manifest() {
    let (a, b) = (Run::new(), Run::new());
    a.ok(&["generate"]);
    b.ok(&["generate"]);
    let (ta, tb) = (
        tree(&a.out().join("dataset")),
        tree(&b.out().join("dataset")),
    );
    assert_eq!(ta, tb);

    let manifest = a.read("dataset/manifest.txt");
    for (split, n) in [("train", 6), ("val", 5), ("test", 5)] {
        let listed: Vec<&str> = manifest
            .lines()
            .find_map(|l| l.strip_prefix(&format!("split.{split}=")))
            .unwrap()
            .split(',')
            .collect();
        assert_eq!(listed.len(), n);
        let dirs = fs::read_dir(a.out().join("dataset").join(split))
            .unwrap()
            .count();
        assert_eq!(dirs, n);
        for class in listed {
            let pngs = fs::read_dir(a.out().join("dataset").join(split).join(class))
                .unwrap()
                .filter(|e| {
                    e.as_ref()
                        .unwrap()
                        .path()
                        .extension()
                        .is_some_and(|x| x == "png")
                })
                .count();
            assert_eq!(pngs, 25);
        }
    }
}

#[test]
fn zero_episodes_leave_the_checkpoint_unchanged() {
    let r = Run::new();
    r.ok(&["generate"]);
    r.ok(&["train"]);
    fs::rename(r.out().join("last.ckpt"), r.root.join("start.ckpt")).unwrap();
    let toml = TINY.replace("episodes = 6", "episodes = 0");
    fs::write(r.root.join("tiny.toml"), toml).unwrap();
    r.ok(&["--checkpoint", "start.ckpt", "train"]);
    let before = crnet_cli::Checkpoint::load(&r.root.join("start.ckpt")).unwrap();
    let after = crnet_cli::Checkpoint::load(&r.out().join("last.ckpt")).unwrap();
    assert_eq!(after.state, before.state);
    assert!(after.state.params.bitwise_eq(&before.state.params));
}

#[test]
fn analysis_commands_are_repeatable_and_well_formed() {
    let r = Run::new();
    r.ok(&["generate"]);
    r.ok(&["train"]);
    let ck = ["--checkpoint", "out/best.ckpt"];

    r.ok(&[&ck[..], &["eval"]].concat());
    let first = (r.read("eval_tasks.csv"), r.read("eval_summary.csv"));
    r.ok(&[&ck[..], &["--threads", "3", "eval"]].concat());
    assert_eq!(
        first,
        (r.read("eval_tasks.csv"), r.read("eval_summary.csv"))
    );
    assert_eq!(rows(&first.0).len(), 8);

    // Two tests share one mean, so their distances to it coincide.
    r.ok(&[&ck[..], &["--num-tasks", "2", "metashift"]].concat());
    let summary = r.read("metashift_summary.csv");
    assert_eq!(rows(&summary).len(), 10);
    for entry in fs::read_dir(r.out().join("metashift")).unwrap() {
        let text = fs::read_to_string(entry.unwrap().path()).unwrap();
        let d: Vec<f64> = rows(&text)
            .iter()
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(d.len(), 2);
        assert!((d[0] - d[1]).abs() <= 1e-12 * (1.0 + d[0]));
    }

    r.ok(&[&ck[..], &["fid"]].concat());
    assert_eq!(rows(&r.read("fid.csv")).len(), 3);
    r.ok(&[&ck[..], &["export"]].concat());
    assert_eq!(rows(&r.read("embeddings.csv")).len(), 10);
}

#[test]
fn config_hash_is_the_digest_of_the_written_config() {
    let r = Run::new();
    r.ok(&["generate"]);
    r.ok(&["train"]);
    let log = r.read("train_log.csv");
    let file = meta(&log, "config_file");
    assert_eq!(file, "train.config.toml");
    let bytes = fs::read(r.out().join(file)).unwrap();
    let digest: String = Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(meta(&log, "config_hash"), digest);
    assert_eq!(meta(&log, "seed"), "3");
}

#[test]
fn sweep_rows_follow_the_requested_bases() {
    let r = Run::new();
    r.ok(&["generate"]);
    r.ok(&["sweep-basis", "--bases", "1"]);
    assert_eq!(rows(&r.read("sweep.csv")).len(), 1);

    r.ok(&["sweep-basis", "--bases", "4,8,16"]);
    let sweep = r.read("sweep.csv");
    let got: Vec<&str> = rows(&sweep);
    let ns: Vec<&str> = got.iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["4", "8", "16"]);

    // Re-evaluating a stored sweep model reproduces its row.
    r.ok(&["--checkpoint", "out/sweep/bases_8.ckpt", "eval"]);
    let summary = r.read("eval_summary.csv");
    let mean = |head: &str| {
        rows(&summary)
            .into_iter()
            .find(|l| l.starts_with(&format!("{head},")))
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .to_string()
    };
    let row: Vec<&str> = got[1].split(',').collect();
    assert_eq!(row[1], mean("euclidean"));
    assert_eq!(row[2], mean("relation"));
    assert_eq!(row[3], mean("prototype"));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let r = Run::new();
    let code = |args: &[&str]| r.crnet(args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["bogus"]), 1);
    assert_eq!(code(&["eval"]), 1, "missing --checkpoint");
    assert_eq!(code(&["--config", "nope.toml", "generate"]), 1);
    assert_eq!(code(&["--threads", "0", "generate"]), 1);
    fs::write(r.root.join("bad.toml"), "seed = 1\nunknown = 2\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "generate"]), 1);

    r.ok(&["generate"]);
    fs::write(r.root.join("junk.ckpt"), b"CRNETCKP\x09\x00\x00\x00").unwrap();
    let o = r.crnet(&["--checkpoint", "junk.ckpt", "eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 9"));
}
