use std::path::{Path, PathBuf};

use crnet::analysis::{
    embeddings_csv_header, export_embeddings, fid_protocol, meta_shift_model, FidReport,
    MetaShiftReport,
};
use crnet::embedding::{pretrain as pretrain_embedding, ImageBatch};
use crnet::episodic::{
    evaluate, make_synthetic_bundle, train as train_episodes, write_csv, Accuracy, DatasetBundle,
    DescriptorKind, EpisodeConfig, EvalReport, FewShotDataset, MetricHead, ModelConfig, TaskLog,
    TrainState,
};
use crnet::rng::{stream, Stream};

use crate::checkpoint::Checkpoint;
use crate::config::{sha256_hex, RunConfig};
use crate::{CliError, Command, GlobalArgs};

/// Effective configuration of one invocation.
pub struct Context {
    pub config: RunConfig,
    /// SHA-256 of the effective config file written next to the outputs.
    pub config_hash: String,
    pub command: &'static str,
    pub checkpoint: Option<PathBuf>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate => "generate",
        Command::Pretrain => "pretrain",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Metashift => "metashift",
        Command::Fid => "fid",
        Command::Export => "export",
        Command::SweepBasis { .. } => "sweep-basis",
    }
}

impl Context {
    /// Defaults, then the config file, then command-line flags.
    pub fn new(args: &GlobalArgs, command: &Command) -> Result<Self, CliError> {
        let mut config = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = args.seed {
            config.seed = s;
        }
        if let Some(d) = &args.out_dir {
            config.paths.out_dir = d.clone();
        }
        if let Some(n) = args.num_tasks {
            match command {
                Command::Metashift => config.analysis.meta_shift_tests = n,
                Command::Fid => config.analysis.fid_tests = n,
                _ => config.eval.num_tasks = n,
            }
        }
        if let Command::SweepBasis { bases: Some(b) } = command {
            config.sweep.bases = b.clone();
        }
        config.validate()?;
        Self::from_config(config, command_name(command), args.checkpoint.clone())
    }

    pub fn from_config(
        config: RunConfig,
        command: &'static str,
        checkpoint: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let text = config.to_toml()?;
        Ok(Context {
            config_hash: sha256_hex(text.as_bytes()),
            config,
            command,
            checkpoint,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.paths.out_dir
    }

    /// Path of the effective config written by this command.
    pub fn config_file(&self) -> PathBuf {
        self.out_dir().join(format!("{}.config.toml", self.command))
    }

    fn write_config(&self) -> Result<(), CliError> {
        let path = self.config_file();
        let text = self.config.to_toml()?;
        std::fs::create_dir_all(self.out_dir())
            .and_then(|_| std::fs::write(&path, text))
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// `#` header lines shared by every CSV output.
    pub fn metadata(&self, extra: &[(&str, String)]) -> Vec<(String, String)> {
        let mut m = vec![
            ("command".to_string(), self.command.to_string()),
            ("seed".to_string(), self.config.seed.to_string()),
            ("config_hash".to_string(), self.config_hash.clone()),
            (
                "config_file".to_string(),
                self.config_file()
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            ),
        ];
        m.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        m
    }

    fn load_data(&self) -> Result<DatasetBundle, CliError> {
        let dir = self.config.dataset_dir();
        if !dir.join(crnet::episodic::MANIFEST_FILE).exists() {
            return Err(CliError::Usage(format!(
                "no dataset at {} (run `generate` first)",
                dir.display()
            )));
        }
        Ok(DatasetBundle::load(&dir)?)
    }

    fn require_checkpoint(&self) -> Result<Checkpoint, CliError> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{} needs --checkpoint", self.command)))?;
        self.load_checkpoint(path)
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint, CliError> {
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        Ok(Checkpoint::load(path)?)
    }

    fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            seed: self.config.seed,
            ..self.config.episode.clone()
        }
    }
}

fn check_shape(model: &ModelConfig, ds: &FewShotDataset) -> Result<(), CliError> {
    let e = &model.embedding;
    if ds.image_shape != [e.channels, e.height, e.width] {
        return Err(CliError::Usage(format!(
            "dataset images are {:?}, the model expects {:?}",
            ds.image_shape,
            [e.channels, e.height, e.width]
        )));
    }
    Ok(())
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    ctx.write_config()?;
    let bundle = make_synthetic_bundle(&ctx.config.data, ctx.config.seed)?;
    let dir = ctx.config.dataset_dir();
    bundle.save(&dir)?;
    println!(
        "wrote {} train / {} val / {} test classes to {}",
        bundle.train.num_classes(),
        bundle.val.num_classes(),
        bundle.test.num_classes(),
        dir.display()
    );
    Ok(())
}

pub fn pretrain(ctx: &Context) -> Result<(), CliError> {
    ctx.write_config()?;
    let data = ctx.load_data()?;
    let cfg = &ctx.config;
    check_shape(&cfg.model, &data.train)?;
    let mut state = TrainState::new(&cfg.model, cfg.seed)?;
    let (images, labels) = data.train.all_images()?;
    let batch = ImageBatch::new(images, labels)?;
    let report = pretrain_embedding(
        &batch,
        &cfg.model.embedding,
        &mut state.params,
        &cfg.pretrain,
        &mut stream(cfg.seed, Stream::Init, 1),
    )?;
    let out = ctx.out_dir();
    write_csv(
        &out.join("pretrain_log.csv"),
        &ctx.metadata(&[]),
        "epoch,loss,accuracy",
        report
            .loss
            .iter()
            .zip(&report.accuracy)
            .enumerate()
            .map(|(i, (l, a))| format!("{i},{l},{a}")),
    )?;
    Checkpoint::new(cfg.clone(), state).save(&out.join("pretrain.ckpt"))?;
    if let (Some(l), Some(a)) = (report.loss.last(), report.accuracy.last()) {
        println!("pretrain: final loss {l:.4}, accuracy {a:.4}");
    }
    Ok(())
}

/// Outcome of a `train` run.
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub log: Vec<TaskLog>,
}

fn head_score(r: &EvalReport) -> f64 {
    let heads: Vec<f64> = [r.euclidean, r.relation]
        .iter()
        .flatten()
        .map(|a| a.mean)
        .collect();
    heads.iter().sum::<f64>() / heads.len().max(1) as f64
}

/// Trains `episode.episodes` further episodes from `--checkpoint` (or a fresh
/// initialization), validating every `train.eval_every` episodes.
pub fn train(ctx: &Context) -> Result<TrainOutcome, CliError> {
    ctx.write_config()?;
    let data = ctx.load_data()?;
    let mut cfg = ctx.config.clone();
    let mut state = match &ctx.checkpoint {
        Some(p) => {
            let ck = ctx.load_checkpoint(p)?;
            cfg.model = ck.config.model;
            ck.state
        }
        None => TrainState::new(&cfg.model, cfg.seed)?,
    };
    check_shape(&cfg.model, &data.train)?;
    let out = ctx.out_dir().to_path_buf();
    let total = cfg.episode.episodes;
    let mut train_cfg = cfg.train_config();
    let mut log = Vec::new();
    let mut val_rows = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut done = 0;
    let write_logs = |log: &[TaskLog], val_rows: &[String]| -> Result<(), CliError> {
        write_csv(
            &out.join("train_log.csv"),
            &ctx.metadata(&[]),
            TaskLog::CSV_HEADER,
            log.iter().map(TaskLog::csv_row),
        )?;
        write_csv(
            &out.join("val_log.csv"),
            &ctx.metadata(&[("val_tasks", cfg.train.val_tasks.to_string())]),
            "episode,euclidean,relation,prototype,score",
            val_rows.iter().cloned(),
        )?;
        Ok(())
    };
    while done < total {
        let n = cfg.train.eval_every.min(total - done);
        train_cfg.episode.episodes = n;
        match train_episodes(&data.train, &cfg.model, &train_cfg, &mut state) {
            Ok(l) => log.extend(l),
            Err(f) => {
                log.extend(f.log);
                write_logs(&log, &val_rows)?;
                Checkpoint::new(cfg.clone(), f.snapshot).save(&out.join("last.ckpt"))?;
                return Err(CliError::Runtime(f.error));
            }
        }
        done += n;
        let val = evaluate(
            &data.val,
            &EpisodeConfig {
                seed: cfg.seed,
                ..cfg.episode.clone()
            },
            &cfg.model,
            &state.params,
            cfg.train.val_tasks,
            MetricHead::Both,
        )?;
        let score = head_score(&val);
        let opt = |a: Option<Accuracy>| a.map_or(String::new(), |a| a.mean.to_string());
        val_rows.push(format!(
            "{},{},{},{},{score}",
            state.episode,
            opt(val.euclidean),
            opt(val.relation),
            val.prototype.mean
        ));
        let short = |a: Option<Accuracy>| a.map_or("-".into(), |a| format!("{:.4}", a.mean));
        println!(
            "episode {}: loss {:.4}, val euclidean {} relation {} (score {score:.4})",
            state.episode,
            state.metrics.loss,
            short(val.euclidean),
            short(val.relation)
        );
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            let mut ck = Checkpoint::new(cfg.clone(), state.clone());
            ck.notes.insert("val_score".into(), score.to_string());
            ck.save(&out.join("best.ckpt"))?;
            best = Some((score, ck));
        }
    }
    write_logs(&log, &val_rows)?;
    let last = Checkpoint::new(cfg.clone(), state);
    last.save(&out.join("last.ckpt"))?;
    Ok(TrainOutcome {
        last,
        best: best.map(|(_, c)| c),
        log,
    })
}

fn accuracy_line(name: &str, a: &Accuracy) -> String {
    format!("{name:<10} {:.4} +- {:.4}", a.mean, a.ci95)
}

pub fn eval_report(
    ctx: &Context,
    data: &FewShotDataset,
    model: &ModelConfig,
    ck: &Checkpoint,
) -> Result<EvalReport, CliError> {
    check_shape(model, data)?;
    let cfg = &ctx.config;
    Ok(evaluate(
        data,
        &ctx.episode(),
        model,
        &ck.state.params,
        cfg.eval.num_tasks,
        cfg.eval.metric,
    )?)
}

fn write_eval(ctx: &Context, dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    let meta = ctx.metadata(&[
        ("num_tasks", report.num_tasks().to_string()),
        ("ways", report.ways.to_string()),
        ("shots", report.shots.to_string()),
        ("queries_per_class", report.queries_per_class.to_string()),
    ]);
    write_csv(
        &dir.join("eval_tasks.csv"),
        &meta,
        EvalReport::CSV_HEADER,
        report.csv_rows(),
    )?;
    let heads = [
        ("euclidean", report.euclidean),
        ("relation", report.relation),
        ("prototype", Some(report.prototype)),
    ];
    write_csv(
        &dir.join("eval_summary.csv"),
        &meta,
        "head,mean,std,ci95,num_tasks",
        heads.iter().filter_map(|(h, a)| {
            a.map(|a| format!("{h},{},{},{},{}", a.mean, a.std, a.ci95, report.num_tasks()))
        }),
    )?;
    Ok(())
}

/// Test-split accuracy of `--checkpoint`; the model comes from the checkpoint.
pub fn eval(ctx: &Context) -> Result<EvalReport, CliError> {
    ctx.write_config()?;
    let ck = ctx.require_checkpoint()?;
    let data = ctx.load_data()?;
    let report = eval_report(ctx, &data.test, &ck.config.model, &ck)?;
    write_eval(ctx, ctx.out_dir(), &report)?;
    println!(
        "{}-way {}-shot, {} tasks, {} queries/class (mean +- 95% CI)",
        report.ways,
        report.shots,
        report.num_tasks(),
        report.queries_per_class
    );
    if let Some(a) = &report.euclidean {
        println!("{}", accuracy_line("euclidean", a));
    }
    if let Some(a) = &report.relation {
        println!("{}", accuracy_line("relation", a));
    }
    println!("{}", accuracy_line("prototype", &report.prototype));
    Ok(report)
}

fn source_tag(kind: DescriptorKind) -> &'static str {
    match kind {
        DescriptorKind::Decoded => "decoded",
        DescriptorKind::MeanPrototype => "mean-prototype",
    }
}

/// Per test class, meta shift of the decoded descriptor and of the mean
/// prototype on the same embedding.
pub fn metashift(ctx: &Context) -> Result<Vec<(MetaShiftReport, MetaShiftReport)>, CliError> {
    ctx.write_config()?;
    let ck = ctx.require_checkpoint()?;
    let data = ctx.load_data()?;
    let model = &ck.config.model;
    check_shape(model, &data.test)?;
    let a = &ctx.config.analysis;
    let dir = ctx.out_dir().join("metashift");
    let mut pairs = Vec::new();
    let mut summary = Vec::new();
    for c in 0..data.test.num_classes() {
        let run = |kind| {
            meta_shift_model(
                &data.test,
                c,
                a.meta_shift_shots,
                a.meta_shift_tests,
                model,
                &ck.state.params,
                kind,
                ctx.config.seed,
            )
        };
        let decoded = run(DescriptorKind::Decoded)?;
        let proto = run(DescriptorKind::MeanPrototype)?;
        for r in [&decoded, &proto] {
            let tag = source_tag(r.source);
            write_csv(
                &dir.join(format!("{}_{tag}.csv", r.class_name)),
                &ctx.metadata(&[
                    ("class", r.class_name.clone()),
                    ("source", tag.to_string()),
                    ("tests", r.tests.to_string()),
                    ("shots", r.shots.to_string()),
                ]),
                MetaShiftReport::CSV_HEADER,
                r.csv_rows(),
            )?;
            summary.push(format!(
                "{},{tag},{},{},{},{}",
                r.class_name,
                r.mean,
                r.std,
                r.mean_norm,
                r.relative_mean()
            ));
        }
        println!(
            "{}: decoded {:.4e} (relative {:.4}), mean-prototype {:.4e} (relative {:.4})",
            decoded.class_name,
            decoded.mean,
            decoded.relative_mean(),
            proto.mean,
            proto.relative_mean()
        );
        pairs.push((decoded, proto));
    }
    write_csv(
        &ctx.out_dir().join("metashift_summary.csv"),
        &ctx.metadata(&[
            ("tests", a.meta_shift_tests.to_string()),
            ("shots", a.meta_shift_shots.to_string()),
        ]),
        "class,source,mean,std,mean_norm,relative_mean",
        summary,
    )?;
    let smaller = pairs.iter().filter(|(d, p)| d.mean < p.mean).count();
    println!(
        "decoded descriptor shifts less than the mean prototype for {smaller} of {} classes",
        pairs.len()
    );
    Ok(pairs)
}

pub fn fid(ctx: &Context) -> Result<FidReport, CliError> {
    ctx.write_config()?;
    let ck = ctx.require_checkpoint()?;
    let data = ctx.load_data()?;
    let model = &ck.config.model;
    check_shape(model, &data.test)?;
    let report = fid_protocol(
        &data.test,
        model,
        &ck.state.params,
        ctx.config.analysis.fid_tests,
        &ctx.episode(),
        ctx.config.seed,
    )?;
    write_csv(
        &ctx.out_dir().join("fid.csv"),
        &ctx.metadata(&[
            ("jitter", report.jitter.to_string()),
            ("ways", report.ways.to_string()),
            ("shots", report.shots.to_string()),
            ("queries_per_class", report.queries_per_class.to_string()),
        ]),
        FidReport::CSV_HEADER,
        report.csv_rows(),
    )?;
    let mean = report.fid.iter().sum::<f64>() / report.fid.len() as f64;
    println!("fid over {} tests: mean {mean:.6}", report.fid.len());
    Ok(report)
}

pub fn export(ctx: &Context) -> Result<usize, CliError> {
    ctx.write_config()?;
    let ck = ctx.require_checkpoint()?;
    let data = ctx.load_data()?;
    let model = &ck.config.model;
    check_shape(model, &data.test)?;
    let n = ctx.config.analysis.export_samples_per_class;
    let rows = export_embeddings(&data.test, model, &ck.state.params, n, ctx.config.seed)?;
    write_csv(
        &ctx.out_dir().join("embeddings.csv"),
        &ctx.metadata(&[("samples_per_class", n.to_string())]),
        &embeddings_csv_header(model.feature_dim()?),
        rows.iter().map(|r| r.csv_row()),
    )?;
    println!("exported {} embeddings", rows.len());
    Ok(rows.len())
}

/// One row of the basis sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub num_bases: usize,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

/// Trains a fresh model per basis count in `sweep.bases` and evaluates it on
/// the test split. Each model is saved as `sweep/bases_<N>.ckpt`.
pub fn sweep_basis(ctx: &Context) -> Result<Vec<SweepRow>, CliError> {
    ctx.write_config()?;
    let data = ctx.load_data()?;
    let cfg = &ctx.config;
    let mut rows = Vec::new();
    for &n in &cfg.sweep.bases {
        let mut run = cfg.clone();
        run.model.codec.num_bases = n;
        check_shape(&run.model, &data.train)?;
        let mut state = TrainState::new(&run.model, run.seed)?;
        train_episodes(&data.train, &run.model, &run.train_config(), &mut state)
            .map_err(|f| CliError::Runtime(f.error))?;
        let ck = Checkpoint::new(run.clone(), state);
        let path = ctx.out_dir().join("sweep").join(format!("bases_{n}.ckpt"));
        ck.save(&path)?;
        let report = eval_report(ctx, &data.test, &run.model, &ck)?;
        println!(
            "bases {n}: prototype {:.4}{}{}",
            report.prototype.mean,
            report
                .euclidean
                .map_or(String::new(), |a| format!(", euclidean {:.4}", a.mean)),
            report
                .relation
                .map_or(String::new(), |a| format!(", relation {:.4}", a.mean)),
        );
        rows.push(SweepRow {
            num_bases: n,
            report,
            checkpoint: path,
        });
    }
    let opt = |a: Option<Accuracy>| a.map_or(String::new(), |a| a.mean.to_string());
    write_csv(
        &ctx.out_dir().join("sweep.csv"),
        &ctx.metadata(&[("num_tasks", cfg.eval.num_tasks.to_string())]),
        "num_bases,euclidean,relation,prototype",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{}",
                r.num_bases,
                opt(r.report.euclidean),
                opt(r.report.relation),
                r.report.prototype.mean
            )
        }),
    )?;
    Ok(rows)
}
