//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Criteria 4-8 share one trained synthetic model.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::field_reassign_with_default)]

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crnet::analysis::{feature_fid, frechet_distance, GaussianSummary, FID_JITTER};
use crnet::class_codec::{
    self, aggregate_residuals, encode_class, soft_assign, soft_assign_distance_form,
    ClassEncoderParams, CodecConfig, Normalization,
};
use crnet::embedding::{embed_images, Mode};
use crnet::episodic::{
    descriptors_graph, evaluate, regularized_names, sample_episode, DescriptorKind, MetricHead,
    TrainState,
};
use crnet::metric::{
    self, cross_entropy_graph, euclidean_loss, euclidean_loss_graph, loss_from_distances,
    relation_loss, relation_scores_graph, total_loss_graph, LossWeights, RelationConfig,
};
use crnet::numerics::{
    gradient_check, randn, Array, BatchNormMode, GradCheckReport, Graph, ParameterSet, Var,
};
use crnet::rng::{stream, Stream};
use crnet_cli::commands::{self, Context};
use crnet_cli::{Checkpoint, RunConfig};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, id: u32, name: &'static str, pass: bool, detail: String) {
    println!(
        "{} criterion {id} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    out.push(Outcome {
        id,
        name,
        pass,
        detail,
    });
}

// ---------- criterion 1: gradient integrity ----------

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> crnet::Result<Var>>;

/// `sum(w * op(inputs))` with a fixed random weighting `w`.
fn check_primitive(seed: u64, shapes: &[Vec<usize>], build: &Build) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    let names: Vec<String> = (0..shapes.len()).map(|i| format!("in{i}")).collect();
    for (n, s) in names.iter().zip(shapes) {
        ps.insert(n.clone(), randn(s, 1.0, &mut rng)).unwrap();
    }
    gradient_check(
        |g, p| {
            let vars: Vec<Var> = names
                .iter()
                .map(|n| g.param(p, n))
                .collect::<crnet::Result<_>>()?;
            let out = build(g, &vars)?;
            let shape = g.shape(out).to_vec();
            let w = g.constant(randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1)))?;
            let prod = g.mul(out, w)?;
            g.sum(prod)
        },
        &ps,
        EPS,
        TOL,
    )
    .unwrap()
}

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    let mean = Array::full(&[2], 0.3);
    let var = Array::full(&[2], 1.7);
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "transpose",
            vec![vec![3, 2]],
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "add_bias",
            vec![vec![3, 2], vec![2]],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ),
        (
            "scale_rows",
            vec![vec![3, 2], vec![3]],
            Box::new(|g, v| g.scale_rows(v[0], v[1])),
        ),
        ("scale", vec![vec![4]], Box::new(|g, v| g.scale(v[0], -1.3))),
        ("neg", vec![vec![4]], Box::new(|g, v| g.neg(v[0]))),
        ("relu", vec![vec![6]], Box::new(|g, v| g.relu(v[0]))),
        (
            "conv2d",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "max_pool2d",
            vec![vec![2, 2, 4, 4]],
            Box::new(|g, v| g.max_pool2d(v[0], 2)),
        ),
        (
            "avg_pool2d",
            vec![vec![2, 2, 4, 4]],
            Box::new(|g, v| g.avg_pool2d(v[0], 2)),
        ),
        (
            "global_avg_pool",
            vec![vec![2, 3, 3, 3]],
            Box::new(|g, v| g.global_avg_pool(v[0])),
        ),
        (
            "batch_norm(train)",
            vec![vec![4, 2, 3, 3], vec![2], vec![2]],
            Box::new(|g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?
                    .0)
            }),
        ),
        (
            "batch_norm(eval)",
            vec![vec![4, 2], vec![2], vec![2]],
            Box::new(move |g, v| {
                let mode = BatchNormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                };
                Ok(g.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.0)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 4]],
            Box::new(|g, v| g.softmax(v[0], 1)),
        ),
        (
            "log_sum_exp",
            vec![vec![3, 4]],
            Box::new(|g, v| g.log_sum_exp(v[0], 1)),
        ),
        ("sum", vec![vec![3, 2]], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![vec![3, 2]], Box::new(|g, v| g.mean(v[0]))),
        (
            "sum_axis",
            vec![vec![3, 2]],
            Box::new(|g, v| g.sum_axis(v[0], 0)),
        ),
        (
            "mean_axis",
            vec![vec![3, 2]],
            Box::new(|g, v| g.mean_axis(v[0], 0)),
        ),
        ("sum_sq", vec![vec![3, 2]], Box::new(|g, v| g.sum_sq(v[0]))),
        (
            "concat",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 0)),
        ),
        (
            "reshape",
            vec![vec![2, 3]],
            Box::new(|g, v| g.reshape(v[0], &[3, 2])),
        ),
        (
            "gather_rows",
            vec![vec![3, 2]],
            Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        ),
        (
            "pick_per_row",
            vec![vec![3, 4]],
            Box::new(|g, v| g.pick_per_row(v[0], &[3, 0, 1])),
        ),
        (
            "sq_dist",
            vec![vec![3, 4], vec![2, 4]],
            Box::new(|g, v| g.sq_dist(v[0], v[1])),
        ),
        (
            "l2_normalize_rows",
            vec![vec![3, 4]],
            Box::new(|g, v| g.l2_normalize_rows(v[0])),
        ),
    ]
}

#[derive(Clone, Copy)]
enum ToyLoss {
    Euclidean,
    Relation,
    Total,
}

/// 2-way 2-shot episode over free feature vectors: rows 0-3 support (class-major),
/// rows 4-5 one query per class.
fn toy_episode_check(kind: ToyLoss) -> GradCheckReport {
    let d = 4;
    let codec = CodecConfig {
        num_bases: 3,
        ..CodecConfig::default()
    };
    let mut rng = stream(11, Stream::Init, 0);
    let mut p = class_codec::init_params(d, &codec, &mut rng).unwrap();
    p.merge(metric::init_relation_params(d, &RelationConfig { hidden: 5 }, &mut rng).unwrap())
        .unwrap();
    p.insert("toy.features", randn(&[6, d], 1.0, &mut rng))
        .unwrap();
    let labels = [0usize, 1];
    gradient_check(
        |g, p| {
            let f = g.param(p, "toy.features")?;
            let desc = descriptors_graph(
                g,
                &codec,
                p,
                f,
                &[vec![0, 1], vec![2, 3]],
                DescriptorKind::Decoded,
            )?;
            let q = g.gather_rows(f, &[4, 5])?;
            match kind {
                ToyLoss::Euclidean => euclidean_loss_graph(g, q, desc, &labels),
                ToyLoss::Relation => {
                    let s = relation_scores_graph(g, p, q, desc)?;
                    cross_entropy_graph(g, s, &labels)
                }
                ToyLoss::Total => {
                    let reg = regularized_names(p);
                    Ok(
                        total_loss_graph(g, p, &reg, q, desc, &labels, &LossWeights::conv4())?
                            .total,
                    )
                }
            }
        },
        &p,
        EPS,
        TOL,
    )
    .unwrap()
}

fn criterion_1(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, (name, shapes, build)) in primitives().iter().enumerate() {
        let r = check_primitive(100 + i as u64, shapes, build);
        worst = worst.max(r.max_rel_deviation);
        if !r.passed {
            failed.push(name.to_string());
        }
    }
    let n_prims = primitives().len();
    for (name, kind) in [
        ("encoder-decoder with L_E", ToyLoss::Euclidean),
        ("relation path with L_R", ToyLoss::Relation),
        ("weighted total loss", ToyLoss::Total),
    ] {
        let r = toy_episode_check(kind);
        worst = worst.max(r.max_rel_deviation);
        if !r.passed {
            failed.push(format!("{name}: {r:?}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failed.is_empty() && secs < 60.0;
    record(
        out,
        1,
        "gradient integrity",
        pass,
        format!(
            "{n_prims} primitives + 3 toy-episode paths, worst rel. deviation {worst:.2e} \
             (tol {TOL:e}), {secs:.1}s{}",
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failing: {failed:?}")
            }
        ),
    );
}

// ---------- criterion 2: encoder algebra ----------

fn criterion_2(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut problems = Vec::new();

    let mut worst_simplex: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..9);
        let d = rng.random_range(1..7);
        let alpha = rng.random_range(0.1..10.0);
        let scale = rng.random_range(0.1..3.0);
        let bases = randn(&[n, d], scale, &mut rng);
        let e = randn(&[d], scale, &mut rng);
        let p = ClassEncoderParams::tied(bases, alpha).unwrap();
        let a = soft_assign(e.data(), &p).unwrap();
        if a.iter().any(|&x| !(x >= 0.0)) {
            problems.push("negative assignment".to_string());
        }
        worst_simplex = worst_simplex.max((a.iter().sum::<f64>() - 1.0).abs());
    }
    if worst_simplex > 1e-12 {
        problems.push(format!("simplex sum off by {worst_simplex:e}"));
    }

    // Well-separated bases, features near a basis, alpha = 1e3.
    let mut worst_hard: f64 = 0.0;
    for _ in 0..50 {
        let (n, d) = (4, 3);
        let bases = loop {
            let b = randn(&[n, d], 2.0, &mut rng);
            let sep = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| dist2(b.row(i), b.row(j)))
                .fold(f64::INFINITY, f64::min);
            if sep > 1.0 {
                break b;
            }
        };
        let c = 5;
        let mut feats = Vec::with_capacity(c * d);
        for _ in 0..c {
            let m = rng.random_range(0..n);
            feats.extend(
                bases
                    .row(m)
                    .iter()
                    .map(|x| x + 0.05 * rng.random_range(-1.0..1.0)),
            );
        }
        let feats = Array::new(&[c, d], feats).unwrap();
        let p = ClassEncoderParams::tied(bases.clone(), 1e3).unwrap();
        let mut oracle = vec![0.0; n * d];
        for i in 0..c {
            let e = feats.row(i);
            let m = (0..n)
                .min_by(|&a, &b| dist2(e, bases.row(a)).total_cmp(&dist2(e, bases.row(b))))
                .unwrap();
            let a = soft_assign(e, &p).unwrap();
            for (k, &w) in a.iter().enumerate() {
                let hard = if k == m { 1.0 } else { 0.0 };
                worst_hard = worst_hard.max((w - hard).abs());
            }
            for j in 0..d {
                oracle[m * d + j] += e[j] - bases.row(m)[j];
            }
        }
        let agg = aggregate_residuals(&feats, &p).unwrap();
        for (x, y) in agg.data().iter().zip(&oracle) {
            worst_hard = worst_hard.max((x - y).abs());
        }
    }
    if worst_hard >= 1e-6 {
        problems.push(format!("hard-assignment limit deviates by {worst_hard:e}"));
    }

    let mut perm_ok = true;
    for _ in 0..100 {
        let (c, n, d) = (6, 3, 4);
        let feats = randn(&[c, d], 1.0, &mut rng);
        let p = ClassEncoderParams::tied(randn(&[n, d], 1.0, &mut rng), 1.5).unwrap();
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut rng);
        let permuted = feats.select_rows(&order);
        let a = encode_class(&feats, &p, Normalization::IntraGlobal).unwrap();
        let b = encode_class(&permuted, &p, Normalization::IntraGlobal).unwrap();
        let same = a
            .matrix
            .data()
            .iter()
            .zip(b.matrix.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        perm_ok &= same;
    }
    if !perm_ok {
        problems.push("encode_class not bitwise permutation invariant".into());
    }

    let mut worst_tied: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(1..7);
        let d = rng.random_range(1..6);
        let alpha = rng.random_range(0.1..10.0);
        let bases = randn(&[n, d], 1.0, &mut rng);
        let e = randn(&[d], 1.0, &mut rng);
        let tied = ClassEncoderParams::tied(bases.clone(), alpha).unwrap();
        let a = soft_assign(e.data(), &tied).unwrap();
        let b = soft_assign_distance_form(e.data(), &bases, alpha).unwrap();
        for (x, y) in a.iter().zip(&b) {
            if *y > 1e-300 {
                worst_tied = worst_tied.max((x - y).abs() / y);
            }
        }
    }
    if worst_tied >= 1e-12 {
        problems.push(format!(
            "tied vs. distance form rel. deviation {worst_tied:e}"
        ));
    }

    record(
        out,
        2,
        "encoder algebra",
        problems.is_empty(),
        format!(
            "simplex |sum-1| max {worst_simplex:.1e} over 1000 cases; hard limit dev {worst_hard:.1e}; \
             permutation bitwise {perm_ok}; tied/decoupled rel. dev {worst_tied:.1e}{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {problems:?}")
            }
        ),
    );
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------- criterion 3: loss identities ----------

fn criterion_3(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let k = rng.random_range(1..7);
        let d = rng.random_range(1..5);
        let q = randn(&[d], 1.0, &mut rng);
        let desc = randn(&[k, d], 1.0, &mut rng);
        let y = rng.random_range(0..k);
        let l = euclidean_loss(q.data(), &desc, y).unwrap();
        let dist: Vec<f64> = (0..k).map(|i| dist2(q.data(), desc.row(i))).collect();
        let lo = dist.iter().cloned().fold(f64::INFINITY, f64::min);
        let z: f64 = dist.iter().map(|x| (lo - x).exp()).sum();
        let oracle = -(((lo - dist[y]).exp()) / z).ln();
        worst = worst.max((l - oracle).abs());
    }
    if worst > 1e-12 {
        problems.push(format!("euclidean loss vs -log softmax dev {worst:e}"));
    }

    let single = Array::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
    let k1_e = euclidean_loss(&[1.0, 2.0, 3.0], &single, 0).unwrap();
    let k1_r = relation_loss(&[4.2], 0).unwrap();
    if k1_e != 0.0 || k1_r != 0.0 {
        problems.push(format!("K=1 gives {k1_e} / {k1_r}"));
    }

    let eq_e = loss_from_distances(&[2.5; 4], 1);
    let eq_r = relation_loss(&[-0.7; 4], 3).unwrap();
    let log4 = 4f64.ln();
    if (eq_e - log4).abs() > 1e-12 || (eq_r - log4).abs() > 1e-12 {
        problems.push(format!(
            "equal logits give {eq_e} / {eq_r}, expected {log4}"
        ));
    }

    let le = loss_from_distances(&[0.0, 1.0], 0);
    let le_oracle = (1.0 + (-1.0f64).exp()).ln();
    let lr = relation_loss(&[2.0, 0.0], 0).unwrap();
    let lr_oracle = -2.0 + (2f64.exp() + 1.0).ln();
    let total = LossWeights::conv4().combine(le, lr, 0.0);
    let total_oracle = 0.5 * le_oracle + lr_oracle;
    let derived = [
        (le, le_oracle, 0.31326),
        (lr, lr_oracle, 0.12693),
        (total, total_oracle, 0.28356),
    ];
    for (got, oracle, printed) in derived {
        if (got - oracle).abs() > 1e-9 || (got - printed).abs() > 1e-5 {
            problems.push(format!(
                "derived example {got} vs oracle {oracle} (~{printed})"
            ));
        }
    }

    record(
        out,
        3,
        "loss identities",
        problems.is_empty(),
        format!(
            "-log softmax abs. dev {worst:.1e}; K=1 -> {k1_e}/{k1_r}; equal logits -> {eq_e:.12}; \
             derived {le:.5}/{lr:.5}/{total:.5}{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {problems:?}")
            }
        ),
    );
}

// ---------- shared trained model ----------

struct Trained {
    root: PathBuf,
    config: RunConfig,
    best: PathBuf,
}

fn context(config: &RunConfig, command: &'static str, ckpt: Option<&Path>) -> Context {
    Context::from_config(config.clone(), command, ckpt.map(Path::to_path_buf)).unwrap()
}

fn base_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 1;
    c.paths.out_dir = root.to_path_buf();
    c.paths.dataset = Some(root.join("dataset"));
    c.episode.episodes = 2000;
    c.train.eval_every = 250;
    c.train.val_tasks = 100;
    c
}

/// Criterion 4: train on the synthetic data, select on validation, test on the
/// 10-class test split.
fn criterion_4(out: &mut Vec<Outcome>, root: &Path) -> Trained {
    let config = base_config(root);
    commands::generate(&context(&config, "generate", None)).unwrap();
    let data = crnet::episodic::DatasetBundle::load(&root.join("dataset")).unwrap();

    let eval_cfg = crnet::episodic::EpisodeConfig {
        seed: config.seed,
        ..config.episode.clone()
    };
    let init = TrainState::new(&config.model, config.seed).unwrap();
    let at_init = evaluate(
        &data.test,
        &eval_cfg,
        &config.model,
        &init.params,
        200,
        MetricHead::Both,
    )
    .unwrap();

    let start = Instant::now();
    let outcome = commands::train(&context(&config, "train", None)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let best = outcome.best.expect("validation ran");
    let report = evaluate(
        &data.test,
        &eval_cfg,
        &best.config.model,
        &best.state.params,
        200,
        MetricHead::Both,
    )
    .unwrap();
    let last = evaluate(
        &data.test,
        &eval_cfg,
        &outcome.last.config.model,
        &outcome.last.state.params,
        200,
        MetricHead::Both,
    )
    .unwrap();
    let (e, r) = (report.euclidean.unwrap(), report.relation.unwrap());
    let pass = e.mean >= 0.9 && r.mean >= 0.9 && secs < 900.0;
    let val_log = fs::read_to_string(root.join("val_log.csv")).unwrap();
    let val_curve: Vec<String> = data_rows(&val_log)
        .iter()
        .map(|row| {
            let f: Vec<&str> = row.split(',').collect();
            format!("{}:{:.2}/{:.2}", f[0], num(f[1]), num(f[2]))
        })
        .collect();
    record(
        out,
        4,
        "end-to-end learning",
        pass,
        format!(
            "{} test classes, 200 tasks, val-selected checkpoint at episode {}: euclidean {:.3} +- {:.3}, \
             relation {:.3} +- {:.3} (need >= 0.90 each); last checkpoint {:.3}/{:.3}; \
             at init {:.3}/{:.3} (prototype {:.3}); val euclidean/relation by episode [{}]; \
             {} episodes in {secs:.0}s",
            data.test.num_classes(),
            best.state.episode,
            e.mean,
            e.ci95,
            r.mean,
            r.ci95,
            last.euclidean.unwrap().mean,
            last.relation.unwrap().mean,
            at_init.euclidean.unwrap().mean,
            at_init.relation.unwrap().mean,
            at_init.prototype.mean,
            val_curve.join(" "),
            outcome.last.state.episode,
        ),
    );
    Trained {
        root: root.to_path_buf(),
        config,
        best: root.join("best.ckpt"),
    }
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

// ---------- criterion 5: meta-shift ----------

fn criterion_5(out: &mut Vec<Outcome>, t: &Trained) {
    let mut config = t.config.clone();
    config.analysis.meta_shift_tests = 500;
    config.analysis.meta_shift_shots = 5;
    let pairs = commands::metashift(&context(&config, "metashift", Some(&t.best))).unwrap();
    let smaller = pairs.iter().filter(|(d, p)| d.mean < p.mean).count();
    let smaller_relative = pairs
        .iter()
        .filter(|(d, p)| d.relative_mean() < p.relative_mean())
        .count();
    let ratio: f64 = pairs.iter().map(|(d, p)| d.mean / p.mean).sum::<f64>() / pairs.len() as f64;
    record(
        out,
        5,
        "meta-shift reproduction",
        pairs.len() == 10 && smaller >= 8,
        format!(
            "decoded mean distance-to-mean below mean prototype for {smaller}/{} classes (need >= 8), \
             500 tests x 5 shots; mean distance ratio decoded/prototype {ratio:.3}; \
             scale-normalized (distance / |mean descriptor|) smaller for {smaller_relative}/{}",
            pairs.len(),
            pairs.len()
        ),
    );
}

// ---------- criterion 6: FID instrument ----------

fn summary(mean: &[f64], cov: DMatrix<f64>) -> GaussianSummary {
    GaussianSummary {
        mean: DVector::from_column_slice(mean),
        cov,
        count: 2,
    }
}

fn criterion_6(out: &mut Vec<Outcome>, t: &Trained) {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_self: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(1..8);
        let r = rng.random_range(1..8);
        let a = randn(&[d, r], 1.0, &mut rng);
        let m = DMatrix::from_row_slice(d, r, a.data());
        let mean = randn(&[d], 1.0, &mut rng);
        let s = summary(mean.data(), &m * m.transpose());
        worst_self = worst_self.max(frechet_distance(&s, &s).unwrap().abs());
    }
    if worst_self > 1e-8 {
        problems.push(format!("FD(a,a) up to {worst_self:e}"));
    }

    let z = DMatrix::zeros(3, 3);
    let degenerate = frechet_distance(
        &summary(&[1.0, -1.0, 0.5], z.clone()),
        &summary(&[0.0, 1.0, 0.0], z),
    )
    .unwrap();
    let degenerate_oracle = 1.0 + 4.0 + 0.25;
    let diag = |v: Vec<f64>| DMatrix::from_diagonal(&DVector::from_vec(v));
    let diagonal = frechet_distance(
        &summary(&[0.0, 0.0], diag(vec![1.0, 4.0])),
        &summary(&[0.0, 0.0], diag(vec![9.0, 1.0])),
    )
    .unwrap();
    let diagonal_oracle = (1f64.sqrt() - 9f64.sqrt()).powi(2) + (4f64.sqrt() - 1f64.sqrt()).powi(2);
    if (degenerate - degenerate_oracle).abs() > 1e-9 || (diagonal - diagonal_oracle).abs() > 1e-9 {
        problems.push(format!("closed forms {degenerate} / {diagonal}"));
    }

    let ck = Checkpoint::load(&t.best).unwrap();
    let data = crnet::episodic::DatasetBundle::load(&t.root.join("dataset")).unwrap();
    let ep = crnet::episodic::EpisodeConfig {
        seed: t.config.seed,
        ..t.config.episode.clone()
    };
    let task = sample_episode(&data.test, &ep, &mut stream(6, Stream::Analysis, 0)).unwrap();
    let support = data.test.stack(&task.support_items()).unwrap();
    let fs = embed_images(
        &support,
        &ck.config.model.embedding,
        &ck.state.params,
        Mode::Eval,
    )
    .unwrap();
    let same = feature_fid(&fs, &fs, FID_JITTER).unwrap();
    if same > 1e-6 {
        problems.push(format!("support=query FID {same:e}"));
    }

    let mut config = t.config.clone();
    config.analysis.fid_tests = 500;
    let report = commands::fid(&context(&config, "fid", Some(&t.best))).unwrap();
    let csv = fs::read_to_string(t.root.join("fid.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap_or("");
    let rows = data_rows(&csv);
    let parsed: Vec<f64> = rows
        .iter()
        .map(|r| num(r.split(',').nth(1).unwrap_or("")))
        .collect();
    if header != "test_index,fid" || rows.len() != 500 || parsed != report.fid {
        problems.push(format!("fid.csv header `{header}`, {} rows", rows.len()));
    }
    if parsed.iter().any(|f| !(*f >= 0.0)) {
        problems.push("negative or non-finite FID".into());
    }
    let mean_fid = parsed.iter().sum::<f64>() / parsed.len().max(1) as f64;

    record(
        out,
        6,
        "FID instrument",
        problems.is_empty(),
        format!(
            "FD(a,a) max {worst_self:.1e} over 200 pairs; degenerate {degenerate} (oracle {degenerate_oracle}); \
             diagonal {diagonal} (oracle {diagonal_oracle}); support=query {same:.1e}; \
             fid.csv {} rows, mean FID {mean_fid:.4}{}",
            rows.len(),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {problems:?}")
            }
        ),
    );
}

// ---------- criterion 7: protocol fidelity ----------

fn criterion_7(out: &mut Vec<Outcome>, t: &Trained) {
    let mut config = t.config.clone();
    config.eval.num_tasks = 600;
    config.episode.queries_per_class = 15;
    let report = commands::eval(&context(&config, "eval", Some(&t.best))).unwrap();
    let mut problems = Vec::new();

    let tasks = fs::read_to_string(t.root.join("eval_tasks.csv")).unwrap();
    let summary = fs::read_to_string(t.root.join("eval_summary.csv")).unwrap();
    let rows = data_rows(&tasks);
    if rows.len() != 600 || report.queries_per_class != 15 {
        problems.push(format!(
            "{} task rows, {} queries/class",
            rows.len(),
            report.queries_per_class
        ));
    }
    let mut worst: f64 = 0.0;
    for (col, head) in [(1, "euclidean"), (2, "relation"), (3, "prototype")] {
        let xs: Vec<f64> = rows
            .iter()
            .map(|r| num(r.split(',').nth(col).unwrap()))
            .collect();
        let n = xs.len() as f64;
        let mut sum = 0.0;
        for x in &xs {
            sum += x;
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for x in &xs {
            ss += (x - mean) * (x - mean);
        }
        let ci = 1.96 * (ss / n).sqrt() / n.sqrt();
        let line = data_rows(&summary)
            .into_iter()
            .find(|l| l.starts_with(&format!("{head},")))
            .unwrap_or_default();
        let f: Vec<f64> = line.split(',').skip(1).map(num).collect();
        if f.len() != 4 || f[3] != 600.0 {
            problems.push(format!("summary row for {head}: `{line}`"));
            continue;
        }
        worst = worst.max((f[0] - mean).abs()).max((f[2] - ci).abs());
    }
    if worst > 1e-9 {
        problems.push(format!("mean/CI deviate from oracle by {worst:e}"));
    }
    let e = report.euclidean.unwrap();
    let r = report.relation.unwrap();
    record(
        out,
        7,
        "protocol fidelity",
        problems.is_empty(),
        format!(
            "600 tasks x 15 queries/class: euclidean {:.4} +- {:.4}, relation {:.4} +- {:.4}, \
             prototype {:.4} +- {:.4}; max deviation from two-pass oracle {worst:.1e}{}",
            e.mean,
            e.ci95,
            r.mean,
            r.ci95,
            report.prototype.mean,
            report.prototype.ci95,
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {problems:?}")
            }
        ),
    );
}

// ---------- criterion 8: reproducibility plumbing ----------

fn short_run(t: &Trained, dir: &str, episodes: usize, ckpt: Option<&Path>) -> PathBuf {
    let mut config = t.config.clone();
    config.paths.out_dir = t.root.join(dir);
    config.episode.episodes = episodes;
    config.train.eval_every = 10;
    config.train.val_tasks = 5;
    commands::train(&context(&config, "train", ckpt)).unwrap();
    config.paths.out_dir
}

fn criterion_8(out: &mut Vec<Outcome>, t: &Trained) {
    let mut problems = Vec::new();

    let bytes = fs::read(&t.best).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let again = t.root.join("roundtrip.ckpt");
    ck.save(&again).unwrap();
    let back = Checkpoint::load(&again).unwrap();
    let round_trip = back.state.params.bitwise_eq(&ck.state.params)
        && back == ck
        && fs::read(&again).unwrap() == bytes;
    if !round_trip {
        problems.push("checkpoint round trip not bit-exact".to_string());
    }

    // Same output directory both times: the stored config includes it.
    let a = short_run(t, "repro", 20, None);
    let first = (
        fs::read(a.join("last.ckpt")).unwrap(),
        fs::read(a.join("train_log.csv")).unwrap(),
    );
    let b = short_run(t, "repro", 20, None);
    let identical = first.0 == fs::read(b.join("last.ckpt")).unwrap()
        && first.1 == fs::read(b.join("train_log.csv")).unwrap();
    if !identical {
        problems.push("seeded runs differ".into());
    }

    let half = short_run(t, "resume_1", 10, None);
    let rest = short_run(t, "resume_2", 10, Some(&half.join("last.ckpt")));
    let full_log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    let mut resumed: Vec<String> = Vec::new();
    for dir in [&half, &rest] {
        let text = fs::read_to_string(dir.join("train_log.csv")).unwrap();
        resumed.extend(data_rows(&text).iter().map(|s| s.to_string()));
    }
    let full: Vec<String> = data_rows(&full_log).iter().map(|s| s.to_string()).collect();
    let full_state = Checkpoint::load(&a.join("last.ckpt")).unwrap().state;
    let resumed_state = Checkpoint::load(&rest.join("last.ckpt")).unwrap().state;
    let resume_ok = resumed == full && resumed_state == full_state && full.len() == 20;
    if !resume_ok {
        problems.push(format!(
            "resumed log ({} rows) differs from uninterrupted ({} rows)",
            resumed.len(),
            full.len()
        ));
    }

    record(
        out,
        8,
        "reproducibility plumbing",
        problems.is_empty(),
        format!(
            "checkpoint round trip bit-exact {round_trip}; two seeded 20-episode runs byte-identical \
             {identical}; 10+10 resumed log matches uninterrupted {resume_ok}{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; {problems:?}")
            }
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; listing asks for names only.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut out = Vec::new();
    criterion_1(&mut out);
    criterion_2(&mut out);
    criterion_3(&mut out);
    let trained = criterion_4(&mut out, tmp.path());
    criterion_5(&mut out, &trained);
    criterion_6(&mut out, &trained);
    criterion_7(&mut out, &trained);
    criterion_8(&mut out, &trained);

    let failed: Vec<&Outcome> = out.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        out.len() - failed.len(),
        out.len()
    );
    for f in &failed {
        println!("  failed: criterion {} ({}): {}", f.id, f.name, f.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
