//! Convolutional feature embedding.
//!
//! Two layouts are provided:
//!
//! * `conv4`: four blocks of `3x3 conv -> batch norm -> ReLU -> 2x2 max pool`;
//!   the feature is the flattened output of the last block.
//! * `residual-mini`: three residual blocks followed by global average pooling.
//!   Each block is `conv -> BN -> ReLU -> conv -> BN`, added to a shortcut
//!   (`1x1 conv -> BN` when the width changes, identity otherwise), then ReLU and
//!   `2x2` max pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    optim, randn, Array, BatchNormMode, BatchStats, Graph, OptimizerConfig, OptimizerState,
    ParameterSet, Var,
};

pub const PREFIX: &str = "embed.";
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Conv4,
    ResidualMini,
}

impl Variant {
    pub fn blocks(self) -> usize {
        match self {
            Variant::Conv4 => 4,
            Variant::ResidualMini => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub variant: Variant,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each block.
    pub widths: Vec<usize>,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            variant: Variant::Conv4,
            channels: 1,
            height: 32,
            width: 32,
            widths: vec![16, 32, 64, 64],
            bn_momentum: default_bn_momentum(),
        }
    }
}

impl EmbeddingConfig {
    pub fn residual_mini() -> Self {
        EmbeddingConfig {
            variant: Variant::ResidualMini,
            widths: vec![16, 32, 64],
            ..Self::default()
        }
    }

    /// Flattened output size `D` of the final block.
    pub fn feature_dim(&self) -> Result<usize> {
        self.validate_shape()?;
        let (h, w) = self.final_spatial();
        let last = *self.widths.last().expect("validated non-empty");
        Ok(match self.variant {
            Variant::Conv4 => last * h * w,
            Variant::ResidualMini => last,
        })
    }

    fn final_spatial(&self) -> (usize, usize) {
        let shrink = 1 << self.variant.blocks();
        (self.height / shrink, self.width / shrink)
    }

    fn validate_shape(&self) -> Result<()> {
        let blocks = self.variant.blocks();
        if self.widths.len() != blocks || self.widths.contains(&0) || self.channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "{:?} needs {blocks} non-zero block widths and channels > 0, got widths {:?}, channels {}",
                self.variant, self.widths, self.channels
            )));
        }
        let (h, w) = self.final_spatial();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} too small for {blocks} pooling stages",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim()?;
        if d < 8 {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {d} is below the minimum of 8"
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument(format!(
                "bn_momentum {} outside [0, 1]",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Images `[B, C, H, W]` with values in `[0, 1]` and one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Array,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(data: Array, labels: Vec<usize>) -> Result<Self> {
        if data.ndim() != 4 || data.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "image_batch",
                format!("data {:?} with {} labels", data.shape(), labels.len()),
            ));
        }
        Ok(ImageBatch { data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn conv_name(block: usize, j: usize) -> String {
    format!("{PREFIX}b{block}.conv{j}.w")
}

fn bn_name(block: usize, j: &str) -> String {
    format!("{PREFIX}b{block}.bn{j}")
}

fn he(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Array {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    randn(&[cout, cin, k, k], std, rng)
}

/// Fresh embedding parameters (He-normal convolutions, unit batch-norm scale).
pub fn init_params(cfg: &EmbeddingConfig, rng: &mut impl Rng) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut p = ParameterSet::new();
    let mut cin = cfg.channels;
    for (b, &cout) in cfg.widths.iter().enumerate() {
        p.insert(conv_name(b, 0), he(cout, cin, 3, rng))?;
        insert_bn(&mut p, &bn_name(b, "0"), cout)?;
        if cfg.variant == Variant::ResidualMini {
            p.insert(conv_name(b, 1), he(cout, cout, 3, rng))?;
            insert_bn(&mut p, &bn_name(b, "1"), cout)?;
            if cin != cout {
                p.insert(format!("{PREFIX}b{b}.shortcut.w"), he(cout, cin, 1, rng))?;
                insert_bn(&mut p, &bn_name(b, "s"), cout)?;
            }
        }
        cin = cout;
    }
    Ok(p)
}

struct Forward<'a> {
    params: &'a ParameterSet,
    mode: Mode,
    stats: Vec<(String, BatchStats)>,
}

impl Forward<'_> {
    fn bn(&mut self, g: &mut Graph, x: Var, base: &str) -> Result<Var> {
        batch_norm_layer(g, x, self.params, base, self.mode, &mut self.stats)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, pad: usize) -> Result<Var> {
        let w = g.param(self.params, name)?;
        g.conv2d(x, w, None, 1, pad)
    }
}

/// Batch norm with parameters `{base}.gamma`/`.beta` and running buffers
/// `{base}.running_mean`/`.running_var`; training-mode statistics are pushed
/// onto `stats`.
fn batch_norm_layer(
    g: &mut Graph,
    x: Var,
    params: &ParameterSet,
    base: &str,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let gamma = g.param(params, &format!("{base}.gamma"))?;
    let beta = g.param(params, &format!("{base}.beta"))?;
    match mode {
        Mode::Train => {
            let (y, s) = g.batch_norm(x, gamma, beta, BatchNormMode::Train, BN_EPS)?;
            if let Some(s) = s {
                stats.push((base.to_string(), s));
            }
            Ok(y)
        }
        Mode::Eval => {
            let running_mean = params.value(&format!("{base}.running_mean"))?;
            let running_var = params.value(&format!("{base}.running_var"))?;
            let mode = BatchNormMode::Eval {
                running_mean,
                running_var,
            };
            Ok(g.batch_norm(x, gamma, beta, mode, BN_EPS)?.0)
        }
    }
}

fn insert_bn(params: &mut ParameterSet, base: &str, c: usize) -> Result<()> {
    params.insert(format!("{base}.gamma"), Array::ones(&[c]))?;
    params.insert(format!("{base}.beta"), Array::zeros(&[c]))?;
    params.insert_buffer(format!("{base}.running_mean"), Array::zeros(&[c]))?;
    params.insert_buffer(format!("{base}.running_var"), Array::ones(&[c]))?;
    Ok(())
}

/// Output of a forward pass through the embedding.
pub struct Embedded {
    /// `[B, D]` features.
    pub features: Var,
    /// Batch-norm statistics seen in training mode, keyed by layer prefix.
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// Embeds `images` (`[B, C, H, W]`) on the tape.
pub fn embed_graph(
    g: &mut Graph,
    cfg: &EmbeddingConfig,
    params: &ParameterSet,
    images: Var,
    mode: Mode,
) -> Result<Embedded> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1..] != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::shape(
            "embed",
            format!(
                "input {s:?}, expected [B, {}, {}, {}]",
                cfg.channels, cfg.height, cfg.width
            ),
        ));
    }
    let batch = s[0];
    let mut fwd = Forward {
        params,
        mode,
        stats: Vec::new(),
    };
    let mut x = images;
    let mut cin = cfg.channels;
    for (b, &cout) in cfg.widths.iter().enumerate() {
        x = match cfg.variant {
            Variant::Conv4 => {
                let y = fwd.conv(g, x, &conv_name(b, 0), 1)?;
                let y = fwd.bn(g, y, &bn_name(b, "0"))?;
                g.relu(y)?
            }
            Variant::ResidualMini => {
                let y = fwd.conv(g, x, &conv_name(b, 0), 1)?;
                let y = fwd.bn(g, y, &bn_name(b, "0"))?;
                let y = g.relu(y)?;
                let y = fwd.conv(g, y, &conv_name(b, 1), 1)?;
                let y = fwd.bn(g, y, &bn_name(b, "1"))?;
                let shortcut = if cin != cout {
                    let sc = fwd.conv(g, x, &format!("{PREFIX}b{b}.shortcut.w"), 0)?;
                    fwd.bn(g, sc, &bn_name(b, "s"))?
                } else {
                    x
                };
                let y = g.add(y, shortcut)?;
                g.relu(y)?
            }
        };
        x = g.max_pool2d(x, 2)?;
        cin = cout;
    }
    let features = match cfg.variant {
        Variant::Conv4 => {
            let d = g.value(x).len() / batch;
            g.reshape(x, &[batch, d])?
        }
        Variant::ResidualMini => g.global_avg_pool(x)?,
    };
    Ok(Embedded {
        features,
        batch_stats: fwd.stats,
    })
}

/// Embeds a batch outside of any training tape, returning `[B, D]` features.
pub fn embed(
    batch: &ImageBatch,
    cfg: &EmbeddingConfig,
    params: &ParameterSet,
    mode: Mode,
) -> Result<Array> {
    embed_images(&batch.data, cfg, params, mode)
}

pub fn embed_images(
    images: &Array,
    cfg: &EmbeddingConfig,
    params: &ParameterSet,
    mode: Mode,
) -> Result<Array> {
    let mut g = Graph::new();
    let x = g.constant(images.clone())?;
    let out = embed_graph(&mut g, cfg, params, x, mode)?;
    Ok(g.value(out.features).clone())
}

/// Folds training-mode batch statistics into the running estimates.
pub fn apply_batch_stats(
    params: &mut ParameterSet,
    stats: &[(String, BatchStats)],
    momentum: f64,
) -> Result<()> {
    for (base, s) in stats {
        let mean = &mut params.get_mut(&format!("{base}.running_mean"))?.value;
        for (r, m) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let var = &mut params.get_mut(&format!("{base}.running_var"))?.value;
        for (r, v) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 1e-4,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Training accuracy of each epoch, measured on the fly.
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

const HEAD_W: &str = "pretrain.head.w";
const HEAD_B: &str = "pretrain.head.b";

/// Supervised warm-up: cross-entropy through a temporary linear head over all
/// classes in `data`. The head is dropped afterwards; only `params` is updated.
pub fn pretrain(
    data: &ImageBatch,
    cfg: &EmbeddingConfig,
    params: &mut ParameterSet,
    train: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = data.labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "pre-training needs at least 2 classes, got {classes}"
        )));
    }
    if !(train.lr >= 0.0) || train.batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "lr {} / batch size {}",
            train.lr, train.batch_size
        )));
    }
    let d = cfg.feature_dim()?;
    let mut work = params.clone();
    work.insert(HEAD_W, randn(&[d, classes], (1.0 / d as f64).sqrt(), rng))?;
    work.insert(HEAD_B, Array::zeros(&[classes]))?;
    let opt = OptimizerConfig::adam(train.lr);
    let mut state = OptimizerState::default();
    let mut report = PretrainReport {
        accuracy: Vec::new(),
        loss: Vec::new(),
    };
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..train.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let (mut correct, mut loss_sum) = (0usize, 0.0);
        for chunk in order.chunks(train.batch_size) {
            let images = data.data.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(images)?;
            let emb = embed_graph(&mut g, cfg, &work, x, Mode::Train)?;
            let w = g.param(&work, HEAD_W)?;
            let b = g.param(&work, HEAD_B)?;
            let logits = g.matmul(emb.features, w)?;
            let logits = g.add_bias(logits, b)?;
            let loss = crate::metric::cross_entropy_graph(&mut g, logits, &labels)?;

            let lv = g.value(logits);
            for (i, &y) in labels.iter().enumerate() {
                if argmax(lv.row(i)) == y {
                    correct += 1;
                }
            }
            loss_sum += g.value(loss).item() * labels.len() as f64;
            let grads = g.backward(loss)?;
            optim::step(&opt, &mut state, &mut work, &grads)?;
            apply_batch_stats(&mut work, &emb.batch_stats, cfg.bn_momentum)?;
        }
        report.accuracy.push(correct as f64 / n as f64);
        report.loss.push(loss_sum / n as f64);
    }
    work.remove(HEAD_W);
    work.remove(HEAD_B);
    *params = work;
    Ok(report)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
