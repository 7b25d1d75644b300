//! Metric module: fixed squared-Euclidean classifier, learned relation
//! comparator, and the weighted total loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, randn, Array, Graph, ParameterSet, Var};

pub const PREFIX: &str = "relation.";

/// Mean cross-entropy of `logits: [Q, K]` against `labels`.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lse = g.log_sum_exp(logits, 1)?;
    let picked = g.pick_per_row(logits, labels)?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Mean over queries of `d(q, C_y) + log sum_k exp(-d(q, C_k))`.
pub fn euclidean_loss_graph(
    g: &mut Graph,
    queries: Var,
    descriptors: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = euclidean_logits_graph(g, queries, descriptors)?;
    cross_entropy_graph(g, logits, labels)
}

/// Negated squared distances `[Q, K]`.
pub fn euclidean_logits_graph(g: &mut Graph, queries: Var, descriptors: Var) -> Result<Var> {
    let d = g.sq_dist(queries, descriptors)?;
    g.neg(d)
}

fn check_class(k: usize, classes: usize, op: &'static str) -> Result<()> {
    if classes == 0 || k >= classes {
        return Err(Error::InvalidArgument(format!(
            "{op}: class {k} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn sq_distances(query: &[f64], descriptors: &Array) -> Result<Vec<f64>> {
    if descriptors.ndim() != 2 || descriptors.row_len() != query.len() {
        return Err(Error::shape(
            "euclidean_loss",
            format!(
                "query of length {}, descriptors {:?}",
                query.len(),
                descriptors.shape()
            ),
        ));
    }
    Ok((0..descriptors.rows())
        .map(|k| {
            query
                .iter()
                .zip(descriptors.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect())
}

/// `d(q, C_k) + log sum_k' exp(-d(q, C_k'))` with squared Euclidean `d`.
pub fn euclidean_loss(query: &[f64], descriptors: &Array, k: usize) -> Result<f64> {
    check_class(k, descriptors.rows(), "euclidean_loss")?;
    let d = sq_distances(query, descriptors)?;
    Ok(loss_from_distances(&d, k))
}

/// Euclidean loss given the distances directly.
pub fn loss_from_distances(d: &[f64], k: usize) -> f64 {
    let neg: Vec<f64> = d.iter().map(|x| -x).collect();
    d[k] + kernels::log_sum_exp(&neg)
}

/// Class posterior `softmax_k(-d(q, C_k))`.
pub fn euclidean_probabilities(query: &[f64], descriptors: &Array) -> Result<Vec<f64>> {
    let d = sq_distances(query, descriptors)?;
    let neg: Vec<f64> = d.iter().map(|x| -x).collect();
    let mut p = vec![0.0; d.len()];
    kernels::softmax_into(&neg, &mut p);
    Ok(p)
}

/// `-RS_k + log sum_k' exp(RS_k')`.
pub fn relation_loss(scores: &[f64], k: usize) -> Result<f64> {
    check_class(k, scores.len(), "relation_loss")?;
    Ok(kernels::log_sum_exp(scores) - scores[k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationConfig {
    pub hidden: usize,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig { hidden: 64 }
    }
}

fn layer(i: usize, part: &str) -> String {
    format!("{PREFIX}l{i}.{part}")
}

/// Comparator `concat(q, C) -> linear(h) -> ReLU -> linear(h) -> ReLU -> linear(1)`.
pub fn init_relation_params(
    dim: usize,
    cfg: &RelationConfig,
    rng: &mut impl Rng,
) -> Result<ParameterSet> {
    if cfg.hidden == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "relation hidden width must be > 0".into(),
        ));
    }
    let sizes = [2 * dim, cfg.hidden, cfg.hidden, 1];
    let mut p = ParameterSet::new();
    for i in 0..3 {
        let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
        let gain = if i < 2 { 2.0 } else { 1.0 };
        p.insert(
            layer(i, "w"),
            randn(&[fan_in, fan_out], (gain / fan_in as f64).sqrt(), rng),
        )?;
        p.insert(layer(i, "b"), Array::zeros(&[fan_out]))?;
    }
    Ok(p)
}

/// Relation scores `[Q, K]`, entry `(q, k)` scoring `concat(query_q, descriptor_k)`.
pub fn relation_scores_graph(
    g: &mut Graph,
    params: &ParameterSet,
    queries: Var,
    descriptors: Var,
) -> Result<Var> {
    let (sq, sd) = (g.shape(queries).to_vec(), g.shape(descriptors).to_vec());
    if sq.len() != 2 || sd.len() != 2 || sq[1] != sd[1] {
        return Err(Error::shape(
            "relation_scores",
            format!("queries {sq:?}, descriptors {sd:?}"),
        ));
    }
    let (q, k) = (sq[0], sd[0]);
    let q_idx: Vec<usize> = (0..q * k).map(|i| i / k).collect();
    let k_idx: Vec<usize> = (0..q * k).map(|i| i % k).collect();
    let left = g.gather_rows(queries, &q_idx)?;
    let right = g.gather_rows(descriptors, &k_idx)?;
    let mut h = g.concat(&[left, right], 1)?;
    for i in 0..3 {
        let w = g.param(params, &layer(i, "w"))?;
        let b = g.param(params, &layer(i, "b"))?;
        h = g.matmul(h, w)?;
        h = g.add_bias(h, b)?;
        if i < 2 {
            h = g.relu(h)?;
        }
    }
    g.reshape(h, &[q, k])
}

/// Plain evaluation of [`relation_scores_graph`].
pub fn relation_scores(
    queries: &Array,
    descriptors: &Array,
    params: &ParameterSet,
) -> Result<Array> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone())?;
    let d = g.constant(descriptors.clone())?;
    let s = relation_scores_graph(&mut g, params, q, d)?;
    Ok(g.value(s).clone())
}

/// Weights of the Euclidean loss, relation loss and parameter-norm penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub euclidean: f64,
    pub relation: f64,
    pub regularization: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::conv4()
    }
}

impl LossWeights {
    /// `[1/2, 1, 1]`, used with the four-block convolutional embedding.
    pub fn conv4() -> Self {
        LossWeights {
            euclidean: 0.5,
            relation: 1.0,
            regularization: 1.0,
        }
    }

    /// `[1/8, 1, 1]`, used with the residual embedding.
    pub fn residual() -> Self {
        LossWeights {
            euclidean: 0.125,
            relation: 1.0,
            regularization: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.euclidean, self.relation, self.regularization];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "negative loss weight in {self:?}"
            )));
        }
        if self.euclidean == 0.0 && self.relation == 0.0 {
            return Err(Error::InvalidArgument(
                "at least one of the euclidean/relation weights must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn combine(&self, euclidean: f64, relation: f64, regularization: f64) -> f64 {
        self.euclidean * euclidean + self.relation * relation + self.regularization * regularization
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub euclidean: f64,
    pub relation: f64,
    pub regularization: f64,
    pub total: f64,
    pub predicted_euclidean: Vec<usize>,
    pub predicted_relation: Vec<usize>,
}

/// Tape nodes of the total loss.
pub struct LossVars {
    pub total: Var,
    pub euclidean: Var,
    pub relation: Var,
    pub regularization: Var,
    /// `[Q, K]` negated squared distances.
    pub euclidean_logits: Var,
    /// `[Q, K]` relation scores.
    pub relation_scores: Var,
}

/// Sum of squared entries over `names` (the regularized parameters).
pub fn param_norm_graph(g: &mut Graph, params: &ParameterSet, names: &[String]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for name in names {
        let v = g.param(params, name)?;
        let s = g.sum_sq(v)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.constant(Array::scalar(0.0)),
    }
}

/// `w_E * L_E + w_R * L_R + w_reg * |Theta|^2`, both losses averaged over queries.
pub fn total_loss_graph(
    g: &mut Graph,
    params: &ParameterSet,
    regularized: &[String],
    queries: Var,
    descriptors: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let k = g.shape(descriptors)[0];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let euclidean_logits = euclidean_logits_graph(g, queries, descriptors)?;
    let euclidean = cross_entropy_graph(g, euclidean_logits, labels)?;
    let relation_scores = relation_scores_graph(g, params, queries, descriptors)?;
    let relation = cross_entropy_graph(g, relation_scores, labels)?;
    let regularization = param_norm_graph(g, params, regularized)?;

    let a = g.scale(euclidean, weights.euclidean)?;
    let b = g.scale(relation, weights.relation)?;
    let c = g.scale(regularization, weights.regularization)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars {
        total,
        euclidean,
        relation,
        regularization,
        euclidean_logits,
        relation_scores,
    })
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let argmax_rows = |v: Var| {
            let a = g.value(v);
            (0..a.rows())
                .map(|i| crate::embedding::argmax(a.row(i)))
                .collect()
        };
        LossBreakdown {
            euclidean: g.value(self.euclidean).item(),
            relation: g.value(self.relation).item(),
            regularization: g.value(self.regularization).item(),
            total: g.value(self.total).item(),
            predicted_euclidean: argmax_rows(self.euclidean_logits),
            predicted_relation: argmax_rows(self.relation_scores),
        }
    }
}
