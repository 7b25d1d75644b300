//! Class encoder and decoder.
//!
//! The encoder soft-assigns every support feature `E_i` of a class to `N` shared
//! semantic bases `R_n`,
//!
//! ```text
//! a_n(E_i) = softmax_n(w_n . E_i + b_n)
//! R(n, .)  = sum_i a_n(E_i) (E_i - R_n)
//! ```
//!
//! and normalizes the `N x D` aggregate. In tied mode `w_n = 2 alpha R_n` and
//! `b_n = -alpha |R_n|^2`, which makes the softmax identical to the distance form
//! `softmax_n(-alpha |E_i - R_n|^2)` because the `-alpha |E_i|^2` term is shared by
//! every basis and cancels. Decoupled mode (the default) trains `w`, `b` and the
//! bases independently.
//!
//! The decoder is a learned affine combination across the basis axis (a `1x1`
//! convolution from `N` channels to one) giving a `D`-dimensional descriptor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, randn, Array, Graph, ParameterSet, Var};

pub const PREFIX: &str = "codec.";
const BASES: &str = "codec.enc.bases";
const ASSIGN_W: &str = "codec.enc.assign_w";
const ASSIGN_B: &str = "codec.enc.assign_b";
const ALPHA: &str = "codec.enc.alpha";
const DEC_W: &str = "codec.dec.w";
const DEC_B: &str = "codec.dec.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    Decoupled,
    Tied,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Per-row L2, then L2 over the flattened matrix.
    IntraGlobal,
    GlobalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub num_bases: usize,
    pub parameterization: Parameterization,
    pub normalization: Normalization,
    /// Initial sensitivity; also used to derive the decoupled initialization.
    pub init_alpha: f64,
    pub decoder_relu: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            num_bases: 8,
            parameterization: Parameterization::Decoupled,
            normalization: Normalization::IntraGlobal,
            init_alpha: 1.0,
            decoder_relu: false,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bases == 0 {
            return Err(Error::InvalidArgument("num_bases must be >= 1".into()));
        }
        if !(self.init_alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "init_alpha must be > 0, got {}",
                self.init_alpha
            )));
        }
        Ok(())
    }
}

/// Plain-value view of the encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEncoderParams {
    /// `N x D`
    pub bases: Array,
    /// `N x D`, the `2 alpha R_n` role.
    pub assign_weights: Array,
    /// `N`, the `-alpha |R_n|^2` role.
    pub assign_biases: Array,
    pub alpha: f64,
    pub tied: bool,
}

fn derive_assignment(bases: &Array, alpha: f64) -> (Array, Array) {
    let w = bases.map(|r| 2.0 * alpha * r);
    let b = (0..bases.rows())
        .map(|n| -alpha * bases.row(n).iter().map(|x| x * x).sum::<f64>())
        .collect();
    (w, Array::vector(b))
}

impl ClassEncoderParams {
    pub fn tied(bases: Array, alpha: f64) -> Result<Self> {
        if bases.ndim() != 2 || bases.rows() == 0 {
            return Err(Error::shape(
                "encoder_params",
                format!("bases {:?}", bases.shape()),
            ));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0, got {alpha}"
            )));
        }
        let (assign_weights, assign_biases) = derive_assignment(&bases, alpha);
        Ok(ClassEncoderParams {
            bases,
            assign_weights,
            assign_biases,
            alpha,
            tied: true,
        })
    }

    pub fn decoupled(bases: Array, assign_weights: Array, assign_biases: Array) -> Result<Self> {
        let n = bases.rows();
        if bases.ndim() != 2
            || n == 0
            || assign_weights.shape() != bases.shape()
            || assign_biases.shape() != [n]
        {
            return Err(Error::shape(
                "encoder_params",
                format!(
                    "bases {:?}, weights {:?}, biases {:?}",
                    bases.shape(),
                    assign_weights.shape(),
                    assign_biases.shape()
                ),
            ));
        }
        Ok(ClassEncoderParams {
            bases,
            assign_weights,
            assign_biases,
            alpha: 1.0,
            tied: false,
        })
    }

    /// Re-derives the assignment weights and biases from `alpha` and the bases.
    pub fn retie(&mut self) {
        let (w, b) = derive_assignment(&self.bases, self.alpha);
        self.assign_weights = w;
        self.assign_biases = b;
        self.tied = true;
    }

    pub fn num_bases(&self) -> usize {
        self.bases.rows()
    }

    pub fn dim(&self) -> usize {
        self.bases.row_len()
    }

    /// Reads the encoder out of a model parameter set.
    pub fn from_params(params: &ParameterSet, cfg: &CodecConfig) -> Result<Self> {
        let bases = params.value(BASES)?.clone();
        match cfg.parameterization {
            Parameterization::Tied => Self::tied(bases, params.value(ALPHA)?.item()),
            Parameterization::Decoupled => Self::decoupled(
                bases,
                params.value(ASSIGN_W)?.clone(),
                params.value(ASSIGN_B)?.clone(),
            ),
        }
    }

    /// Parameter set holding only this encoder, in the requested parameterization.
    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        p.insert(BASES, self.bases.clone())?;
        if self.tied {
            p.insert(ALPHA, Array::scalar(self.alpha))?;
        } else {
            p.insert(ASSIGN_W, self.assign_weights.clone())?;
            p.insert(ASSIGN_B, self.assign_biases.clone())?;
        }
        Ok(p)
    }
}

/// Decoder parameters: one combination weight per basis plus a scalar bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub weights: Array,
    pub bias: f64,
    pub relu: bool,
}

impl DecoderParams {
    fn to_params(&self) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        p.insert(DEC_W, self.weights.clone())?;
        p.insert(DEC_B, Array::scalar(self.bias))?;
        Ok(p)
    }

    pub fn from_params(params: &ParameterSet, cfg: &CodecConfig) -> Result<Self> {
        Ok(DecoderParams {
            weights: params.value(DEC_W)?.clone(),
            bias: params.value(DEC_B)?.item(),
            relu: cfg.decoder_relu,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRepresentation {
    /// `N x D`, row `n` is the aggregated residual for basis `n`.
    pub matrix: Array,
    pub normalized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorSource {
    Decoded,
    MeanPrototype,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDescriptor {
    pub vector: Vec<f64>,
    pub source: DescriptorSource,
}

/// Fresh encoder and decoder parameters for feature dimension `dim`.
///
/// Bases are `N(0, 1/D)`; decoupled assignment parameters start at the values the
/// tied form would give for `init_alpha`.
pub fn init_params(dim: usize, cfg: &CodecConfig, rng: &mut impl Rng) -> Result<ParameterSet> {
    cfg.validate()?;
    let n = cfg.num_bases;
    let bases = randn(&[n, dim], 1.0 / (dim as f64).sqrt(), rng);
    let mut enc = ClassEncoderParams::tied(bases, cfg.init_alpha)?;
    if cfg.parameterization == Parameterization::Decoupled {
        enc.tied = false;
    }
    let mut p = enc.to_params()?;
    // Equal positive weights: a random sign would start descriptors pointing away
    // from their own class.
    let dec = DecoderParams {
        weights: Array::full(&[n], 1.0 / (n as f64).sqrt()),
        bias: 0.0,
        relu: cfg.decoder_relu,
    };
    p.merge(dec.to_params()?)?;
    Ok(p)
}

/// Encoder and decoder parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CodecVars {
    pub bases: Var,
    pub assign_w: Var,
    pub assign_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    normalization: Normalization,
    decoder_relu: bool,
}

impl CodecVars {
    pub fn bind(g: &mut Graph, params: &ParameterSet, cfg: &CodecConfig) -> Result<Self> {
        let bases = g.param(params, BASES)?;
        let (assign_w, assign_b) = match cfg.parameterization {
            Parameterization::Decoupled => (g.param(params, ASSIGN_W)?, g.param(params, ASSIGN_B)?),
            Parameterization::Tied => {
                let alpha = g.param(params, ALPHA)?;
                let n = g.shape(bases)[0];
                let alpha_n = g.gather_rows(alpha, &vec![0; n])?;
                let scaled = g.scale_rows(bases, alpha_n)?;
                let w = g.scale(scaled, 2.0)?;
                let sq = g.mul(bases, bases)?;
                let norms = g.sum_axis(sq, 1)?;
                let b = g.mul(norms, alpha_n)?;
                (w, g.neg(b)?)
            }
        };
        Ok(CodecVars {
            bases,
            assign_w,
            assign_b,
            dec_w: g.param(params, DEC_W)?,
            dec_b: g.param(params, DEC_B)?,
            normalization: cfg.normalization,
            decoder_relu: cfg.decoder_relu,
        })
    }

    fn from_plain(
        g: &mut Graph,
        enc: &ClassEncoderParams,
        normalization: Normalization,
    ) -> Result<Self> {
        let bases = g.constant(enc.bases.clone())?;
        let assign_w = g.constant(enc.assign_weights.clone())?;
        let assign_b = g.constant(enc.assign_biases.clone())?;
        let dec_w = g.constant(Array::zeros(&[enc.num_bases()]))?;
        let dec_b = g.constant(Array::scalar(0.0))?;
        Ok(CodecVars {
            bases,
            assign_w,
            assign_b,
            dec_w,
            dec_b,
            normalization,
            decoder_relu: false,
        })
    }
}

/// Intermediate encoder values for one class.
pub struct Encoded {
    /// `C x N` soft assignments (rows in canonical order).
    pub assignment: Var,
    /// `N x D` aggregate before normalization.
    pub aggregate: Var,
    /// `N x D` normalized class representation.
    pub representation: Var,
}

/// Row order that sorts rows lexicographically by value; fixes the summation
/// order so results do not depend on how the caller ordered the samples.
fn canonical_order(a: &Array) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.rows()).collect();
    idx.sort_by(|&i, &j| {
        a.row(i)
            .iter()
            .zip(a.row(j))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn check_features(g: &Graph, features: Var, vars: &CodecVars) -> Result<()> {
    let s = g.shape(features);
    let d = g.shape(vars.bases)[1];
    if s.len() != 2 || s[0] == 0 || s[1] != d {
        return Err(Error::shape(
            "encode_class",
            format!("class features {s:?}, bases dimension {d}"),
        ));
    }
    Ok(())
}

/// Encodes one class's `C x D` features on the tape.
pub fn encode_graph(g: &mut Graph, vars: &CodecVars, features: Var) -> Result<Encoded> {
    check_features(g, features, vars)?;
    let order = canonical_order(g.value(features));
    let e = g.gather_rows(features, &order)?;
    let wt = g.transpose(vars.assign_w)?;
    let logits = g.matmul(e, wt)?;
    let logits = g.add_bias(logits, vars.assign_b)?;
    let assignment = g.softmax(logits, 1)?;

    let at = g.transpose(assignment)?;
    let weighted = g.matmul(at, e)?;
    let mass = g.sum_axis(assignment, 0)?;
    let anchored = g.scale_rows(vars.bases, mass)?;
    let aggregate = g.sub(weighted, anchored)?;

    let s = g.shape(aggregate).to_vec();
    let rows = match vars.normalization {
        Normalization::IntraGlobal => g.l2_normalize_rows(aggregate)?,
        Normalization::GlobalOnly => aggregate,
    };
    let flat = g.reshape(rows, &[1, s[0] * s[1]])?;
    let flat = g.l2_normalize_rows(flat)?;
    let representation = g.reshape(flat, &s)?;
    Ok(Encoded {
        assignment,
        aggregate,
        representation,
    })
}

/// Decodes an `N x D` representation into a `1 x D` descriptor on the tape.
pub fn decode_graph(g: &mut Graph, vars: &CodecVars, representation: Var) -> Result<Var> {
    let s = g.shape(representation).to_vec();
    let n = g.shape(vars.dec_w)[0];
    if s.len() != 2 || s[0] != n {
        return Err(Error::shape(
            "decode_class",
            format!("representation {s:?}, decoder expects {n} bases"),
        ));
    }
    let w = g.reshape(vars.dec_w, &[1, n])?;
    let out = g.matmul(w, representation)?;
    let bias = g.gather_rows(vars.dec_b, &vec![0; s[1]])?;
    let out = g.add_bias(out, bias)?;
    if vars.decoder_relu {
        g.relu(out)
    } else {
        Ok(out)
    }
}

/// Support features of one class straight to its `1 x D` decoded descriptor.
pub fn describe_graph(g: &mut Graph, vars: &CodecVars, features: Var) -> Result<Var> {
    let enc = encode_graph(g, vars, features)?;
    decode_graph(g, vars, enc.representation)
}

fn plain_features(g: &mut Graph, features: &Array) -> Result<Var> {
    if !features.is_finite() {
        return Err(Error::NonFinite { op: "encode_class" });
    }
    g.constant(features.clone())
}

/// Soft assignment of one feature vector over the bases.
pub fn soft_assign(feature: &[f64], params: &ClassEncoderParams) -> Result<Vec<f64>> {
    if feature.len() != params.dim() {
        return Err(Error::shape(
            "soft_assign",
            format!(
                "feature of length {}, bases dimension {}",
                feature.len(),
                params.dim()
            ),
        ));
    }
    let mut g = Graph::new();
    let vars = CodecVars::from_plain(&mut g, params, Normalization::IntraGlobal)?;
    let e = plain_features(&mut g, &Array::new(&[1, feature.len()], feature.to_vec())?)?;
    let enc = encode_graph(&mut g, &vars, e)?;
    Ok(g.value(enc.assignment).data().to_vec())
}

/// The distance form `softmax_n(-alpha |E_i - R_n|^2)` evaluated directly.
pub fn soft_assign_distance_form(feature: &[f64], bases: &Array, alpha: f64) -> Result<Vec<f64>> {
    if feature.len() != bases.row_len() || !feature.iter().all(|x| x.is_finite()) {
        return Err(Error::shape(
            "soft_assign",
            format!(
                "feature of length {}, bases {:?}",
                feature.len(),
                bases.shape()
            ),
        ));
    }
    let logits: Vec<f64> = (0..bases.rows())
        .map(|n| {
            -alpha
                * feature
                    .iter()
                    .zip(bases.row(n))
                    .map(|(e, r)| (e - r) * (e - r))
                    .sum::<f64>()
        })
        .collect();
    let mut out = vec![0.0; logits.len()];
    kernels::softmax_into(&logits, &mut out);
    Ok(out)
}

/// `N x D` residual aggregate before normalization.
pub fn aggregate_residuals(features: &Array, params: &ClassEncoderParams) -> Result<Array> {
    let mut g = Graph::new();
    let vars = CodecVars::from_plain(&mut g, params, Normalization::IntraGlobal)?;
    let e = plain_features(&mut g, features)?;
    let enc = encode_graph(&mut g, &vars, e)?;
    Ok(g.value(enc.aggregate).clone())
}

/// Encodes a class's `C x D` features into its normalized representation.
pub fn encode_class(
    features: &Array,
    params: &ClassEncoderParams,
    normalization: Normalization,
) -> Result<ClassRepresentation> {
    let mut g = Graph::new();
    let vars = CodecVars::from_plain(&mut g, params, normalization)?;
    let e = plain_features(&mut g, features)?;
    let enc = encode_graph(&mut g, &vars, e)?;
    Ok(ClassRepresentation {
        matrix: g.value(enc.representation).clone(),
        normalized: true,
    })
}

pub fn decode_class(rep: &ClassRepresentation, dec: &DecoderParams) -> Result<ClassDescriptor> {
    if !rep.normalized {
        return Err(Error::InvalidArgument(
            "decode_class expects a normalized representation".into(),
        ));
    }
    let n = rep.matrix.rows();
    if dec.weights.shape() != [n] || rep.matrix.ndim() != 2 {
        return Err(Error::shape(
            "decode_class",
            format!(
                "representation {:?}, decoder weights {:?}",
                rep.matrix.shape(),
                dec.weights.shape()
            ),
        ));
    }
    let mut g = Graph::new();
    let p = dec.to_params()?;
    let vars = CodecVars {
        bases: g.constant(Array::zeros(&[n, rep.matrix.row_len()]))?,
        assign_w: g.constant(Array::zeros(&[n, rep.matrix.row_len()]))?,
        assign_b: g.constant(Array::zeros(&[n]))?,
        dec_w: g.param(&p, DEC_W)?,
        dec_b: g.param(&p, DEC_B)?,
        normalization: Normalization::IntraGlobal,
        decoder_relu: dec.relu,
    };
    let r = g.constant(rep.matrix.clone())?;
    let out = decode_graph(&mut g, &vars, r)?;
    Ok(ClassDescriptor {
        vector: g.value(out).data().to_vec(),
        source: DescriptorSource::Decoded,
    })
}

/// Columnwise mean of a class's `C x D` features (the prototype baseline).
pub fn mean_prototype(features: &Array) -> Result<ClassDescriptor> {
    if features.ndim() != 2 || features.rows() == 0 {
        return Err(Error::shape(
            "mean_prototype",
            format!("class features {:?}", features.shape()),
        ));
    }
    let mut g = Graph::new();
    let e = g.constant(features.clone())?;
    let order = canonical_order(features);
    let e = g.gather_rows(e, &order)?;
    let m = g.mean_axis(e, 0)?;
    Ok(ClassDescriptor {
        vector: g.value(m).data().to_vec(),
        source: DescriptorSource::MeanPrototype,
    })
}

/// Class-wise mean prototypes on the tape, `1 x D`.
pub fn mean_prototype_graph(g: &mut Graph, features: Var) -> Result<Var> {
    let order = canonical_order(g.value(features));
    let e = g.gather_rows(features, &order)?;
    let m = g.mean_axis(e, 0)?;
    let d = g.shape(m)[0];
    g.reshape(m, &[1, d])
}

/// Names of the encoder/decoder parameters in a model parameter set.
pub fn param_names(cfg: &CodecConfig) -> Vec<&'static str> {
    match cfg.parameterization {
        Parameterization::Decoupled => vec![BASES, ASSIGN_W, ASSIGN_B, DEC_W, DEC_B],
        Parameterization::Tied => vec![BASES, ALPHA, DEC_W, DEC_B],
    }
}
