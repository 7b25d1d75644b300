//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only ever
//! created from existing nodes, so insertion order is a topological order and
//! `backward` simply walks the tape in reverse.

use super::kernels::{self, ConvGeom};
use super::{Array, Gradients, ParameterSet};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for a user-supplied operation: receives the output gradient and
/// the input values, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Array, &[&Array]) -> Vec<Array>>;

/// Batch-norm statistics observed in training mode, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (falls back to the biased estimate for a single element).
    pub var: Vec<f64>,
}

pub enum BatchNormMode<'a> {
    Train,
    Eval {
        running_mean: &'a Array,
        running_var: &'a Array,
    },
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumSq(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    SqDist(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check(op: &'static str, a: &Array) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, inputs: &[Var]) -> Result<Var> {
        check(name, &value)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        check("constant", &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds a named parameter. Trainable parameters receive gradients on backward.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let p = params.get(name)?;
        check("param", &p.value)?;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: if p.trainable {
                Op::Param(name.to_string())
            } else {
                Op::Leaf
            },
            needs_grad: p.trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Array::new(&[m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push(
            "transpose",
            Array::new(&[n, m], out)?,
            Op::Transpose(a),
            &[a],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `x[..., n] + bias[n]`, broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb != [n] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (r, bv) in row.iter_mut().zip(&b) {
                *r += bv;
            }
        }
        self.push("add_bias", v, Op::AddBias(x, bias), &[x, bias])
    }

    /// Multiplies row `i` of `x[m, ...]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || ss != [sx[0]] {
            return Err(Error::shape("scale_rows", format!("{sx:?} * {ss:?}")));
        }
        let w = self.value(x).row_len();
        let sv = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (row, f) in v.data_mut().chunks_mut(w.max(1)).zip(&sv) {
            for r in row {
                *r *= f;
            }
        }
        self.push("scale_rows", v, Op::ScaleRows(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// 2-D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, optional `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                ));
            }
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            in_channels: cin,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; bsz * cout * ncols];
        let mut cols = vec![0.0; rows * ncols];
        for bi in 0..bsz {
            kernels::im2col(
                &xin[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                &geom,
                &mut cols,
            );
            let o = &mut out[bi * cout * ncols..(bi + 1) * cout * ncols];
            kernels::gemm(wv, &cols, o, cout, rows, ncols);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (ch, chunk) in out.chunks_mut(ncols).enumerate() {
                let bias = bv[ch % cout];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        let value = Array::new(&[bsz, cout, geom.out_h, geom.out_w], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Max pooling with kernel = stride = `k` over `[B, C, H, W]`; trailing rows or
    /// columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("max_pool2d", format!("{s:?} with kernel {k}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if xin[i] > best {
                                best = xin[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Array::new(&[s[0], s[1], oh, ow], out)?;
        self.push("max_pool2d", value, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Average pooling with kernel = stride = `k` over `[B, C, H, W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("avg_pool2d", format!("{s:?} with kernel {k}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let xin = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += xin[base + (oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        let value = Array::new(&[s[0], s[1], oh, ow], out)?;
        self.push("avg_pool2d", value, Op::AvgPool2d { x, k }, &[x])
    }

    /// Mean over the spatial axes of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let spatial = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let summed = self.sum_axis(spatial, 2)?;
        self.scale(summed, 1.0 / (s[2] * s[3]) as f64)
    }

    /// Batch normalization over axis 1 of `[B, C]` or `[B, C, H, W]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {s:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (bsz, ch) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let count = bsz * spatial;
        let xin = self.value(x).data();
        let at = |b: usize, c: usize, i: usize| (b * ch + c) * spatial + i;

        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut acc = 0.0;
                    for b in 0..bsz {
                        for i in 0..spatial {
                            acc += xin[at(b, c, i)];
                        }
                    }
                    mean[c] = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..bsz {
                        for i in 0..spatial {
                            let d = xin[at(b, c, i)] - mean[c];
                            sq += d * d;
                        }
                    }
                    var[c] = sq / count as f64;
                }
                let unbiased = if count > 1 {
                    var.iter()
                        .map(|v| v * count as f64 / (count - 1) as f64)
                        .collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.shape() != [ch] || running_var.shape() != [ch] {
                    return Err(Error::shape(
                        "batch_norm",
                        format!(
                            "running stats {:?}/{:?} for {ch} channels",
                            running_mean.shape(),
                            running_var.shape()
                        ),
                    ));
                }
                (
                    running_mean.data().to_vec(),
                    running_var.data().to_vec(),
                    None,
                    false,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xin.len()];
        let mut out = vec![0.0; xin.len()];
        for b in 0..bsz {
            for c in 0..ch {
                for i in 0..spatial {
                    let j = at(b, c, i);
                    xhat[j] = (xin[j] - mean[c]) * inv_std[c];
                    out[j] = g[c] * xhat[j] + bt[c];
                }
            }
        }
        let value = Array::new(&s, out)?;
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&s, axis);
        let xin = self.value(x).data();
        let mut out = vec![0.0; xin.len()];
        let mut buf = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = xin[(o * n + j) * inner + i];
                }
                kernels::softmax_into(&buf, &mut res);
                for j in 0..n {
                    out[(o * n + j) * inner + i] = res[j];
                }
            }
        }
        self.push(
            "softmax",
            Array::new(&s, out)?,
            Op::Softmax { x, axis },
            &[x],
        )
    }

    /// Stabilized log-sum-exp reducing `axis`.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                "log_sum_exp",
                format!("axis {axis} for {s:?}"),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(&s, axis);
        let xin = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = xin[(o * n + j) * inner + i];
                }
                out[o * inner + i] = kernels::log_sum_exp(&buf);
            }
        }
        let value = Array::new(&reduced_shape(&s, axis), out)?;
        self.push("log_sum_exp", value, Op::LogSumExp { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().sum();
        self.push("sum", Array::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&s, axis);
        let xin = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xin[(o * n + j) * inner + i];
                }
            }
        }
        let value = Array::new(&reduced_shape(&s, axis), out)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Squared L2 norm of all entries.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum_sq();
        self.push("sum_sq", Array::scalar(v), Op::SumSq(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {first:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Array::new(&out_shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let v = self.value(x).select_rows(idx);
        self.push(
            "gather_rows",
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// For `x: [m, n]` returns `[m]` with entry `i` equal to `x[i, idx[i]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&j| j >= s[1]) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{s:?} with {} indices", idx.len()),
            ));
        }
        let d = self.value(x).data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| d[i * s[1] + j])
            .collect();
        self.push(
            "pick_per_row",
            Array::vector(out),
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Pairwise squared Euclidean distances between rows of `a: [m, d]` and `b: [n, d]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("sq_dist", format!("{sa:?} vs {sb:?}")));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = va[i * d..(i + 1) * d]
                    .iter()
                    .zip(&vb[j * d..(j + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        self.push(
            "sq_dist",
            Array::new(&[m, n], out)?,
            Op::SqDist(a, b),
            &[a, b],
        )
    }

    /// Scales each row of `x: [m, n]` to unit L2 norm; exactly-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("{s:?}")));
        }
        let n = s[1];
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in v.data_mut().chunks_mut(n.max(1)) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                for r in row.iter_mut() {
                    *r /= norm;
                }
            }
            norms.push(norm);
        }
        self.push(
            "l2_normalize_rows",
            v,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Appends an operation with a caller-provided forward value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array,
        backward: CustomBackward,
    ) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Replays the tape in reverse from a scalar `loss`.
    ///
    /// Every trainable parameter bound on this tape gets an entry; parameters the
    /// loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.ndim() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(name) = &node.op {
                out.ensure_zero(name, node.value.shape());
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Array,
        grads: &mut [Option<Array>],
        out: &mut Gradients,
    ) -> Result<()> {
        let gd = g.data();
        let mut acc = |v: Var, delta: Array| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => out.accumulate(name, g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    acc(*a, Array::new(sa, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(self.value(*a).data(), gd, &mut db, k, m, n);
                    acc(*b, Array::new(sb, db)?);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = gd[j * m + i];
                    }
                }
                acc(*a, Array::new(s, d)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                acc(*a, Array::new(va.shape(), da)?);
                acc(*b, Array::new(vb.shape(), db)?);
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Array::vector(db));
            }
            Op::ScaleRows(x, s) => {
                let vx = self.value(*x);
                let sv = self.value(*s).data();
                let w = vx.row_len().max(1);
                let mut dx = g.clone();
                let mut ds = vec![0.0; sv.len()];
                for (i, (row, grow)) in dx.data_mut().chunks_mut(w).zip(gd.chunks(w)).enumerate() {
                    ds[i] = kernels::dot(grow, &vx.data()[i * w..(i + 1) * w]);
                    for r in row.iter_mut() {
                        *r *= sv[i];
                    }
                }
                acc(*x, dx);
                acc(*s, Array::vector(ds));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(vx)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, Array::new(g.shape(), d)?);
            }
            Op::Conv2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bsz, cout) = (sx[0], sw[0]);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.in_channels * geom.height * geom.width;
                let xin = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; cout * rows];
                let mut dx = if self.needs(*x) {
                    Some(vec![0.0; xin.len()])
                } else {
                    None
                };
                let mut cols = vec![0.0; rows * ncols];
                let mut dcols = vec![0.0; rows * ncols];
                for bi in 0..bsz {
                    let gy = &gd[bi * cout * ncols..(bi + 1) * cout * ncols];
                    if self.needs(*w) {
                        kernels::im2col(&xin[bi * img..(bi + 1) * img], geom, &mut cols);
                        kernels::gemm_nt(gy, &cols, &mut dw, cout, ncols, rows);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(wv, gy, &mut dcols, rows, cout, ncols);
                        kernels::col2im(&dcols, geom, &mut dx[bi * img..(bi + 1) * img]);
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, Array::new(sx, dx)?);
                }
                acc(*w, Array::new(sw, dw)?);
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for (ch, chunk) in gd.chunks(ncols).enumerate() {
                        db[ch % cout] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, Array::vector(db));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &i) in gd.iter().zip(argmax) {
                    d[i] += gv;
                }
                acc(*x, Array::new(self.shape(*x), d)?);
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(p * oh + oy) * ow + ox] * norm;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    d[p * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                }
                            }
                        }
                    }
                }
                acc(*x, Array::new(s, d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (bsz, ch) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let count = (bsz * spatial) as f64;
                let gam = self.value(*gamma).data();
                let at = |b: usize, c: usize, i: usize| (b * ch + c) * spatial + i;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for b in 0..bsz {
                    for c in 0..ch {
                        for i in 0..spatial {
                            let j = at(b, c, i);
                            dgamma[c] += gd[j] * xhat[j];
                            dbeta[c] += gd[j];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for c in 0..ch {
                    for b in 0..bsz {
                        for i in 0..spatial {
                            let j = at(b, c, i);
                            dx[j] = if *train {
                                gam[c] * inv_std[c] / count
                                    * (count * gd[j] - dbeta[c] - xhat[j] * dgamma[c])
                            } else {
                                gam[c] * inv_std[c] * gd[j]
                            };
                        }
                    }
                }
                acc(*x, Array::new(s, dx)?);
                acc(*gamma, Array::vector(dgamma));
                acc(*beta, Array::vector(dbeta));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dotp: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = y[at(j)] * (gd[at(j)] - dotp);
                        }
                    }
                }
                acc(*x, Array::new(node.value.shape(), d)?);
            }
            Op::LogSumExp { x, axis } => {
                let vx = self.value(*x);
                let xd = vx.data();
                let (outer, n, inner) = kernels::axis_split(vx.shape(), *axis);
                let lse = node.value.data();
                let mut d = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            d[at] = gd[r] * (xd[at] - lse[r]).exp();
                        }
                    }
                }
                acc(*x, Array::new(vx.shape(), d)?);
            }
            Op::Sum(x) => acc(*x, Array::full(self.shape(*x), gd[0])),
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x);
                let (outer, n, inner) = kernels::axis_split(s, *axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            d[(o * n + j) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                acc(*x, Array::new(s, d)?);
            }
            Op::SumSq(x) => acc(*x, self.value(*x).map(|v| 2.0 * v * gd[0])),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + n * inner]);
                    }
                    offset += n;
                    acc(v, Array::new(self.shape(v), d)?);
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?),
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let w = vx.row_len();
                let mut d = vec![0.0; vx.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..w {
                        d[i * w + c] += gd[k * w + c];
                    }
                }
                acc(*x, Array::new(vx.shape(), d)?);
            }
            Op::PickPerRow { x, idx } => {
                let s = self.shape(*x);
                let mut d = vec![0.0; s[0] * s[1]];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * s[1] + j] = gd[i];
                }
                acc(*x, Array::new(s, d)?);
            }
            Op::SqDist(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n, dim) = (sa[0], sb[0], sa[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; m * dim];
                let mut db = vec![0.0; n * dim];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * gd[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..dim {
                            let diff = gij * (va[i * dim + c] - vb[j * dim + c]);
                            da[i * dim + c] += diff;
                            db[j * dim + c] -= diff;
                        }
                    }
                }
                acc(*a, Array::new(sa, da)?);
                acc(*b, Array::new(sb, db)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let r = i * n..(i + 1) * n;
                    let dotp = kernels::dot(&y[r.clone()], &gd[r.clone()]);
                    for c in r {
                        d[c] = (gd[c] - y[c] * dotp) / norm;
                    }
                }
                acc(*x, Array::new(node.value.shape(), d)?);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Array> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = backward(g, &vals);
                if ds.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom",
                        format!(
                            "backward returned {} grads for {} inputs",
                            ds.len(),
                            inputs.len()
                        ),
                    ));
                }
                for (&v, d) in inputs.iter().zip(ds) {
                    if d.shape() != self.shape(v) {
                        return Err(Error::shape(
                            "custom",
                            format!("grad {:?} for input {:?}", d.shape(), self.shape(v)),
                        ));
                    }
                    acc(v, d);
                }
            }
        }
        Ok(())
    }
}
