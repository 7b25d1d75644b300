use super::{Graph, ParameterSet, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    /// Coordinate with the largest deviation, as `(parameter, flat index)`.
    pub worst: Option<(String, usize)>,
    /// Parameters with at least one coordinate outside tolerance.
    pub failing: Vec<String>,
    pub coordinates: usize,
    pub passed: bool,
}

/// Below this magnitude a coordinate is judged on absolute deviation.
const REL_FLOOR: f64 = 1e-6;

fn eval<F>(f: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Checks `backward` against `(f(p + eps) - f(p - eps)) / 2 eps` for every
/// coordinate of every trainable parameter.
///
/// A coordinate passes when its relative deviation is below `tolerance`, or, when
/// both gradients are smaller than 1e-6 in magnitude, its absolute deviation is.
pub fn gradient_check<F>(
    f: F,
    params: &ParameterSet,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_abs_deviation: 0.0,
        max_rel_deviation: 0.0,
        worst: None,
        failing: Vec::new(),
        coordinates: 0,
        passed: true,
    };
    let mut worst_score = -1.0;
    let mut probe = params.clone();
    for name in params.trainable_names() {
        let analytic = grads.get_or_zero(params, &name)?;
        let base = params.value(&name)?.clone();
        let mut name_failed = false;
        for i in 0..base.len() {
            let orig = base.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + epsilon;
            let plus = eval(&f, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - epsilon;
            let minus = eval(&f, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let (ok, score) = if scale > REL_FLOOR {
                let rel = abs / scale;
                report.max_rel_deviation = report.max_rel_deviation.max(rel);
                (rel < tolerance, rel)
            } else {
                (abs < tolerance, abs)
            };
            report.max_abs_deviation = report.max_abs_deviation.max(abs);
            report.coordinates += 1;
            if score > worst_score {
                worst_score = score;
                report.worst = Some((name.clone(), i));
            }
            if !ok {
                name_failed = true;
            }
        }
        if name_failed {
            report.failing.push(name);
        }
    }
    report.passed = report.failing.is_empty();
    Ok(report)
}
