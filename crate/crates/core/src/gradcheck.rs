//! Central-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters larger than this are checked on a seeded random subset.
pub const DEFAULT_SAMPLE_CAP: usize = 10_000;

/// Denominator floor for the relative error, so that gradients which are
/// zero up to roundoff compare in absolute terms.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params: Vec<ParamReport>,
}

impl GradReport {
    /// Names of parameters whose error exceeds `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err > tol)
            .map(|p| p.name.as_str())
            .collect()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh tape from leaves bound to `params`
/// (in order). `sample_cap == 0` checks every element.
pub fn gradient_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    h: f64,
    sample_cap: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|v| tape.leaf(v.clone(), grads))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.take(v)).collect()))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (base, analytic) = eval(&values, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let grad = analytic[pi]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let indices: Vec<usize> = if sample_cap > 0 && n > sample_cap {
            let mut idx = sample(&mut rng, n, sample_cap).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        let mut report = ParamReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in indices {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + h;
            let (plus, _) = eval(&values, false)?;
            values[pi].data_mut()[i] = orig - h;
            let (minus, _) = eval(&values, false)?;
            values[pi].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss when perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }

    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    Ok(GradReport {
        max_rel_err: worst.map_or(0.0, |w| w.max_rel_err),
        worst_param: worst.map_or_else(String::new, |w| w.name.clone()),
        params: reports,
    })
}
