//! Central finite-difference verification of tape gradients.
//!
//! The checked scalar is `Σ r ⊙ f(params, inputs)` for a fixed random `r`,
//! so every output element contributes with a distinct weight.

mod suite;

pub use suite::{run_suite, suite, CheckFn, SuiteEntry};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Smallest step of the ladder `10⁴h, 10³h, 10²h, 10h, h`.
    pub step: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; larger tensors are sampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_entries: 16,
            seed: 0,
        }
    }
}

/// Outcome for one checked function.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: String,
    pub checked: usize,
    pub tensors: usize,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// `|a - n| / (max(|a|, |n|) + 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6)
}

/// Fourth-order central difference of `f` at zero.
fn stencil(h: f64, f: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p1, m1) = (f(h)?, f(-h)?);
    let (p2, m2) = (f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Derivative estimate over a ladder of steps. Large steps straddle kinks
/// of piecewise-linear activations and small steps drown in roundoff, so
/// the estimate of the adjacent pair that agrees best is kept (the smaller
/// step of that pair). The analytic value plays no part in the choice.
fn numeric_derivative(step: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let ladder = [step * 1e4, step * 1e3, step * 1e2, step * 10.0, step];
    let est = ladder.iter().map(|&h| stencil(h, &mut f)).collect::<Result<Vec<_>>>()?;
    let best = (0..est.len() - 1)
        .min_by(|&i, &j| {
            let di = (est[i] - est[i + 1]).abs();
            let dj = (est[j] - est[j + 1]).abs();
            di.total_cmp(&dj)
        })
        .unwrap_or(0);
    Ok(est[best + 1])
}

/// Checks the gradient of `forward` with respect to every parameter of
/// `store` and every tensor in `inputs`.
pub fn check<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &GradcheckConfig,
    forward: F,
) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let ins: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = forward(&g, &p, &ins)?;
        Ok((*g.value(out)).clone())
    };
    let out0 = eval(store, inputs)?;
    let weights = Tensor::<f64>::randn(out0.shape(), 1.0, &mut rng);
    let objective = |out: &Tensor<f64>| -> f64 { out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum() };

    let g = Graph::new();
    let p = store.bind(&g, true);
    let ins: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = forward(&g, &p, &ins)?;
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum_all(prod)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        tensors: 0,
    };
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, cfg.max_entries).into_vec();
            v.sort_unstable();
            v
        }
    };
    let record = |report: &mut GradReport, label: &str, idx: usize, a: f64, n: f64| {
        let e = relative_error(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = format!("{label}[{idx}] analytic {a:.6e} numeric {n:.6e}");
        }
    };

    let mut work = store.clone();
    for id in store.ids() {
        report.tensors += 1;
        let analytic = grads.get(p.var(id)).expect("bound parameter").clone();
        for i in pick(store.get(id).numel(), &mut rng) {
            let orig = store.get(id).data()[i];
            let numeric = numeric_derivative(cfg.step, |dx| {
                work.get_mut(id).data_mut()[i] = orig + dx;
                let f = objective(&eval(&work, inputs)?);
                work.get_mut(id).data_mut()[i] = orig;
                Ok(f)
            })?;
            record(&mut report, store.name(id), i, analytic.data()[i], numeric);
        }
    }
    let mut work_in = inputs.to_vec();
    for (k, &v) in ins.iter().enumerate() {
        report.tensors += 1;
        let analytic = grads.get(v).expect("input leaf").clone();
        for i in pick(inputs[k].numel(), &mut rng) {
            let orig = inputs[k].data()[i];
            let numeric = numeric_derivative(cfg.step, |dx| {
                work_in[k].data_mut()[i] = orig + dx;
                let f = objective(&eval(store, &work_in)?);
                work_in[k].data_mut()[i] = orig;
                Ok(f)
            })?;
            record(&mut report, &format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}
