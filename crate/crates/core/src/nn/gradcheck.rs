//! Central finite-difference gradient checks, run in `f64`.

use super::{GradBuffer, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Maximum accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor so that near-zero gradients compare absolutely.
pub const FD_FLOOR: f64 = 1e-5;
/// Smaller steps tried when the check at `FD_STEP` misses. A step that
/// straddles a ReLU kink fails at any size, but shrinking it makes the
/// straddle unlikely, while a wrong analytic gradient keeps failing.
const REFINED_STEPS: [f64; 2] = [1e-4, 1e-5];

/// Central difference of `f` at `0`, refining the step if `analytic` misses.
/// Returns the numeric estimate and whether refinement was needed.
fn central<F: FnMut(f64) -> Result<f64>>(mut f: F, analytic: f64) -> Result<(f64, bool)> {
    let mut numeric = (f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP);
    if rel_err(analytic, numeric) <= FD_TOLERANCE {
        return Ok((numeric, false));
    }
    for h in REFINED_STEPS {
        numeric = (f(h)? - f(-h)?) / (2.0 * h);
        if rel_err(analytic, numeric) <= FD_TOLERANCE {
            break;
        }
    }
    Ok((numeric, true))
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: usize,
    /// Checks that needed a step smaller than `FD_STEP`.
    pub refined: usize,
    pub worst_rel_err: f64,
    pub worst_item: String,
}

impl GradCheckReport {
    fn record(&mut self, item: impl FnOnce() -> String, analytic: f64, (numeric, refined): (f64, bool)) {
        self.checks += 1;
        self.refined += refined as usize;
        let err = rel_err(analytic, numeric);
        if err > self.worst_rel_err || self.checks == 1 {
            self.worst_rel_err = err.max(self.worst_rel_err);
            if err >= self.worst_rel_err {
                self.worst_item = format!("{} (analytic {analytic:e}, numeric {numeric:e})", item());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.checks > 0 && self.worst_rel_err <= FD_TOLERANCE
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks += other.checks;
        self.refined += other.refined;
        if other.worst_rel_err > self.worst_rel_err {
            self.worst_rel_err = other.worst_rel_err;
            self.worst_item = other.worst_item;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Check `∂loss/∂θ` for every tensor of `store`.
///
/// Each tensor gets `directions` random directional checks plus elementwise
/// checks on up to `entries` coordinates with the largest analytic gradient.
pub fn check_params<L>(
    store: &ParamStore<f64>,
    loss: L,
    rng: &mut Rng,
    directions: usize,
    entries: usize,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(s, &mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    tape.backward(l)?;
    let mut grads = GradBuffer::<f64>::for_store(store);
    tape.accumulate_param_grads(&mut grads);

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (id, name, t) in store.iter() {
        let g = grads.get(id);
        for d in 0..directions {
            let mut u: Vec<f64> = (0..t.len()).map(|_| rng.normal()).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            u.iter_mut().for_each(|x| *x /= norm);
            let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let r = central(
                |h| {
                    let data = t.data().iter().zip(&u).map(|(&x, &e)| x + h * e);
                    work.set(id, Tensor::new(t.shape().to_vec(), data.collect())?)?;
                    eval(&work)
                },
                analytic,
            )?;
            work.set(id, t.clone())?;
            report.record(|| format!("{name} direction {d}"), analytic, r);
        }
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in order.iter().take(entries) {
            let r = central(
                |h| {
                    let mut data = t.data().to_vec();
                    data[i] += h;
                    work.set(id, Tensor::new(t.shape().to_vec(), data)?)?;
                    eval(&work)
                },
                g[i],
            )?;
            work.set(id, t.clone())?;
            report.record(|| format!("{name}[{i}]"), g[i], r);
        }
    }
    Ok(report)
}

/// Check gradients with respect to explicit input tensors.
pub fn check_inputs<L>(inputs: &[Tensor<f64>], loss: L) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let zeros = vec![0.0; x.len()];
        let g = tape.grad(vars[k]).unwrap_or(&zeros).to_vec();
        for i in 0..x.len() {
            let r = central(
                |h| {
                    work[k].data_mut()[i] = x.data()[i] + h;
                    eval(&work)
                },
                g[i],
            )?;
            work[k].data_mut()[i] = x.data()[i];
            report.record(|| format!("input {k}[{i}]"), g[i], r);
        }
    }
    Ok(report)
}
