//! Central finite-difference gradient checking in double precision.

use super::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e-8)` over every checked coordinate.
    pub max_rel_error: f64,
    /// Which input and flat coordinate produced the maximum.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates left out because the `±eps` probes landed on different
    /// sides of a relu, max-pool or max kink, where the central difference
    /// does not estimate the derivative.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradChecker {
    pub eps: f64,
    /// Forwarded to [`Tape::corrupt_backward`] for failure-path testing.
    pub corrupt: Option<OpKind>,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            corrupt: None,
        }
    }
}

impl GradChecker {
    fn evaluate<F>(&self, f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(f64, Tape<f64>, Var, Vec<Var>)>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        if let Some(kind) = self.corrupt {
            tape.corrupt_backward(kind);
        }
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: value.shape().to_vec(),
            });
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient-check objective evaluated to {v}"),
            });
        }
        Ok((v, tape, out, vars))
    }

    /// Check `f` with respect to every element of every input.
    pub fn check<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (_, tape, out, vars) = self.evaluate(&f, inputs, true)?;
        let grads = tape.backward(out)?;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
            skipped: 0,
        };
        let base = tape.branch_signature();
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (which, &var) in vars.iter().enumerate() {
            let zeros = Tensor::zeros(inputs[which].shape());
            let analytic = grads.get(var).unwrap_or(&zeros);
            for idx in 0..inputs[which].numel() {
                let x0 = inputs[which].data()[idx];
                probe[which].data_mut()[idx] = x0 + self.eps;
                let (plus, plus_tape, ..) = self.evaluate(&f, &probe, false)?;
                probe[which].data_mut()[idx] = x0 - self.eps;
                let (minus, minus_tape, ..) = self.evaluate(&f, &probe, false)?;
                probe[which].data_mut()[idx] = x0;
                if plus_tape.branch_signature() != base || minus_tape.branch_signature() != base {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.coordinates += 1;
                if rel > report.max_rel_error || report.coordinates == 1 {
                    report.max_rel_error = rel;
                    report.worst_input = which;
                    report.worst_index = idx;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Step reductions tried per direction before it is skipped.
const DIRECTION_RETRIES: usize = 4;

impl GradChecker {
    /// Compare `⟨∇f, d⟩` against `(f(x + εd) − f(x − εd)) / 2ε` for each
    /// direction `d` (one tensor per input). Suited to large graphs where
    /// per-coordinate differences drown in rounding noise. Directions whose
    /// probes cross a kink even at `eps / 1000` are counted in `skipped`.
    pub fn check_directions<F>(&self, f: F, inputs: &[Tensor<f64>], directions: &[Vec<Tensor<f64>>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (_, tape, out, vars) = self.evaluate(&f, inputs, true)?;
        let grads = tape.backward(out)?;
        let base = tape.branch_signature();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
            skipped: 0,
        };
        for (index, dir) in directions.iter().enumerate() {
            if dir.len() != inputs.len() || dir.iter().zip(inputs).any(|(d, x)| d.shape() != x.shape()) {
                return Err(Error::InvalidArgument {
                    op: "grad_check",
                    reason: format!("direction {index} does not match the input shapes"),
                });
            }
            let shifted = |sign: f64, step: f64| -> Vec<Tensor<f64>> {
                inputs
                    .iter()
                    .zip(dir)
                    .map(|(x, d)| Tensor::from_fn(x.shape(), |i| x.data()[i] + sign * step * d.data()[i]))
                    .collect()
            };
            // A direction moves every unit at once, so a kink inside the
            // window is likely at the default step; shrink it a few times.
            let mut numeric = None;
            let mut step = self.eps;
            for _ in 0..DIRECTION_RETRIES {
                let (plus, plus_tape, ..) = self.evaluate(&f, &shifted(1.0, step), false)?;
                let (minus, minus_tape, ..) = self.evaluate(&f, &shifted(-1.0, step), false)?;
                if plus_tape.branch_signature() == base && minus_tape.branch_signature() == base {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let analytic: f64 = vars
                .iter()
                .zip(dir)
                .map(|(&v, d)| grads.get(v).map_or(0.0, |g| g.dot(d)))
                .sum();
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst_index = index;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        Ok(report)
    }
}

/// [`GradChecker::check`] with default step `1e-5`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradChecker::default().check(f, inputs)
}

/// Maximum relative error of the gradient of a scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let checker = GradChecker { eps, corrupt: None };
    Ok(checker
        .check(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))?
        .max_rel_error)
}
