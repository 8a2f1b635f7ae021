use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Settings for [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference half step.
    pub epsilon: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Check only a seeded random subset of entries per input.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { epsilon: 1e-4, tolerance: 1e-5, max_entries_per_input: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(f64, Option<super::Gradients<f64>>, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.value(out).item()?;
    let grads = if track { Some(tape.backward(out)?) } else { None };
    Ok((loss, grads, vars))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// finite differences, input by input.
///
/// `f` must be deterministic; it is evaluated twice up front and the check
/// aborts if the two results differ.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (loss, grads, vars) = eval(&f, inputs, true)?;
    let grads = grads.expect("tracked");
    let (again, _, _) = eval(&f, inputs, false)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::Numerical(format!(
            "non-deterministic function: two identical evaluations gave {loss:e} and {again:e}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(m) if m < n => rand::seq::index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut report = InputReport {
            index: i,
            checked: entries.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut probe = inputs.to_vec();
        for (j, &e) in entries.iter().enumerate() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + opts.epsilon;
            let (plus, _, _) = eval(&f, &probe, false)?;
            probe[i].data_mut()[e] = orig - opts.epsilon;
            let (minus, _, _) = eval(&f, &probe, false)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            if j == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_entry = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        worst = worst.max(report.max_rel_error);
        reports.push(report);
    }
    Ok(GradcheckReport { inputs: reports, max_rel_error: worst, tolerance: opts.tolerance })
}
