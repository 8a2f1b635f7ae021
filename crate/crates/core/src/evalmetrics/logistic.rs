use nalgebra::{Matrix5, Vector5};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 500;
pub const RELATIVE_TOLERANCE: f64 = 1e-10;
const MIN_POINTS: usize = 5;

/// `β1·(1/2 − 1/(1 + exp(β2·(Q − β3)))) + β4·Q + β5`.
pub fn logistic5(b: &[f64; 5], q: f64) -> f64 {
    b[0] * (sigmoid(b[1] * (q - b[2])) - 0.5) + b[3] * q + b[4]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub betas: [f64; 5],
    /// `f(Q)` at the fitted parameters.
    pub mapped: Vec<f64>,
    pub converged: bool,
    /// Constant predictions: only `β4·Q + β5` was fitted.
    pub linear_fallback: bool,
    pub iterations: usize,
    /// SSE after the initial guess and after every accepted step.
    pub sse_trace: Vec<f64>,
}

impl LogisticFit {
    pub fn sse(&self) -> f64 {
        self.sse_trace.last().copied().unwrap_or(f64::NAN)
    }
}

fn sse(b: &[f64; 5], q: &[f64], y: &[f64]) -> f64 {
    q.iter().zip(y).map(|(&q, &y)| (logistic5(b, q) - y).powi(2)).sum()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Fits the five-parameter logistic mapping from objective predictions `q`
/// to subjective scores `y` by Levenberg–Marquardt.
pub fn logistic_fit(q: &[f64], y: &[f64]) -> Result<LogisticFit> {
    if q.len() != y.len() {
        return Err(Error::shape(format!("{} predictions but {} scores", q.len(), y.len())));
    }
    if q.len() < MIN_POINTS {
        return Err(Error::Numerical(format!("logistic fit needs at least {MIN_POINTS} points, got {}", q.len())));
    }
    if q.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("logistic fit input contains non-finite values".into()));
    }
    let sq = std(q);
    if sq == 0.0 {
        return Ok(linear_fallback(q, y));
    }
    let (ymax, ymin) = y.iter().fold((f64::MIN, f64::MAX), |(hi, lo), &v| (hi.max(v), lo.min(v)));
    let init = [ymax - ymin, 4.0 / sq, mean(q), 0.0, mean(y)];
    let mut best = levenberg_marquardt(q, y, init);
    // The initial guess can sit beside a local minimum when the curve is steep
    // or off-centre, or the relation is decreasing. Restart from a small grid
    // of centres and slopes of both signs and keep the best fit.
    let mut sorted = q.to_vec();
    sorted.sort_by(f64::total_cmp);
    for centre in [0.5, 0.1, 0.3, 0.7, 0.9].map(|f| sorted[((sorted.len() - 1) as f64 * f) as usize]) {
        for scale in [1.0, -1.0, 4.0, -4.0, 16.0, -16.0] {
            let start = [init[0], init[1] * scale, centre, init[3], init[4]];
            if start == init {
                continue;
            }
            let alt = levenberg_marquardt(q, y, start);
            if alt.sse() < best.sse() {
                best = alt;
            }
            if best.sse() == 0.0 {
                return Ok(best);
            }
        }
    }
    Ok(best)
}

fn linear_fallback(q: &[f64], y: &[f64]) -> LogisticFit {
    // With constant Q the slope is unidentifiable; the least-squares line is flat.
    let b5 = mean(y);
    let betas = [0.0, 0.0, 0.0, 0.0, b5];
    let mapped = vec![b5; q.len()];
    let s = sse(&betas, q, y);
    LogisticFit { betas, mapped, converged: true, linear_fallback: true, iterations: 0, sse_trace: vec![s] }
}

fn levenberg_marquardt(q: &[f64], y: &[f64], init: [f64; 5]) -> LogisticFit {
    let mut b = init;
    let mut cur = sse(&b, q, y);
    let mut trace = vec![cur];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if cur == 0.0 {
            converged = true;
            break;
        }
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (&qi, &yi) in q.iter().zip(y) {
            let s = sigmoid(b[1] * (qi - b[2]));
            let ds = b[0] * s * (1.0 - s);
            let j = Vector5::new(s - 0.5, ds * (qi - b[2]), -ds * b[1], qi, 1.0);
            let r = logistic5(&b, qi) - yi;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut a = jtj;
        for d in 0..5 {
            a[(d, d)] += lambda * (jtj[(d, d)] + 1e-12);
        }
        let Some(delta) = a.lu().solve(&(-jtr)) else {
            lambda *= 10.0;
            continue;
        };
        let cand = [b[0] + delta[0], b[1] + delta[1], b[2] + delta[2], b[3] + delta[3], b[4] + delta[4]];
        let next = sse(&cand, q, y);
        if next.is_finite() && next < cur {
            let improvement = (cur - next) / cur;
            b = cand;
            cur = next;
            trace.push(cur);
            lambda = (lambda / 10.0).max(1e-15);
            if improvement < RELATIVE_TOLERANCE {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // No descent direction left at working precision.
                converged = true;
                break;
            }
        }
    }
    let mapped = q.iter().map(|&v| logistic5(&b, v)).collect();
    LogisticFit { betas: b, mapped, converged, linear_fallback: false, iterations, sse_trace: trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_relation_fits_exactly() {
        let q: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let fit = logistic_fit(&q, &q).unwrap();
        assert!(fit.sse() < 1e-8, "{}", fit.sse());
    }

    #[test]
    fn recovers_generated_curve() {
        let truth = [50.0, 0.1, 30.0, 0.2, 10.0];
        let q: Vec<f64> = (0..40).map(|i| i as f64 * 1.5).collect();
        let y: Vec<f64> = q.iter().map(|&v| logistic5(&truth, v)).collect();
        let fit = logistic_fit(&q, &y).unwrap();
        let rms = (fit.sse() / q.len() as f64).sqrt();
        assert!(rms < 1e-4, "{rms}");
    }

    #[test]
    fn recovers_steep_off_centre_curve() {
        let truth = [80.0, 0.5, 5.0, 0.0, 40.0];
        let q: Vec<f64> = (0..60).map(|i| i as f64 * 1.5 - 10.0).collect();
        let y: Vec<f64> = q.iter().map(|&v| logistic5(&truth, v)).collect();
        let fit = logistic_fit(&q, &y).unwrap();
        let rms = (fit.sse() / q.len() as f64).sqrt();
        assert!(rms < 1e-4, "{rms}");
    }

    #[test]
    fn sse_never_increases() {
        let q: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() * 3.0 + i as f64).collect();
        let y: Vec<f64> = q.iter().map(|v| (v / 10.0).tanh() * 40.0 + (v * 3.1).cos()).collect();
        let fit = logistic_fit(&q, &y).unwrap();
        assert!(fit.sse_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_predictions_fall_back() {
        let q = vec![2.0; 6];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let fit = logistic_fit(&q, &y).unwrap();
        assert!(fit.linear_fallback);
        assert!(fit.mapped.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn too_few_points() {
        assert!(logistic_fit(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}
