//! Image-level evaluation: patch aggregation, logistic mapping and the
//! PLCC / SROCC / RMSE triple.

mod logistic;

pub use logistic::{logistic5, logistic_fit, LogisticFit, MAX_ITERATIONS, RELATIVE_TOLERANCE};

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Mean of the patch scores of one image.
pub fn aggregate_image_score(patch_scores: &[f64]) -> Result<f64> {
    if patch_scores.is_empty() {
        return Err(Error::Numerical("cannot aggregate an empty list of patch scores".into()));
    }
    Ok(patch_scores.iter().sum::<f64>() / patch_scores.len() as f64)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::shape(format!("metric inputs must be nonempty and paired, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("metric input contains non-finite values".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical("correlation is undefined for a constant sequence".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank-order correlation (Pearson correlation of average ranks).
pub fn srocc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    plcc(&average_ranks(a), &average_ranks(b))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok((a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// On logistic-mapped predictions.
    pub plcc: f64,
    /// On raw predictions.
    pub srocc: f64,
    /// On logistic-mapped predictions.
    pub rmse: f64,
    pub betas: [f64; 5],
    pub n_images: usize,
    pub fit_converged: bool,
}

impl MetricsReport {
    /// Field-wise arithmetic mean; `fit_converged` only if every run converged.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Numerical("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut betas = [0.0; 5];
        for (i, b) in betas.iter_mut().enumerate() {
            *b = reports.iter().map(|r| r.betas[i]).sum::<f64>() / n;
        }
        Ok(MetricsReport {
            plcc: avg(|r| r.plcc),
            srocc: avg(|r| r.srocc),
            rmse: avg(|r| r.rmse),
            betas,
            n_images: reports.iter().map(|r| r.n_images).sum(),
            fit_converged: reports.iter().all(|r| r.fit_converged),
        })
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "plcc: {:.6}", self.plcc);
        let _ = writeln!(s, "srocc: {:.6}", self.srocc);
        let _ = writeln!(s, "rmse: {:.6}", self.rmse);
        let betas: Vec<String> = self.betas.iter().map(|b| format!("{b:.6e}")).collect();
        let _ = writeln!(s, "betas: {}", betas.join(" "));
        let _ = writeln!(s, "n_images: {}", self.n_images);
        let _ = writeln!(s, "fit_converged: {}", self.fit_converged);
        s
    }

    pub const CSV_HEADER: &'static str = "plcc,srocc,rmse,beta1,beta2,beta3,beta4,beta5,n_images,fit_converged";

    pub fn to_csv_row(&self) -> String {
        let b = &self.betas;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.plcc, self.srocc, self.rmse, b[0], b[1], b[2], b[3], b[4], self.n_images, self.fit_converged
        )
    }
}

/// Fits the logistic mapping from `q` to `y`, then computes all three metrics.
pub fn evaluate(q: &[f64], y: &[f64]) -> Result<MetricsReport> {
    check_pair(q, y)?;
    let fit = logistic_fit(q, y)?;
    Ok(MetricsReport {
        plcc: plcc(&fit.mapped, y)?,
        srocc: srocc(q, y)?,
        rmse: rmse(&fit.mapped, y)?,
        betas: fit.betas,
        n_images: q.len(),
        fit_converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_values() {
        assert!((plcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-10);
        let s = srocc(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
        assert!((s - 0.8).abs() < 1e-10);
        assert!((rmse(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn zero_variance_is_an_error() {
        assert!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(srocc(&[1.0, 2.0], &[5.0, 5.0]).is_err());
        assert!(aggregate_image_score(&[]).is_err());
    }

    #[test]
    fn cubic_relation() {
        let q: Vec<f64> = (0..20).map(|i| i as f64 / 4.0 - 2.0).collect();
        let y: Vec<f64> = q.iter().map(|v| v * v * v).collect();
        let r = evaluate(&q, &y).unwrap();
        assert_eq!(r.srocc, 1.0);
        assert!(r.plcc > 0.99, "{}", r.plcc);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert_eq!(evaluate(&q, &neg).unwrap().srocc, -1.0);
    }

    #[test]
    fn mean_report() {
        let a = MetricsReport { plcc: 0.8, srocc: 0.6, rmse: 2.0, betas: [1.0; 5], n_images: 3, fit_converged: true };
        let b = MetricsReport { plcc: 0.6, srocc: 0.8, rmse: 4.0, betas: [3.0; 5], n_images: 5, fit_converged: false };
        let m = MetricsReport::mean(&[a, b]).unwrap();
        assert!((m.plcc - 0.7).abs() < 1e-15 && (m.rmse - 3.0).abs() < 1e-15);
        assert_eq!(m.n_images, 8);
        assert!(!m.fit_converged);
        assert!(m.to_text().contains("betas: "));
    }
}
