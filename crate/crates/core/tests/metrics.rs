use satnet::evalmetrics::{aggregate_image_score, evaluate, logistic5, logistic_fit, plcc, rmse, srocc, MetricsReport};

/// Spearman from squared rank differences; valid without ties.
fn spearman_closed_form(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64 + 1.0;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn golden_values() {
    assert!((plcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-10);
    let q = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [1.0, 3.0, 2.0, 5.0, 4.0];
    assert!((srocc(&q, &y).unwrap() - 0.8).abs() < 1e-10);
    assert!((srocc(&q, &y).unwrap() - spearman_closed_form(&q, &y)).abs() < 1e-10);
    assert!((rmse(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-10);
}

#[test]
fn srocc_agrees_with_closed_form_on_permutations() {
    let n = 30;
    for mult in 2..20u64 {
        let q: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i as u64 * mult + 3) % 31) as f64).collect();
        assert!((srocc(&q, &y).unwrap() - spearman_closed_form(&q, &y)).abs() < 1e-10);
    }
}

#[test]
fn ties_get_mean_ranks() {
    // Ranks of a are (1.5, 1.5, 3, 4); Pearson of those with (1, 2, 3, 4).
    let a = [1.0, 1.0, 2.0, 3.0];
    let b = [1.0, 2.0, 3.0, 4.0];
    let want = plcc(&[1.5, 1.5, 3.0, 4.0], &b).unwrap();
    assert!((srocc(&a, &b).unwrap() - want).abs() < 1e-12);
}

#[test]
fn zero_variance_is_undefined() {
    assert!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(srocc(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).is_err());
    assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn aggregate_is_arithmetic_mean() {
    assert_eq!(aggregate_image_score(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
    assert_eq!(aggregate_image_score(&[7.25]).unwrap(), 7.25);
    let scores: Vec<f64> = (0..144).map(|i| (i as f64 * 0.37).sin() * 40.0 + 50.0).collect();
    let mut naive = 0.0;
    for s in &scores {
        naive += s;
    }
    assert!((aggregate_image_score(&scores).unwrap() - naive / 144.0).abs() < 1e-12);
    assert!(aggregate_image_score(&[]).is_err());
}

#[test]
fn logistic_recovers_generated_curve() {
    let beta = [50.0, 0.1, 30.0, 0.2, 10.0];
    let q: Vec<f64> = (0..60).map(|i| i as f64).collect();
    let y: Vec<f64> = q.iter().map(|&v| logistic5(&beta, v)).collect();
    let fit = logistic_fit(&q, &y).unwrap();
    let rms = (fit.mapped.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!(rms < 1e-4, "rms {rms}");
    assert!(fit.sse_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn identity_is_fitted_exactly() {
    let q: Vec<f64> = (0..25).map(|i| i as f64 * 4.0).collect();
    let fit = logistic_fit(&q, &q).unwrap();
    assert!(fit.sse() < 1e-8, "sse {}", fit.sse());
    assert!((plcc(&fit.mapped, &q).unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn constant_predictions_fall_back_to_linear() {
    let q = [3.0; 8];
    let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let fit = logistic_fit(&q, &y).unwrap();
    assert!(fit.linear_fallback);
    assert!(fit.mapped.iter().chain(&fit.betas).all(|v| v.is_finite()));
}

#[test]
fn cubic_relation() {
    let q: Vec<f64> = (0..20).map(|i| i as f64 / 4.0 - 2.0).collect();
    let y: Vec<f64> = q.iter().map(|v| v.powi(3)).collect();
    let r = evaluate(&q, &y).unwrap();
    assert_eq!(r.srocc, 1.0);
    assert!(r.plcc > 0.99, "{r:?}");
    assert_eq!(r.n_images, 20);
    let anti: Vec<f64> = y.iter().map(|v| -v).collect();
    assert_eq!(evaluate(&q, &anti).unwrap().srocc, -1.0);
}

#[test]
fn evaluate_is_deterministic_and_means_average() {
    let q: Vec<f64> = (0..15).map(|i| (i as f64 * 1.3).cos() + i as f64 * 0.2).collect();
    let y: Vec<f64> = (0..15).map(|i| i as f64 * 3.0 + (i % 4) as f64).collect();
    let a = evaluate(&q, &y).unwrap();
    assert_eq!(a, evaluate(&q, &y).unwrap());
    let b = evaluate(&y, &q).unwrap();
    let m = MetricsReport::mean(&[a.clone(), b.clone()]).unwrap();
    assert!((m.plcc - (a.plcc + b.plcc) / 2.0).abs() < 1e-15);
    assert!((m.rmse - (a.rmse + b.rmse) / 2.0).abs() < 1e-15);
    assert_eq!(m.n_images, 30);
    let text = a.to_text();
    for key in ["plcc:", "srocc:", "rmse:", "betas:", "fit_converged:"] {
        assert!(text.contains(key));
    }
}
