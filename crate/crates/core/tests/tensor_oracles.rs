mod common;

use common::{dyadic, naive_conv, naive_pool, rng};
use rand::Rng;
use satnet::tensor::kernels::PoolMode;
use satnet::tensor::{NormMode, Tape, Tensor};

fn conv(x: &Tensor<f32>, w: &Tensor<f32>, b: Option<&Tensor<f32>>, stride: usize, pad: usize) -> Tensor<f32> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let bv = b.map(|b| t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
    t.value(y).clone()
}

fn pool(x: &Tensor<f32>, window: usize, stride: usize, mode: PoolMode) -> Tensor<f32> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = t.pool2d(xv, window, stride, mode).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_matches_six_loop_oracle_bitwise() {
    let mut r = rng(1);
    for case in 0..50 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        // Every fifth case goes through the wide-channel path.
        let c = if case % 5 == 0 { r.random_range(16..=20) } else { r.random_range(1..=5) };
        let o = r.random_range(1..=4);
        let h = r.random_range(k..k + 6);
        let w = r.random_range(k..k + 6);
        let n = r.random_range(1..=2);
        let x = dyadic(&mut r, &[n, c, h, w]);
        let wt = dyadic(&mut r, &[o, c, k, k]);
        let b = dyadic(&mut r, &[o]);
        let bias = (case % 2 == 0).then_some(&b);
        let got = conv(&x, &wt, bias, stride, pad);
        let want = naive_conv(&x, &wt, bias, stride, pad);
        assert_eq!(got.shape(), want.shape(), "case {case}");
        assert_eq!(got.data(), want.data(), "case {case}: k={k} s={stride} p={pad} c={c}");
    }
}

#[test]
fn conv_center_of_ones_kernel() {
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
    let y = conv(&x, &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1);
    assert_eq!(y.at(&[0, 0, 1, 1]), 45.0);
}

#[test]
fn stem_conv_shape() {
    let mut r = rng(2);
    let y = conv(&dyadic(&mut r, &[1, 3, 40, 40]), &dyadic(&mut r, &[64, 3, 3, 3]), None, 1, 1);
    assert_eq!(y.shape(), [1, 64, 40, 40]);
    assert_eq!(pool(&y, 2, 2, PoolMode::Max).shape(), [1, 64, 20, 20]);
}

#[test]
fn pooling_matches_window_scan_bitwise() {
    let mut r = rng(3);
    for case in 0..50 {
        let window = r.random_range(1..=4);
        let stride = r.random_range(1..=window);
        let h = r.random_range(window..window + 7);
        let w = r.random_range(window..window + 7);
        let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
        let x = dyadic(&mut r, &[n, c, h, w]);
        for mode in [PoolMode::Max, PoolMode::Min, PoolMode::Avg] {
            let got = pool(&x, window, stride, mode);
            let want = naive_pool(&x, window, stride, mode);
            assert_eq!(got.data(), want.data(), "case {case} {mode:?} w={window} s={stride}");
        }
    }
}

#[test]
fn min_pool_is_negated_max_pool_of_negation() {
    let mut r = rng(4);
    for _ in 0..50 {
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| r.random_range(-1.0f32..1.0));
        let neg = x.map(|v| -v);
        for (window, stride) in [(2, 2), (4, 4), (3, 1)] {
            let min = pool(&x, window, stride, PoolMode::Min);
            let max = pool(&neg, window, stride, PoolMode::Max).map(|v| -v);
            assert_eq!(min.data(), max.data());
        }
    }
}

#[test]
fn four_by_four_block() {
    let x = Tensor::from_f64(&[1, 1, 4, 4], &[4., 2., 9., 1., 7., 5., 3., 8., 6., 0., 2., 4., 1., 3., 5., 7.]).unwrap();
    assert_eq!(pool(&x, 4, 4, PoolMode::Min).data(), [0.0]);
    assert_eq!(pool(&x, 4, 4, PoolMode::Max).data(), [9.0]);
}

#[test]
fn global_average() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 3., 5., 7.]).unwrap());
    let g = t.global_pool(x, PoolMode::Avg).unwrap();
    assert_eq!(t.shape(g), [1, 1, 1, 1]);
    assert_eq!(t.value(g).data(), [4.0]);
    let big = t.constant(Tensor::zeros(&[2, 64, 20, 20]));
    let g = t.global_pool(big, PoolMode::Avg).unwrap();
    assert_eq!(t.shape(g), [2, 64, 1, 1]);
}

#[test]
fn batchnorm_affine_moments() {
    let mut r = rng(5);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_fn(&[8, 1, 6, 6], |_| r.random_range(-3.0..5.0)));
    let g = t.constant(Tensor::full(&[1], 2.0));
    let b = t.constant(Tensor::full(&[1], 3.0));
    let (y, stats) = t.batch_norm(x, g, b, NormMode::Train { eps: 1e-12 }).unwrap();
    assert!(stats.is_some());
    let v = t.value(y).data();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    assert!((mean - 3.0).abs() < 1e-9);
    assert!((std - 2.0).abs() < 1e-9);
}

#[test]
fn linear_hand_product() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let w = t.constant(Tensor::from_f64(&[2, 2], &[1., 1., 1., -1.]).unwrap());
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), [3.0, -1.0]);
}

#[test]
fn softmax_closed_form() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[1, 2], &[1f64.ln(), 3f64.ln()]).unwrap());
    let y = t.softmax(x, 1).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
}

#[test]
fn per_channel_multiply_matches_loop() {
    let mut r = rng(6);
    let a = dyadic(&mut r, &[2, 3, 4, 5]);
    let w = dyadic(&mut r, &[2, 3, 1, 1]);
    let mut t = Tape::new();
    let (av, wv) = (t.constant(a.clone()), t.constant(w.clone()));
    let y = t.mul(av, wv).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    assert_eq!(t.value(y).at(&[b, c, i, j]), a.at(&[b, c, i, j]) * w.at(&[b, c, 0, 0]));
                }
            }
        }
    }
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap(), true);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), [2.0, 4.0]);
}
