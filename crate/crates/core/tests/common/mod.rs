#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satnet::tensor::kernels::PoolMode;
use satnet::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multiples of 1/4 in [-2, 2]: products and the sums of a few hundred of
/// them are exact in f32, whatever the summation order.
pub fn dyadic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-8i32..=8) as f32 / 4.0)
}

/// Six nested loops over `B×C×H×W` input and `O×C×k×k` weights.
pub fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: Option<&Tensor<f32>>, stride: usize, pad: usize) -> Tensor<f32> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, k, _] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.set(&[bi, oc, y, xo], acc);
                }
            }
        }
    }
    out
}

/// Exhaustive window scan.
pub fn naive_pool(x: &Tensor<f32>, window: usize, stride: usize, mode: PoolMode) -> Tensor<f32> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for bi in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let vals: Vec<f32> = (0..window * window)
                        .map(|i| x.at(&[bi, ch, y * stride + i / window, xo * stride + i % window]))
                        .collect();
                    let v = match mode {
                        PoolMode::Max => vals.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                        PoolMode::Min => vals.iter().copied().fold(f32::INFINITY, f32::min),
                        PoolMode::Avg => vals.iter().sum::<f32>() / vals.len() as f32,
                    };
                    out.set(&[bi, ch, y, xo], v);
                }
            }
        }
    }
    out
}
