//! Finite-difference checks over every tape primitive.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::kernels::PoolMode;
use super::{gradcheck, GradcheckOptions, GradcheckReport, NormMode, Tape, Tensor, Var};
use crate::error::Result;

/// Tolerance every primitive must meet in `f64`.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;

/// One named gradcheck outcome.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradcheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Seeded generator of check inputs.
pub struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    pub fn new(seed: u64) -> Self {
        Inputs { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.sample(StandardNormal))
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.random_range(lo..hi))
    }

    /// Shuffled values spaced `0.05` apart, so no two entries come close
    /// enough to swap order under a finite-difference step.
    pub fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
        v.shuffle(&mut self.rng);
        Tensor::new(shape.to_vec(), v).expect("sized above")
    }

    /// Normal values pushed at least `0.05` away from zero.
    pub fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.normal(shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters and
/// normalizing ops do not collapse to a constant.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = Inputs::new(seed ^ 0x9e37_79b9).normal(tape.shape(out));
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn case(
    name: impl Into<String>,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name: name.into(), inputs, f: Box::new(f) }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut g = Inputs::new(seed);
    let mut out = Vec::new();
    for (name, x, w, stride, pad) in [
        ("conv2d 3x3", [1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
        ("conv2d 3x3 stride 2", [2, 3, 7, 7], [4, 3, 3, 3], 2, 0),
        ("conv2d 1x1", [2, 4, 3, 3], [2, 4, 1, 1], 1, 0),
        ("conv2d 3x3 wide", [2, 16, 5, 4], [3, 16, 3, 3], 1, 1),
        ("conv2d 7x7", [1, 2, 6, 6], [2, 2, 7, 7], 1, 3),
    ] {
        let bias = g.normal(&[w[0]]);
        out.push(case(name, vec![g.normal(&x), g.normal(&w), bias], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 1)
        }));
    }
    out.push(case("conv2d no bias", vec![g.normal(&[1, 2, 4, 4]), g.normal(&[2, 2, 3, 3])], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 1)?;
        project(t, y, 2)
    }));
    for (name, mode, window) in [
        ("pool2d max", PoolMode::Max, 2),
        ("pool2d min", PoolMode::Min, 2),
        ("pool2d avg", PoolMode::Avg, 2),
        ("pool2d max 4", PoolMode::Max, 4),
        ("pool2d min 4", PoolMode::Min, 4),
    ] {
        out.push(case(name, vec![g.distinct(&[2, 3, 8, 8])], move |t, v| {
            let y = t.pool2d(v[0], window, window, mode)?;
            project(t, y, 3)
        }));
    }
    for (name, mode) in [("global_pool avg", PoolMode::Avg), ("global_pool max", PoolMode::Max)] {
        out.push(case(name, vec![g.distinct(&[2, 3, 4, 4])], move |t, v| {
            let y = t.global_pool(v[0], mode)?;
            project(t, y, 4)
        }));
    }
    for (name, mode) in [("reduce_channels avg", PoolMode::Avg), ("reduce_channels max", PoolMode::Max)] {
        out.push(case(name, vec![g.distinct(&[2, 4, 3, 3])], move |t, v| {
            let y = t.reduce_channels(v[0], mode)?;
            project(t, y, 5)
        }));
    }
    let bn_inputs = |g: &mut Inputs| vec![g.normal(&[3, 2, 3, 3]), g.normal(&[2]), g.normal(&[2])];
    out.push(case("batch_norm train", bn_inputs(&mut g), |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Train { eps: 1e-5 })?;
        project(t, y, 6)
    }));
    let (mean, var) = (g.normal(&[2]).into_data(), g.uniform(&[2], 0.5, 2.0).into_data());
    out.push(case("batch_norm eval", bn_inputs(&mut g), move |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var, eps: 1e-5 })?;
        project(t, y, 7)
    }));
    out.push(case("channel_norm", vec![g.normal(&[2, 4, 2, 3]), g.normal(&[4]), g.normal(&[4])], |t, v| {
        let y = t.channel_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 8)
    }));
    out.push(case("linear", vec![g.normal(&[2, 3]), g.normal(&[4, 3]), g.normal(&[4])], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, 9)
    }));
    out.push(case("matmul", vec![g.normal(&[3, 4]), g.normal(&[4, 5])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 10)
    }));
    for (name, axis) in [("softmax axis 1", 1), ("softmax axis 2", 2)] {
        out.push(case(name, vec![g.normal(&[2, 3, 4])], move |t, v| {
            let y = t.softmax(v[0], axis)?;
            project(t, y, 11)
        }));
    }
    let full = [2, 3, 2, 2];
    for (bname, bshape) in [
        ("same", vec![2, 3, 2, 2]),
        ("per-channel", vec![2, 3, 1, 1]),
        ("per-position", vec![2, 1, 2, 2]),
        ("scalar", vec![1]),
    ] {
        for (opname, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
            out.push(case(format!("{opname} {bname}"), vec![g.normal(&full), g.normal(&bshape)], move |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, 12)
            }));
        }
    }
    out.push(case("relu", vec![g.off_zero(&[2, 3, 4])], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 13)
    }));
    out.push(case("sigmoid", vec![g.normal(&[2, 5])], |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, 14)
    }));
    out.push(case("scale", vec![g.normal(&[3, 2])], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        project(t, y, 15)
    }));
    out.push(case("concat", vec![g.normal(&[2, 1, 3]), g.normal(&[2, 2, 3])], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        project(t, y, 16)
    }));
    out.push(case("narrow", vec![g.normal(&[2, 5, 2])], |t, v| {
        let y = t.narrow(v[0], 1, 1, 3)?;
        project(t, y, 17)
    }));
    out.push(case("reshape", vec![g.normal(&[2, 6])], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y, 18)
    }));
    out.push(case("flatten", vec![g.normal(&[2, 2, 3])], |t, v| {
        let y = t.flatten(v[0])?;
        project(t, y, 19)
    }));
    out.push(case("sum", vec![g.normal(&[3, 3])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    }));
    out.push(case("mean", vec![g.normal(&[4, 2])], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    }));
    out
}

/// Runs the gradcheck of every tape primitive on seeded random inputs.
/// Pooling and ReLU inputs keep entries well apart from ties and kinks.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let opts = GradcheckOptions { tolerance: PRIMITIVE_TOLERANCE, seed, ..GradcheckOptions::default() };
    cases(seed)
        .into_iter()
        .map(|c| {
            let report = gradcheck(&c.f, &c.inputs, &opts)?;
            Ok(CheckResult { name: c.name, report })
        })
        .collect()
}
