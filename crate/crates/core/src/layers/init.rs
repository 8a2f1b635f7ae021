use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Init, ParamSet, Parameter, ParamSpec, Registry};
use crate::tensor::{Real, Tensor};

fn materialize<T: Real>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match spec.init {
        Init::Const(v) => Tensor::full(&spec.shape, T::from_f64_lossy(v)),
        Init::HeNormal { fan_in } => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&spec.shape, |_| T::from_f64_lossy(normal.sample(rng)))
        }
        Init::Uniform { fan_in } => {
            let bound = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(&spec.shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        }
    }
}

/// Draws every declared parameter from one seeded stream, in declaration
/// order. The result is a pure function of `(registry, seed)`; an `f32` and
/// an `f64` set built from the same seed agree up to rounding.
pub fn init_parameters<T: Real>(registry: &Registry, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = registry
        .params()
        .iter()
        .map(|spec| Parameter { name: spec.name.clone(), value: materialize(spec, &mut rng), grad: None })
        .collect();
    let buffers = registry
        .buffers()
        .iter()
        .map(|spec| (spec.name.clone(), materialize(spec, &mut rng)))
        .collect();
    ParamSet::from_parts(params, buffers)
}
