//! Finite-difference checks through whole SAT blocks and a small network.

use super::{ModelConfig, SatBlock, SatBlockConfig, SatNet, SatVariant};
use crate::error::Result;
use crate::layers::{init_parameters, Forward, Mode, ParamSet, Registry};
use crate::tensor::checks::{project, CheckResult, Inputs};
use crate::tensor::{gradcheck, GradcheckOptions, Tape, Tensor, Var};

pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Gradchecks `body` with respect to `data` and every parameter in
/// `params`, which are bound onto the tape as inputs.
fn check_with_params<F>(
    name: String,
    params: &ParamSet<f64>,
    data: Vec<Tensor<f64>>,
    body: F,
    opts: &GradcheckOptions,
) -> Result<CheckResult>
where
    F: Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>,
{
    let n_data = data.len();
    let mut inputs = data;
    inputs.extend(params.iter().map(|p| p.value.clone()));
    let ids: Vec<_> = params.iter().map(|p| params.id_of(&p.name).expect("own name")).collect();
    let report = gradcheck(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut ctx = Forward::new(tape, params, Mode::Eval);
            for (&id, &v) in ids.iter().zip(&vars[n_data..]) {
                ctx.bind(id, v);
            }
            let out = body(&mut ctx, &vars[..n_data])?;
            project(ctx.tape, out, 21)
        },
        &inputs,
        opts,
    )?;
    Ok(CheckResult { name, report })
}

/// One SAT block of every variant, checked with respect to both views and
/// all block parameters.
pub fn block_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let opts = GradcheckOptions { tolerance: BLOCK_TOLERANCE, seed, ..GradcheckOptions::default() };
    let mut g = Inputs::new(seed);
    let mut out = Vec::new();
    for variant in [SatVariant::Se, SatVariant::Cbam, SatVariant::Gc] {
        let config = SatBlockConfig { variant, channels: 8, reduction_ratio: 2, ec_enabled: true };
        let mut reg = Registry::new();
        let block = SatBlock::register(&mut reg, "sat", config);
        let mut params: ParamSet<f64> = init_parameters(&reg, seed);
        // Start the energy coefficient away from the sigmoid midpoint.
        let ec = params.id_of("sat.ec_raw").expect("ec enabled");
        params.get_mut(ec).value = Tensor::full(&[1], 0.3);
        let data = vec![g.normal(&[2, 8, 5, 5]), g.normal(&[2, 8, 5, 5])];
        out.push(check_with_params(
            format!("sat block {variant}"),
            &params,
            data,
            |ctx, v| {
                let (l, r) = block.forward(ctx, v[0], v[1])?;
                ctx.tape.concat(&[l, r], 1)
            },
            &opts,
        )?);
    }
    Ok(out)
}

/// Entries sampled per parameter tensor in [`model_check`].
pub const MODEL_ENTRIES_PER_INPUT: usize = 3;

/// The full K=3 network on a 2-sample batch in evaluation mode (dropout
/// off, batch norm on its running statistics), checked on a seeded sample
/// of entries of every parameter and both inputs.
pub fn model_check(seed: u64) -> Result<CheckResult> {
    let mut config = ModelConfig::with_depth(3);
    config.seed = seed;
    let net = SatNet::new(config)?;
    let params: ParamSet<f64> = net.init();
    let mut g = Inputs::new(seed);
    let data = vec![g.uniform(&[2, 3, 40, 40], -1.0, 1.0), g.uniform(&[2, 3, 40, 40], -1.0, 1.0)];
    let opts = GradcheckOptions {
        epsilon: 1e-6,
        tolerance: MODEL_TOLERANCE,
        max_entries_per_input: Some(MODEL_ENTRIES_PER_INPUT),
        seed,
    };
    check_with_params(
        "model k=3".to_string(),
        &params,
        data,
        |ctx, v| Ok(net.forward(ctx, v[0], v[1])?.score),
        &opts,
    )
}
