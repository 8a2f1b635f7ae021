//! Stereo-attention blocks and the vanilla single-stream attention used by
//! the bottom-up-3 baseline.

use super::config::{SatBlockConfig, SatVariant};
use crate::error::Result;
use crate::layers::{Conv2d, Forward, Init, Linear, ParamId, Registry};
use crate::tensor::kernels::PoolMode;
use crate::tensor::{Real, Tape, Var};

const CHANNEL_NORM_EPS: f64 = 1e-5;

/// `α·(F_l + F_r)`, or the plain sum when `alpha` is `None`.
pub fn dynamic_fusion<T: Real>(tape: &mut Tape<T>, left: Var, right: Var, alpha: Option<Var>) -> Result<Var> {
    let sum = tape.add(left, right)?;
    match alpha {
        Some(a) => tape.mul(sum, a),
        None => Ok(sum),
    }
}

/// Splits `B×2C` logits into a softmax pair over the two views, each
/// reshaped to `B×C×1×1`.
pub fn binocular_softmax<T: Real>(tape: &mut Tape<T>, logits: Var, channels: usize) -> Result<(Var, Var)> {
    let b = tape.shape(logits)[0];
    let pairs = tape.reshape(logits, &[b, 2, channels])?;
    let w = tape.softmax(pairs, 1)?;
    let wl = tape.narrow(w, 1, 0, 1)?;
    let wr = tape.narrow(w, 1, 1, 1)?;
    Ok((tape.reshape(wl, &[b, channels, 1, 1])?, tape.reshape(wr, &[b, channels, 1, 1])?))
}

/// How fitted weights act on the monocular maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modulation {
    Multiply,
    Add,
}

/// Applies `W_l` to the left map and `W_r` to the right map.
pub fn topdown_modulation<T: Real>(
    tape: &mut Tape<T>,
    (left, right): (Var, Var),
    (wl, wr): (Var, Var),
    how: Modulation,
) -> Result<(Var, Var)> {
    match how {
        Modulation::Multiply => Ok((tape.mul(left, wl)?, tape.mul(right, wr)?)),
        Modulation::Add => Ok((tape.add(left, wl)?, tape.add(right, wr)?)),
    }
}

/// Global context pooling: a 1×1 conv scores every position, the scores are
/// softmaxed over `H·W` and used to average the features. Returns `B×C×1×1`.
fn context_pool<T: Real>(ctx: &mut Forward<'_, T>, score: &Conv2d, x: Var) -> Result<Var> {
    let [b, c, h, w] = dims4(ctx.tape, x);
    let s = score.forward(ctx, x)?;
    let t = &mut *ctx.tape;
    let s = t.reshape(s, &[b, 1, h * w])?;
    let s = t.softmax(s, 2)?;
    let s = t.reshape(s, &[b, h * w, 1])?;
    let feats = t.reshape(x, &[b, c, h * w])?;
    let g = t.matmul(feats, s)?;
    t.reshape(g, &[b, c, 1, 1])
}

fn dims4<T: Real>(tape: &Tape<T>, x: Var) -> [usize; 4] {
    let s = tape.shape(x);
    [s[0], s[1], s[2], s[3]]
}

/// Context transform of the GC variant: 1×1 conv, channel norm, ReLU, 1×1
/// conv.
#[derive(Clone, Copy, Debug)]
struct ContextTransform {
    reduce: Conv2d,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    expand: Conv2d,
}

impl ContextTransform {
    fn register(reg: &mut Registry, name: &str, c_in: usize, hidden: usize, c_out: usize) -> Self {
        ContextTransform {
            reduce: Conv2d::register(reg, &format!("{name}.reduce"), c_in, hidden, 1, 1, 0, true),
            norm_gamma: reg.param(format!("{name}.norm.gamma"), &[hidden], Init::Const(1.0)),
            norm_beta: reg.param(format!("{name}.norm.beta"), &[hidden], Init::Const(0.0)),
            expand: Conv2d::register(reg, &format!("{name}.expand"), hidden, c_out, 1, 1, 0, true),
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, g: Var) -> Result<Var> {
        let h = self.reduce.forward(ctx, g)?;
        let gamma = ctx.param(self.norm_gamma);
        let beta = ctx.param(self.norm_beta);
        let h = ctx.tape.channel_norm(h, gamma, beta, T::from_f64_lossy(CHANNEL_NORM_EPS))?;
        let h = ctx.tape.relu(h)?;
        self.expand.forward(ctx, h)
    }
}

/// Two-layer MLP with a ReLU in between.
#[derive(Clone, Copy, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn register(reg: &mut Registry, name: &str, c_in: usize, hidden: usize, c_out: usize) -> Self {
        Mlp {
            fc1: Linear::register(reg, &format!("{name}.fc1"), c_in, hidden),
            fc2: Linear::register(reg, &format!("{name}.fc2"), hidden, c_out),
        }
    }

    /// Runs on a `B×C×1×1` descriptor and returns `B×C_out`.
    fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, g: Var) -> Result<Var> {
        let x = ctx.tape.flatten(g)?;
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug)]
enum SatParams {
    Se { mlp: Mlp },
    Cbam { mlp: Mlp, spatial: Conv2d },
    Gc { score: Conv2d, transform: ContextTransform },
}

/// Intermediate values of one SAT block pass.
#[derive(Clone, Debug)]
pub struct SatTrace {
    /// `sigmoid(ec_raw)` when the energy coefficient is enabled.
    pub alpha: Option<Var>,
    /// Fitted `(W_l, W_r)` for every attention stage (two for CBAM).
    pub weights: Vec<(Var, Var)>,
    pub left: Var,
    pub right: Var,
}

/// One stereo-attention block shared by both views at a given level.
#[derive(Clone, Copy, Debug)]
pub struct SatBlock {
    pub config: SatBlockConfig,
    pub ec_raw: Option<ParamId>,
    params: SatParams,
}

impl SatBlock {
    pub fn register(reg: &mut Registry, name: &str, config: SatBlockConfig) -> Self {
        let c = config.channels;
        let hidden = config.hidden();
        let ec_raw = config.ec_enabled.then(|| reg.param(format!("{name}.ec_raw"), &[1], Init::Const(0.0)));
        let params = match config.variant {
            SatVariant::Se => SatParams::Se { mlp: Mlp::register(reg, &format!("{name}.mlp"), c, hidden, 2 * c) },
            SatVariant::Cbam => SatParams::Cbam {
                mlp: Mlp::register(reg, &format!("{name}.mlp"), c, hidden, 2 * c),
                spatial: Conv2d::register(reg, &format!("{name}.spatial"), 2, 2, 7, 1, 3, true),
            },
            SatVariant::Gc => SatParams::Gc {
                score: Conv2d::register(reg, &format!("{name}.score"), c, 1, 1, 1, 0, true),
                transform: ContextTransform::register(reg, &format!("{name}.transform"), c, hidden, 2 * c),
            },
        };
        SatBlock { config, ec_raw, params }
    }

    pub fn alpha<T: Real>(&self, ctx: &mut Forward<'_, T>) -> Result<Option<Var>> {
        match self.ec_raw {
            Some(id) => {
                let raw = ctx.param(id);
                Ok(Some(ctx.tape.sigmoid(raw)?))
            }
            None => Ok(None),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, left: Var, right: Var) -> Result<(Var, Var)> {
        let t = self.forward_traced(ctx, left, right)?;
        Ok((t.left, t.right))
    }

    pub fn forward_traced<T: Real>(&self, ctx: &mut Forward<'_, T>, left: Var, right: Var) -> Result<SatTrace> {
        let c = self.config.channels;
        let alpha = self.alpha(ctx)?;
        let fused = dynamic_fusion(ctx.tape, left, right, alpha)?;
        let mut weights = Vec::new();
        let (left, right) = match self.params {
            SatParams::Se { mlp } => {
                let g = ctx.tape.global_pool(fused, PoolMode::Avg)?;
                let logits = mlp.forward(ctx, g)?;
                let w = binocular_softmax(ctx.tape, logits, c)?;
                weights.push(w);
                topdown_modulation(ctx.tape, (left, right), w, Modulation::Multiply)?
            }
            SatParams::Cbam { mlp, spatial } => {
                let avg = ctx.tape.global_pool(fused, PoolMode::Avg)?;
                let max = ctx.tape.global_pool(fused, PoolMode::Max)?;
                let la = mlp.forward(ctx, avg)?;
                let lm = mlp.forward(ctx, max)?;
                let logits = ctx.tape.add(la, lm)?;
                let w = binocular_softmax(ctx.tape, logits, c)?;
                weights.push(w);
                let (l1, r1) = topdown_modulation(ctx.tape, (left, right), w, Modulation::Multiply)?;

                // The spatial stage re-fuses the channel-refined maps with the same α.
                let fused = dynamic_fusion(ctx.tape, l1, r1, alpha)?;
                let avg = ctx.tape.reduce_channels(fused, PoolMode::Avg)?;
                let max = ctx.tape.reduce_channels(fused, PoolMode::Max)?;
                let g = ctx.tape.concat(&[avg, max], 1)?;
                let logits = spatial.forward(ctx, g)?;
                let s = ctx.tape.softmax(logits, 1)?;
                let ws = (ctx.tape.narrow(s, 1, 0, 1)?, ctx.tape.narrow(s, 1, 1, 1)?);
                weights.push(ws);
                topdown_modulation(ctx.tape, (l1, r1), ws, Modulation::Multiply)?
            }
            SatParams::Gc { score, transform } => {
                let g = context_pool(ctx, &score, fused)?;
                let logits = transform.forward(ctx, g)?;
                let logits = ctx.tape.flatten(logits)?;
                let w = binocular_softmax(ctx.tape, logits, c)?;
                weights.push(w);
                topdown_modulation(ctx.tape, (left, right), w, Modulation::Add)?
            }
        };
        Ok(SatTrace { alpha, weights, left, right })
    }
}

#[derive(Clone, Copy, Debug)]
enum VanillaParams {
    Se { mlp: Mlp },
    Cbam { mlp: Mlp, spatial: Conv2d },
    Gc { score: Conv2d, transform: ContextTransform },
}

/// Ordinary sigmoid-gated attention over `concat(F_l, F_r)` (2C channels),
/// split back into the two halves afterwards.
#[derive(Clone, Copy, Debug)]
pub struct VanillaAttention {
    channels: usize,
    params: VanillaParams,
}

impl VanillaAttention {
    pub fn register(reg: &mut Registry, name: &str, config: SatBlockConfig) -> Self {
        let c2 = 2 * config.channels;
        let hidden = c2 / config.reduction_ratio;
        let params = match config.variant {
            SatVariant::Se => VanillaParams::Se { mlp: Mlp::register(reg, &format!("{name}.mlp"), c2, hidden, c2) },
            SatVariant::Cbam => VanillaParams::Cbam {
                mlp: Mlp::register(reg, &format!("{name}.mlp"), c2, hidden, c2),
                spatial: Conv2d::register(reg, &format!("{name}.spatial"), 2, 1, 7, 1, 3, true),
            },
            SatVariant::Gc => VanillaParams::Gc {
                score: Conv2d::register(reg, &format!("{name}.score"), c2, 1, 1, 1, 0, true),
                transform: ContextTransform::register(reg, &format!("{name}.transform"), c2, hidden, c2),
            },
        };
        VanillaAttention { channels: config.channels, params }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, left: Var, right: Var) -> Result<(Var, Var)> {
        let x = ctx.tape.concat(&[left, right], 1)?;
        let [b, c2, _, _] = dims4(ctx.tape, x);
        let y = match self.params {
            VanillaParams::Se { mlp } => {
                let g = ctx.tape.global_pool(x, PoolMode::Avg)?;
                let z = mlp.forward(ctx, g)?;
                let z = ctx.tape.sigmoid(z)?;
                let z = ctx.tape.reshape(z, &[b, c2, 1, 1])?;
                ctx.tape.mul(x, z)?
            }
            VanillaParams::Cbam { mlp, spatial } => {
                let avg = ctx.tape.global_pool(x, PoolMode::Avg)?;
                let max = ctx.tape.global_pool(x, PoolMode::Max)?;
                let za = mlp.forward(ctx, avg)?;
                let zm = mlp.forward(ctx, max)?;
                let z = ctx.tape.add(za, zm)?;
                let z = ctx.tape.sigmoid(z)?;
                let z = ctx.tape.reshape(z, &[b, c2, 1, 1])?;
                let x1 = ctx.tape.mul(x, z)?;
                let avg = ctx.tape.reduce_channels(x1, PoolMode::Avg)?;
                let max = ctx.tape.reduce_channels(x1, PoolMode::Max)?;
                let g = ctx.tape.concat(&[avg, max], 1)?;
                let s = spatial.forward(ctx, g)?;
                let s = ctx.tape.sigmoid(s)?;
                ctx.tape.mul(x1, s)?
            }
            VanillaParams::Gc { score, transform } => {
                let g = context_pool(ctx, &score, x)?;
                let z = transform.forward(ctx, g)?;
                ctx.tape.add(x, z)?
            }
        };
        let c = self.channels;
        Ok((ctx.tape.narrow(y, 1, 0, c)?, ctx.tape.narrow(y, 1, c, c)?))
    }
}
