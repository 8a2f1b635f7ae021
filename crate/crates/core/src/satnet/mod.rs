//! The two-branch stereo quality network.
//!
//! Each view runs through its own stem and stack of residual blocks. After
//! every level a shared attention block looks at both views and rescales
//! them; the decoded maps are then summed and subtracted, pooled, and
//! regressed to a single score.

pub mod checks;
mod blocks;
mod config;
mod sat;

pub use blocks::{PrimaryExtraction, ResBlock};
pub use config::{
    BaselineMode, BlockKind, ModelConfig, PoolingStrategy, SatBlockConfig, SatVariant, SUPPORTED_DEPTHS,
};
pub use sat::{binocular_softmax, dynamic_fusion, topdown_modulation, Modulation, SatBlock, SatTrace, VanillaAttention};

use crate::error::{Error, Result};
use crate::layers::{init_parameters, Conv2d, Dropout, Forward, Linear, Mode, ParamSet, Registry};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Side length of the square patches the network consumes.
pub const PATCH_SIZE: usize = 40;
/// Window and stride of the head pooling.
pub const HEAD_POOL: usize = 4;
pub const FC1_WIDTH: usize = 1600;
pub const FC2_WIDTH: usize = 800;
pub const DROPOUT_RATE: f64 = 0.5;

/// Side of the maps entering the head pooling (after the stem's 2× pool).
const FEATURE_SIDE: usize = PATCH_SIZE / 2;
const POOLED_SIDE: usize = FEATURE_SIDE / HEAD_POOL;

/// Which interaction, if any, follows a res level.
#[derive(Clone, Copy, Debug)]
pub enum LevelAttention {
    None,
    Stereo(SatBlock),
    Vanilla(VanillaAttention),
}

/// Regression head: pooled fusion/difference maps through three FC layers.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub pooling: PoolingStrategy,
    fc1: Linear,
    fc2: Linear,
    pub fc3: Linear,
    dropout: Dropout,
}

impl Head {
    fn register(reg: &mut Registry, pooling: PoolingStrategy, input: usize) -> Self {
        Head {
            pooling,
            fc1: Linear::register(reg, "head.fc1", input, FC1_WIDTH),
            fc2: Linear::register(reg, "head.fc2", FC1_WIDTH, FC2_WIDTH),
            fc3: Linear::register(reg, "head.fc3", FC2_WIDTH, 1),
            dropout: Dropout { rate: DROPOUT_RATE },
        }
    }

    /// Pooled and flattened `[fusion, difference]` features of one pair of
    /// maps, `B × 2·C·5·5`.
    pub fn pair_features<T: Real>(&self, tape: &mut Tape<T>, left: Var, right: Var) -> Result<Var> {
        let fusion = tape.add(left, right)?;
        let diff = tape.sub(left, right)?;
        let fusion = tape.pool2d(fusion, HEAD_POOL, HEAD_POOL, self.pooling.fusion)?;
        let diff = tape.pool2d(diff, HEAD_POOL, HEAD_POOL, self.pooling.difference)?;
        let fusion = tape.flatten(fusion)?;
        let diff = tape.flatten(diff)?;
        tape.concat(&[fusion, diff], 1)
    }

    pub fn regress<T: Real>(&self, ctx: &mut Forward<'_, T>, features: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, features)?;
        let h = ctx.tape.relu(h)?;
        let h = self.dropout.forward(ctx, h)?;
        let h = self.fc2.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.dropout.forward(ctx, h)?;
        self.fc3.forward(ctx, h)
    }
}

/// Result of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B×1` predicted quality.
    pub score: Var,
    /// Energy coefficient of every SAT block that has one, in level order.
    pub alphas: Vec<Var>,
    /// Decoded `(left, right)` maps entering the head.
    pub decoded: (Var, Var),
    /// `B × F` regression input.
    pub features: Var,
}

/// Architecture of one network: layer layout plus the parameter
/// declaration. Parameter values live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct SatNet {
    config: ModelConfig,
    registry: Registry,
    stems: [PrimaryExtraction; 2],
    branches: [Vec<ResBlock>; 2],
    attention: Vec<LevelAttention>,
    decode: [Conv2d; 2],
    taps: Vec<usize>,
    head: Head,
}

const EYES: [&str; 2] = ["left", "right"];

impl SatNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.sat.channels;
        let mut reg = Registry::new();
        let stems = EYES.map(|eye| PrimaryExtraction::register(&mut reg, &format!("{eye}.stem"), c));
        let mut branches: [Vec<ResBlock>; 2] = [Vec::new(), Vec::new()];
        let mut attention = Vec::with_capacity(config.k);
        for level in 1..=config.k {
            for (e, eye) in EYES.iter().enumerate() {
                branches[e].push(ResBlock::register(&mut reg, &format!("{eye}.res{level}"), config.block_kind, c));
            }
            attention.push(match config.baseline {
                BaselineMode::None => LevelAttention::Stereo(SatBlock::register(&mut reg, &format!("sat{level}"), config.sat)),
                BaselineMode::BottomUp3 => {
                    LevelAttention::Vanilla(VanillaAttention::register(&mut reg, &format!("attn{level}"), config.sat))
                }
                BaselineMode::BottomUp1 | BaselineMode::BottomUp2 => LevelAttention::None,
            });
        }
        let decode = EYES.map(|eye| Conv2d::register(&mut reg, &format!("{eye}.decode"), c, c, 1, 1, 0, true));
        let taps: Vec<usize> = match config.baseline {
            BaselineMode::BottomUp2 => BaselineMode::TAP_LEVELS.iter().copied().filter(|&l| l <= config.k).collect(),
            _ => Vec::new(),
        };
        let per_pair = 2 * c * POOLED_SIDE * POOLED_SIDE;
        let head = Head::register(&mut reg, config.pooling, per_pair * (1 + taps.len()));
        Ok(SatNet { config, registry: reg, stems, branches, attention, decode, taps, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn attention(&self) -> &[LevelAttention] {
        &self.attention
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.registry.count()
    }

    /// Fresh parameters drawn from the configured seed.
    pub fn init<T: Real>(&self) -> ParamSet<T> {
        init_parameters(&self.registry, self.config.seed)
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, v: Var, which: &str) -> Result<()> {
        match tape.shape(v) {
            &[b, 3, PATCH_SIZE, PATCH_SIZE] if b > 0 => Ok(()),
            s => Err(Error::shape(format!(
                "{which} input must be B×3×{PATCH_SIZE}×{PATCH_SIZE}, got {s:?}"
            ))),
        }
    }

    /// Runs both branches, all interaction blocks, and the head.
    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, left: Var, right: Var) -> Result<ForwardOutput> {
        self.check_input(ctx.tape, left, "left")?;
        self.check_input(ctx.tape, right, "right")?;
        if ctx.tape.shape(left)[0] != ctx.tape.shape(right)[0] {
            return Err(Error::shape("left and right batches differ in size"));
        }
        let mut l = self.stems[0].forward(ctx, left)?;
        let mut r = self.stems[1].forward(ctx, right)?;
        let mut alphas = Vec::new();
        let mut tapped = Vec::new();
        for level in 0..self.config.k {
            l = self.branches[0][level].forward(ctx, l)?;
            r = self.branches[1][level].forward(ctx, r)?;
            if self.taps.contains(&(level + 1)) {
                tapped.push((l, r));
            }
            match &self.attention[level] {
                LevelAttention::None => {}
                LevelAttention::Stereo(block) => {
                    let t = block.forward_traced(ctx, l, r)?;
                    alphas.extend(t.alpha);
                    (l, r) = (t.left, t.right);
                }
                LevelAttention::Vanilla(block) => (l, r) = block.forward(ctx, l, r)?,
            }
        }
        let dl = self.decode[0].forward(ctx, l)?;
        let dr = self.decode[1].forward(ctx, r)?;
        let mut parts = vec![self.head.pair_features(ctx.tape, dl, dr)?];
        for (tl, tr) in tapped {
            parts.push(self.head.pair_features(ctx.tape, tl, tr)?);
        }
        let features = if parts.len() == 1 { parts[0] } else { ctx.tape.concat(&parts, 1)? };
        let score = self.head.regress(ctx, features)?;
        Ok(ForwardOutput { score, alphas, decoded: (dl, dr), features })
    }
}

/// Trainable-parameter count of the architecture `config` describes.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(SatNet::new(*config)?.parameter_count())
}

/// An architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub net: SatNet,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let net = SatNet::new(config)?;
        let params = net.init();
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Eval-mode scores for a batch of `B×3×40×40` patch pairs.
    pub fn predict(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut ctx = Forward::new(&mut tape, &self.params, Mode::Eval);
        let l = ctx.tape.constant(left.clone());
        let r = ctx.tape.constant(right.clone());
        let out = self.net.forward(&mut ctx, l, r)?;
        Ok(tape.value(out.score).data().to_vec())
    }

    /// Current `sigmoid(ec_raw)` of every SAT block with an energy coefficient.
    pub fn energy_coefficients(&self) -> Vec<f64> {
        self.net
            .attention
            .iter()
            .filter_map(|a| match a {
                LevelAttention::Stereo(b) => b.ec_raw,
                _ => None,
            })
            .map(|id| {
                let raw = self.params.get(id).value.data()[0].to_f64_lossy();
                1.0 / (1.0 + (-raw).exp())
            })
            .collect()
    }
}
