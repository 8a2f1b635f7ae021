use super::config::BlockKind;
use crate::error::Result;
use crate::layers::{BatchNorm2d, Conv2d, Forward, Registry};
use crate::tensor::kernels::PoolMode;
use crate::tensor::{Real, Var};

/// Per-view stem: 3×3 conv, BN, ReLU, 2×2 max-pool, then a 1×1 conv.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryExtraction {
    conv: Conv2d,
    bn: BatchNorm2d,
    project: Conv2d,
}

impl PrimaryExtraction {
    pub fn register(reg: &mut Registry, name: &str, channels: usize) -> Self {
        PrimaryExtraction {
            conv: Conv2d::register(reg, &format!("{name}.conv"), 3, channels, 3, 1, 1, false),
            bn: BatchNorm2d::register(reg, &format!("{name}.bn"), channels),
            project: Conv2d::register(reg, &format!("{name}.project"), channels, channels, 1, 1, 0, true),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.pool2d(h, 2, 2, PoolMode::Max)?;
        self.project.forward(ctx, h)
    }
}

/// Pre-activation residual block: `x + F(x)` where `F` is a chain of
/// BN → ReLU → conv units and the skip path is the identity.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub kind: BlockKind,
    units: Vec<(BatchNorm2d, Conv2d)>,
}

impl ResBlock {
    pub fn register(reg: &mut Registry, name: &str, kind: BlockKind, channels: usize) -> Self {
        let kernels: &[usize] = match kind {
            BlockKind::Basic => &[3, 3],
            BlockKind::Bottleneck => &[1, 3, 1],
        };
        let units = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let bn = BatchNorm2d::register(reg, &format!("{name}.bn{}", i + 1), channels);
                let conv = Conv2d::register(reg, &format!("{name}.conv{}", i + 1), channels, channels, k, 1, k / 2, false);
                (bn, conv)
            })
            .collect();
        ResBlock { kind, units }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (bn, conv) in &self.units {
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
            h = conv.forward(ctx, h)?;
        }
        ctx.tape.add(x, h)
    }
}
