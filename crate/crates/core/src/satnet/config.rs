use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::kernels::PoolMode;

/// Which attention module the stereo-attention block is derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SatVariant {
    Se,
    Cbam,
    Gc,
}

impl fmt::Display for SatVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SatVariant::Se => "se",
            SatVariant::Cbam => "cbam",
            SatVariant::Gc => "gc",
        })
    }
}

impl FromStr for SatVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(SatVariant::Se),
            "cbam" => Ok(SatVariant::Cbam),
            "gc" => Ok(SatVariant::Gc),
            other => Err(Error::config(format!("unknown SAT variant '{other}' (expected se, cbam or gc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SatBlockConfig {
    pub variant: SatVariant,
    pub channels: usize,
    /// Bottleneck ratio of the channel MLP / context transform.
    pub reduction_ratio: usize,
    /// Learnable energy coefficient; when off the fusion is a plain sum.
    pub ec_enabled: bool,
}

impl Default for SatBlockConfig {
    fn default() -> Self {
        SatBlockConfig { variant: SatVariant::Se, channels: 64, reduction_ratio: 4, ec_enabled: true }
    }
}

impl SatBlockConfig {
    pub fn hidden(&self) -> usize {
        self.channels / self.reduction_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction_ratio == 0 || self.channels % self.reduction_ratio != 0 {
            return Err(Error::config(format!(
                "channels ({}) must be a positive multiple of the reduction ratio ({})",
                self.channels, self.reduction_ratio
            )));
        }
        Ok(())
    }
}

/// Residual block flavour of the monocular branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1, 3×3, 1×1 convolutions.
    Bottleneck,
}

impl BlockKind {
    /// The block kind a given depth is built with: bottleneck for K=15,
    /// basic otherwise.
    pub fn for_depth(k: usize) -> Self {
        if k == 15 {
            BlockKind::Bottleneck
        } else {
            BlockKind::Basic
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::config(format!("unknown block kind '{other}'"))),
        }
    }
}

/// Pooling applied to the fusion (sum) and difference maps in the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingStrategy {
    pub fusion: PoolMode,
    pub difference: PoolMode,
}

impl Default for PoolingStrategy {
    fn default() -> Self {
        PoolingStrategy { fusion: PoolMode::Min, difference: PoolMode::Max }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fusion:{},diff:{}", self.fusion.name(), self.difference.name())
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;
    /// Parses `fusion:<mode>,diff:<mode>` (either order, both required).
    fn from_str(s: &str) -> Result<Self> {
        let mut fusion = None;
        let mut difference = None;
        for part in s.split(',') {
            let (key, mode) = part
                .split_once(':')
                .ok_or_else(|| Error::config(format!("pooling entry '{part}' is not <branch>:<mode>")))?;
            let mode: PoolMode = mode.trim().parse()?;
            match key.trim() {
                "fusion" | "fus" | "+" => fusion = Some(mode),
                "diff" | "difference" | "-" => difference = Some(mode),
                other => return Err(Error::config(format!("unknown pooling branch '{other}'"))),
            }
        }
        match (fusion, difference) {
            (Some(fusion), Some(difference)) => Ok(PoolingStrategy { fusion, difference }),
            _ => Err(Error::config(format!("pooling '{s}' must assign both fusion and diff"))),
        }
    }
}

/// Architecture ablations without top-down modulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMode {
    /// The full top-down model.
    None,
    /// No SAT blocks; the branches only meet in the head.
    BottomUp1,
    /// As `BottomUp1`, plus fusion/difference maps tapped after res levels
    /// 1, 3, 5 and 7 and concatenated into the regression input.
    BottomUp2,
    /// SAT blocks replaced by vanilla attention over the channel-concatenated
    /// branches, split back into halves afterwards.
    BottomUp3,
}

impl BaselineMode {
    /// Res levels (1-based) whose outputs feed the extra taps of `BottomUp2`.
    pub const TAP_LEVELS: [usize; 4] = [1, 3, 5, 7];
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMode::None => "none",
            BaselineMode::BottomUp1 => "bottom-up-1",
            BaselineMode::BottomUp2 => "bottom-up-2",
            BaselineMode::BottomUp3 => "bottom-up-3",
        })
    }
}

impl FromStr for BaselineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "none" | "top-down" => Ok(BaselineMode::None),
            "bottom-up-1" => Ok(BaselineMode::BottomUp1),
            "bottom-up-2" => Ok(BaselineMode::BottomUp2),
            "bottom-up-3" => Ok(BaselineMode::BottomUp3),
            other => Err(Error::config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Depths the architecture is defined for.
pub const SUPPORTED_DEPTHS: [usize; 4] = [3, 7, 14, 15];

/// Full description of one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of res-block levels, each followed by one SAT block.
    pub k: usize,
    pub block_kind: BlockKind,
    pub sat: SatBlockConfig,
    pub pooling: PoolingStrategy,
    pub baseline: BaselineMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_depth(7)
    }
}

impl ModelConfig {
    /// SAT-SE with the block kind paired to `k`.
    pub fn with_depth(k: usize) -> Self {
        ModelConfig {
            k,
            block_kind: BlockKind::for_depth(k),
            sat: SatBlockConfig::default(),
            pooling: PoolingStrategy::default(),
            baseline: BaselineMode::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_DEPTHS.contains(&self.k) {
            return Err(Error::config(format!("k={} is not one of {:?}", self.k, SUPPORTED_DEPTHS)));
        }
        let expected = BlockKind::for_depth(self.k);
        if self.block_kind != expected {
            return Err(Error::config(format!(
                "k={} must use {} blocks (k=15 pairs with bottleneck blocks, k in 3/7/14 with basic blocks)",
                self.k, expected
            )));
        }
        self.sat.validate()
    }

    /// `key=value` lines, the same syntax the CLI config files use.
    pub fn to_kv(&self) -> String {
        format!(
            "k={}\nblock={}\nvariant={}\nchannels={}\nreduction={}\nec={}\npooling={}\nbaseline={}\nseed={}\n",
            self.k,
            self.block_kind,
            self.sat.variant,
            self.sat.channels,
            self.sat.reduction_ratio,
            self.sat.ec_enabled,
            self.pooling,
            self.baseline,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut block = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            let value = value.trim();
            let bad = |what: &str| Error::config(format!("line {}: invalid {what} '{value}'", n + 1));
            match key.trim() {
                "k" => cfg.k = value.parse().map_err(|_| bad("k"))?,
                "block" => block = Some(value.parse()?),
                "variant" => cfg.sat.variant = value.parse()?,
                "channels" => cfg.sat.channels = value.parse().map_err(|_| bad("channels"))?,
                "reduction" => cfg.sat.reduction_ratio = value.parse().map_err(|_| bad("reduction"))?,
                "ec" => cfg.sat.ec_enabled = value.parse().map_err(|_| bad("ec"))?,
                "pooling" => cfg.pooling = value.parse()?,
                "baseline" => cfg.baseline = value.parse()?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                other => return Err(Error::config(format!("line {}: unknown key '{other}'", n + 1))),
            }
        }
        cfg.block_kind = block.unwrap_or_else(|| BlockKind::for_depth(cfg.k));
        cfg.validate()?;
        Ok(cfg)
    }
}
