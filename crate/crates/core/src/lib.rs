//! SATNet: a top-down stereo-attention CNN for no-reference stereo image
//! quality assessment, together with everything needed to train and audit it
//! on a desk: a small reverse-mode autodiff engine, layers and optimizer, a
//! synthetic stereo-distortion dataset, the IQA evaluation protocol and a CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod evalmetrics;
pub mod layers;
pub mod pipeline;
pub mod satnet;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod ch00 {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod ch01 {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod ch02 {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod ch03 {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod ch04 {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod ch05 {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod ch06 {}
}
