//! Network architecture: squeeze-excitation dense blocks, the two-head
//! backbone builder, the fusion MLP, and the loss functions.
//!
//! A network is a [`ParamStore`] (named tensors plus batch-norm running
//! statistics) and an architecture description holding parameter ids. A
//! forward pass binds the parameters to tape leaves through a [`Pass`], so
//! the same architecture runs at either precision and with parameters
//! trainable or frozen.

mod losses;
mod model;
mod params;

pub use losses::{cross_entropy, mse, softmax};
pub use model::{
    build_fusion_mlp, build_sedensenet, se_reduced, Backbone, BackboneOut, FusionMlp, FusionNet,
    Network, SeDenseModule, TransitionBlock,
};
pub use params::{
    BnLayer, BnStats, ConvLayer, DenseLayer, Mode, Param, ParamKind, ParamStore, Pass, SeLayer,
};

use crate::tensor::TensorError;

/// Batch-norm epsilon used everywhere.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running-statistics momentum used everywhere.
pub const BN_MOMENTUM: f64 = 0.9;
/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;
/// Hidden width of the fusion MLP.
pub const FUSION_HIDDEN: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network spec: {reason}")]
    InvalidSpec { reason: String },
    #[error(
        "input {h}x{w} is too small for {halvings} spatial halvings; \
         the minimum input size is {min}x{min}"
    )]
    InputTooSmall {
        h: usize,
        w: usize,
        halvings: usize,
        min: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which output the backbone produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax distribution over the severity stages.
    Classification,
    /// Single linear severity score.
    Regression,
}

/// Which loss a training phase minimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// Categorical cross entropy, optionally with per-class weights.
    CrossEntropy { class_weights: Option<Vec<f64>> },
    /// Mean squared error against the severity score.
    MeanSquaredError,
}

/// Size parameters of one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Growth rate `k`.
    pub growth_rate: usize,
    /// SE-dense modules per dense block `L`.
    pub modules_per_block: usize,
    /// Number of dense blocks `B`; transitions sit between consecutive
    /// blocks.
    pub num_blocks: usize,
    /// Compression `theta` in `(0, 1]`.
    pub compression: f64,
    /// Squeeze-excitation reduction ratio `r`.
    pub se_ratio: usize,
    /// Input `(H, W, C)`.
    pub input: (usize, usize, usize),
    /// Number of severity stages `M`.
    pub num_classes: usize,
    pub head: HeadKind,
}

impl NetworkSpec {
    /// Full-scale configuration: k 18, L 16, B 5, theta 0.5, r 16, input
    /// 299x299x3.
    pub fn paper(head: HeadKind) -> Self {
        Self {
            growth_rate: 18,
            modules_per_block: 16,
            num_blocks: 5,
            compression: 0.5,
            se_ratio: 16,
            input: (299, 299, 3),
            num_classes: 5,
            head,
        }
    }

    /// Desk-scale configuration small enough for test-time training:
    /// k 6, L 2, B 2, theta 0.5, r 4, input 32x32x3.
    pub fn desk(head: HeadKind) -> Self {
        Self {
            growth_rate: 6,
            modules_per_block: 2,
            num_blocks: 2,
            compression: 0.5,
            se_ratio: 4,
            input: (32, 32, 3),
            num_classes: 5,
            head,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |reason: String| Err(NnError::InvalidSpec { reason });
        if self.growth_rate < 1 || self.modules_per_block < 1 || self.num_blocks < 1 {
            return bad(format!(
                "k, L and B must all be at least 1, got k={} L={} B={}",
                self.growth_rate, self.modules_per_block, self.num_blocks
            ));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!(
                "compression must lie in (0, 1], got {}",
                self.compression
            ));
        }
        if self.se_ratio < 1 {
            return bad("se_ratio must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            ));
        }
        if self.input.2 < 1 {
            return bad("input needs at least one channel".into());
        }
        if self.filters_per_module() < 1 {
            return bad(format!(
                "filters per module floor(2*k*theta) must be at least 1, \
                 got k={} theta={}",
                self.growth_rate, self.compression
            ));
        }
        let min = self.min_input_size();
        if self.input.0 < min || self.input.1 < min {
            return Err(NnError::InputTooSmall {
                h: self.input.0,
                w: self.input.1,
                halvings: self.num_blocks - 1,
                min,
            });
        }
        Ok(())
    }

    /// Filters added by each SE-dense module: `floor(2 * k * theta)`.
    pub fn filters_per_module(&self) -> usize {
        ((2 * self.growth_rate) as f64 * self.compression).floor() as usize
    }

    /// Stem channels: twice the growth rate.
    pub fn stem_channels(&self) -> usize {
        2 * self.growth_rate
    }

    /// Every transition halves the spatial size, and its pool needs at
    /// least 2x2 input, so `B - 1` halvings need `2^(B-1)` pixels per side.
    pub fn min_input_size(&self) -> usize {
        1usize << (self.num_blocks - 1)
    }

    /// Channel counts after the stem, then after every dense block and
    /// transition in order.
    pub fn channel_sequence(&self) -> Vec<usize> {
        let f = self.filters_per_module();
        let mut c = self.stem_channels();
        let mut seq = vec![c];
        for b in 0..self.num_blocks {
            c += self.modules_per_block * f;
            seq.push(c);
            if b + 1 < self.num_blocks {
                c = (c as f64 * self.compression).floor() as usize;
                seq.push(c);
            }
        }
        seq
    }

    /// Width of the pooled feature vector feeding the head (and the
    /// fusion MLP): channels after the last dense block.
    pub fn feature_dim(&self) -> usize {
        *self.channel_sequence().last().expect("B >= 1")
    }

    /// Head output width: one probability per class, or one score.
    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Classification => self.num_classes,
            HeadKind::Regression => 1,
        }
    }
}
