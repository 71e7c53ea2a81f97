use std::collections::BTreeSet;

use crate::attention::AttentionBlockConfig;
use crate::context::Variant;
use crate::error::{config_err, BstError, Result};
use crate::ssm::{ssm_width, KernelFamily};

/// Reference layers that replace the block-state layers of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    /// Block attention with a one-block cache and no long-range context.
    Slide,
    /// Gated recurrent block state, strictly sequential over blocks.
    BrectLike,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Slide => "slide",
            Self::BrectLike => "brect_like",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = BstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slide" => Ok(Self::Slide),
            "brect" | "brect_like" => Ok(Self::BrectLike),
            _ => Err(config_err(format!("unknown baseline `{s}`"))),
        }
    }
}

/// Kind of an individual layer in a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    BlockState,
    Slide,
    BrectLike,
}

/// How the block sublayer is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BlockExec {
    /// Independent batched passes over groups of about
    /// [`PARALLEL_GROUP_TOKENS`] tokens.
    #[default]
    Parallel,
    /// Batched passes over groups of the given number of blocks.
    Grouped(usize),
    /// One block at a time, in order.
    Sequential,
}

/// Token count per group for [`BlockExec::Parallel`]; keeps a group's
/// activations cache-resident at typical widths.
pub const PARALLEL_GROUP_TOKENS: usize = 1024;

impl BlockExec {
    /// Blocks per batched pass for a window of `w`, or `None` for sequential.
    pub fn group_blocks(self, w: usize) -> Option<usize> {
        match self {
            BlockExec::Parallel => Some((PARALLEL_GROUP_TOKENS / w.max(1)).max(1)),
            BlockExec::Grouped(g) => Some(g.max(1)),
            BlockExec::Sequential => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// 1-based indices of the layers that carry an SSM (or the baseline that
    /// replaces it).
    pub bst_layers: BTreeSet<usize>,
    pub variant: Variant,
    pub kernel_family: KernelFamily,
    /// `None` builds the block-state model itself.
    pub baseline: Option<BaselineKind>,
    pub window: usize,
    /// Context states per block for the multi-filter variant.
    pub mf_states: usize,
    pub state_size: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub ssm_downsample: bool,
    pub ssm_skip: bool,
    pub prev_block_cache: bool,
    pub context_ids: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            bst_layers: [1, 3].into_iter().collect(),
            variant: Variant::SingleHead,
            kernel_family: KernelFamily::Structured,
            baseline: None,
            window: 64,
            mf_states: 32,
            state_size: 16,
            heads: 8,
            d_model: 128,
            vocab_size: 256,
            seed: 0,
            ssm_downsample: true,
            ssm_skip: false,
            prev_block_cache: true,
            context_ids: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(config_err("a model needs at least one layer"));
        }
        if let Some(&bad) = self.bst_layers.iter().find(|&&i| i == 0 || i > self.num_layers) {
            return Err(config_err(format!("layer index {bad} outside 1..={}", self.num_layers)));
        }
        if self.vocab_size == 0 || self.state_size == 0 || self.mf_states == 0 {
            return Err(config_err("vocabulary, state size and filter count must be positive"));
        }
        self.attention()?.validate()?;
        ssm_width(self.d_model, self.variant, self.ssm_downsample)?;
        Ok(())
    }

    pub fn attention(&self) -> Result<AttentionBlockConfig> {
        let mut a = AttentionBlockConfig::new(self.d_model, self.heads, self.window)?;
        a.use_prev_block_cache = self.prev_block_cache;
        Ok(a)
    }

    pub fn ssm_width(&self) -> Result<usize> {
        ssm_width(self.d_model, self.variant, self.ssm_downsample)
    }

    /// SSM output channels: 1 (SH), H (MH) or S (MF).
    pub fn ssm_channels(&self) -> usize {
        match self.variant {
            Variant::SingleHead => 1,
            Variant::MultiHead => self.heads,
            Variant::MultiFilter => self.mf_states,
        }
    }

    pub fn layer_kind(&self, index: usize) -> LayerKind {
        if !self.bst_layers.contains(&index) {
            return LayerKind::Slide;
        }
        match self.baseline {
            None => LayerKind::BlockState,
            Some(BaselineKind::Slide) => LayerKind::Slide,
            Some(BaselineKind::BrectLike) => LayerKind::BrectLike,
        }
    }

    /// Short label such as `BST:SH:structured` or `slide`.
    pub fn label(&self) -> String {
        match self.baseline {
            None => format!("BST:{}:{}", self.variant, self.kernel_family.name()),
            Some(b) => b.name().to_string(),
        }
    }
}
