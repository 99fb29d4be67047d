//! Closed-form FLOPs of one flow-transformer block.
//!
//! Every component has a term-wise form (one value per matmul, softmax, or
//! activation) and a collapsed polynomial. Both use exact `u128` arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlopsError {
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    HeadsDoNotDivide { d_model: u64, heads: u64 },
    #[error("{0} must be at least 1")]
    ZeroField(&'static str),
}

impl FlopsError {
    pub fn class(&self) -> &'static str {
        match self {
            FlopsError::HeadsDoNotDivide { .. } => "HeadsDoNotDivide",
            FlopsError::ZeroField(_) => "ZeroField",
        }
    }
}

/// MLP hidden width ratio.
pub const MLP_RATIO: u128 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub batch: u64,
    pub tokens: u64,
    pub d_model: u64,
    pub heads: u64,
    pub cond_tokens: u64,
    pub d_cond: u64,
    pub layers: u64,
}

impl Default for BlockDims {
    fn default() -> Self {
        BlockDims { batch: 1, tokens: 4096, d_model: 1024, heads: 16, cond_tokens: 1374, d_cond: 1024, layers: 24 }
    }
}

impl BlockDims {
    pub fn validate(&self) -> Result<(), FlopsError> {
        for (v, name) in [
            (self.batch, "batch"),
            (self.d_model, "d_model"),
            (self.heads, "heads"),
            (self.cond_tokens, "cond_tokens"),
            (self.d_cond, "d_cond"),
            (self.layers, "layers"),
        ] {
            if v == 0 {
                return Err(FlopsError::ZeroField(name));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(FlopsError::HeadsDoNotDivide { d_model: self.d_model, heads: self.heads });
        }
        Ok(())
    }

    pub fn with_tokens(self, tokens: u64) -> Self {
        BlockDims { tokens, ..self }
    }

    fn vars(&self) -> (u128, u128, u128, u128, u128, u128) {
        (
            self.batch as u128,
            self.tokens as u128,
            self.d_model as u128,
            self.heads as u128,
            self.cond_tokens as u128,
            self.d_cond as u128,
        )
    }
}

/// Individual operations of a component, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub terms: Vec<(String, u128)>,
}

impl TermBreakdown {
    fn of(terms: &[(&str, u128)]) -> Self {
        TermBreakdown { terms: terms.iter().map(|(n, v)| (n.to_string(), *v)).collect() }
    }

    pub fn total(&self) -> u128 {
        self.terms.iter().map(|(_, v)| v).sum()
    }
}

pub fn modulation_terms(d: &BlockDims) -> TermBreakdown {
    let (b, _, dm, ..) = d.vars();
    TermBreakdown::of(&[("activation", 5 * b * dm), ("linear", 2 * b * dm * (6 * dm))])
}

pub fn flops_modulation(d: &BlockDims) -> u128 {
    let (b, _, dm, ..) = d.vars();
    5 * b * dm + 12 * b * dm * dm
}

pub fn layernorm_terms(d: &BlockDims) -> TermBreakdown {
    let (b, n, dm, ..) = d.vars();
    TermBreakdown::of(&[("layernorm", 7 * b * n * dm)])
}

pub fn flops_layernorm(d: &BlockDims) -> u128 {
    let (b, n, dm, ..) = d.vars();
    7 * b * n * dm
}

pub fn self_attention_terms(d: &BlockDims) -> TermBreakdown {
    let (b, n, dm, h, ..) = d.vars();
    let head = dm / h;
    TermBreakdown::of(&[
        ("qkv", 2 * b * n * dm * (3 * dm)),
        ("qk", 2 * b * h * n * n * head),
        ("softmax", 5 * b * h * n * n),
        ("attn_v", 2 * b * h * n * n * head),
        ("out_proj", 2 * b * n * dm * dm),
    ])
}

pub fn flops_self_attention(d: &BlockDims) -> u128 {
    let (b, n, dm, h, ..) = d.vars();
    8 * b * n * dm * dm + 4 * b * n * n * dm + 5 * b * h * n * n
}

pub fn cross_attention_terms(d: &BlockDims) -> TermBreakdown {
    let (b, n, dm, h, nc, dc) = d.vars();
    let head = dm / h;
    TermBreakdown::of(&[
        ("q", 2 * b * n * dm * dm),
        ("kv", 2 * b * nc * dc * (2 * dm)),
        ("qk", 2 * b * h * n * nc * head),
        ("softmax", 5 * b * h * n * nc),
        ("attn_v", 2 * b * h * n * nc * head),
        ("out_proj", 2 * b * n * dm * dm),
    ])
}

/// Collapsed cross-attention cost. The key/value projection reads the
/// condition width, so that term is `4·B·N_cond·d_cond·d_model`.
pub fn flops_cross_attention(d: &BlockDims) -> u128 {
    let (b, n, dm, h, nc, dc) = d.vars();
    4 * b * n * dm * dm + 4 * b * nc * dc * dm + 4 * b * n * nc * dm + 5 * b * h * n * nc
}

pub fn mlp_terms(d: &BlockDims) -> TermBreakdown {
    let (b, n, dm, ..) = d.vars();
    let hidden = MLP_RATIO * dm;
    TermBreakdown::of(&[
        ("fc1", 2 * b * n * dm * hidden),
        ("activation", 5 * b * n * hidden),
        ("fc2", 2 * b * n * hidden * dm),
    ])
}

pub fn flops_mlp(d: &BlockDims) -> u128 {
    let (b, n, dm, ..) = d.vars();
    16 * b * n * dm * dm + 20 * b * n * dm
}

/// Number of LayerNorms per block.
pub const LAYERNORMS_PER_BLOCK: u128 = 3;

pub fn flops_block(d: &BlockDims) -> u128 {
    flops_modulation(d)
        + LAYERNORMS_PER_BLOCK * flops_layernorm(d)
        + flops_self_attention(d)
        + flops_cross_attention(d)
        + flops_mlp(d)
}

/// Same as [`flops_block`] but summed from the term breakdowns.
pub fn flops_block_termwise(d: &BlockDims) -> u128 {
    modulation_terms(d).total()
        + LAYERNORMS_PER_BLOCK * layernorm_terms(d).total()
        + self_attention_terms(d).total()
        + cross_attention_terms(d).total()
        + mlp_terms(d).total()
}

/// Cost of one sampler step: `L` blocks at `tokens` active tokens, times the
/// guidance multiplier.
pub fn flops_step(d: &BlockDims, tokens: u64, guidance_factor: u32) -> u128 {
    d.layers as u128 * flops_block(&d.with_tokens(tokens)) * guidance_factor as u128
}

/// Per-step inputs to [`flops_run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCost {
    pub active_tokens: u64,
    pub guidance_factor: u32,
}

pub fn flops_run(d: &BlockDims, steps: &[StepCost]) -> u128 {
    steps.iter().map(|s| flops_step(d, s.active_tokens, s.guidance_factor)).sum()
}

/// Per-component report for one block at a fixed token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub dims: BlockDims,
    pub modulation: u128,
    pub layernorm: u128,
    pub layernorms_per_block: u128,
    pub self_attention: u128,
    pub cross_attention: u128,
    pub mlp: u128,
    pub block: u128,
    pub block_termwise: u128,
    pub all_layers: u128,
}

impl FlopsReport {
    pub fn new(d: &BlockDims) -> Self {
        FlopsReport {
            dims: *d,
            modulation: flops_modulation(d),
            layernorm: flops_layernorm(d),
            layernorms_per_block: LAYERNORMS_PER_BLOCK,
            self_attention: flops_self_attention(d),
            cross_attention: flops_cross_attention(d),
            mlp: flops_mlp(d),
            block: flops_block(d),
            block_termwise: flops_block_termwise(d),
            all_layers: d.layers as u128 * flops_block(d),
        }
    }
}
