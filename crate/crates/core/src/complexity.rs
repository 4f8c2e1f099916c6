//! Closed-form FLOP counts for the scan, the nested block and a windowed
//! self-attention block, plus measured counts over an executed forward pass.
//!
//! Symbols: `n` sentences (tokens), `m` words per sentence, `c` word dim,
//! `d` sentence dim, `N` state size, `E` expanded dim.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arch::MimModel;
use crate::error::Result;
use crate::graph::{FlopKind, Graph, Scope};
use crate::params::{Ctx, Mode, ParamStore};
use crate::ssm::DEFAULT_STATE_DIM;
use crate::tensor::Tensor;

/// `3nEN + nEN`: three state-sized projection equivalents plus the scan.
pub fn ssm_flops_general(n: u64, e: u64, state: u64) -> u64 {
    3 * n * e * state + n * e * state
}

/// Scan cost with `E = 2d` and `N = 16`, i.e. `128 n d`.
pub fn ssm_flops(n: u64, d: u64) -> u64 {
    ssm_flops_general(n, 2 * d, DEFAULT_STATE_DIM as u64)
}

/// `128mnc + 128nd + 3mnc^2 + 3nd^2`; `m = 0` drops the word-level terms.
pub fn mim_block_flops(n: u64, m: u64, c: u64, d: u64) -> u64 {
    128 * m * n * c + 128 * n * d + 3 * m * n * c * c + 3 * n * d * d
}

/// `2nd(6d + n)`: self-attention block over `n` tokens of width `d`.
pub fn transformer_flops(n: u64, d: u64) -> u64 {
    2 * n * d * (6 * d + n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub scope: Scope,
    pub kind: FlopKind,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Stage-1 quantities the closed forms are evaluated at.
    pub n: u64,
    pub m: u64,
    pub c: u64,
    pub d: u64,
    pub state_dim: u64,
    pub expanded_dim: u64,
    pub analytic_ssm: u64,
    pub analytic_mim_block: u64,
    pub analytic_transformer_block: u64,
    pub measured_total: u64,
    pub measured_encoder: u64,
    pub measured_ssm_core: u64,
    pub breakdown: Vec<FlopEntry>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

/// Runs one inference pass on a zero batch and tallies executed FLOPs.
pub fn count_flops(model: &MimModel, store: &ParamStore, batch: usize) -> Result<FlopsReport> {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
    let x = ctx.g.constant(Tensor::zeros([batch.max(1), cfg.in_channels, cfg.height, cfg.width]));
    model.forward(&mut ctx, x)?;
    let counter = ctx.g.flops();

    let (hs, ws) = cfg.sentence_grid(0);
    let n = (hs * ws) as u64;
    let m = if cfg.inner_enabled { cfg.words_per_sentence() as u64 } else { 0 };
    let (c, d) = (cfg.word_dim as u64, cfg.sentence_dim as u64);
    Ok(FlopsReport {
        n,
        m,
        c,
        d,
        state_dim: cfg.d_state as u64,
        expanded_dim: 2 * d,
        analytic_ssm: ssm_flops(n, d),
        analytic_mim_block: mim_block_flops(n, m, c, d),
        analytic_transformer_block: transformer_flops(n, d),
        measured_total: counter.total(),
        measured_encoder: counter.by_scope(Scope::Encoder),
        measured_ssm_core: counter.by_kind(FlopKind::Ssm),
        breakdown: counter.entries().into_iter().map(|(scope, kind, flops)| FlopEntry { scope, kind, flops }).collect(),
        batch: batch.max(1),
        height: cfg.height,
        width: cfg.width,
    })
}
