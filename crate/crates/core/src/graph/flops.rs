use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Operation class a FLOP was spent on.
///
/// Dense ops count 2 per multiply-accumulate. Normalizations, activations and
/// resampling count 5 per element. Elementwise arithmetic counts 1 per
/// element. The state space core counts one per state element for each of
/// the four per-step updates (decay, input injection, recurrence, readout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopKind {
    Conv,
    Linear,
    Matmul,
    Ssm,
    NormAct,
    Elementwise,
    Movement,
}

/// Network region a FLOP is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Unscoped,
    Stem,
    Encoder,
    Upsample,
    Decoder,
    Head,
    Loss,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: BTreeMap<(Scope, FlopKind), u64>,
}

impl FlopCounter {
    pub(crate) fn add(&mut self, scope: Scope, kind: FlopKind, n: u64) {
        if n > 0 {
            *self.counts.entry((scope, kind)).or_insert(0) += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn by_scope(&self, scope: Scope) -> u64 {
        self.counts.iter().filter(|((s, _), _)| *s == scope).map(|(_, n)| n).sum()
    }

    pub fn by_kind(&self, kind: FlopKind) -> u64 {
        self.counts.iter().filter(|((_, k), _)| *k == kind).map(|(_, n)| n).sum()
    }

    pub fn get(&self, scope: Scope, kind: FlopKind) -> u64 {
        self.counts.get(&(scope, kind)).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> Vec<(Scope, FlopKind, u64)> {
        self.counts.iter().map(|(&(s, k), &n)| (s, k, n)).collect()
    }
}
