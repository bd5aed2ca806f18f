use rand::seq::SliceRandom;

use crate::error::{ApexError, Result};
use crate::numerics::rng;

use super::{component_count, ActivationLedger, ModuleKind};

/// How the P/N sets are picked from a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Top-k / Min-k of the accumulated vote scores.
    #[default]
    Rank,
    /// Top-k / Min-k of the mean activation norms.
    Avg,
    /// Disjoint uniform draws, ignoring activations.
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rank => "rank",
            Strategy::Avg => "avg",
            Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Strategy::Rank),
            "avg" => Ok(Strategy::Avg),
            "random" => Ok(Strategy::Random),
            other => Err(ApexError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Indices of the `k` largest and `k` smallest values, ties to the lower index.
///
/// With `disjoint`, the Min-k set skips members of the Top-k set (requires
/// `n >= 2k`); otherwise both are taken independently, so an all-equal
/// vector yields identical sets. Both are returned sorted ascending.
pub fn rank_split(values: &[f64], k: usize, disjoint: bool) -> (Vec<usize>, Vec<usize>) {
    let n = values.len();
    let k = k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order[..k].to_vec();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let skip = disjoint && n >= 2 * k;
    let mut min: Vec<usize> = order.into_iter().filter(|i| !skip || !top.contains(i)).take(k).collect();
    top.sort_unstable();
    min.sort_unstable();
    (top, min)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerSets {
    pub mha_pos: Vec<usize>,
    pub mha_neg: Vec<usize>,
    pub ffn_pos: Vec<usize>,
    pub ffn_neg: Vec<usize>,
}

impl LayerSets {
    pub fn get(&self, kind: ModuleKind) -> (&[usize], &[usize]) {
        match kind {
            ModuleKind::Mha => (&self.mha_pos, &self.mha_neg),
            ModuleKind::Ffn => (&self.ffn_pos, &self.ffn_neg),
        }
    }
}

/// Advantageous (`pos`) and disadvantageous (`neg`) components per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSets {
    pub k_mha: f64,
    pub k_ffn: f64,
    pub layers: Vec<LayerSets>,
}

impl AdvantageSets {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
                let (p, n) = l.get(kind);
                if p.len() != n.len() {
                    return Err(ApexError::Invariant(format!("layer {i} {}: |P| != |N|", kind.name())));
                }
                if p.iter().any(|x| n.contains(x)) {
                    return Err(ApexError::Invariant(format!("layer {i} {}: P and N overlap", kind.name())));
                }
                if p.windows(2).any(|w| w[0] >= w[1]) || n.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(ApexError::Invariant(format!("layer {i} {}: sets not sorted", kind.name())));
                }
            }
        }
        Ok(())
    }
}

fn pick(values: Option<Vec<f64>>, n: usize, k: usize, seed: u64, stream: u64) -> (Vec<usize>, Vec<usize>) {
    match values {
        Some(v) => rank_split(&v, k, true),
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::derive(seed, stream));
            let mut p = idx[..k].to_vec();
            let mut q = idx[k..2 * k].to_vec();
            p.sort_unstable();
            q.sort_unstable();
            (p, q)
        }
    }
}

pub fn select_sets(
    ledger: &ActivationLedger,
    k_mha: f64,
    k_ffn: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<AdvantageSets> {
    if strategy != Strategy::Random && ledger.samples_seen == 0 {
        return Err(ApexError::State(format!("{} selection needs a populated ledger", strategy.name())));
    }
    let mut layers = Vec::with_capacity(ledger.n_layers());
    for layer in 0..ledger.n_layers() {
        let mut sets = LayerSets::default();
        for (kind, prop) in [(ModuleKind::Mha, k_mha), (ModuleKind::Ffn, k_ffn)] {
            let stats = ledger.module(layer, kind);
            let n = stats.len();
            let k = component_count(n, prop)?;
            if 2 * k > n {
                return Err(ApexError::Config(format!(
                    "{} has {n} components, too few for disjoint sets of {k}",
                    kind.name()
                )));
            }
            let values = match strategy {
                Strategy::Rank => Some(stats.scores.iter().map(|&s| s as f64).collect()),
                Strategy::Avg => Some(stats.mean_norms()),
                Strategy::Random => None,
            };
            let stream = (layer as u64) * 2 + (kind == ModuleKind::Ffn) as u64;
            let (p, q) = pick(values, n, k, seed, stream);
            match kind {
                ModuleKind::Mha => (sets.mha_pos, sets.mha_neg) = (p, q),
                ModuleKind::Ffn => (sets.ffn_pos, sets.ffn_neg) = (p, q),
            }
        }
        layers.push(sets);
    }
    let sets = AdvantageSets { k_mha, k_ffn, layers };
    sets.validate()?;
    Ok(sets)
}
