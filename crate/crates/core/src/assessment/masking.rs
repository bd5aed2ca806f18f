use rand::seq::SliceRandom;

use crate::error::{ApexError, Result};
use crate::model::ModelParams;
use crate::numerics::{rng, Real};

use super::{ActivationLedger, ModuleKind};

/// Zero the weights that carry the listed heads or channels.
///
/// MHA: the head's column block of `W_V` and row block of `W_O`.
/// FFN: column `c` of `W_G`, which silences the gated product.
pub fn mask_components<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
    kind: ModuleKind,
    indices: &[usize],
) -> Result<ModelParams<T>> {
    let cfg = &params.config;
    if layer >= cfg.n_layers {
        return Err(ApexError::Index(format!("layer {layer} out of {}", cfg.n_layers)));
    }
    let limit = match kind {
        ModuleKind::Mha => cfg.n_heads,
        ModuleKind::Ffn => cfg.d_ffn,
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= limit) {
        return Err(ApexError::Index(format!("{} component {bad} out of {limit}", kind.name())));
    }
    let mut out = params.clone();
    let l = &mut out.layers[layer];
    match kind {
        ModuleKind::Mha => {
            let dh = cfg.d_head();
            for &h in indices {
                for r in 0..cfg.d_model {
                    for c in h * dh..(h + 1) * dh {
                        l.wv.set(r, c, T::zero());
                        l.wo.set(c, r, T::zero());
                    }
                }
            }
        }
        ModuleKind::Ffn => {
            for &c in indices {
                for r in 0..cfg.d_model {
                    l.wg.set(r, c, T::zero());
                }
            }
        }
    }
    Ok(out)
}

/// Which activation tail `mask_selection` draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskWhich {
    Top,
    Min,
    Random,
}

impl MaskWhich {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(MaskWhich::Top),
            "min" => Ok(MaskWhich::Min),
            "random" => Ok(MaskWhich::Random),
            other => Err(ApexError::Config(format!("unknown mask selection {other:?}"))),
        }
    }
}

/// For every layer and module, the `floor(n * fraction)` components with the
/// highest (or lowest, or random) mean activation norm.
pub fn mask_selection(
    ledger: &ActivationLedger,
    which: MaskWhich,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(usize, ModuleKind, Vec<usize>)>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ApexError::Config(format!("mask fraction {fraction} outside [0, 1]")));
    }
    if ledger.samples_seen == 0 {
        return Err(ApexError::State("mask selection needs a populated ledger".into()));
    }
    let mut out = Vec::new();
    for layer in 0..ledger.n_layers() {
        for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
            let means = ledger.module(layer, kind).mean_norms();
            let count = (means.len() as f64 * fraction + 1e-9).floor() as usize;
            let mut order: Vec<usize> = (0..means.len()).collect();
            match which {
                MaskWhich::Top => order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b))),
                MaskWhich::Min => order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b))),
                MaskWhich::Random => {
                    order.shuffle(&mut rng::derive(seed, (layer as u64) * 2 + (kind == ModuleKind::Ffn) as u64))
                }
            }
            let mut picked = order[..count].to_vec();
            picked.sort_unstable();
            out.push((layer, kind, picked));
        }
    }
    Ok(out)
}
