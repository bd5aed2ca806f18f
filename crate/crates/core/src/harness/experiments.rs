//! Evaluation routines shared by the CLI and the test suites.

use crate::assessment::{activation_std_report, mask_components, mask_selection, MaskWhich, ModuleKind, ModuleStd};
use crate::error::Result;
use crate::model::{evaluate_loss, ModelParams};
use crate::numerics::Real;
use crate::staging::pre_assess;

/// Outcome of masking one activation tail.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEval {
    pub which: MaskWhich,
    pub fraction: f64,
    pub masked: Vec<(usize, ModuleKind, Vec<usize>)>,
    pub base_loss: f64,
    pub masked_loss: f64,
}

impl MaskEval {
    pub fn delta(&self) -> f64 {
        self.masked_loss - self.base_loss
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().map(|(_, _, v)| v.len()).sum()
    }
}

fn inputs<'a>(windows: &[&'a [usize]]) -> Vec<&'a [usize]> {
    windows.iter().map(|w| &w[..w.len() - 1]).collect()
}

/// Rank components by mean activation norm on `rank_windows`, zero the
/// chosen tail in every layer and module, and compare eval losses.
pub fn mask_eval<T: Real>(
    params: &ModelParams<T>,
    rank_windows: &[&[usize]],
    eval_windows: &[&[usize]],
    which: MaskWhich,
    fraction: f64,
    seed: u64,
    batch_size: usize,
) -> Result<MaskEval> {
    let ledger = pre_assess(params, &inputs(rank_windows), 0.25, 0.25, batch_size)?;
    let masked = mask_selection(&ledger, which, fraction, seed)?;
    let mut p = params.clone();
    for (layer, kind, idx) in &masked {
        p = mask_components(&p, *layer, *kind, idx)?;
    }
    Ok(MaskEval {
        which,
        fraction,
        base_loss: evaluate_loss(params, None, eval_windows, batch_size)?,
        masked_loss: evaluate_loss(&p, None, eval_windows, batch_size)?,
        masked,
    })
}

/// Per-module std of mean component norms over `windows`.
pub fn probe_stats<T: Real>(params: &ModelParams<T>, windows: &[&[usize]], batch_size: usize) -> Result<Vec<ModuleStd>> {
    let ledger = pre_assess(params, &inputs(windows), 0.25, 0.25, batch_size)?;
    activation_std_report(&ledger)
}
