use crate::error::{ApexError, Result};
use crate::model::{MatrixKind, ModelConfig, ModelParams};
use crate::numerics::{Real, Tensor};

use super::svd_small;

/// `#{sigma_i >= eps_rel * sigma_1}`; zero for an all-zero spectrum.
pub fn effective_rank_of(singular_values: &[f64], eps_rel: f64) -> usize {
    let top = singular_values.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s >= eps_rel * top).count()
}

pub fn effective_rank(w: &Tensor<f64>, eps_rel: f64) -> Result<usize> {
    Ok(effective_rank_of(&svd_small(w)?, eps_rel))
}

/// Spectrum of one matrix at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub checkpoint: String,
    pub layer: usize,
    pub matrix: String,
    pub singular_values: Vec<f64>,
    pub eps_rel: f64,
    pub eff_rank: usize,
}

impl SpectrumReport {
    pub const CSV_HEADER: &'static str = "checkpoint,layer,matrix,sigma_max,eff_rank,eps_rel";

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.9e},{},{}",
            self.checkpoint,
            self.layer,
            self.matrix,
            self.sigma_max(),
            self.eff_rank,
            self.eps_rel
        )
    }
}

pub fn spectrum(checkpoint: &str, layer: usize, matrix: &str, w: &Tensor<f64>, eps_rel: f64) -> Result<SpectrumReport> {
    let singular_values = svd_small(w)?;
    let eff_rank = effective_rank_of(&singular_values, eps_rel);
    Ok(SpectrumReport {
        checkpoint: checkpoint.to_string(),
        layer,
        matrix: format!("W_{matrix}"),
        singular_values,
        eps_rel,
        eff_rank,
    })
}

/// `W_V, W_O, W_U, W_G, W_D` of every layer.
pub fn expanded_targets(cfg: &ModelConfig) -> Vec<(usize, MatrixKind)> {
    (0..cfg.n_layers)
        .flat_map(|l| {
            [MatrixKind::V, MatrixKind::O, MatrixKind::U, MatrixKind::G, MatrixKind::D].map(move |k| (l, k))
        })
        .collect()
}

/// One report per checkpoint and target matrix, checkpoint-major.
pub fn rank_report<T: Real>(
    checkpoints: &[(String, &ModelParams<T>)],
    targets: &[(usize, MatrixKind)],
    eps_rel: f64,
) -> Result<Vec<SpectrumReport>> {
    if checkpoints.is_empty() {
        return Err(ApexError::Data("rank report needs at least one checkpoint".into()));
    }
    let mut out = Vec::with_capacity(checkpoints.len() * targets.len());
    for (name, params) in checkpoints {
        for &(layer, kind) in targets {
            let w = params
                .matrix(layer, kind)
                .map_err(|_| ApexError::Key(format!("{name}: no matrix layer{layer}.W_{}", kind.letter())))?;
            out.push(spectrum(name, layer, kind.letter(), &w.cast::<f64>(), eps_rel)?);
        }
    }
    Ok(out)
}
