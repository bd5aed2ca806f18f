use crate::error::{ApexError, Result};
use crate::model::{ForwardTrace, ModelConfig};

use super::rank_split;

/// Which half of a transformer layer a component lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Mha,
    Ffn,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Mha => "mha",
            ModuleKind::Ffn => "ffn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mha" => Ok(ModuleKind::Mha),
            "ffn" => Ok(ModuleKind::Ffn),
            _ => Err(ApexError::Key(format!("unknown module {s:?}"))),
        }
    }
}

/// `floor(n * k)` clamped to at least one component.
pub fn component_count(n_components: usize, k: f64) -> Result<usize> {
    if !(k > 0.0 && k <= 0.25) {
        return Err(ApexError::Config(format!("proportion {k} outside (0, 0.25]")));
    }
    // The tiny offset keeps values like 0.29 * 100 from flooring to 28.
    Ok(((n_components as f64 * k + 1e-9).floor() as usize).max(1))
}

/// Streaming statistics for one module of one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModuleStats {
    pub scores: Vec<i64>,
    pub norm_sum: Vec<f64>,
    pub samples: u64,
}

impl ModuleStats {
    pub fn new(n: usize) -> Self {
        Self { scores: vec![0; n], norm_sum: vec![0.0; n], samples: 0 }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean_norms(&self) -> Vec<f64> {
        let n = self.samples.max(1) as f64;
        self.norm_sum.iter().map(|s| s / n).collect()
    }

    fn reset(&mut self) {
        self.scores.iter_mut().for_each(|s| *s = 0);
        self.norm_sum.iter_mut().for_each(|s| *s = 0.0);
        self.samples = 0;
    }
}

/// Apply one sample's norms to `stats`: +1 for Top-k, -1 for Min-k.
pub fn update_scores(stats: &mut ModuleStats, norms: &[f64], k: f64) -> Result<()> {
    if norms.len() != stats.len() {
        return Err(ApexError::Shape(format!(
            "{} norms for {} components",
            norms.len(),
            stats.len()
        )));
    }
    let count = component_count(norms.len(), k)?;
    let (top, min) = rank_split(norms, count, false);
    for i in top {
        stats.scores[i] += 1;
    }
    for i in min {
        stats.scores[i] -= 1;
    }
    for (s, &v) in stats.norm_sum.iter_mut().zip(norms) {
        *s += v;
    }
    stats.samples += 1;
    Ok(())
}

/// Per-layer score and norm accumulators for MHA heads and FFN channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationLedger {
    /// Per-sample Top-k/Min-k proportion for heads.
    pub k_mha: f64,
    /// Per-sample Top-k/Min-k proportion for channels.
    pub k_ffn: f64,
    pub mha: Vec<ModuleStats>,
    pub ffn: Vec<ModuleStats>,
    pub samples_seen: u64,
}

impl ActivationLedger {
    pub fn new(cfg: &ModelConfig, k_mha: f64, k_ffn: f64) -> Result<Self> {
        component_count(cfg.n_heads, k_mha)?;
        component_count(cfg.d_ffn, k_ffn)?;
        Ok(Self {
            k_mha,
            k_ffn,
            mha: (0..cfg.n_layers).map(|_| ModuleStats::new(cfg.n_heads)).collect(),
            ffn: (0..cfg.n_layers).map(|_| ModuleStats::new(cfg.d_ffn)).collect(),
            samples_seen: 0,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.mha.len()
    }

    pub fn module(&self, layer: usize, kind: ModuleKind) -> &ModuleStats {
        match kind {
            ModuleKind::Mha => &self.mha[layer],
            ModuleKind::Ffn => &self.ffn[layer],
        }
    }

    pub fn module_mut(&mut self, layer: usize, kind: ModuleKind) -> &mut ModuleStats {
        match kind {
            ModuleKind::Mha => &mut self.mha[layer],
            ModuleKind::Ffn => &mut self.ffn[layer],
        }
    }

    pub fn reset(&mut self) {
        self.mha.iter_mut().chain(self.ffn.iter_mut()).for_each(ModuleStats::reset);
        self.samples_seen = 0;
    }

    /// Fold every sample of a probed forward pass into the ledger.
    pub fn record(&mut self, trace: &ForwardTrace) -> Result<()> {
        if trace.mha_head_norms.len() != self.n_layers() || trace.ffn_channel_norms.len() != self.n_layers() {
            return Err(ApexError::Shape("trace layer count does not match ledger".into()));
        }
        let samples = trace.mha_head_norms[0].dims()[0];
        for s in 0..samples {
            for layer in 0..self.n_layers() {
                let h = &trace.mha_head_norms[layer];
                let f = &trace.ffn_channel_norms[layer];
                let hw = h.last_dim();
                let fw = f.last_dim();
                update_scores(&mut self.mha[layer], &h.data()[s * hw..(s + 1) * hw], self.k_mha)?;
                update_scores(&mut self.ffn[layer], &f.data()[s * fw..(s + 1) * fw], self.k_ffn)?;
            }
            self.samples_seen += 1;
        }
        Ok(())
    }

    /// One row per component, MHA before FFN within each layer.
    pub fn component_rows(&self) -> Vec<ComponentRow> {
        let mut rows = Vec::new();
        for layer in 0..self.n_layers() {
            for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
                let m = self.module(layer, kind);
                for (component, (mean_norm, &score)) in m.mean_norms().into_iter().zip(&m.scores).enumerate() {
                    rows.push(ComponentRow { layer, kind, component, mean_norm, score });
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRow {
    pub layer: usize,
    pub kind: ModuleKind,
    pub component: usize,
    pub mean_norm: f64,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleStd {
    pub layer: usize,
    pub kind: ModuleKind,
    pub std: f64,
}

/// Population std across components of each module's mean activation.
pub fn activation_std_report(ledger: &ActivationLedger) -> Result<Vec<ModuleStd>> {
    if ledger.samples_seen == 0 {
        return Err(ApexError::State("ledger has seen no samples".into()));
    }
    let mut out = Vec::new();
    for layer in 0..ledger.n_layers() {
        for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
            let means = ledger.module(layer, kind).mean_norms();
            let n = means.len() as f64;
            let mu = means.iter().sum::<f64>() / n;
            let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n;
            out.push(ModuleStd { layer, kind, std: var.sqrt() });
        }
    }
    Ok(out)
}
