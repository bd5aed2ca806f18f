use crate::assessment::Strategy;
use crate::error::{ApexError, Result};

/// Which coordinates train during a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    #[default]
    Full,
    /// Only the selected slices of the expanded matrices plus the operators.
    Partial,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Partial => "partial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "partial" => Ok(TrainMode::Partial),
            other => Err(ApexError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Stage learning-rate ratios, reused for the last stage when there are more stages.
pub const STAGE_LR_DECAY: [f64; 5] = [1.0, 0.4, 0.1, 0.05, 0.01];

/// Everything a staged run needs besides the model config and the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stages: usize,
    pub tokens_per_stage: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Selection proportions. Ignored when `expansion` is off.
    pub k_mha: f64,
    pub k_ffn: f64,
    /// Per-sample Top/Min proportions used when recording scores.
    pub vote_k_mha: f64,
    pub vote_k_ffn: f64,
    pub mode: TrainMode,
    pub strategy: Strategy,
    /// Learning rate of each stage.
    pub stage_lrs: Vec<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub act_regu_lambda: f64,
    pub expansion: bool,
    /// Steps between metric rows; 0 reports only at stage end.
    pub eval_interval: usize,
    /// Cap on evaluation windows.
    pub eval_windows: usize,
    /// Windows for pre-assessment.
    pub assess_windows: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            stages: 3,
            tokens_per_stage: 65_536,
            batch_size: 8,
            seq_len: 64,
            k_mha: 0.25,
            k_ffn: 0.25,
            vote_k_mha: 0.25,
            vote_k_ffn: 0.25,
            mode: TrainMode::Full,
            strategy: Strategy::Rank,
            stage_lrs: Self::decaying_lrs(3e-3, 3),
            weight_decay: 0.01,
            seed: 0,
            act_regu_lambda: 0.0,
            expansion: true,
            eval_interval: 0,
            eval_windows: 64,
            assess_windows: 32,
        }
    }
}

impl StagePlan {
    /// `base * STAGE_LR_DECAY[t]` for each stage `t`.
    pub fn decaying_lrs(base: f64, stages: usize) -> Vec<f64> {
        (0..stages).map(|t| base * STAGE_LR_DECAY[t.min(STAGE_LR_DECAY.len() - 1)]).collect()
    }

    /// Same proportion for selection and scoring.
    pub fn with_k(mut self, k_mha: f64, k_ffn: f64) -> Self {
        self.k_mha = k_mha;
        self.k_ffn = k_ffn;
        self.vote_k_mha = k_mha;
        self.vote_k_ffn = k_ffn;
        self
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn steps_per_stage(&self) -> usize {
        self.tokens_per_stage / self.tokens_per_step().max(1)
    }

    pub fn lr(&self, stage: usize) -> f64 {
        self.stage_lrs[stage.min(self.stage_lrs.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ApexError::Config(m));
        if self.stages == 0 {
            return bad("at least one stage is required".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if self.tokens_per_stage < self.tokens_per_step() {
            return bad(format!(
                "tokens_per_stage {} is less than one batch ({})",
                self.tokens_per_stage,
                self.tokens_per_step()
            ));
        }
        if self.stage_lrs.is_empty() || self.stage_lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad(format!("invalid stage learning rates {:?}", self.stage_lrs));
        }
        if !(self.act_regu_lambda >= 0.0 && self.act_regu_lambda.is_finite()) {
            return bad(format!("act_regu_lambda must be >= 0, got {}", self.act_regu_lambda));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.mode == TrainMode::Partial && !self.expansion {
            return bad("partial mode requires expansion".into());
        }
        if self.expansion {
            for (name, k) in [
                ("k_mha", self.k_mha),
                ("k_ffn", self.k_ffn),
                ("vote_k_mha", self.vote_k_mha),
                ("vote_k_ffn", self.vote_k_ffn),
            ] {
                if !(k > 0.0 && k <= 0.25) {
                    return bad(format!("{name} must lie in (0, 0.25], got {k}"));
                }
            }
        }
        Ok(())
    }
}
