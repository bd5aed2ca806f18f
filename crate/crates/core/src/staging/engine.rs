use std::time::Instant;

use crate::assessment::{select_sets, ActivationLedger, AdvantageSets};
use crate::error::{ApexError, Result};
use crate::expansion::{attach_operators, OperatorBundle};
use crate::harness::corpus::{split_train_eval, windows, BatchStream};
use crate::model::{evaluate_loss, forward_batch, forward_graph, ModelConfig, ModelParams, Overlay, ParamVars};
use crate::numerics::{Real, Tape};

use super::{
    act_regu_penalty, build_trainability_mask, AdamWConfig, OptimizerState, StagePlan, TrainMode, TrainabilityMask,
};

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    pub step: usize,
    pub tokens: usize,
    pub train_loss: f64,
    pub eval_ppl: f64,
    pub wall_ms: f64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "stage,step,tokens,train_loss,eval_ppl,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.1}",
            self.stage, self.step, self.tokens, self.train_loss, self.eval_ppl, self.wall_ms
        )
    }
}

/// What happened during one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub lr: f64,
    pub steps: usize,
    pub sets: Option<AdvantageSets>,
    pub operators: usize,
    pub operator_params: usize,
    pub trainable_fraction: f64,
    pub trainable_count: usize,
    /// Eval loss with the fresh operators absent / present.
    pub eval_loss_before_attach: Option<f64>,
    pub eval_loss_after_attach: Option<f64>,
    /// Eval loss with the trained operators live / fused.
    pub eval_loss_before_fusion: Option<f64>,
    pub eval_loss_after_fusion: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub rows: Vec<MetricRow>,
    pub eval_ppl: f64,
    pub wall_ms: f64,
}

/// Forward-only probed pass over `samples` (equal-length token sequences).
///
/// Scores use the per-sample proportions `vote_k_mha` / `vote_k_ffn`.
pub fn pre_assess<T: Real>(
    params: &ModelParams<T>,
    samples: &[&[usize]],
    vote_k_mha: f64,
    vote_k_ffn: f64,
    batch_size: usize,
) -> Result<ActivationLedger> {
    if samples.is_empty() {
        return Err(ApexError::Data("pre-assessment needs at least one sample".into()));
    }
    let mut ledger = ActivationLedger::new(&params.config, vote_k_mha, vote_k_ffn)?;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (_, trace) = forward_batch(params, None, chunk, true)?;
        ledger.record(&trace.expect("probed pass yields a trace"))?;
    }
    Ok(ledger)
}

/// Stateful driver of the staged loop over a fixed train/eval split.
pub struct Trainer<'a> {
    pub plan: StagePlan,
    pub params: ModelParams<f32>,
    pub bundle: OperatorBundle<f32>,
    /// Ledger the next selection reads.
    pub ledger: Option<ActivationLedger>,
    /// Ledger being recorded during the current stage.
    pub recording: Option<ActivationLedger>,
    pub optimizer: OptimizerState,
    pub mask: TrainabilityMask,
    pub stage: usize,
    pub global_step: usize,
    pub tokens_seen: usize,
    stream: BatchStream<'a>,
    eval: Vec<&'a [usize]>,
    assess: Vec<&'a [usize]>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ModelConfig, plan: StagePlan, train: &'a [usize], eval: &'a [usize]) -> Result<Self> {
        Self::with_params(ModelParams::init(cfg)?, plan, train, eval)
    }

    pub fn with_params(
        params: ModelParams<f32>,
        plan: StagePlan,
        train: &'a [usize],
        eval: &'a [usize],
    ) -> Result<Self> {
        plan.validate()?;
        if plan.seq_len > params.config.max_seq_len {
            return Err(ApexError::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                plan.seq_len, params.config.max_seq_len
            )));
        }
        let stream = BatchStream::new(train, plan.seq_len, plan.batch_size, plan.seed, true)?;
        let mut eval = windows(eval, plan.seq_len)?;
        eval.truncate(plan.eval_windows.max(1));
        let mut assess = windows(train, plan.seq_len)?;
        assess.truncate(plan.assess_windows.max(1));
        let optimizer = OptimizerState::new(AdamWConfig {
            lr: plan.lr(0),
            weight_decay: plan.weight_decay,
            ..Default::default()
        });
        let mask = build_trainability_mask(&params, &OperatorBundle::default(), TrainMode::Full);
        Ok(Self {
            plan,
            params,
            bundle: OperatorBundle::default(),
            ledger: None,
            recording: None,
            optimizer,
            mask,
            stage: 0,
            global_step: 0,
            tokens_seen: 0,
            stream,
            eval,
            assess,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn eval_windows(&self) -> &[&'a [usize]] {
        &self.eval
    }

    /// Mean eval NLL with any live operators applied.
    pub fn eval_loss(&self) -> Result<f64> {
        let overlay = self.bundle.live().next().is_some().then_some(&self.bundle as &dyn Overlay<f32>);
        evaluate_loss(&self.params, overlay, &self.eval, self.plan.batch_size)
    }

    /// Score the pre-assessment subset and make it the ledger for stage 0.
    pub fn pre_assess(&mut self) -> Result<&ActivationLedger> {
        let samples: Vec<&[usize]> = self.assess.iter().map(|w| &w[..w.len() - 1]).collect();
        let ledger =
            pre_assess(&self.params, &samples, self.plan.vote_k_mha, self.plan.vote_k_ffn, self.plan.batch_size)?;
        Ok(self.ledger.insert(ledger))
    }

    /// Select sets from the current ledger and attach fresh operators.
    pub fn begin_stage(&mut self) -> Result<Option<AdvantageSets>> {
        if self.bundle.live().next().is_some() {
            return Err(ApexError::State("previous stage still has live operators".into()));
        }
        self.optimizer.config.lr = self.plan.lr(self.stage);
        if !self.plan.expansion {
            self.mask = build_trainability_mask(&self.params, &self.bundle, TrainMode::Full);
            return Ok(None);
        }
        let ledger = self
            .ledger
            .as_ref()
            .ok_or_else(|| ApexError::State("no ledger to select from; run pre-assessment first".into()))?;
        let stage_seed = self.plan.seed.wrapping_add(self.stage as u64);
        let sets = select_sets(ledger, self.plan.k_mha, self.plan.k_ffn, self.plan.strategy, stage_seed)?;
        self.bundle = attach_operators(&self.params, &sets, stage_seed.wrapping_mul(0x2545_F491_4F6C_DD1D))?;
        self.mask = build_trainability_mask(&self.params, &self.bundle, self.plan.mode);
        self.recording =
            Some(ActivationLedger::new(&self.params.config, self.plan.vote_k_mha, self.plan.vote_k_ffn)?);
        Ok(Some(sets))
    }

    /// One optimisation step on the next batch; returns the cross-entropy.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.stream.next_batch();
        let l = self.plan.seq_len;
        let inputs: Vec<&[usize]> = batch.iter().map(|w| &w[..l]).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let lambda = self.plan.act_regu_lambda;
        let probe = self.recording.is_some() || lambda > 0.0;

        let mut tape = Tape::new();
        let mut vars = ParamVars::register(&mut tape, &self.params, true);
        let base = vars.ordered();
        let op_vars = self.bundle.install(&mut tape, &mut vars, true)?;
        let out = forward_graph(&mut tape, &self.params.config, &vars, &inputs, probe)?;
        let ce = tape.cross_entropy(out.logits, &targets)?;
        let ce_value = tape.scalar(ce).as_f64();
        let loss = match act_regu_penalty(&mut tape, &out, lambda)? {
            Some(p) => tape.add(ce, p)?,
            None => ce,
        };
        if let Some(rec) = self.recording.as_mut() {
            rec.record(&out.trace(&tape).expect("probed pass yields a trace"))?;
        }
        let mut grads = tape.backward(loss)?;

        self.optimizer.begin_step();
        for (name, var) in self.params.names().into_iter().zip(base) {
            let Some(g) = grads.take(var) else { continue };
            let p = self.params.get_mut(&name).expect("canonical name");
            let decay = p.dims().len() == 2;
            self.optimizer.update(&name, p, &g, self.mask.get(&name), decay)?;
        }
        for ((name, p), var) in self.bundle.named_mut().into_iter().zip(op_vars) {
            let Some(g) = grads.take(var) else { continue };
            self.optimizer.update(&name, p, &g, self.mask.get(&name), false)?;
        }
        self.global_step += 1;
        self.tokens_seen += self.plan.tokens_per_step();
        Ok(ce_value)
    }

    /// Fuse live operators, hand the recorded ledger to the next stage and
    /// reset the optimizer. Returns the number of fused operators.
    pub fn end_stage(&mut self) -> Result<usize> {
        let fused = self.bundle.fuse_all(&mut self.params)?;
        self.bundle = OperatorBundle::default();
        if let Some(rec) = self.recording.take() {
            self.ledger = Some(rec);
        }
        if self.plan.expansion {
            self.optimizer.reset();
        }
        self.stage += 1;
        Ok(fused)
    }

    fn elapsed_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1e3
    }

    /// Select, attach, train for `tokens_per_stage`, then fuse unless `keep_live`.
    pub fn run_stage(&mut self, keep_live: bool) -> Result<StageReport> {
        let t0 = Instant::now();
        let stage = self.stage;
        let before_attach = self.plan.expansion.then(|| self.eval_loss()).transpose()?;
        let sets = self.begin_stage()?;
        let after_attach = self.plan.expansion.then(|| self.eval_loss()).transpose()?;
        let steps = self.plan.steps_per_stage();
        let mut loss_curve = Vec::with_capacity(steps);
        let mut rows = Vec::new();
        let mut since = 0usize;
        for s in 1..=steps {
            loss_curve.push(self.train_step()?);
            since += 1;
            let at_interval = self.plan.eval_interval > 0 && s % self.plan.eval_interval == 0;
            if at_interval || s == steps {
                let recent = &loss_curve[loss_curve.len() - since..];
                rows.push(MetricRow {
                    stage,
                    step: self.global_step,
                    tokens: self.tokens_seen,
                    train_loss: recent.iter().sum::<f64>() / since as f64,
                    eval_ppl: self.eval_loss()?.exp(),
                    wall_ms: self.elapsed_ms(),
                });
                since = 0;
            }
        }
        let operators = self.bundle.len();
        let operator_params = self.bundle.param_count();
        let trainable_fraction = self.mask.trainable_fraction();
        let trainable_count = self.mask.trainable_count();
        let before_fusion = self.plan.expansion.then(|| self.eval_loss()).transpose()?;
        let after_fusion = if keep_live {
            None
        } else {
            self.end_stage()?;
            self.plan.expansion.then(|| self.eval_loss()).transpose()?
        };
        let eval_ppl = rows.last().map(|r| r.eval_ppl).unwrap_or(f64::NAN);
        Ok(StageReport {
            stage,
            lr: self.plan.lr(stage),
            steps,
            sets,
            operators,
            operator_params,
            trainable_fraction,
            trainable_count,
            eval_loss_before_attach: before_attach,
            eval_loss_after_attach: after_attach,
            eval_loss_before_fusion: before_fusion,
            eval_loss_after_fusion: after_fusion,
            loss_curve,
            rows,
            eval_ppl,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Pre-assess (when expanding) and run every stage.
    pub fn run(&mut self, keep_last_live: bool) -> Result<Vec<StageReport>> {
        if self.plan.expansion && self.ledger.is_none() {
            self.pre_assess()?;
        }
        let mut reports = Vec::with_capacity(self.plan.stages);
        while self.stage < self.plan.stages {
            let last = self.stage + 1 == self.plan.stages;
            let report = self.run_stage(last && keep_last_live)?;
            reports.push(report);
            if last && keep_last_live {
                break;
            }
        }
        Ok(reports)
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub params: ModelParams<f32>,
    pub stages: Vec<StageReport>,
    pub ledger: Option<ActivationLedger>,
    pub final_eval_loss: f64,
}

impl TrainingOutcome {
    pub fn final_eval_ppl(&self) -> f64 {
        self.final_eval_loss.exp()
    }

    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.stages.iter().flat_map(|s| s.rows.iter())
    }
}

/// Share of the corpus used for training; the remainder is held out.
pub const TRAIN_FRACTION: f64 = 0.9;

/// Full pipeline on `tokens`: split, pre-assess, then every stage.
pub fn run_training(cfg: &ModelConfig, plan: &StagePlan, tokens: &[usize]) -> Result<TrainingOutcome> {
    let (train, eval) = split_train_eval(tokens, TRAIN_FRACTION);
    let mut trainer = Trainer::new(cfg, plan.clone(), train, eval)?;
    let stages = trainer.run(false)?;
    let final_eval_loss = trainer.eval_loss()?;
    Ok(TrainingOutcome { params: trainer.params, stages, ledger: trainer.ledger, final_eval_loss })
}
