//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{expanded_targets, rank_report, SpectrumReport, DEFAULT_EPS_REL};
use crate::assessment::{component_count, MaskWhich, Strategy};
use crate::error::{ApexError, Result};
use crate::model::{ModelConfig, ModelParams, Overlay};
use crate::staging::{pre_assess, MetricRow, StagePlan, Trainer, TrainMode, TRAIN_FRACTION};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, Counters};
use super::config::load_config;
use super::corpus::{split_train_eval, synthetic_corpus, tokenize_bytes, windows, Corpus};
use super::experiments::{mask_eval, probe_stats};

#[derive(Debug, Parser)]
#[command(name = "apex", version, about = "Staged advantageous-parameter expansion on a toy GLU transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Text file to train or evaluate on (byte tokens); synthetic text otherwise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Size of the synthetic corpus.
    #[arg(long, default_value_t = 200_000)]
    pub synthetic_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-assessment scores of every head and channel.
    Assess {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        k_mha: f64,
        #[arg(long, default_value_t = 0.25)]
        k_ffn: f64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the staged pipeline (or the vanilla baseline).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        k_mha: Option<f64>,
        #[arg(long)]
        k_ffn: Option<f64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        act_regu: Option<f64>,
        #[arg(long)]
        no_expansion: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tokens_per_stage: Option<usize>,
        /// Base learning rate; later stages decay from it.
        #[arg(long)]
        lr: Option<f64>,
        /// Leave the last stage's operators live in the checkpoint.
        #[arg(long)]
        keep_live: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Metrics CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fold a checkpoint's live operators into its weights.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss after zeroing the top, bottom or random activation tail.
    MaskEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "top")]
        which: String,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Effective rank of the expanded matrices per checkpoint.
    RankReport {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPS_REL)]
        eps_rel: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-module spread of mean activation norms per checkpoint.
    ProbeStats {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Value of `APEX_THREADS` (default 1). Numerics run on one thread, so any
/// positive cap is honoured trivially.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("APEX_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(ApexError::Config(format!("APEX_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_corpus(data: &DataArgs) -> Result<Corpus> {
    match &data.corpus {
        Some(p) => Ok(tokenize_bytes(&fs::read(p)?)),
        None => Ok(synthetic_corpus(data.synthetic_tokens, data.data_seed)),
    }
}

fn write_csv(path: &Option<PathBuf>, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(p) = path {
        let mut body = format!("{header}\n");
        for l in lines {
            body.push_str(&l);
            body.push('\n');
        }
        fs::write(p, body)?;
    }
    Ok(())
}

fn checkpoint_label(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn eval_split(tokens: &[usize], seq_len: usize) -> Result<(Vec<&[usize]>, Vec<&[usize]>)> {
    let (train, eval) = split_train_eval(tokens, TRAIN_FRACTION);
    Ok((windows(train, seq_len)?, windows(eval, seq_len)?))
}

const EVAL_BATCH: usize = 16;
const EVAL_CAP: usize = 256;

/// Run a parsed command, writing the text report to `out`.
pub fn dispatch(cli: Cli, out: &mut String) -> Result<()> {
    thread_cap()?;
    match cli.command {
        Command::Assess { checkpoint, config, k_mha, k_ffn, data, csv } => {
            let params = match (&checkpoint, &config) {
                (Some(c), _) => load_checkpoint(c)?.params,
                (None, Some(path)) => ModelParams::init(&load_config(&fs::read_to_string(path)?)?.0)?,
                (None, None) => ModelParams::init(&ModelConfig::default())?,
            };
            let corpus = load_corpus(&data)?;
            let seq_len = params.config.max_seq_len;
            let (train, _) = eval_split(&corpus.tokens, seq_len)?;
            let samples: Vec<&[usize]> = train.iter().take(EVAL_CAP).map(|w| &w[..seq_len]).collect();
            let ledger = pre_assess(&params, &samples, k_mha, k_ffn, EVAL_BATCH)?;
            let rows = ledger.component_rows();
            writeln!(out, "samples {}  k_mha {} ({} heads)  k_ffn {} ({} channels)", ledger.samples_seen, k_mha,
                component_count(params.config.n_heads, k_mha)?, k_ffn, component_count(params.config.d_ffn, k_ffn)?)
            .ok();
            writeln!(out, "{:>5} {:>4} {:>9} {:>14} {:>7}", "layer", "mod", "component", "mean_norm", "score").ok();
            for r in &rows {
                writeln!(out, "{:>5} {:>4} {:>9} {:>14.6} {:>7}", r.layer, r.kind.name(), r.component, r.mean_norm, r.score)
                    .ok();
            }
            write_csv(
                &csv,
                "layer,module,component,mean_norm,score",
                rows.iter().map(|r| format!("{},{},{},{:.9e},{}", r.layer, r.kind.name(), r.component, r.mean_norm, r.score)),
            )
        }
        Command::Train {
            config,
            stages,
            k_mha,
            k_ffn,
            mode,
            strategy,
            act_regu,
            no_expansion,
            seed,
            tokens_per_stage,
            lr,
            keep_live,
            out: ckpt,
            data,
            csv,
        } => {
            let (mut cfg, mut plan) = match &config {
                Some(p) => load_config(&fs::read_to_string(p)?)?,
                None => (ModelConfig::default(), StagePlan::default()),
            };
            if let Some(s) = stages {
                plan.stages = s;
                if plan.stage_lrs.len() < s {
                    plan.stage_lrs = StagePlan::decaying_lrs(plan.stage_lrs[0], s);
                }
            }
            if let Some(lr) = lr {
                plan.stage_lrs = StagePlan::decaying_lrs(lr, plan.stages);
            }
            if let Some(k) = k_mha {
                plan.k_mha = k;
                plan.vote_k_mha = k;
            }
            if let Some(k) = k_ffn {
                plan.k_ffn = k;
                plan.vote_k_ffn = k;
            }
            if let Some(m) = mode {
                plan.mode = TrainMode::parse(&m)?;
            }
            if let Some(s) = strategy {
                plan.strategy = Strategy::parse(&s)?;
            }
            if let Some(l) = act_regu {
                plan.act_regu_lambda = l;
            }
            if no_expansion {
                plan.expansion = false;
            }
            if let Some(s) = seed {
                plan.seed = s;
                cfg.seed = s;
            }
            if let Some(t) = tokens_per_stage {
                plan.tokens_per_stage = t;
            }
            plan.seq_len = plan.seq_len.min(cfg.max_seq_len);
            let corpus = load_corpus(&data)?;
            let (train, eval) = split_train_eval(&corpus.tokens, TRAIN_FRACTION);
            let mut trainer = Trainer::new(&cfg, plan.clone(), train, eval)?;
            let reports = trainer.run(keep_live)?;
            writeln!(out, "{:>5} {:>6} {:>9} {:>10} {:>10} {:>9} {:>10}", "stage", "steps", "lr", "train_loss", "eval_ppl", "operators", "trainable")
                .ok();
            for r in &reports {
                let tail = &r.loss_curve[r.loss_curve.len().saturating_sub(10)..];
                writeln!(
                    out,
                    "{:>5} {:>6} {:>9.2e} {:>10.4} {:>10.4} {:>9} {:>10.4}",
                    r.stage,
                    r.steps,
                    r.lr,
                    tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                    r.eval_ppl,
                    r.operators,
                    r.trainable_fraction
                )
                .ok();
            }
            let final_ppl = trainer.eval_loss()?.exp();
            writeln!(out, "final eval ppl {final_ppl:.6}").ok();
            write_csv(&csv, MetricRow::CSV_HEADER, reports.iter().flat_map(|r| r.rows.iter().map(MetricRow::csv_line)))?;
            if let Some(path) = ckpt {
                let state = CheckpointState {
                    counters: Counters {
                        stage: trainer.stage,
                        global_step: trainer.global_step,
                        tokens_seen: trainer.tokens_seen,
                    },
                    ledger: trainer.recording.clone().or_else(|| trainer.ledger.clone()),
                    operators: trainer.bundle.clone(),
                    plan: Some(plan),
                    params: trainer.params,
                };
                save_checkpoint(&path, &state)?;
                writeln!(out, "checkpoint written to {}", path.display()).ok();
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, csv } => {
            let state = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let (_, eval) = eval_split(&corpus.tokens, state.params.config.max_seq_len)?;
            let eval: Vec<&[usize]> = eval.into_iter().take(EVAL_CAP).collect();
            let overlay = (!state.operators.is_empty()).then_some(&state.operators as &dyn Overlay<f32>);
            let loss = crate::model::evaluate_loss(&state.params, overlay, &eval, EVAL_BATCH)?;
            writeln!(out, "checkpoint {}  live operators {}  eval loss {loss:.6}  ppl {:.6}", checkpoint.display(), state.operators.len(), loss.exp())
                .ok();
            write_csv(&csv, "checkpoint,eval_loss,eval_ppl", [format!("{},{loss:.9},{:.9}", checkpoint_label(&checkpoint), loss.exp())])
        }
        Command::Fuse { checkpoint, out: path } => {
            let mut state = load_checkpoint(&checkpoint)?;
            let n = state.operators.fuse_all(&mut state.params)?;
            state.operators.ops.clear();
            save_checkpoint(&path, &state)?;
            writeln!(out, "fused {n} operators into {}", path.display()).ok();
            Ok(())
        }
        Command::MaskEval { checkpoint, which, fraction, seed, data, csv } => {
            let which_v = MaskWhich::parse(&which)?;
            if !(0.0..=1.0).contains(&fraction) {
                return Err(ApexError::Config(format!("fraction must lie in [0, 1], got {fraction}")));
            }
            let state = load_checkpoint(&checkpoint)?;
            let mut params = state.params;
            let mut ops = state.operators;
            ops.fuse_all(&mut params)?;
            let corpus = load_corpus(&data)?;
            let (train, eval) = eval_split(&corpus.tokens, params.config.max_seq_len)?;
            let train: Vec<&[usize]> = train.into_iter().take(EVAL_CAP).collect();
            let eval: Vec<&[usize]> = eval.into_iter().take(EVAL_CAP).collect();
            let r = mask_eval(&params, &train, &eval, which_v, fraction, seed, EVAL_BATCH)?;
            writeln!(out, "{:>6} {:>8} {:>7} {:>12} {:>12} {:>10}", "which", "fraction", "masked", "base_loss", "masked_loss", "delta").ok();
            writeln!(
                out,
                "{:>6} {:>8} {:>7} {:>12.6} {:>12.6} {:>10.6}",
                which,
                fraction,
                r.masked_count(),
                r.base_loss,
                r.masked_loss,
                r.delta()
            )
            .ok();
            write_csv(
                &csv,
                "which,fraction,masked,base_loss,masked_loss,delta",
                [format!("{which},{fraction},{},{:.9},{:.9},{:.9}", r.masked_count(), r.base_loss, r.masked_loss, r.delta())],
            )
        }
        Command::RankReport { checkpoint, eps_rel, csv } => {
            if !(eps_rel > 0.0 && eps_rel < 1.0) {
                return Err(ApexError::Config(format!("eps_rel must lie in (0, 1), got {eps_rel}")));
            }
            let states = checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let labelled: Vec<(String, &ModelParams<f32>)> =
                checkpoint.iter().zip(&states).map(|(p, s)| (checkpoint_label(p), &s.params)).collect();
            let targets = expanded_targets(&states[0].params.config);
            let rows = rank_report(&labelled, &targets, eps_rel)?;
            writeln!(out, "{:>16} {:>5} {:>6} {:>12} {:>8}", "checkpoint", "layer", "matrix", "sigma_max", "eff_rank").ok();
            for r in &rows {
                writeln!(out, "{:>16} {:>5} {:>6} {:>12.6} {:>8}", r.checkpoint, r.layer, r.matrix, r.sigma_max(), r.eff_rank).ok();
            }
            write_csv(&csv, SpectrumReport::CSV_HEADER, rows.iter().map(SpectrumReport::csv_line))
        }
        Command::ProbeStats { checkpoint, data, csv } => {
            let corpus = load_corpus(&data)?;
            let mut lines = Vec::new();
            writeln!(out, "{:>16} {:>5} {:>6} {:>14}", "checkpoint", "layer", "module", "std").ok();
            for path in &checkpoint {
                let state = load_checkpoint(path)?;
                let mut params = state.params;
                let mut ops = state.operators;
                ops.fuse_all(&mut params)?;
                let (_, eval) = eval_split(&corpus.tokens, params.config.max_seq_len)?;
                let eval: Vec<&[usize]> = eval.into_iter().take(EVAL_CAP).collect();
                let label = checkpoint_label(path);
                for s in probe_stats(&params, &eval, EVAL_BATCH)? {
                    writeln!(out, "{:>16} {:>5} {:>6} {:>14.6e}", label, s.layer, s.kind.name(), s.std).ok();
                    lines.push(format!("{label},{},{},{:.9e}", s.layer, s.kind.name(), s.std));
                }
            }
            write_csv(&csv, PROBE_STATS_HEADER, lines)
        }
    }
}

pub const PROBE_STATS_HEADER: &str = "checkpoint,layer,module,std";

/// Parse `argv` and run; returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let mut out = String::new();
    let res = dispatch(cli, &mut out);
    print!("{out}");
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
