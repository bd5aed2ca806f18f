//! `key=value` configuration shared by config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::assessment::Strategy;
use crate::error::{ApexError, Result};
use crate::model::ModelConfig;
use crate::numerics::Activation;
use crate::staging::{StagePlan, TrainMode};

pub type KvMap = BTreeMap<String, String>;

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut out = KvMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ApexError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(ApexError::Config(format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(out)
}

/// One `key=value` line per entry, in key order.
pub fn render_kv(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn take<T: FromStr>(map: &mut KvMap, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: Display,
{
    if let Some(v) = map.remove(key) {
        *slot = v.parse().map_err(|e| ApexError::Config(format!("{key}={v}: {e}")))?;
    }
    Ok(())
}

fn take_with<T>(map: &mut KvMap, key: &str, slot: &mut T, parse: impl Fn(&str) -> Result<T>) -> Result<()> {
    if let Some(v) = map.remove(key) {
        *slot = parse(&v)?;
    }
    Ok(())
}

pub fn model_to_kv(cfg: &ModelConfig, out: &mut KvMap) {
    let mut put = |k: &str, v: String| {
        out.insert(format!("model.{k}"), v);
    };
    put("n_layers", cfg.n_layers.to_string());
    put("d_model", cfg.d_model.to_string());
    put("n_heads", cfg.n_heads.to_string());
    put("d_ffn", cfg.d_ffn.to_string());
    put("vocab_size", cfg.vocab_size.to_string());
    put("max_seq_len", cfg.max_seq_len.to_string());
    put("seed", cfg.seed.to_string());
    put("activation", cfg.activation.name().to_string());
    put("norm_eps", format!("{:?}", cfg.norm_eps));
}

/// Consume `model.*` keys over `base`.
pub fn model_from_kv(map: &mut KvMap, base: ModelConfig) -> Result<ModelConfig> {
    let mut c = base;
    take(map, "model.n_layers", &mut c.n_layers)?;
    take(map, "model.d_model", &mut c.d_model)?;
    take(map, "model.n_heads", &mut c.n_heads)?;
    take(map, "model.d_ffn", &mut c.d_ffn)?;
    take(map, "model.vocab_size", &mut c.vocab_size)?;
    take(map, "model.max_seq_len", &mut c.max_seq_len)?;
    take(map, "model.seed", &mut c.seed)?;
    take_with(map, "model.activation", &mut c.activation, Activation::parse)?;
    take(map, "model.norm_eps", &mut c.norm_eps)?;
    c.validate()?;
    Ok(c)
}

pub fn plan_to_kv(plan: &StagePlan, out: &mut KvMap) {
    let mut put = |k: &str, v: String| {
        out.insert(format!("plan.{k}"), v);
    };
    put("stages", plan.stages.to_string());
    put("tokens_per_stage", plan.tokens_per_stage.to_string());
    put("batch_size", plan.batch_size.to_string());
    put("seq_len", plan.seq_len.to_string());
    put("k_mha", format!("{:?}", plan.k_mha));
    put("k_ffn", format!("{:?}", plan.k_ffn));
    put("vote_k_mha", format!("{:?}", plan.vote_k_mha));
    put("vote_k_ffn", format!("{:?}", plan.vote_k_ffn));
    put("mode", plan.mode.name().to_string());
    put("strategy", plan.strategy.name().to_string());
    put("stage_lrs", plan.stage_lrs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","));
    put("weight_decay", format!("{:?}", plan.weight_decay));
    put("seed", plan.seed.to_string());
    put("act_regu_lambda", format!("{:?}", plan.act_regu_lambda));
    put("expansion", plan.expansion.to_string());
    put("eval_interval", plan.eval_interval.to_string());
    put("eval_windows", plan.eval_windows.to_string());
    put("assess_windows", plan.assess_windows.to_string());
}

fn parse_lrs(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| ApexError::Config(format!("stage_lrs {x:?}: {e}"))))
        .collect()
}

/// Consume `plan.*` keys over `base`. A `plan.lr` key sets decaying stage rates.
pub fn plan_from_kv(map: &mut KvMap, base: StagePlan) -> Result<StagePlan> {
    let mut p = base;
    take(map, "plan.stages", &mut p.stages)?;
    take(map, "plan.tokens_per_stage", &mut p.tokens_per_stage)?;
    take(map, "plan.batch_size", &mut p.batch_size)?;
    take(map, "plan.seq_len", &mut p.seq_len)?;
    take(map, "plan.k_mha", &mut p.k_mha)?;
    take(map, "plan.k_ffn", &mut p.k_ffn)?;
    p.vote_k_mha = p.k_mha;
    p.vote_k_ffn = p.k_ffn;
    take(map, "plan.vote_k_mha", &mut p.vote_k_mha)?;
    take(map, "plan.vote_k_ffn", &mut p.vote_k_ffn)?;
    take_with(map, "plan.mode", &mut p.mode, TrainMode::parse)?;
    take_with(map, "plan.strategy", &mut p.strategy, Strategy::parse)?;
    let mut base_lr = None;
    take_with(map, "plan.lr", &mut base_lr, |s| {
        s.parse::<f64>().map(Some).map_err(|e| ApexError::Config(format!("plan.lr={s}: {e}")))
    })?;
    if let Some(lr) = base_lr {
        p.stage_lrs = StagePlan::decaying_lrs(lr, p.stages);
    }
    take_with(map, "plan.stage_lrs", &mut p.stage_lrs, parse_lrs)?;
    take(map, "plan.weight_decay", &mut p.weight_decay)?;
    take(map, "plan.seed", &mut p.seed)?;
    take(map, "plan.act_regu_lambda", &mut p.act_regu_lambda)?;
    take(map, "plan.expansion", &mut p.expansion)?;
    take(map, "plan.eval_interval", &mut p.eval_interval)?;
    take(map, "plan.eval_windows", &mut p.eval_windows)?;
    take(map, "plan.assess_windows", &mut p.assess_windows)?;
    Ok(p)
}

/// Reject anything left over after the known keys were consumed.
pub fn ensure_consumed(map: &KvMap) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(ApexError::Config(format!("unknown config key {k:?}"))),
        None => Ok(()),
    }
}

/// Model and plan from a config file body.
pub fn load_config(text: &str) -> Result<(ModelConfig, StagePlan)> {
    let mut map = parse_kv(text)?;
    let cfg = model_from_kv(&mut map, ModelConfig::default())?;
    let plan = plan_from_kv(&mut map, StagePlan::default())?;
    ensure_consumed(&map)?;
    Ok((cfg, plan))
}
