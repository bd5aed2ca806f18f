use crate::error::{shape_err, ApexError, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

use super::{LayerParams, ModelConfig, ModelParams, ParamVars};

/// Something that rewrites weight handles before the forward pass, such as
/// live expansion operators.
pub trait Overlay<T: Real> {
    /// Swap entries of `vars` for derived weights. Returns the overlay's own
    /// parameter vars (which receive gradients iff `trainable`).
    fn install(&self, tape: &mut Tape<T>, vars: &mut ParamVars, trainable: bool) -> Result<Vec<Var>>;
}

/// Per-sample activation norms gathered by a probed forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Per layer, `[samples x n_heads]` squared Frobenius norms of head outputs.
    pub mha_head_norms: Vec<Tensor<f64>>,
    /// Per layer, `[samples x d_ffn]` squared norms of the activated gate channels.
    pub ffn_channel_norms: Vec<Tensor<f64>>,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutputs {
    pub logits: Var,
    /// Empty unless probing; otherwise one `[samples x H]` var per layer.
    pub mha_norms: Vec<Var>,
    pub ffn_norms: Vec<Var>,
}

impl GraphOutputs {
    pub fn trace<T: Real>(&self, tape: &Tape<T>) -> Option<ForwardTrace> {
        if self.mha_norms.is_empty() {
            return None;
        }
        let grab = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).cast::<f64>()).collect();
        Some(ForwardTrace { mha_head_norms: grab(&self.mha_norms), ffn_channel_norms: grab(&self.ffn_norms) })
    }
}

fn mha_block<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    seq_len: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let heads = tape.attention(q, k, v, cfg.n_heads, seq_len, causal)?;
    let out = tape.matmul(heads, wo)?;
    Ok((out, heads))
}

fn ffn_block<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, x: Var, wu: Var, wg: Var, wd: Var) -> Result<(Var, Var)> {
    let up = tape.matmul(x, wu)?;
    let gate = tape.matmul(x, wg)?;
    let act = tape.activate(gate, cfg.activation);
    let glu = tape.mul(up, act)?;
    let out = tape.matmul(glu, wd)?;
    Ok((out, act))
}

/// Record the full model on `tape` for equal-length token windows.
pub fn forward_graph<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    windows: &[&[usize]],
    probe: bool,
) -> Result<GraphOutputs> {
    let seq_len = windows.first().map(|w| w.len()).unwrap_or(0);
    if seq_len == 0 || windows.iter().any(|w| w.len() != seq_len) {
        return Err(shape_err!("windows must be non-empty and of equal length"));
    }
    if seq_len > cfg.max_seq_len {
        return Err(shape_err!("sequence length {seq_len} exceeds max_seq_len {}", cfg.max_seq_len));
    }
    let ids: Vec<usize> = windows.iter().flat_map(|w| w.iter().copied()).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ApexError::Index(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let positions: Vec<usize> = (0..windows.len()).flat_map(|_| 0..seq_len).collect();
    let eps = T::lit(cfg.norm_eps);

    let tok = tape.embed(vars.tok_emb, &ids)?;
    let pos = tape.embed(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut mha_norms = Vec::new();
    let mut ffn_norms = Vec::new();
    for lv in &vars.layers {
        let h = tape.rms_norm(x, lv.attn_norm, eps)?;
        let (attn, heads) = mha_block(tape, cfg, h, lv.wq, lv.wk, lv.wv, lv.wo, seq_len, true)?;
        if probe {
            mha_norms.push(tape.group_sq_norms(heads, seq_len, cfg.d_head())?);
        }
        x = tape.add(x, attn)?;
        let h = tape.rms_norm(x, lv.ffn_norm, eps)?;
        let (ffn, act) = ffn_block(tape, cfg, h, lv.wu, lv.wg, lv.wd)?;
        if probe {
            ffn_norms.push(tape.group_sq_norms(act, seq_len, 1)?);
        }
        x = tape.add(x, ffn)?;
    }
    let h = tape.rms_norm(x, vars.final_norm, eps)?;
    let logits = tape.matmul(h, vars.head)?;
    Ok(GraphOutputs { logits, mha_norms, ffn_norms })
}

/// Forward a batch of equal-length windows without gradients.
pub fn forward_batch<T: Real>(
    params: &ModelParams<T>,
    overlay: Option<&dyn Overlay<T>>,
    windows: &[&[usize]],
    probe: bool,
) -> Result<(Tensor<T>, Option<ForwardTrace>)> {
    let mut tape = Tape::new();
    let mut vars = ParamVars::register(&mut tape, params, false);
    if let Some(o) = overlay {
        o.install(&mut tape, &mut vars, false)?;
    }
    let out = forward_graph(&mut tape, &params.config, &vars, windows, probe)?;
    let trace = out.trace(&tape);
    Ok((tape.value(out.logits).clone(), trace))
}

/// Logits `[L x vocab]` for one token sequence.
pub fn forward_logits<T: Real>(
    tokens: &[usize],
    params: &ModelParams<T>,
    probe: bool,
) -> Result<(Tensor<T>, Option<ForwardTrace>)> {
    forward_batch(params, None, &[tokens], probe)
}

/// Multi-head attention on one sequence `x[L x d_model]` (no norm, no residual).
///
/// With `probe`, also returns each head's squared Frobenius norm.
pub fn mha_forward<T: Real>(
    x: &Tensor<T>,
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    causal: bool,
    probe: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let (l, _) = x.shape2()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [wq, wk, wv, wo] = [&layer.wq, &layer.wk, &layer.wv, &layer.wo].map(|w| tape.constant(w.clone()));
    let (out, heads) = mha_block(&mut tape, cfg, xv, wq, wk, wv, wo, l, causal)?;
    let norms = if probe {
        let n = tape.group_sq_norms(heads, l, cfg.d_head())?;
        Some(tape.value(n).data().to_vec())
    } else {
        None
    };
    Ok((tape.value(out).clone(), norms))
}

/// GLU feed-forward on one sequence; with `probe`, per-channel squared norms
/// of the activated gate.
pub fn ffn_forward<T: Real>(
    x: &Tensor<T>,
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    probe: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let (l, _) = x.shape2()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [wu, wg, wd] = [&layer.wu, &layer.wg, &layer.wd].map(|w| tape.constant(w.clone()));
    let (out, act) = ffn_block(&mut tape, cfg, xv, wu, wg, wd)?;
    let norms = if probe {
        let n = tape.group_sq_norms(act, l, 1)?;
        Some(tape.value(n).data().to_vec())
    } else {
        None
    };
    Ok((tape.value(out).clone(), norms))
}

/// Mean next-token NLL over windows of `L + 1` tokens.
pub fn evaluate_loss<T: Real>(
    params: &ModelParams<T>,
    overlay: Option<&dyn Overlay<T>>,
    windows: &[&[usize]],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(ApexError::Data("no evaluation windows".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|w| &w[..w.len() - 1]).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let (logits, _) = forward_batch(params, overlay, &inputs, false)?;
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let loss = tape.cross_entropy(lv, &targets)?;
        total += tape.scalar(loss).as_f64() * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

/// `exp(mean NLL)` over non-overlapping windows of `seq_len + 1` tokens.
pub fn perplexity<T: Real>(params: &ModelParams<T>, stream: &[usize], seq_len: usize) -> Result<f64> {
    if stream.len() <= seq_len {
        return Err(ApexError::Data(format!(
            "stream of {} tokens too short for seq_len {seq_len}",
            stream.len()
        )));
    }
    let windows: Vec<&[usize]> = stream.chunks_exact(seq_len + 1).collect();
    Ok(evaluate_loss(params, None, &windows, 16)?.exp())
}
