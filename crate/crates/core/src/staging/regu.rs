use crate::error::{ApexError, Result};
use crate::model::{ForwardTrace, GraphOutputs};
use crate::numerics::{Real, Tape, Tensor, Var};

fn check(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(ApexError::Config(format!("act-regu lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `lambda` times the mean over probed modules of the population std of the
/// batch-mean component norms. Returns `None` when `lambda == 0`.
pub fn act_regu_penalty<T: Real>(tape: &mut Tape<T>, outputs: &GraphOutputs, lambda: f64) -> Result<Option<Var>> {
    check(lambda)?;
    if lambda == 0.0 {
        return Ok(None);
    }
    let modules: Vec<Var> = outputs.mha_norms.iter().chain(&outputs.ffn_norms).copied().collect();
    if modules.is_empty() {
        return Err(ApexError::State("act-regu needs a probed forward pass".into()));
    }
    let mut total: Option<Var> = None;
    for m in &modules {
        let s = tape.col_mean_std(*m)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(Some(tape.scale(total, T::lit(lambda / modules.len() as f64))))
}

/// Value of [`act_regu_penalty`] computed from a recorded trace.
pub fn act_regu_value(trace: &ForwardTrace, lambda: f64) -> Result<f64> {
    check(lambda)?;
    let modules: Vec<&Tensor<f64>> = trace.mha_head_norms.iter().chain(&trace.ffn_channel_norms).collect();
    if modules.is_empty() {
        return Err(ApexError::State("empty trace".into()));
    }
    let mut sum = 0.0;
    for m in &modules {
        let (std, _) = crate::numerics::kernels::col_mean_std(m)?;
        sum += std;
    }
    Ok(lambda * sum / modules.len() as f64)
}
