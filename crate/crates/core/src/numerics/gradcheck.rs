//! Central finite-difference verification of reverse-mode gradients.

use std::collections::HashMap;

use crate::error::{CromeError, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Tape, ValueId};
use crate::params::{ParamId, Params};

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Relative error with denominator max(|a|, |b|, 1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub reverse: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub samples: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
}

/// Build a tape with `loss_fn`, run backward, and return the loss value plus
/// the gradient of every bound parameter.
pub fn reverse_grads<F>(params: &Params, loss_fn: &F) -> Result<(f64, HashMap<ParamId, Matrix>)>
where
    F: Fn(&Params, &mut Tape) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(CromeError::NonFinite(format!(
            "loss in grad check (value {value})"
        )));
    }
    let grads = tape.backward(loss)?;
    Ok((value, tape.param_grads(params, &grads)))
}

fn eval_loss<F>(params: &Params, loss_fn: &F) -> Result<f64>
where
    F: Fn(&Params, &mut Tape) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(CromeError::NonFinite(format!(
            "loss in finite-difference probe (value {value})"
        )));
    }
    Ok(value)
}

/// Compare supplied reverse-mode gradients against central finite differences
/// at `samples` randomly chosen parameter entries.
///
/// `loss_fn` must be deterministic given the parameters (dropout disabled or
/// seed-pinned by the caller).
pub fn fd_compare<F>(
    params: &mut Params,
    ids: &[ParamId],
    loss_fn: &F,
    loss: f64,
    grads: &HashMap<ParamId, Matrix>,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Params, &mut Tape) -> Result<ValueId>,
{
    let total: usize = ids.iter().map(|&id| params.get(id).data.len()).sum();
    if total == 0 {
        return Err(CromeError::Config("grad check over zero parameters".into()));
    }
    let mut rng = RngStream::new(seed, "gradcheck");
    let mut report = GradCheckReport {
        loss,
        samples,
        max_rel_err: 0.0,
        worst: None,
    };
    for _ in 0..samples {
        let mut flat = rng.next_below(total);
        let mut chosen = ids[0];
        for &id in ids {
            let len = params.get(id).data.len();
            if flat < len {
                chosen = id;
                break;
            }
            flat -= len;
        }
        let original = params.get(chosen).data[flat];
        params.get_mut(chosen).data[flat] = original + step;
        let plus = eval_loss(params, loss_fn)?;
        params.get_mut(chosen).data[flat] = original - step;
        let minus = eval_loss(params, loss_fn)?;
        params.get_mut(chosen).data[flat] = original;

        let fd = (plus - minus) / (2.0 * step);
        let reverse = grads
            .get(&chosen)
            .map(|g| g.data[flat])
            .unwrap_or(0.0);
        let rel = relative_error(reverse, fd);
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(GradCheckEntry {
                param: params.name(chosen).to_string(),
                index: flat,
                reverse,
                finite_diff: fd,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}

/// Reverse-mode gradients checked against central finite differences.
pub fn grad_check<F>(
    params: &mut Params,
    ids: &[ParamId],
    loss_fn: &F,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Params, &mut Tape) -> Result<ValueId>,
{
    let (loss, grads) = reverse_grads(params, loss_fn)?;
    fd_compare(params, ids, loss_fn, loss, &grads, samples, step, seed)
}
