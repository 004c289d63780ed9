//! Parameterized building blocks recorded on the tape: linear layers,
//! batch normalization, and multi-head self-attention.

use crate::error::{CromeError, Result};
use crate::numerics::tape::{BnStats, Mode, Tape, ValueId};
use crate::params::{Group, ParamId, Params};

/// Weight + bias pair for an affine layer.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init(
        params: &mut Params,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        seed: u64,
    ) -> Self {
        // 1/sqrt(d_in) keeps activations O(1) at init. Biases start small but
        // nonzero: exact-zero biases let exact-zero rows propagate through
        // relu chains, parking the loss on a kink where finite differences
        // and the subgradient legitimately disagree.
        let std = 1.0 / (d_in as f64).sqrt();
        LinearParams {
            w: params.normal(&format!("{name}.w"), group, d_in, d_out, std, seed),
            b: params.normal(&format!("{name}.b"), group, 1, d_out, 0.01, seed),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: ValueId) -> Result<ValueId> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row_broadcast(xw, b)
    }
}

/// Gamma/beta pair for one batch-norm site. Running statistics live in a
/// separate `BnStats` owned by the model (they are state, not parameters).
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNormParams {
    pub fn init(params: &mut Params, name: &str, group: Group, width: usize) -> Self {
        BatchNormParams {
            gamma: params.register(
                &format!("{name}.gamma"),
                group,
                crate::numerics::matrix::Matrix::from_vec(1, width, vec![1.0; width]),
            ),
            beta: params.zeros(&format!("{name}.beta"), group, 1, width),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: ValueId,
        stats: &mut BnStats,
        mode: Mode,
    ) -> Result<ValueId> {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.batch_norm(x, gamma, beta, stats, mode)
    }
}

/// Learned projections for one multi-head self-attention stream.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn init(
        params: &mut Params,
        name: &str,
        group: Group,
        width: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(CromeError::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        let std = 1.0 / (width as f64).sqrt();
        Ok(AttentionParams {
            wq: params.normal(&format!("{name}.wq"), group, width, width, std, seed),
            wk: params.normal(&format!("{name}.wk"), group, width, width, std, seed),
            wv: params.normal(&format!("{name}.wv"), group, width, width, std, seed),
            wo: params.normal(&format!("{name}.wo"), group, width, width, std, seed),
            heads,
            width,
        })
    }
}

/// Multi-head attention: per head, softmax(Q K^T / sqrt(d_h)) V over learned
/// projections of the inputs; head outputs are concatenated and linearly
/// projected back to `width`.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &Params,
    att: &AttentionParams,
    q_in: ValueId,
    k_in: ValueId,
    v_in: ValueId,
) -> Result<ValueId> {
    let d = att.width;
    for v in [q_in, k_in, v_in] {
        let shape = tape.value(v).shape();
        if shape.1 != d {
            return Err(CromeError::shape("multi_head_attention", shape, (shape.0, d)));
        }
    }
    let wq = tape.param(params, att.wq);
    let wk = tape.param(params, att.wk);
    let wv = tape.param(params, att.wv);
    let wo = tape.param(params, att.wo);
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(k_in, wk)?;
    let v = tape.matmul(v_in, wv)?;
    let d_h = d / att.heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut heads = Vec::with_capacity(att.heads);
    for h in 0..att.heads {
        let qh = tape.slice_cols(q, h * d_h, d_h);
        let kh = tape.slice_cols(k, h * d_h, d_h);
        let vh = tape.slice_cols(v, h * d_h, d_h);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, wo)
}
