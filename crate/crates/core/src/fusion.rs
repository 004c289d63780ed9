//! Cross-Modal Tri-Transformer Fusion: the correlation-map branch (C1), the
//! weighted cosine-similarity branch (C2), the Zc combiner, and three
//! independent self-attention streams over text, image, and correlation
//! features.

use serde::{Deserialize, Serialize};

use crate::detector::AblationFlags;
use crate::encoders::{BundleIds, EncoderDims};
use crate::error::{CromeError, Result};
use crate::numerics::layers::{multi_head_attention, AttentionParams, BatchNormParams, LinearParams};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{BnStats, Mode, Tape, ValueId};
use crate::params::{Group, ParamId, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_c: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_c: 64,
            heads: 4,
            dropout: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.heads == 0 || self.d_c % self.heads != 0 {
            return Err(CromeError::Config(format!(
                "fusion.d_c ({}) must be a positive multiple of fusion.heads ({})",
                self.d_c, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CromeError::Config(format!(
                "fusion.dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One attention stream: self-attention plus its MLP head.
#[derive(Debug, Clone)]
pub struct StreamParams {
    pub att: AttentionParams,
    pub mlp1: LinearParams,
    pub mlp2: LinearParams,
}

impl StreamParams {
    fn init(params: &mut Params, name: &str, d_c: usize, heads: usize, seed: u64) -> Result<Self> {
        Ok(StreamParams {
            att: AttentionParams::init(params, &format!("{name}.att"), Group::Head, d_c, heads, seed)?,
            mlp1: LinearParams::init(params, &format!("{name}.mlp1"), Group::Head, d_c, d_c, seed),
            mlp2: LinearParams::init(params, &format!("{name}.mlp2"), Group::Head, d_c, d_c, seed),
        })
    }

    /// Self-attention over the stream, mean-pooled, through the MLP head.
    fn forward(&self, tape: &mut Tape, params: &Params, stream: ValueId) -> Result<(ValueId, ValueId)> {
        let attended = multi_head_attention(tape, params, &self.att, stream, stream, stream)?;
        let pooled = tape.mean_rows(attended);
        let h = self.mlp1.forward(tape, params, pooled)?;
        let a = tape.relu(h);
        let out = self.mlp2.forward(tape, params, a)?;
        Ok((attended, out))
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub c1_proj: LinearParams,
    pub w_ti: ParamId,
    pub w_tb: ParamId,
    pub w_ib: ParamId,
    pub b_sim: ParamId,
    pub c2_lift: LinearParams,
    pub c2_bn: BatchNormParams,
    pub c2_out: LinearParams,
    pub zc_fc1: LinearParams,
    pub zc_bn: BatchNormParams,
    pub zc_fc2: LinearParams,
    pub proj_t: LinearParams,
    pub proj_i: LinearParams,
    pub stream_t: StreamParams,
    pub stream_i: StreamParams,
    pub stream_c: StreamParams,
    /// Replacement for the tri-transformer under no_tt: one linear layer over
    /// the concatenated mean-pooled streams, same output width.
    pub tt_linear: Option<LinearParams>,
    /// Learned constant replacing Zc under no_cm.
    pub zc_const: Option<ParamId>,
    /// Learned constant replacing the C2 branch under no_blip.
    pub c2_const: Option<ParamId>,
    pub cfg: FusionConfig,
    pub dims: EncoderDims,
    pub flags: AblationFlags,
}

/// Running batch-norm statistics for the fusion branches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionBnState {
    pub c2: BnStats,
    pub zc: BnStats,
}

impl FusionBnState {
    pub fn new(d_c: usize) -> Self {
        FusionBnState {
            c2: BnStats::new(d_c),
            zc: BnStats::new(d_c),
        }
    }
}

/// Per-sample intermediates of the fused forward pass.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub f_t_to_i: Matrix,
    pub f_i_to_t: Matrix,
    pub c1: Matrix,
    pub c2: Matrix,
    pub z_c: Matrix,
    pub f_t: Matrix,
    pub f_i: Matrix,
    pub f_c: Matrix,
    pub unified: Matrix,
}

/// Tape handles mirroring `FusionState`.
#[derive(Debug, Clone, Copy)]
pub struct FusionStateIds {
    pub f_t_to_i: ValueId,
    pub f_i_to_t: ValueId,
    pub c1: ValueId,
    pub c2: ValueId,
    pub z_c: ValueId,
    pub f_t: ValueId,
    pub f_i: ValueId,
    pub f_c: ValueId,
    pub unified: ValueId,
}

impl FusionStateIds {
    pub fn materialize(&self, tape: &Tape) -> FusionState {
        FusionState {
            f_t_to_i: tape.value(self.f_t_to_i).clone(),
            f_i_to_t: tape.value(self.f_i_to_t).clone(),
            c1: tape.value(self.c1).clone(),
            c2: tape.value(self.c2).clone(),
            z_c: tape.value(self.z_c).clone(),
            f_t: tape.value(self.f_t).clone(),
            f_i: tape.value(self.f_i).clone(),
            f_c: tape.value(self.f_c).clone(),
            unified: tape.value(self.unified).clone(),
        }
    }
}

pub struct CmttfOutput {
    /// n x 3*d_c unified features, one row per sample.
    pub unified: ValueId,
    /// Per-sample intermediates, collected on request.
    pub states: Option<Vec<FusionStateIds>>,
}

impl FusionParams {
    pub fn init(
        params: &mut Params,
        cfg: FusionConfig,
        dims: EncoderDims,
        flags: AblationFlags,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        flags.validate()?;
        let d_c = cfg.d_c;
        let k = dims.k_img;
        let map_width = 2 * k * k;
        let g = Group::Head;
        Ok(FusionParams {
            c1_proj: LinearParams::init(params, "fus.c1_proj", g, map_width, d_c, seed),
            w_ti: params.register("fus.w_ti", g, Matrix::scalar(1.0)),
            w_tb: params.register("fus.w_tb", g, Matrix::scalar(1.0)),
            w_ib: params.register("fus.w_ib", g, Matrix::scalar(1.0)),
            b_sim: params.zeros("fus.b_sim", g, 1, 1),
            c2_lift: LinearParams::init(params, "fus.c2_lift", g, 1, d_c, seed),
            c2_bn: BatchNormParams::init(params, "fus.c2_bn", g, d_c),
            c2_out: LinearParams::init(params, "fus.c2_out", g, d_c, d_c, seed),
            zc_fc1: LinearParams::init(params, "fus.zc_fc1", g, 2 * d_c, d_c, seed),
            zc_bn: BatchNormParams::init(params, "fus.zc_bn", g, d_c),
            zc_fc2: LinearParams::init(params, "fus.zc_fc2", g, d_c, d_c, seed),
            proj_t: LinearParams::init(params, "fus.proj_t", g, 2 * dims.d_emb, d_c, seed),
            proj_i: LinearParams::init(params, "fus.proj_i", g, 2 * dims.d_emb, d_c, seed),
            stream_t: StreamParams::init(params, "fus.stream_t", d_c, cfg.heads, seed)?,
            stream_i: StreamParams::init(params, "fus.stream_i", d_c, cfg.heads, seed)?,
            stream_c: StreamParams::init(params, "fus.stream_c", d_c, cfg.heads, seed)?,
            tt_linear: flags
                .no_tt
                .then(|| LinearParams::init(params, "fus.tt_linear", g, 3 * d_c, 3 * d_c, seed)),
            zc_const: flags
                .no_cm
                .then(|| params.normal("fus.zc_const", g, 1, d_c, 0.1, seed)),
            c2_const: flags
                .no_blip
                .then(|| params.normal("fus.c2_const", g, 1, d_c, 0.1, seed)),
            cfg,
            dims,
            flags,
        })
    }
}

/// Inter-modal correlation branch for one sample: both softmax-normalized
/// k x k maps plus their flattened concatenation (not yet projected).
pub fn inter_modal_fusion(
    tape: &mut Tape,
    z_t1: ValueId,
    z_i1: ValueId,
) -> Result<(ValueId, ValueId, ValueId)> {
    let (kt, dt) = tape.value(z_t1).shape();
    let (ki, di) = tape.value(z_i1).shape();
    if kt != ki || dt != di {
        return Err(CromeError::shape("inter_modal_fusion", (kt, dt), (ki, di)));
    }
    let scale = 1.0 / (dt as f64).sqrt();
    let it = tape.transpose(z_i1);
    let logits_ti = tape.matmul(z_t1, it)?;
    let scaled_ti = tape.scale(logits_ti, scale);
    let f_t_to_i = tape.softmax_rows(scaled_ti);

    let tt = tape.transpose(z_t1);
    let logits_it = tape.matmul(z_i1, tt)?;
    let scaled_it = tape.scale(logits_it, scale);
    let f_i_to_t = tape.softmax_rows(scaled_it);

    let flat_ti = tape.flatten_row(f_t_to_i);
    let flat_it = tape.flatten_row(f_i_to_t);
    let flat = tape.concat_cols(&[flat_ti, flat_it])?;
    Ok((f_t_to_i, f_i_to_t, flat))
}

/// Weighted combined similarity of the pooled BLIP-role encodings:
/// w_ti*cos(z_t2, z_i2) + w_tb*cos(z_t2, z_b) + w_ib*cos(z_i2, z_b) + b.
pub fn combined_similarity(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    z_t2_pooled: ValueId,
    z_i2_pooled: ValueId,
    z_b_pooled: ValueId,
) -> Result<ValueId> {
    let s_ti = tape.cosine_sim(z_t2_pooled, z_i2_pooled)?;
    let s_tb = tape.cosine_sim(z_t2_pooled, z_b_pooled)?;
    let s_ib = tape.cosine_sim(z_i2_pooled, z_b_pooled)?;
    weighted_sim(tape, params, fp, Some(s_ti), Some(s_tb), Some(s_ib))
}

/// Weighted sum of whichever similarity terms exist, plus the bias. Under
/// ablations that zero a modality, the terms touching it are dropped.
fn weighted_sim(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    s_ti: Option<ValueId>,
    s_tb: Option<ValueId>,
    s_ib: Option<ValueId>,
) -> Result<ValueId> {
    let mut acc = tape.param(params, fp.b_sim);
    for (w, s) in [(fp.w_ti, s_ti), (fp.w_tb, s_tb), (fp.w_ib, s_ib)] {
        if let Some(s) = s {
            let wv = tape.param(params, w);
            let term = tape.hadamard(wv, s)?;
            acc = tape.add(acc, term)?;
        }
    }
    Ok(acc)
}

/// C2 branch over a batch of per-sample similarity scalars (n x 1):
/// linear(1 -> d_c) -> ReLU -> batch norm -> linear(d_c -> d_c).
pub fn c2_branch(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    sims: ValueId,
    bn: &mut FusionBnState,
    mode: Mode,
) -> Result<ValueId> {
    let lifted = fp.c2_lift.forward(tape, params, sims)?;
    let activated = tape.relu(lifted);
    let normed = fp.c2_bn.forward(tape, params, activated, &mut bn.c2, mode)?;
    fp.c2_out.forward(tape, params, normed)
}

/// Zc combiner: concat(C1, C2) -> FC -> batch norm -> ReLU -> dropout -> FC.
pub fn combine_zc(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    c1: ValueId,
    c2: ValueId,
    bn: &mut FusionBnState,
    mode: Mode,
    dropout_rng: &mut RngStream,
) -> Result<ValueId> {
    let d_c = fp.cfg.d_c;
    let (s1, s2) = (tape.value(c1).shape(), tape.value(c2).shape());
    if s1.1 != d_c || s2.1 != d_c {
        return Err(CromeError::shape("combine_zc", s1, s2));
    }
    let cat = tape.concat_cols(&[c1, c2])?;
    let h = fp.zc_fc1.forward(tape, params, cat)?;
    let normed = fp.zc_bn.forward(tape, params, h, &mut bn.zc, mode)?;
    let activated = tape.relu(normed);
    let dropped = tape.dropout(activated, fp.cfg.dropout, mode, dropout_rng)?;
    fp.zc_fc2.forward(tape, params, dropped)
}

/// Three independent self-attention streams over projected text, image, and
/// correlation tokens; outputs are mean-pooled, passed through per-stream
/// MLP heads, and concatenated.
pub fn tri_transformer(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    z_t_proj: ValueId,
    z_i_proj: ValueId,
    z_c_token: ValueId,
) -> Result<(ValueId, ValueId, ValueId, ValueId)> {
    let (f_t, out_t) = fp.stream_t.forward(tape, params, z_t_proj)?;
    let (f_i, out_i) = fp.stream_i.forward(tape, params, z_i_proj)?;
    let (f_c, out_c) = fp.stream_c.forward(tape, params, z_c_token)?;
    let unified = tape.concat_cols(&[out_t, out_i, out_c])?;
    Ok((f_t, f_i, f_c, unified))
}

/// Full fused forward over a batch of encoded bundles.
pub fn cmttf_batch(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    bundles: &[BundleIds],
    bn: &mut FusionBnState,
    mode: Mode,
    dropout_rng: &mut RngStream,
    collect_states: bool,
) -> Result<CmttfOutput> {
    let n = bundles.len();
    if n == 0 {
        return Err(CromeError::Config("cmttf over an empty batch".into()));
    }
    let flags = fp.flags;
    let d_c = fp.cfg.d_c;

    // Zc: either the cross-modal pipeline or the learned constant token.
    let (z_c, maps) = if let Some(zc_const) = fp.zc_const {
        let row = tape.param(params, zc_const);
        let rows = vec![row; n];
        (tape.concat_rows(&rows)?, None)
    } else {
        // C1: correlation maps per sample, batched projection.
        let mut flats = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for b in bundles {
            let (f_ti, f_it, flat) = inter_modal_fusion(tape, b.z_t1, b.z_i1)?;
            maps.push((f_ti, f_it));
            flats.push(flat);
        }
        let stacked = tape.concat_rows(&flats)?;
        let c1 = fp.c1_proj.forward(tape, params, stacked)?;

        // C2: learned constant under no_blip, otherwise lifted similarities.
        let c2 = if let Some(c2_const) = fp.c2_const {
            let row = tape.param(params, c2_const);
            let rows = vec![row; n];
            tape.concat_rows(&rows)?
        } else {
            let mut sims = Vec::with_capacity(n);
            for b in bundles {
                let t2 = tape.mean_rows(b.z_t2);
                let i2 = tape.mean_rows(b.z_i2);
                let zb = tape.mean_rows(b.z_b);
                let s_ti = (!flags.no_image && !flags.no_text && !flags.no_blip)
                    .then(|| tape.cosine_sim(t2, i2))
                    .transpose()?;
                let s_tb = (!flags.no_text && !flags.no_blip_joint && !flags.no_blip)
                    .then(|| tape.cosine_sim(t2, zb))
                    .transpose()?;
                let s_ib = (!flags.no_image && !flags.no_blip_joint && !flags.no_blip)
                    .then(|| tape.cosine_sim(i2, zb))
                    .transpose()?;
                sims.push(weighted_sim(tape, params, fp, s_ti, s_tb, s_ib)?);
            }
            let sims_col = tape.concat_rows(&sims)?;
            c2_branch(tape, params, fp, sims_col, bn, mode)?
        };
        let z_c = combine_zc(tape, params, fp, c1, c2, bn, mode, dropout_rng)?;
        (z_c, Some((maps, c1, c2)))
    };

    // Stream projections, batched over samples.
    let k = fp.dims.k_img;
    let all_t: Vec<ValueId> = bundles.iter().map(|b| b.z_t).collect();
    let all_i: Vec<ValueId> = bundles.iter().map(|b| b.z_i).collect();
    let stacked_t = tape.concat_rows(&all_t)?;
    let stacked_i = tape.concat_rows(&all_i)?;
    let proj_t_all = fp.proj_t.forward(tape, params, stacked_t)?;
    let proj_i_all = fp.proj_i.forward(tape, params, stacked_i)?;

    let mut unified_rows = Vec::with_capacity(n);
    let mut states = collect_states.then(Vec::new);
    for (s, _b) in bundles.iter().enumerate() {
        let z_t_proj = tape.slice_rows(proj_t_all, s * k, k);
        let z_i_proj = tape.slice_rows(proj_i_all, s * k, k);
        let z_c_token = tape.slice_rows(z_c, s, 1);

        let (f_t, f_i, f_c, unified) = if let Some(tt_linear) = &fp.tt_linear {
            // no_tt: concatenated mean-pooled streams through one linear map.
            let p_t = tape.mean_rows(z_t_proj);
            let p_i = tape.mean_rows(z_i_proj);
            let cat = tape.concat_cols(&[p_t, p_i, z_c_token])?;
            let unified = tt_linear.forward(tape, params, cat)?;
            (p_t, p_i, z_c_token, unified)
        } else {
            tri_transformer(tape, params, fp, z_t_proj, z_i_proj, z_c_token)?
        };
        unified_rows.push(unified);

        if let Some(states) = states.as_mut() {
            let (f_ti, f_it, c1_row, c2_row) = match &maps {
                Some((maps, c1, c2)) => {
                    let c1_row = tape.slice_rows(*c1, s, 1);
                    let c2_row = tape.slice_rows(*c2, s, 1);
                    (maps[s].0, maps[s].1, c1_row, c2_row)
                }
                None => {
                    // no_cm: no correlation pipeline ran; record uniform maps
                    // (the softmax of a zero map) and zero branch rows to keep
                    // the state shape-valid.
                    let uniform = tape.leaf(Matrix::from_vec(
                        k,
                        k,
                        vec![1.0 / k as f64; k * k],
                    ));
                    let zero_row = tape.leaf(Matrix::zeros(1, d_c));
                    (uniform, uniform, zero_row, zero_row)
                }
            };
            states.push(FusionStateIds {
                f_t_to_i: f_ti,
                f_i_to_t: f_it,
                c1: c1_row,
                c2: c2_row,
                z_c: z_c_token,
                f_t,
                f_i,
                f_c,
                unified,
            });
        }
    }
    let unified = tape.concat_rows(&unified_rows)?;
    Ok(CmttfOutput { unified, states })
}

/// Single-bundle convenience wrapper, eval mode (batch norm uses running
/// statistics, dropout is off). Train-mode fusion is inherently batched.
pub fn cmttf(
    tape: &mut Tape,
    params: &Params,
    fp: &FusionParams,
    bundle: BundleIds,
    bn: &mut FusionBnState,
) -> Result<FusionState> {
    let mut rng = RngStream::new(0, "cmttf-eval");
    let out = cmttf_batch(
        tape,
        params,
        fp,
        &[bundle],
        bn,
        Mode::Eval,
        &mut rng,
        true,
    )?;
    Ok(out.states.unwrap()[0].materialize(tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderSet, Sample};
    use crate::numerics::gradcheck::reverse_grads;

    fn dims() -> EncoderDims {
        EncoderDims {
            d_raw: 3,
            d_hidden: 4,
            d_emb: 4,
            k_img: 3,
            k_txt: 3,
        }
    }

    fn cfg() -> FusionConfig {
        FusionConfig {
            d_c: 8,
            heads: 2,
            dropout: 0.0,
        }
    }

    fn rand_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect())
    }

    #[test]
    fn identical_streams_give_identical_symmetric_maps() {
        let mut rng = RngStream::new(1, "imf");
        let m = rand_matrix(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let t = tape.leaf(m.clone());
        let i = tape.leaf(m);
        let (f_ti, f_it, _) = inter_modal_fusion(&mut tape, t, i).unwrap();
        let a = tape.value(f_ti);
        let b = tape.value(f_it);
        assert_eq!(a.data, b.data);
        // T = I makes the logit matrix symmetric, so each map equals the
        // softmax of a symmetric matrix; rows still sum to one.
        for r in 0..3 {
            let sum: f64 = a.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn orthogonal_equal_norm_tokens_give_uniform_rows() {
        // Three pairwise-orthogonal equal-norm tokens in each stream, chosen
        // so that every t-row dotted with every i-row is the same constant.
        let t = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let i = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let mut tape = Tape::new();
        let tv = tape.leaf(t);
        let iv = tape.leaf(i);
        let (f_ti, _, _) = inter_modal_fusion(&mut tape, tv, iv).unwrap();
        let m = tape.value(f_ti);
        for v in &m.data {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn correlation_maps_match_formula_oracle() {
        let mut rng = RngStream::new(2, "imf2");
        let t = rand_matrix(&mut rng, 3, 4);
        let i = rand_matrix(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let tv = tape.leaf(t.clone());
        let iv = tape.leaf(i.clone());
        let (f_ti, f_it, flat) = inter_modal_fusion(&mut tape, tv, iv).unwrap();
        let scale = 1.0 / 2.0; // 1/sqrt(4)
        let logits_ti = crate::numerics::matrix::matmul(&t, &i.transpose())
            .unwrap()
            .map(|v| v * scale);
        let want_ti = crate::numerics::matrix::softmax_rows(&logits_ti);
        for (a, b) in tape.value(f_ti).data.iter().zip(want_ti.data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let logits_it = crate::numerics::matrix::matmul(&i, &t.transpose())
            .unwrap()
            .map(|v| v * scale);
        let want_it = crate::numerics::matrix::softmax_rows(&logits_it);
        for (a, b) in tape.value(f_it).data.iter().zip(want_it.data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        // Flattened concatenation is row-major t->i then i->t, width 2k^2.
        assert_eq!(tape.value(flat).shape(), (1, 18));
        assert_eq!(&tape.value(flat).data[..9], &want_ti.data[..]);
    }

    #[test]
    fn combined_similarity_closed_forms() {
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        // All three vectors identical, w = (1,1,1), b = 0 -> 3.
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::from_rows(&[vec![0.4, -0.2, 0.9, 0.1]]));
        let s = combined_similarity(&mut tape, &params, &fp, v, v, v).unwrap();
        assert!((tape.value(s).item() - 3.0).abs() <= 1e-12);

        // w = (0,0,0), b = 0.5 -> 0.5 regardless of inputs.
        let mut params2 = Params::new();
        let fp2 = FusionParams::init(&mut params2, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        *params2.get_mut(fp2.w_ti) = Matrix::scalar(0.0);
        *params2.get_mut(fp2.w_tb) = Matrix::scalar(0.0);
        *params2.get_mut(fp2.w_ib) = Matrix::scalar(0.0);
        *params2.get_mut(fp2.b_sim) = Matrix::scalar(0.5);
        let mut tape2 = Tape::new();
        let a = tape2.leaf(Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let b = tape2.leaf(Matrix::from_rows(&[vec![-1.0, 0.5, 0.0, 2.0]]));
        let c = tape2.leaf(Matrix::from_rows(&[vec![0.3, 0.3, -0.3, 1.0]]));
        let s2 = combined_similarity(&mut tape2, &params2, &fp2, a, b, c).unwrap();
        assert!((tape2.value(s2).item() - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn combined_similarity_matches_hand_formula() {
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        let mut rng = RngStream::new(9, "cs");
        *params.get_mut(fp.w_ti) = Matrix::scalar(rng.next_normal());
        *params.get_mut(fp.w_tb) = Matrix::scalar(rng.next_normal());
        *params.get_mut(fp.w_ib) = Matrix::scalar(rng.next_normal());
        *params.get_mut(fp.b_sim) = Matrix::scalar(rng.next_normal());
        let t2 = rand_matrix(&mut rng, 1, 4);
        let i2 = rand_matrix(&mut rng, 1, 4);
        let zb = rand_matrix(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let tv = tape.leaf(t2.clone());
        let iv = tape.leaf(i2.clone());
        let bv = tape.leaf(zb.clone());
        let s = combined_similarity(&mut tape, &params, &fp, tv, iv, bv).unwrap();
        let cos = |a: &Matrix, b: &Matrix| {
            crate::numerics::matrix::cosine_sim(a.row(0), b.row(0)).unwrap()
        };
        let want = params.get(fp.w_ti).item() * cos(&t2, &i2)
            + params.get(fp.w_tb).item() * cos(&t2, &zb)
            + params.get(fp.w_ib).item() * cos(&i2, &zb)
            + params.get(fp.b_sim).item();
        assert!((tape.value(s).item() - want).abs() <= 1e-12);
    }

    #[test]
    fn combined_similarity_scale_invariant() {
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        let mut rng = RngStream::new(10, "csi");
        let t2 = rand_matrix(&mut rng, 1, 4);
        let i2 = rand_matrix(&mut rng, 1, 4);
        let zb = rand_matrix(&mut rng, 1, 4);
        let eval = |scale: f64, params: &Params| {
            let mut tape = Tape::new();
            let tv = tape.leaf(t2.map(|v| v * scale));
            let iv = tape.leaf(i2.clone());
            let bv = tape.leaf(zb.clone());
            let s = combined_similarity(&mut tape, params, &fp, tv, iv, bv).unwrap();
            tape.value(s).item()
        };
        let base = eval(1.0, &params);
        let scaled = eval(123.0, &params);
        assert!((base - scaled).abs() <= 1e-10);
    }

    #[test]
    fn c2_branch_zero_cases() {
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        // Zero final linear -> zero output regardless of input.
        *params.get_mut(fp.c2_out.w) = Matrix::zeros(8, 8);
        *params.get_mut(fp.c2_out.b) = Matrix::zeros(1, 8);
        let mut bn = FusionBnState::new(8);
        let mut tape = Tape::new();
        let sims = tape.leaf(Matrix::from_rows(&[vec![0.3], vec![-0.7], vec![1.1]]));
        let out = c2_branch(&mut tape, &params, &fp, sims, &mut bn, Mode::Train).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn c2_branch_constant_batch_is_zero_before_affine() {
        // Identical scalars across the batch: batch norm standardizes the
        // (constant) column to zero, so the pre-affine output is beta alone.
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        *params.get_mut(fp.c2_out.w) = Matrix::identity(8);
        *params.get_mut(fp.c2_out.b) = Matrix::zeros(1, 8);
        let mut bn = FusionBnState::new(8);
        let mut tape = Tape::new();
        let sims = tape.leaf(Matrix::from_rows(&[vec![0.4], vec![0.4], vec![0.4]]));
        let out = c2_branch(&mut tape, &params, &fp, sims, &mut bn, Mode::Train).unwrap();
        // gamma=1, beta=0, final linear identity with zero bias -> zeros.
        assert!(tape.value(out).data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn combine_zc_zero_inputs_zero_biases_eval_gives_zero() {
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        *params.get_mut(fp.zc_fc1.b) = Matrix::zeros(1, 8);
        *params.get_mut(fp.zc_fc2.b) = Matrix::zeros(1, 8);
        let mut bn = FusionBnState::new(8);
        let mut rng = RngStream::new(0, "drop");
        let mut tape = Tape::new();
        let c1 = tape.leaf(Matrix::zeros(3, 8));
        let c2 = tape.leaf(Matrix::zeros(3, 8));
        let out = combine_zc(&mut tape, &params, &fp, c1, c2, &mut bn, Mode::Eval, &mut rng).unwrap();
        // Zero input through zero-mean/unit-var running stats stays zero
        // through BN (beta=0) and the zero-bias linears keep it zero.
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_zc_dropout_rate_zero_train_equals_eval_modulo_bn() {
        let mut params = Params::new();
        let fp = FusionParams::init(&mut params, cfg(), dims(), AblationFlags::full(), 5).unwrap();
        let mut rng_in = RngStream::new(4, "zc");
        let c1m = rand_matrix(&mut rng_in, 4, 8);
        let c2m = rand_matrix(&mut rng_in, 4, 8);
        let run = |mode: Mode| {
            let mut bn = FusionBnState::new(8);
            let mut rng = RngStream::new(1, "drop");
            let mut tape = Tape::new();
            let c1 = tape.leaf(c1m.clone());
            let c2 = tape.leaf(c2m.clone());
            let out = combine_zc(&mut tape, &params, &fp, c1, c2, &mut bn, mode, &mut rng).unwrap();
            tape.value(out).data.clone()
        };
        // With dropout rate 0 the train/eval difference is batch norm only;
        // run train twice to confirm dropout itself adds no randomness.
        let a = run(Mode::Train);
        let b = run(Mode::Train);
        assert_eq!(a, b);
    }

    #[test]
    fn stream_independence_in_tri_transformer() {
        let d = dims();
        let mut params = Params::new();
        let enc = EncoderSet::init(&mut params, d, 21).unwrap();
        let fp = FusionParams::init(&mut params, cfg(), d, AblationFlags::full(), 5).unwrap();
        let mut rng = RngStream::new(7, "ti");
        let mk = |rng: &mut RngStream, id: &str| Sample {
            id: id.into(),
            image_tokens: rand_matrix(rng, d.k_img, d.d_raw),
            text_tokens: rand_matrix(rng, d.k_txt, d.d_raw),
            label: 0,
        };
        let s1 = mk(&mut rng, "a");
        let mut s2 = s1.clone();
        s2.image_tokens = rand_matrix(&mut rng, d.k_img, d.d_raw);

        let run = |s: &Sample| {
            let mut tape = Tape::new();
            let b = enc.encode_bundle(&mut tape, &params, s).unwrap();
            let mut bn = FusionBnState::new(8);
            let mut drop_rng = RngStream::new(0, "drop");
            let out = cmttf_batch(
                &mut tape,
                &params,
                &fp,
                &[b],
                &mut bn,
                Mode::Eval,
                &mut drop_rng,
                true,
            )
            .unwrap();
            let st = &out.states.unwrap()[0];
            (
                tape.value(st.f_t).data.clone(),
                tape.value(st.f_i).data.clone(),
            )
        };
        // Mutating the image leaves the text stream's attention output
        // exactly unchanged; the image stream must move.
        let (f_t_1, f_i_1) = run(&s1);
        let (f_t_2, f_i_2) = run(&s2);
        assert_eq!(f_t_1, f_t_2);
        assert_ne!(f_i_1, f_i_2);
    }

    #[test]
    fn single_token_stream_attention_is_linear() {
        let mut params = Params::new();
        let sp = StreamParams::init(&mut params, "s", 8, 2, 3).unwrap();
        let mut rng = RngStream::new(5, "tok");
        let tok = rand_matrix(&mut rng, 1, 8);
        let mut tape = Tape::new();
        let t = tape.leaf(tok.clone());
        let (attended, _) = sp.forward(&mut tape, &params, t).unwrap();
        // One token: softmax over a single score is 1, so attention reduces
        // to x Wv Wo.
        let wv = params.get(sp.att.wv);
        let wo = params.get(sp.att.wo);
        let want = crate::numerics::matrix::matmul(
            &crate::numerics::matrix::matmul(&tok, wv).unwrap(),
            wo,
        )
        .unwrap();
        for (a, b) in tape.value(attended).data.iter().zip(want.data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn no_cm_replaces_zc_with_learned_constant_and_stays_shape_valid() {
        let d = dims();
        let flags = AblationFlags {
            no_cm: true,
            ..Default::default()
        };
        let mut params = Params::new();
        let enc = EncoderSet::init(&mut params, d, 21).unwrap();
        let fp = FusionParams::init(&mut params, cfg(), d, flags, 5).unwrap();
        assert!(fp.zc_const.is_some());
        let mut rng = RngStream::new(7, "nocm");
        let s = Sample {
            id: "x".into(),
            image_tokens: rand_matrix(&mut rng, d.k_img, d.d_raw),
            text_tokens: rand_matrix(&mut rng, d.k_txt, d.d_raw),
            label: 1,
        };
        let mut tape = Tape::new();
        let b = enc.encode_bundle(&mut tape, &params, &s).unwrap();
        let mut bn = FusionBnState::new(8);
        let mut drop_rng = RngStream::new(0, "drop");
        let out = cmttf_batch(
            &mut tape,
            &params,
            &fp,
            &[b],
            &mut bn,
            Mode::Eval,
            &mut drop_rng,
            true,
        )
        .unwrap();
        assert_eq!(tape.value(out.unified).shape(), (1, 24));
        let st = &out.states.unwrap()[0];
        assert_eq!(
            tape.value(st.z_c).data,
            params.get(fp.zc_const.unwrap()).data
        );
    }

    #[test]
    fn no_tt_output_width_matches_classifier_input_width() {
        let d = dims();
        let flags = AblationFlags {
            no_tt: true,
            ..Default::default()
        };
        let mut params = Params::new();
        let enc = EncoderSet::init(&mut params, d, 21).unwrap();
        let fp = FusionParams::init(&mut params, cfg(), d, flags, 5).unwrap();
        let mut rng = RngStream::new(8, "nott");
        let s = Sample {
            id: "x".into(),
            image_tokens: rand_matrix(&mut rng, d.k_img, d.d_raw),
            text_tokens: rand_matrix(&mut rng, d.k_txt, d.d_raw),
            label: 0,
        };
        let mut tape = Tape::new();
        let b = enc.encode_bundle(&mut tape, &params, &s).unwrap();
        let mut bn = FusionBnState::new(8);
        let mut drop_rng = RngStream::new(0, "drop");
        let out = cmttf_batch(
            &mut tape,
            &params,
            &fp,
            &[b],
            &mut bn,
            Mode::Eval,
            &mut drop_rng,
            false,
        )
        .unwrap();
        assert_eq!(tape.value(out.unified).shape(), (1, 3 * 8));
    }

    #[test]
    fn gradients_flow_end_to_end_through_cmttf() {
        let d = dims();
        let mut params = Params::new();
        let enc = EncoderSet::init(&mut params, d, 21).unwrap();
        let fp = FusionParams::init(&mut params, cfg(), d, AblationFlags::full(), 5).unwrap();
        let mut rng = RngStream::new(9, "grad");
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                id: format!("s{i}"),
                image_tokens: rand_matrix(&mut rng, d.k_img, d.d_raw),
                text_tokens: rand_matrix(&mut rng, d.k_txt, d.d_raw),
                label: (i % 2) as u8,
            })
            .collect();
        let loss_fn = |p: &Params, tape: &mut Tape| {
            let bundles: Vec<_> = samples
                .iter()
                .map(|s| enc.encode_bundle(tape, p, s).unwrap())
                .collect();
            let mut bn = FusionBnState::new(8);
            let mut drop_rng = RngStream::new(3, "drop");
            let out = cmttf_batch(tape, p, &fp, &bundles, &mut bn, Mode::Train, &mut drop_rng, false)?;
            // Weighted scalar readout of the unified features.
            let (r, c) = tape.value(out.unified).shape();
            let mut wrng = RngStream::new(17, "read");
            let w = tape.leaf(Matrix::from_vec(
                r,
                c,
                (0..r * c).map(|_| wrng.next_normal()).collect(),
            ));
            let prod = tape.hadamard(out.unified, w)?;
            let flat = tape.flatten_row(prod);
            let ones = tape.leaf(Matrix::from_vec(r * c, 1, vec![1.0; r * c]));
            tape.matmul(flat, ones)
        };
        let (loss, grads) = reverse_grads(&params, &loss_fn).unwrap();
        assert!(loss.is_finite());
        let ids: Vec<_> = params.ids().collect();
        let report = crate::numerics::gradcheck::fd_compare(
            &mut params,
            &ids,
            &loss_fn,
            loss,
            &grads,
            30,
            1e-6,
            123,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-5,
            "cmttf grad check failed: {} ({:?})",
            report.max_rel_err,
            report.worst
        );
    }
}
