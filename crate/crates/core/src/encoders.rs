//! Toy stand-ins for the five pretrained encoders.
//!
//! Each encoder is a two-layer per-token MLP. The three joint encoders
//! consume image and text token blocks stacked feature-wise, one joint token
//! per position, which is what makes the isolation trick literal: the
//! image-only encoding feeds an all-zero text block, the text-only encoding
//! an all-zero image block. Joint encoders therefore require equal image and
//! text token counts.

use serde::{Deserialize, Serialize};

use crate::error::{CromeError, Result};
use crate::numerics::layers::LinearParams;
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, ValueId};
use crate::params::{Group, Params};

/// One news item: precomputed feature tokens per modality plus the label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_tokens: Matrix,
    pub text_tokens: Matrix,
    pub label: u8,
}

/// The five modality encodings plus the two feature-wise concatenations.
/// Column layout of the concatenations is fixed: features [0, d_emb) come
/// from the primary encoder, [d_emb, 2*d_emb) from the BLIP-role encoder.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub z_i1: Matrix,
    pub z_i2: Matrix,
    pub z_t1: Matrix,
    pub z_t2: Matrix,
    pub z_b: Matrix,
    pub z_i: Matrix,
    pub z_t: Matrix,
}

/// Tape handles for one sample's encodings.
#[derive(Debug, Clone, Copy)]
pub struct BundleIds {
    pub z_i1: ValueId,
    pub z_i2: ValueId,
    pub z_t1: ValueId,
    pub z_t2: ValueId,
    pub z_b: ValueId,
    pub z_i: ValueId,
    pub z_t: ValueId,
}

impl BundleIds {
    pub fn modality(&self, m: Modality) -> ValueId {
        match m {
            Modality::ImagePrimary => self.z_i1,
            Modality::ImageBlip => self.z_i2,
            Modality::TextPrimary => self.z_t1,
            Modality::TextBlip => self.z_t2,
            Modality::Joint => self.z_b,
        }
    }

    pub fn materialize(&self, tape: &Tape) -> EmbeddingBundle {
        EmbeddingBundle {
            z_i1: tape.value(self.z_i1).clone(),
            z_i2: tape.value(self.z_i2).clone(),
            z_t1: tape.value(self.z_t1).clone(),
            z_t2: tape.value(self.z_t2).clone(),
            z_b: tape.value(self.z_b).clone(),
            z_i: tape.value(self.z_i).clone(),
            z_t: tape.value(self.z_t).clone(),
        }
    }
}

/// The five modality tags, in the fixed round-robin order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    ImagePrimary,
    ImageBlip,
    TextPrimary,
    TextBlip,
    Joint,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::ImagePrimary,
        Modality::ImageBlip,
        Modality::TextPrimary,
        Modality::TextBlip,
        Modality::Joint,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Modality::ImagePrimary => "z_i1",
            Modality::ImageBlip => "z_i2",
            Modality::TextPrimary => "z_t1",
            Modality::TextBlip => "z_t2",
            Modality::Joint => "z_b",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Modality> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| CromeError::Config(format!("unknown modality tag {tag}")))
    }

    pub fn group(&self) -> Group {
        match self {
            Modality::ImagePrimary => Group::EncoderImagePrimary,
            Modality::ImageBlip => Group::EncoderImageBlip,
            Modality::TextPrimary => Group::EncoderTextPrimary,
            Modality::TextBlip => Group::EncoderTextBlip,
            Modality::Joint => Group::EncoderJoint,
        }
    }
}

/// Token dimensions shared by the encoders and the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDims {
    pub d_raw: usize,
    pub d_hidden: usize,
    pub d_emb: usize,
    pub k_img: usize,
    pub k_txt: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            d_raw: 16,
            d_hidden: 32,
            d_emb: 32,
            k_img: 4,
            k_txt: 4,
        }
    }
}

/// Two linear layers with ReLU between, applied per token.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub d_in: usize,
    pub d_emb: usize,
}

impl ToyEncoder {
    pub fn init(
        params: &mut Params,
        name: &str,
        group: Group,
        d_in: usize,
        d_hidden: usize,
        d_emb: usize,
        seed: u64,
    ) -> Self {
        ToyEncoder {
            l1: LinearParams::init(params, &format!("{name}.l1"), group, d_in, d_hidden, seed),
            l2: LinearParams::init(params, &format!("{name}.l2"), group, d_hidden, d_emb, seed),
            d_in,
            d_emb,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, tokens: ValueId) -> Result<ValueId> {
        let width = tape.value(tokens).cols;
        if width != self.d_in {
            return Err(CromeError::shape(
                "toy_encoder",
                tape.value(tokens).shape(),
                (tape.value(tokens).rows, self.d_in),
            ));
        }
        let h = self.l1.forward(tape, params, tokens)?;
        let a = tape.relu(h);
        self.l2.forward(tape, params, a)
    }
}

/// The five encoders, each bound to its own optimizer group.
#[derive(Debug, Clone)]
pub struct EncoderSet {
    pub mae: ToyEncoder,
    pub bert: ToyEncoder,
    pub blip_img: ToyEncoder,
    pub blip_txt: ToyEncoder,
    pub blip_joint: ToyEncoder,
    pub dims: EncoderDims,
}

/// Which halves of the joint token a structured encoder passes through at
/// initialization.
enum AlignedRole {
    ImageHalf,
    TextHalf,
    BothHalves,
    Unimodal,
}

impl EncoderSet {
    pub fn init(params: &mut Params, dims: EncoderDims, seed: u64) -> Result<Self> {
        if dims.k_img != dims.k_txt {
            return Err(CromeError::Config(format!(
                "joint encoders require k_img == k_txt, got {} and {}",
                dims.k_img, dims.k_txt
            )));
        }
        let (d, h, e) = (dims.d_raw, dims.d_hidden, dims.d_emb);
        let set = EncoderSet {
            mae: ToyEncoder::init(params, "mae", Group::EncoderImagePrimary, d, h, e, seed),
            bert: ToyEncoder::init(params, "bert", Group::EncoderTextPrimary, d, h, e, seed),
            blip_img: ToyEncoder::init(params, "blip_img", Group::EncoderImageBlip, 2 * d, h, e, seed),
            blip_txt: ToyEncoder::init(params, "blip_txt", Group::EncoderTextBlip, 2 * d, h, e, seed),
            blip_joint: ToyEncoder::init(params, "blip_joint", Group::EncoderJoint, 2 * d, h, e, seed),
            dims,
        };
        // The encoders stand in for pretrained models whose features are
        // comparable across modalities (one BLIP2-OPT backbone serves all
        // three roles). When the hidden width allows it, re-initialize each
        // encoder as an alignment-preserving map: hidden = relu([x, -x]),
        // output = (relu(x) - relu(-x)) R = x R, with the projection R shared
        // within an encoder family. Cross-modal cosine and correlation
        // structure is then visible from the first epoch, as it would be with
        // genuinely pretrained encoders; training refines from there.
        if h >= 2 * d {
            let r_primary = shared_code(seed, "init/shared_code_primary", d, e);
            let r_blip = shared_code(seed, "init/shared_code_blip", d, e);
            align_encoder(params, &set.mae, &r_primary, AlignedRole::Unimodal, seed);
            align_encoder(params, &set.bert, &r_primary, AlignedRole::Unimodal, seed);
            align_encoder(params, &set.blip_img, &r_blip, AlignedRole::ImageHalf, seed);
            align_encoder(params, &set.blip_txt, &r_blip, AlignedRole::TextHalf, seed);
            align_encoder(params, &set.blip_joint, &r_blip, AlignedRole::BothHalves, seed);
        }
        Ok(set)
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let d = self.dims;
        if s.image_tokens.shape() != (d.k_img, d.d_raw) || s.text_tokens.shape() != (d.k_txt, d.d_raw) {
            return Err(CromeError::Schema(format!(
                "sample {} has token shapes {:?}/{:?}, expected {:?}/{:?}",
                s.id,
                s.image_tokens.shape(),
                s.text_tokens.shape(),
                (d.k_img, d.d_raw),
                (d.k_txt, d.d_raw)
            )));
        }
        Ok(())
    }

    /// Joint token block: image and text tokens stacked feature-wise.
    fn joint_input(
        &self,
        tape: &mut Tape,
        img: Option<ValueId>,
        txt: Option<ValueId>,
    ) -> Result<ValueId> {
        let d = self.dims;
        let img = img.unwrap_or_else(|| tape.leaf(Matrix::zeros(d.k_img, d.d_raw)));
        let txt = txt.unwrap_or_else(|| tape.leaf(Matrix::zeros(d.k_txt, d.d_raw)));
        tape.concat_cols(&[img, txt])
    }

    /// z_i1: primary image encoding, depends only on image tokens.
    pub fn encode_image_mae(&self, tape: &mut Tape, params: &Params, s: &Sample) -> Result<ValueId> {
        self.check_sample(s)?;
        let img = tape.leaf(s.image_tokens.clone());
        self.mae.forward(tape, params, img)
    }

    /// z_i2: joint encoder over (image tokens, dummy all-zero text block).
    pub fn encode_image_blip(&self, tape: &mut Tape, params: &Params, s: &Sample) -> Result<ValueId> {
        self.check_sample(s)?;
        let img = tape.leaf(s.image_tokens.clone());
        let joint = self.joint_input(tape, Some(img), None)?;
        self.blip_img.forward(tape, params, joint)
    }

    /// z_t1: primary text encoding, depends only on text tokens.
    pub fn encode_text_bert(&self, tape: &mut Tape, params: &Params, s: &Sample) -> Result<ValueId> {
        self.check_sample(s)?;
        let txt = tape.leaf(s.text_tokens.clone());
        self.bert.forward(tape, params, txt)
    }

    /// z_t2: joint encoder over (zero-filled image block, text tokens).
    pub fn encode_text_blip(&self, tape: &mut Tape, params: &Params, s: &Sample) -> Result<ValueId> {
        self.check_sample(s)?;
        let txt = tape.leaf(s.text_tokens.clone());
        let joint = self.joint_input(tape, None, Some(txt))?;
        self.blip_txt.forward(tape, params, joint)
    }

    /// z_b: joint encoder over both real modalities.
    pub fn encode_joint(&self, tape: &mut Tape, params: &Params, s: &Sample) -> Result<ValueId> {
        self.check_sample(s)?;
        let img = tape.leaf(s.image_tokens.clone());
        let txt = tape.leaf(s.text_tokens.clone());
        let joint = self.joint_input(tape, Some(img), Some(txt))?;
        self.blip_joint.forward(tape, params, joint)
    }

    /// All five encodings plus the fixed-layout concatenations.
    pub fn encode_bundle(&self, tape: &mut Tape, params: &Params, s: &Sample) -> Result<BundleIds> {
        let z_i1 = self.encode_image_mae(tape, params, s)?;
        let z_i2 = self.encode_image_blip(tape, params, s)?;
        let z_t1 = self.encode_text_bert(tape, params, s)?;
        let z_t2 = self.encode_text_blip(tape, params, s)?;
        let z_b = self.encode_joint(tape, params, s)?;
        let z_i = tape.concat_cols(&[z_i1, z_i2])?;
        let z_t = tape.concat_cols(&[z_t1, z_t2])?;
        Ok(BundleIds {
            z_i1,
            z_i2,
            z_t1,
            z_t2,
            z_b,
            z_i,
            z_t,
        })
    }
}


/// Shared projection code: d_raw x d_emb, drawn from a named stream so every
/// encoder family member sees the identical matrix.
fn shared_code(seed: u64, name: &str, d_raw: usize, d_emb: usize) -> Matrix {
    let mut rng = crate::numerics::rng::RngStream::new(seed, name);
    let std = 1.0 / (d_raw as f64).sqrt();
    Matrix::from_vec(
        d_raw,
        d_emb,
        (0..d_raw * d_emb).map(|_| std * rng.next_normal()).collect(),
    )
}

/// Overwrite an encoder's weights with the alignment-preserving pattern: the
/// first 2*d_raw hidden units compute [x, -x] of the selected input half(s);
/// the output layer applies +R to the positive copy and -R to the negative
/// copy, yielding x R exactly, plus a small random perturbation to break
/// symmetry between the encoders.
fn align_encoder(
    params: &mut Params,
    enc: &ToyEncoder,
    code: &Matrix,
    role: AlignedRole,
    seed: u64,
) {
    const PERTURB: f64 = 0.12;
    let d_raw = code.rows;
    let d_emb = code.cols;
    let name = params.name(enc.l1.w).to_string();
    let mut rng = crate::numerics::rng::RngStream::new(seed, &format!("init/align/{name}"));
    let d_in = enc.d_in;
    let w1 = params.get_mut(enc.l1.w);
    let d_hidden = w1.cols;
    for v in w1.data.iter_mut() {
        *v = PERTURB * rng.next_normal();
    }
    let mut passthrough = |w1: &mut Matrix, input_offset: usize| {
        for i in 0..d_raw {
            w1.data[(input_offset + i) * d_hidden + i] += 1.0;
            w1.data[(input_offset + i) * d_hidden + d_raw + i] += -1.0;
        }
    };
    match role {
        AlignedRole::Unimodal | AlignedRole::ImageHalf => passthrough(w1, 0),
        AlignedRole::TextHalf => passthrough(w1, d_in - d_raw),
        AlignedRole::BothHalves => {
            passthrough(w1, 0);
            passthrough(w1, d_in - d_raw);
        }
    }
    let w2 = params.get_mut(enc.l2.w);
    for v in w2.data.iter_mut() {
        *v = PERTURB * rng.next_normal();
    }
    for i in 0..d_raw {
        for j in 0..d_emb {
            w2.data[i * d_emb + j] += code.get(i, j);
            w2.data[(d_raw + i) * d_emb + j] += -code.get(i, j);
        }
    }
}
