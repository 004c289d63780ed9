//! Synthetic multimodal dataset generation and line-oriented dataset files.
//!
//! Samples are generated directly in token-feature space. Each topic owns an
//! orthonormal direction; real samples put both modalities on the same topic,
//! fakes realize one of four inconsistency archetypes:
//!   a: image tokens carry a structured corruption vector
//!   b: both modalities corrupted
//!   c: image topic != text topic (inter-modal inconsistency)
//!   d: half the image tokens come from a different topic

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Sample;
use crate::error::{CromeError, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;

pub const DATASET_FORMAT_VERSION: &str = "cromekit-ds-1";

const EPS_SCALE: f64 = 0.5;
/// Scale of the shared topic direction inside every token.
const TOPIC_SCALE: f64 = 1.0;
const CORRUPTION_SCALE: f64 = 2.0;
/// Scale of the per-sample style component shared between the two modalities
/// of one news item. Unrelated (archetype c) pairs draw independent styles,
/// so cross-modal agreement carries the style match while each modality alone
/// sees it as noise.
const STYLE_SCALE: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub n_samples: usize,
    pub fake_fraction: f64,
    /// Fractions of fakes per archetype (a, b, c, d); must sum to 1.
    pub archetype_mix: [f64; 4],
    pub n_topics: usize,
    pub noise_sigma: f64,
    pub d_raw: usize,
    pub k_img: usize,
    pub k_txt: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_samples: 2000,
            fake_fraction: 0.5,
            archetype_mix: [0.25, 0.25, 0.25, 0.25],
            n_topics: 8,
            noise_sigma: 0.3,
            d_raw: 16,
            k_img: 4,
            k_txt: 4,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(CromeError::Config("gen.n_samples must be > 0".into()));
        }
        if !(self.fake_fraction > 0.0 && self.fake_fraction < 1.0) {
            return Err(CromeError::Config(format!(
                "gen.fake_fraction must be in (0, 1), got {}",
                self.fake_fraction
            )));
        }
        let mix_sum: f64 = self.archetype_mix.iter().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.archetype_mix.iter().any(|&f| f < 0.0) {
            return Err(CromeError::Config(format!(
                "gen.archetype_mix must be nonnegative and sum to 1, got {:?}",
                self.archetype_mix
            )));
        }
        if self.n_topics < 2 {
            return Err(CromeError::Config("gen.n_topics must be >= 2".into()));
        }
        if self.n_topics >= self.d_raw {
            return Err(CromeError::Config(format!(
                "gen.n_topics ({}) must be < gen.d_raw ({}) to leave room for token offsets",
                self.n_topics, self.d_raw
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CromeError::Config("gen.noise_sigma must be >= 0".into()));
        }
        if self.k_img == 0 || self.k_txt == 0 || self.d_raw == 0 {
            return Err(CromeError::Config("token dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: String,
    pub n_samples: usize,
    pub d_raw: usize,
    pub k_img: usize,
    pub k_txt: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenSpec>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Topic geometry shared by all samples of one generated dataset.
struct TopicModel {
    /// Orthonormal topic directions, n_topics x d_raw.
    topics: Matrix,
    /// Per-token offsets in the orthogonal complement of the topic span.
    eps_img: Matrix,
    eps_txt: Matrix,
    /// Structured corruption directions, also in the complement.
    corrupt_img: Vec<f64>,
    corrupt_txt: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Project `v` onto the orthogonal complement of the rows of `basis`.
fn project_out(v: &mut [f64], basis: &Matrix) {
    for r in 0..basis.rows {
        let row = basis.row(r);
        let dot: f64 = v.iter().zip(row).map(|(a, b)| a * b).sum();
        for (x, b) in v.iter_mut().zip(row) {
            *x -= dot * b;
        }
    }
}

impl TopicModel {
    fn build(spec: &GenSpec) -> Self {
        let d = spec.d_raw;
        let mut rng = RngStream::new(spec.seed, "data/topics");
        // Gram-Schmidt over Gaussian draws gives an orthonormal topic basis.
        let mut topics = Matrix::zeros(spec.n_topics, d);
        for t in 0..spec.n_topics {
            let mut v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
            let partial = Matrix::from_vec(t, d, topics.data[..t * d].to_vec());
            project_out(&mut v, &partial);
            normalize(&mut v);
            topics.row_mut(t).copy_from_slice(&v);
        }
        let complement_vec = |rng: &mut RngStream, scale: f64| -> Vec<f64> {
            let mut v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
            project_out(&mut v, &topics);
            normalize(&mut v);
            v.iter().map(|x| x * scale).collect()
        };
        let mut eps_rng = RngStream::new(spec.seed, "data/offsets");
        let mut eps_img = Matrix::zeros(spec.k_img, d);
        for j in 0..spec.k_img {
            let v = complement_vec(&mut eps_rng, EPS_SCALE);
            eps_img.row_mut(j).copy_from_slice(&v);
        }
        let mut eps_txt = Matrix::zeros(spec.k_txt, d);
        for j in 0..spec.k_txt {
            let v = complement_vec(&mut eps_rng, EPS_SCALE);
            eps_txt.row_mut(j).copy_from_slice(&v);
        }
        let mut corrupt_rng = RngStream::new(spec.seed, "data/corruption");
        let corrupt_img = complement_vec(&mut corrupt_rng, CORRUPTION_SCALE);
        let corrupt_txt = complement_vec(&mut corrupt_rng, CORRUPTION_SCALE);
        TopicModel {
            topics,
            eps_img,
            eps_txt,
            corrupt_img,
            corrupt_txt,
        }
    }

    fn image_proto(&self, topic: usize, token: usize) -> Vec<f64> {
        self.topics
            .row(topic)
            .iter()
            .zip(self.eps_img.row(token))
            .map(|(u, e)| TOPIC_SCALE * u + e)
            .collect()
    }

    fn text_proto(&self, topic: usize, token: usize) -> Vec<f64> {
        self.topics
            .row(topic)
            .iter()
            .zip(self.eps_txt.row(token))
            .map(|(u, e)| TOPIC_SCALE * u + e)
            .collect()
    }
}

/// Largest-remainder allocation of `total` into integer counts per fraction.
fn allocate(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: usize = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Generate a synthetic dataset. Deterministic given the spec (including its
/// seed): real samples first, then fakes grouped by archetype a, b, c, d.
/// Sample ids encode the archetype (`real-i`, `fake-a-i`, ...).
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let model = TopicModel::build(spec);
    let n_fake = (spec.n_samples as f64 * spec.fake_fraction).round() as usize;
    let n_real = spec.n_samples - n_fake;
    let arch_counts = allocate(n_fake, &spec.archetype_mix);

    let mut topic_rng = RngStream::new(spec.seed, "data/topic-pick");
    let mut noise_rng = RngStream::new(spec.seed, "data/noise");
    let mut style_rng = RngStream::new(spec.seed, "data/style");
    let mut samples = Vec::with_capacity(spec.n_samples);

    for i in 0..n_real {
        let topic = topic_rng.next_below(spec.n_topics);
        let style = draw_style(spec, &mut style_rng);
        let tokens = TokenPlan {
            img_topics: vec![topic; spec.k_img],
            img_styles: vec![&style; spec.k_img],
            txt_topic: topic,
            txt_style: &style,
            corrupt_img: false,
            corrupt_txt: false,
        };
        samples.push(emit(spec, &model, format!("real-{i:05}"), 0, &tokens, &mut noise_rng));
    }
    let archetypes = ["a", "b", "c", "d"];
    for (arch_idx, &count) in arch_counts.iter().enumerate() {
        for i in 0..count {
            let topic = topic_rng.next_below(spec.n_topics);
            let id = format!("fake-{}-{i:05}", archetypes[arch_idx]);
            let style = draw_style(spec, &mut style_rng);
            let sample = match arch_idx {
                // a: image tokens carry the structured corruption vector.
                0 => emit(
                    spec,
                    &model,
                    id,
                    1,
                    &TokenPlan {
                        img_topics: vec![topic; spec.k_img],
                        img_styles: vec![&style; spec.k_img],
                        txt_topic: topic,
                        txt_style: &style,
                        corrupt_img: true,
                        corrupt_txt: false,
                    },
                    &mut noise_rng,
                ),
                // b: both modalities corrupted.
                1 => emit(
                    spec,
                    &model,
                    id,
                    1,
                    &TokenPlan {
                        img_topics: vec![topic; spec.k_img],
                        img_styles: vec![&style; spec.k_img],
                        txt_topic: topic,
                        txt_style: &style,
                        corrupt_img: true,
                        corrupt_txt: true,
                    },
                    &mut noise_rng,
                ),
                // c: unrelated image and text: different topic and an
                // independently drawn style.
                2 => {
                    let other =
                        (topic + 1 + topic_rng.next_below(spec.n_topics - 1)) % spec.n_topics;
                    let img_style = draw_style(spec, &mut style_rng);
                    emit(
                        spec,
                        &model,
                        id,
                        1,
                        &TokenPlan {
                            img_topics: vec![other; spec.k_img],
                            img_styles: vec![&img_style; spec.k_img],
                            txt_topic: topic,
                            txt_style: &style,
                            corrupt_img: false,
                            corrupt_txt: false,
                        },
                        &mut noise_rng,
                    )
                }
                // d: half the image tokens come from a different topic, i.e.
                // from a different item, so they also carry that item's style.
                _ => {
                    let other =
                        (topic + 1 + topic_rng.next_below(spec.n_topics - 1)) % spec.n_topics;
                    let borrowed_style = draw_style(spec, &mut style_rng);
                    let half = spec.k_img.div_ceil(2);
                    let mut img_topics = vec![topic; spec.k_img];
                    let mut img_styles: Vec<&[f64]> = vec![&style; spec.k_img];
                    for j in 0..half {
                        img_topics[j] = other;
                        img_styles[j] = &borrowed_style;
                    }
                    emit(
                        spec,
                        &model,
                        id,
                        1,
                        &TokenPlan {
                            img_topics,
                            img_styles,
                            txt_topic: topic,
                            txt_style: &style,
                            corrupt_img: false,
                            corrupt_txt: false,
                        },
                        &mut noise_rng,
                    )
                }
            };
            samples.push(sample);
        }
    }

    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_FORMAT_VERSION.to_string(),
            n_samples: spec.n_samples,
            d_raw: spec.d_raw,
            k_img: spec.k_img,
            k_txt: spec.k_txt,
            gen: Some(spec.clone()),
        },
        samples,
    })
}

/// Fixed-norm per-sample style draw: genuinely paired modalities then agree
/// tightly instead of through a chi-squared tail that overlaps the unrelated
/// case.
fn draw_style(spec: &GenSpec, rng: &mut RngStream) -> Vec<f64> {
    let mut v: Vec<f64> = (0..spec.d_raw).map(|_| rng.next_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let target = STYLE_SCALE * (spec.d_raw as f64).sqrt();
    for x in v.iter_mut() {
        *x *= target / norm;
    }
    v
}

/// Everything that determines one sample's tokens. One news item couples its
/// modalities through a shared style; unrelated pairings (archetype c, and
/// the borrowed image half of archetype d) use independently drawn styles.
struct TokenPlan<'a> {
    img_topics: Vec<usize>,
    img_styles: Vec<&'a [f64]>,
    txt_topic: usize,
    txt_style: &'a [f64],
    corrupt_img: bool,
    corrupt_txt: bool,
}

fn emit(
    spec: &GenSpec,
    model: &TopicModel,
    id: String,
    label: u8,
    plan: &TokenPlan<'_>,
    noise_rng: &mut RngStream,
) -> Sample {
    let mut img = Matrix::zeros(spec.k_img, spec.d_raw);
    for j in 0..spec.k_img {
        let mut tok = model.image_proto(plan.img_topics[j], j);
        for (x, s) in tok.iter_mut().zip(plan.img_styles[j]) {
            *x += s;
        }
        if plan.corrupt_img {
            for (x, w) in tok.iter_mut().zip(&model.corrupt_img) {
                *x += w;
            }
        }
        for x in tok.iter_mut() {
            *x += spec.noise_sigma * noise_rng.next_normal();
        }
        img.row_mut(j).copy_from_slice(&tok);
    }
    let mut txt = Matrix::zeros(spec.k_txt, spec.d_raw);
    for j in 0..spec.k_txt {
        let mut tok = model.text_proto(plan.txt_topic, j);
        for (x, s) in tok.iter_mut().zip(plan.txt_style) {
            *x += s;
        }
        if plan.corrupt_txt {
            for (x, w) in tok.iter_mut().zip(&model.corrupt_txt) {
                *x += w;
            }
        }
        for x in tok.iter_mut() {
            *x += spec.noise_sigma * noise_rng.next_normal();
        }
        txt.row_mut(j).copy_from_slice(&tok);
    }
    Sample {
        id,
        image_tokens: img,
        text_tokens: txt,
        label,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    label: u8,
    img: Vec<Vec<f64>>,
    txt: Vec<Vec<f64>>,
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &dataset.header)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        let rec = Record {
            id: s.id.clone(),
            label: s.label,
            img: (0..s.image_tokens.rows)
                .map(|r| s.image_tokens.row(r).to_vec())
                .collect(),
            txt: (0..s.text_tokens.rows)
                .map(|r| s.text_tokens.row(r).to_vec())
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CromeError::Parse {
            line: 1,
            msg: "empty dataset file".into(),
        })??;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| CromeError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(CromeError::Schema(format!(
            "unsupported dataset format version {:?} (expected {DATASET_FORMAT_VERSION:?})",
            header.version
        )));
    }
    let mut samples = Vec::with_capacity(header.n_samples);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CromeError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.img.len() != header.k_img
            || rec.txt.len() != header.k_txt
            || rec.img.iter().any(|r| r.len() != header.d_raw)
            || rec.txt.iter().any(|r| r.len() != header.d_raw)
        {
            return Err(CromeError::Schema(format!(
                "record {} at line {line_no} does not match header dims (k_img={}, k_txt={}, d_raw={})",
                rec.id, header.k_img, header.k_txt, header.d_raw
            )));
        }
        if rec.label > 1 {
            return Err(CromeError::Schema(format!(
                "record {} at line {line_no} has label {} outside {{0, 1}}",
                rec.id, rec.label
            )));
        }
        samples.push(Sample {
            id: rec.id,
            image_tokens: Matrix::from_rows(&rec.img),
            text_tokens: Matrix::from_rows(&rec.txt),
            label: rec.label,
        });
    }
    if samples.len() != header.n_samples {
        return Err(CromeError::Schema(format!(
            "header declares {} samples but file holds {}",
            header.n_samples,
            samples.len()
        )));
    }
    Ok(Dataset { header, samples })
}

/// Stratified split by label, deterministic given the seed.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CromeError::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = RngStream::new(seed, "split");
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut idx);
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let subset = |indices: &[usize]| Dataset {
        header: DatasetHeader {
            n_samples: indices.len(),
            ..dataset.header.clone()
        },
        samples: indices.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    Ok((subset(&train_idx), subset(&test_idx)))
}
