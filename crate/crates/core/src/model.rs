//! The assembled detector: five encoders, the fused cross-modal pipeline,
//! and the classifier head, built from one validated config.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::detector::{DetectorBnState, DetectorParams};
use crate::encoders::{BundleIds, EncoderSet, Modality, Sample};
use crate::error::{CromeError, Result};
use crate::fusion::{cmttf_batch, FusionBnState, FusionParams, FusionStateIds};
use crate::metric::{metric_loss_for_epoch, modality_schedule, schedule_over};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Mode, Tape, ValueId};
use crate::params::Params;

pub use crate::metric::{modality_schedule as schedule, ProxyAssignment};

#[derive(Debug, Clone)]
pub struct CroMeModel {
    pub params: Params,
    pub encoders: EncoderSet,
    pub fusion: FusionParams,
    pub detector: DetectorParams,
    pub config: RunConfig,
}

/// Mutable non-parameter state: batch-norm running statistics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelState {
    pub fusion_bn: FusionBnState,
    pub detector_bn: DetectorBnState,
}

pub struct BatchOutput {
    pub bundles: Vec<BundleIds>,
    pub unified: ValueId,
    pub logits: ValueId,
    pub probs: ValueId,
    pub ce: ValueId,
    pub metric: Option<ValueId>,
    pub total: ValueId,
    pub fusion_states: Option<Vec<FusionStateIds>>,
}

impl CroMeModel {
    pub fn build(config: &RunConfig) -> Result<(CroMeModel, ModelState)> {
        config.validate()?;
        let mut params = Params::new();
        let encoders = EncoderSet::init(&mut params, config.dims, config.seed)?;
        let fusion = FusionParams::init(
            &mut params,
            config.fusion,
            config.dims,
            config.ablate,
            config.seed,
        )?;
        let (detector, detector_bn) = DetectorParams::init(
            &mut params,
            3 * config.fusion.d_c,
            config.detector,
            config.seed,
        );
        let state = ModelState {
            fusion_bn: FusionBnState::new(config.fusion.d_c),
            detector_bn,
        };
        Ok((
            CroMeModel {
                params,
                encoders,
                fusion,
                detector,
                config: config.clone(),
            },
            state,
        ))
    }

    /// Dataset dims must match the model dims exactly.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let d = self.config.dims;
        let h = &dataset.header;
        if h.d_raw != d.d_raw || h.k_img != d.k_img || h.k_txt != d.k_txt {
            return Err(CromeError::Schema(format!(
                "dataset dims (d_raw={}, k_img={}, k_txt={}) do not match model dims (d_raw={}, k_img={}, k_txt={})",
                h.d_raw, h.k_img, h.k_txt, d.d_raw, d.k_img, d.k_txt
            )));
        }
        Ok(())
    }

    /// Encode one sample honoring the ablation flags: dropped modalities
    /// become zero token blocks of the same shape.
    pub fn encode_bundle_flagged(
        &self,
        tape: &mut Tape,
        sample: &Sample,
    ) -> Result<BundleIds> {
        let flags = self.fusion.flags;
        let d = self.config.dims;
        let enc = &self.encoders;
        let zero = |tape: &mut Tape| tape.leaf(Matrix::zeros(d.k_img, d.d_emb));
        let z_i1 = if flags.no_image {
            zero(tape)
        } else {
            enc.encode_image_mae(tape, &self.params, sample)?
        };
        let z_i2 = if flags.no_image || flags.no_blip {
            zero(tape)
        } else {
            enc.encode_image_blip(tape, &self.params, sample)?
        };
        let z_t1 = if flags.no_text {
            zero(tape)
        } else {
            enc.encode_text_bert(tape, &self.params, sample)?
        };
        let z_t2 = if flags.no_text || flags.no_blip {
            zero(tape)
        } else {
            enc.encode_text_blip(tape, &self.params, sample)?
        };
        let z_b = if flags.no_blip || flags.no_blip_joint {
            zero(tape)
        } else {
            enc.encode_joint(tape, &self.params, sample)?
        };
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

    /// Active modality for an epoch, or None when the metric module is
    /// ablated. The schedule cycles over the modalities that still exist
    /// under the current flags.
    pub fn active_modality(&self, epoch: usize) -> Option<Modality> {
        if self.config.ablate.no_mt {
            return None;
        }
        let available = self.config.ablate.available_modalities();
        if available.is_empty() {
            return None;
        }
        Some(schedule_over(&available, epoch, &self.config.metric))
    }

    /// Full forward over a batch: encode, fuse, classify, and assemble the
    /// total objective. `proxies` supplies the static proxy data points when
    /// the metric term is active; their embeddings go on the same tape so
    /// gradients flow through proxies as well as batch points.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        state: &mut ModelState,
        samples: &[&Sample],
        mode: Mode,
        active: Option<Modality>,
        proxies: Option<(&[usize], Vec<&Sample>)>,
        dropout_rng: &mut RngStream,
        collect_states: bool,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(CromeError::Config("forward over an empty batch".into()));
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
        let bundles: Vec<BundleIds> = samples
            .iter()
            .map(|s| self.encode_bundle_flagged(tape, s))
            .collect::<Result<_>>()?;

        let metric = match (active, &proxies) {
            (Some(active), Some((proxy_classes, proxy_samples)))
                if self.config.metric.beta > 0.0 && !self.config.ablate.no_mt =>
            {
                let proxy_bundles: Vec<BundleIds> = proxy_samples
                    .iter()
                    .map(|s| self.encode_bundle_flagged(tape, s))
                    .collect::<Result<_>>()?;
                Some(metric_loss_for_epoch(
                    tape,
                    &bundles,
                    &labels,
                    &proxy_bundles,
                    proxy_classes,
                    &self.config.metric,
                    active,
                )?)
            }
            _ => None,
        };

        let fused = cmttf_batch(
            tape,
            &self.params,
            &self.fusion,
            &bundles,
            &mut state.fusion_bn,
            mode,
            dropout_rng,
            collect_states,
        )?;
        let (logits, probs) = self.detector.classify(
            tape,
            &self.params,
            fused.unified,
            &mut state.detector_bn,
            mode,
        )?;
        let ce = tape.cross_entropy_mean(probs, &labels)?;
        let total =
            crate::detector::total_loss_on_tape(tape, ce, metric, self.config.metric.beta)?;
        Ok(BatchOutput {
            bundles,
            unified: fused.unified,
            logits,
            probs,
            ce,
            metric,
            total,
            fusion_states: fused.states,
        })
    }

    /// Pooled per-modality embeddings of one sample (fixed order z_i1, z_i2,
    /// z_t1, z_t2, z_b), concatenated into one 5*d_emb row. Eval-only.
    pub fn pooled_modalities(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.encode_bundle_flagged(&mut tape, sample)?;
        let mut out = Vec::with_capacity(5 * self.config.dims.d_emb);
        for m in Modality::ALL {
            let pooled = tape.mean_rows(b.modality(m));
            out.extend_from_slice(&tape.value(pooled).data);
        }
        Ok(out)
    }
}

/// Five-modality schedule applied to the full flag-free model; kept as a free
/// function mirror of the metric module for external callers.
pub fn full_schedule(epoch: usize, cfg: &crate::metric::MetricConfig) -> Modality {
    modality_schedule(epoch, cfg)
}

/// Finite-difference check of the full model's total-loss gradients on a
/// deterministic generated probe batch.
pub fn model_gradcheck(
    config: &RunConfig,
    samples: usize,
    step: f64,
) -> Result<crate::numerics::gradcheck::GradCheckReport> {
    use crate::numerics::gradcheck::{fd_compare, reverse_grads};

    let (model, _) = CroMeModel::build(config)?;
    let mut probe_gen = config.gen.clone();
    probe_gen.n_samples = 8;
    probe_gen.d_raw = config.dims.d_raw;
    probe_gen.k_img = config.dims.k_img;
    probe_gen.k_txt = config.dims.k_txt;
    if probe_gen.n_topics >= probe_gen.d_raw {
        probe_gen.n_topics = (probe_gen.d_raw - 1).max(2);
    }
    let ds = crate::data::generate(&probe_gen)?;
    let batch: Vec<Sample> = ds.samples.iter().take(4).cloned().collect();
    let proxy_real = ds
        .samples
        .iter()
        .find(|s| s.label == 0)
        .cloned()
        .ok_or_else(|| CromeError::Data("probe dataset lacks a real sample".into()))?;
    let proxy_fake = ds
        .samples
        .iter()
        .find(|s| s.label == 1)
        .cloned()
        .ok_or_else(|| CromeError::Data("probe dataset lacks a fake sample".into()))?;
    let proxy_classes = [proxy_real.label as usize, proxy_fake.label as usize];
    let model_ref = &model;
    let loss_fn = move |p: &Params, tape: &mut Tape| {
        let mut probe = model_ref.clone();
        probe.params = p.clone();
        let mut state = ModelState {
            fusion_bn: FusionBnState::new(probe.config.fusion.d_c),
            detector_bn: crate::detector::DetectorBnState {
                bn1: crate::numerics::tape::BnStats::new(probe.config.detector.hidden),
                bn2: crate::numerics::tape::BnStats::new(probe.config.detector.hidden),
            },
        };
        let mut rng = RngStream::new(probe.config.seed, "gradcheck-dropout");
        let refs: Vec<&Sample> = batch.iter().collect();
        let active = probe.active_modality(0);
        let proxies = active.map(|_| (&proxy_classes[..], vec![&proxy_real, &proxy_fake]));
        let out = probe.forward_batch(
            tape,
            &mut state,
            &refs,
            Mode::Train,
            active,
            proxies,
            &mut rng,
            false,
        )?;
        Ok(out.total)
    };
    let (loss, grads) = reverse_grads(&model.params, &loss_fn)?;
    let ids: Vec<_> = model.params.ids().collect();
    let mut probe_params = model.params.clone();
    fd_compare(
        &mut probe_params,
        &ids,
        &loss_fn,
        loss,
        &grads,
        samples,
        step,
        config.seed,
    )
}
