//! Classifier head, cross-entropy, the total objective, and the ablation
//! variant contracts.

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{CromeError, Result};
use crate::numerics::layers::{BatchNormParams, LinearParams};
use crate::numerics::tape::{BnStats, Mode, Tape, ValueId};
use crate::params::{Group, Params};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { hidden: 32 }
    }
}

/// Three fully connected layers; the first two are followed by batch norm
/// and ReLU (the order FC -> BN -> ReLU is fixed here), the last by softmax.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub fc1: LinearParams,
    pub bn1: BatchNormParams,
    pub fc2: LinearParams,
    pub bn2: BatchNormParams,
    pub fc3: LinearParams,
    pub input_width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorBnState {
    pub bn1: BnStats,
    pub bn2: BnStats,
}

impl DetectorParams {
    pub fn init(
        params: &mut Params,
        input_width: usize,
        cfg: DetectorConfig,
        seed: u64,
    ) -> (Self, DetectorBnState) {
        let h = cfg.hidden;
        let dp = DetectorParams {
            fc1: LinearParams::init(params, "det.fc1", Group::Head, input_width, h, seed),
            bn1: BatchNormParams::init(params, "det.bn1", Group::Head, h),
            fc2: LinearParams::init(params, "det.fc2", Group::Head, h, h, seed),
            bn2: BatchNormParams::init(params, "det.bn2", Group::Head, h),
            fc3: LinearParams::init(params, "det.fc3", Group::Head, h, 2, seed),
            input_width,
        };
        let bn = DetectorBnState {
            bn1: BnStats::new(h),
            bn2: BnStats::new(h),
        };
        (dp, bn)
    }

    /// Logits and probabilities for a batch of unified features.
    pub fn classify(
        &self,
        tape: &mut Tape,
        params: &Params,
        unified: ValueId,
        bn: &mut DetectorBnState,
        mode: Mode,
    ) -> Result<(ValueId, ValueId)> {
        let width = tape.value(unified).cols;
        if width != self.input_width {
            return Err(CromeError::shape(
                "classify",
                tape.value(unified).shape(),
                (tape.value(unified).rows, self.input_width),
            ));
        }
        let mut h = self.fc1.forward(tape, params, unified)?;
        h = self.bn1.forward(tape, params, h, &mut bn.bn1, mode)?;
        h = tape.relu(h);
        h = self.fc2.forward(tape, params, h)?;
        h = self.bn2.forward(tape, params, h, &mut bn.bn2, mode)?;
        h = tape.relu(h);
        let logits = self.fc3.forward(tape, params, h)?;
        let probs = tape.softmax_rows(logits);
        Ok((logits, probs))
    }
}

/// Per-sample classification result: probabilities sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: [f64; 2],
    pub logits: [f64; 2],
}

impl Prediction {
    pub fn predicted_label(&self) -> u8 {
        if self.y_hat[1] > self.y_hat[0] {
            1
        } else {
            0
        }
    }
}

/// Extract per-sample predictions from batch logits/probabilities.
pub fn predictions_from(tape: &Tape, logits: ValueId, probs: ValueId) -> Vec<Prediction> {
    let l = tape.value(logits);
    let p = tape.value(probs);
    (0..p.rows)
        .map(|r| Prediction {
            y_hat: [p.get(r, 0), p.get(r, 1)],
            logits: [l.get(r, 0), l.get(r, 1)],
        })
        .collect()
}

/// Cross-entropy of one prediction: -y log y1 - (1-y) log y0, with the
/// probability clamped at 1e-12 before the log.
pub fn cross_entropy(pred: &Prediction, y: u8) -> f64 {
    let p = pred.y_hat[y as usize].max(PROB_CLAMP);
    -p.ln()
}

/// L_total = L_ce + beta * L_metric.
pub fn total_loss(ce: f64, metric: f64, beta: f64) -> f64 {
    ce + beta * metric
}

/// Tape route for the total objective.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    ce: ValueId,
    metric: Option<ValueId>,
    beta: f64,
) -> Result<ValueId> {
    match metric {
        Some(m) if beta != 0.0 => {
            let scaled = tape.scale(m, beta);
            tape.add(ce, scaled)
        }
        _ => Ok(ce),
    }
}

/// Table-style ablation switches. A valid set is either empty (full model)
/// or exactly one flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_image: bool,
    #[serde(default)]
    pub no_text: bool,
    #[serde(default)]
    pub no_blip: bool,
    #[serde(default)]
    pub no_blip_joint: bool,
    #[serde(default)]
    pub no_cm: bool,
    #[serde(default)]
    pub no_mt: bool,
    #[serde(default)]
    pub no_tt: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        AblationFlags::default()
    }

    pub fn set_count(&self) -> usize {
        [
            self.no_image,
            self.no_text,
            self.no_blip,
            self.no_blip_joint,
            self.no_cm,
            self.no_mt,
            self.no_tt,
        ]
        .iter()
        .filter(|&&f| f)
        .count()
    }

    /// Reject contradictory combinations: each run is the full model or one
    /// single-component variant.
    pub fn validate(&self) -> Result<()> {
        if self.set_count() > 1 {
            return Err(CromeError::Config(format!(
                "contradictory ablation flags: {} set at once (variant {})",
                self.set_count(),
                self.variant_name()
            )));
        }
        Ok(())
    }

    pub fn variant_name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_image {
            parts.push("no_image");
        }
        if self.no_text {
            parts.push("no_text");
        }
        if self.no_blip {
            parts.push("no_blip");
        }
        if self.no_blip_joint {
            parts.push("no_blip_joint");
        }
        if self.no_cm {
            parts.push("no_cm");
        }
        if self.no_mt {
            parts.push("no_mt");
        }
        if self.no_tt {
            parts.push("no_tt");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }

    /// Modalities whose encoders still run under these flags, in the fixed
    /// schedule order. The metric schedule cycles over exactly this set.
    pub fn available_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .iter()
            .copied()
            .filter(|m| match m {
                Modality::ImagePrimary => !self.no_image,
                Modality::ImageBlip => !self.no_image && !self.no_blip,
                Modality::TextPrimary => !self.no_text,
                Modality::TextBlip => !self.no_text && !self.no_blip,
                Modality::Joint => !self.no_blip && !self.no_blip_joint,
            })
            .collect()
    }
}

/// The eight runnable rows: full model plus seven single-component variants.
pub fn ablation_manifest() -> Vec<(String, AblationFlags)> {
    let mut rows = vec![("full".to_string(), AblationFlags::full())];
    let mut add = |f: AblationFlags| rows.push((f.variant_name(), f));
    add(AblationFlags {
        no_image: true,
        ..Default::default()
    });
    add(AblationFlags {
        no_text: true,
        ..Default::default()
    });
    add(AblationFlags {
        no_blip: true,
        ..Default::default()
    });
    add(AblationFlags {
        no_blip_joint: true,
        ..Default::default()
    });
    add(AblationFlags {
        no_cm: true,
        ..Default::default()
    });
    add(AblationFlags {
        no_mt: true,
        ..Default::default()
    });
    add(AblationFlags {
        no_tt: true,
        ..Default::default()
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::Matrix;

    #[test]
    fn equal_logits_give_half_half() {
        let m = Matrix::from_rows(&[vec![0.7, 0.7]]);
        let probs = crate::numerics::matrix::softmax_rows(&m);
        assert!((probs.data[0] - 0.5).abs() <= 1e-12);
        assert!((probs.data[1] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn analytic_logits_give_point_nine() {
        let m = Matrix::from_rows(&[vec![0.0, 9.0f64.ln()]]);
        let probs = crate::numerics::matrix::softmax_rows(&m);
        assert!((probs.data[0] - 0.1).abs() <= 1e-12);
        assert!((probs.data[1] - 0.9).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let exact = Prediction {
            y_hat: [0.0, 1.0],
            logits: [0.0, 0.0],
        };
        assert_eq!(cross_entropy(&exact, 1), 0.0);

        let half = Prediction {
            y_hat: [0.5, 0.5],
            logits: [0.0, 0.0],
        };
        assert!((cross_entropy(&half, 0) - 2.0f64.ln()).abs() <= 1e-12);
        assert!((cross_entropy(&half, 1) - 2.0f64.ln()).abs() <= 1e-12);

        let ninety = Prediction {
            y_hat: [0.1, 0.9],
            logits: [0.0, 0.0],
        };
        assert!((cross_entropy(&ninety, 1) - 0.105360515657826).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_nonnegative_and_clamped() {
        let zero = Prediction {
            y_hat: [1.0, 0.0],
            logits: [0.0, 0.0],
        };
        let l = cross_entropy(&zero, 1);
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.5, 123.0, 0.0), 0.5);
        assert!((total_loss(0.5, 1.0, 0.1) - 0.6).abs() <= 1e-15);
    }

    #[test]
    fn classifier_probabilities_sum_to_one() {
        let mut params = Params::new();
        let (dp, mut bn) = DetectorParams::init(&mut params, 12, DetectorConfig::default(), 7);
        let mut rng = crate::numerics::rng::RngStream::new(3, "det");
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(
            5,
            12,
            (0..60).map(|_| rng.next_normal()).collect(),
        ));
        let (_logits, probs) = dp.classify(&mut tape, &params, x, &mut bn, Mode::Train).unwrap();
        let p = tape.value(probs);
        for r in 0..p.rows {
            let sum: f64 = p.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(p.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn classifier_rejects_wrong_width() {
        let mut params = Params::new();
        let (dp, mut bn) = DetectorParams::init(&mut params, 12, DetectorConfig::default(), 7);
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(3, 9));
        assert!(dp.classify(&mut tape, &params, x, &mut bn, Mode::Eval).is_err());
    }

    #[test]
    fn contradictory_flags_rejected() {
        let flags = AblationFlags {
            no_image: true,
            no_text: true,
            ..Default::default()
        };
        assert!(flags.validate().is_err());
        assert!(AblationFlags::full().validate().is_ok());
    }

    #[test]
    fn manifest_has_eight_unique_rows() {
        let manifest = ablation_manifest();
        assert_eq!(manifest.len(), 8);
        let mut names: Vec<&str> = manifest.iter().map(|(n, _)| n.as_str()).collect();
        names.dedup();
        assert_eq!(names.len(), 8);
        assert_eq!(manifest[0].0, "full");
        for (_, f) in &manifest {
            f.validate().unwrap();
        }
    }

    #[test]
    fn available_modalities_per_variant() {
        use Modality::*;
        let full = AblationFlags::full();
        assert_eq!(full.available_modalities(), Modality::ALL.to_vec());
        let no_image = AblationFlags {
            no_image: true,
            ..Default::default()
        };
        assert_eq!(no_image.available_modalities(), vec![TextPrimary, TextBlip, Joint]);
        let no_blip = AblationFlags {
            no_blip: true,
            ..Default::default()
        };
        assert_eq!(no_blip.available_modalities(), vec![ImagePrimary, TextPrimary]);
        let no_blip_joint = AblationFlags {
            no_blip_joint: true,
            ..Default::default()
        };
        assert_eq!(
            no_blip_joint.available_modalities(),
            vec![ImagePrimary, ImageBlip, TextPrimary, TextBlip]
        );
    }
}
