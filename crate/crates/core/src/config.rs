//! Run configuration: one TOML file with nested sections, every key
//! defaulted, validated before any compute. CLI flags override file keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenSpec;
use crate::detector::{AblationFlags, DetectorConfig};
use crate::encoders::EncoderDims;
use crate::error::{CromeError, Result};
use crate::fusion::FusionConfig;
use crate::metric::MetricConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    /// When true, cross-entropy gradients step every available encoder group
    /// each batch instead of only the schedule-active one.
    pub ce_all_modalities: bool,
    /// Write a checkpoint every N epochs (the file is overwritten in place;
    /// the final checkpoint is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            batch: 64,
            epochs: 50,
            train_fraction: 0.8,
            ce_all_modalities: false,
            checkpoint_every: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CromeError::Config(format!(
                "training.lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch < 2 {
            return Err(CromeError::Config(
                "training.batch must be >= 2 (batch norm needs at least 2 rows)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(CromeError::Config("training.epochs must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CromeError::Config(format!(
                "training.train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(CromeError::Config(
                "training.checkpoint_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Grid defaults for the alpha/delta sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Epoch budget per sweep cell (sweeps usually run shorter than full
    /// training).
    pub epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: vec![4.0, 8.0, 16.0, 32.0],
            deltas: vec![0.1, 0.2, 0.3, 0.4],
            epochs: 10,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.deltas.is_empty() {
            return Err(CromeError::Config(
                "sweep.alphas and sweep.deltas must be nonempty".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(CromeError::Config("sweep.epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: EncoderDims,
    pub metric: MetricConfig,
    pub fusion: FusionConfig,
    pub detector: DetectorConfig,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub ablate: AblationFlags,
    pub gen: GenSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            dims: EncoderDims::default(),
            metric: MetricConfig::default(),
            fusion: FusionConfig::default(),
            detector: DetectorConfig::default(),
            training: TrainingConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblationFlags::default(),
            gen: GenSpec::default(),
        }
    }
}

impl RunConfig {
    /// Validate every section; fail fast at the boundary.
    pub fn validate(&self) -> Result<()> {
        if self.dims.k_img != self.dims.k_txt {
            return Err(CromeError::Config(format!(
                "dims.k_img ({}) must equal dims.k_txt ({}) for the joint encoders",
                self.dims.k_img, self.dims.k_txt
            )));
        }
        if self.dims.d_raw == 0 || self.dims.d_hidden == 0 || self.dims.d_emb == 0 {
            return Err(CromeError::Config("dims must be positive".into()));
        }
        self.metric.validate()?;
        self.fusion.validate()?;
        if self.detector.hidden == 0 {
            return Err(CromeError::Config("detector.hidden must be >= 1".into()));
        }
        self.training.validate()?;
        self.sweep.validate()?;
        self.ablate.validate()?;
        self.gen.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CromeError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `section.key=value` overrides (CLI precedence over file keys).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut value = toml::Value::try_from(&*self)
            .map_err(|e| CromeError::Config(format!("config serialize: {e}")))?;
        for kv in overrides {
            let (path, raw) = kv.split_once('=').ok_or_else(|| {
                CromeError::Config(format!("override {kv:?} is not of the form key=value"))
            })?;
            // Bare words (e.g. `metric.similarity=cosine`) fall back to strings.
            let parsed: toml::Value = raw
                .parse()
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = path.split('.').collect();
            let (last, sections) = parts.split_last().expect("split_once gave nonempty path");
            let mut node = &mut value;
            for part in sections {
                let table = node.as_table_mut().ok_or_else(|| {
                    CromeError::Config(format!("override path {path:?} crosses a non-table"))
                })?;
                node = table.get_mut(*part).ok_or_else(|| {
                    CromeError::Config(format!("unknown config section in {path:?}"))
                })?;
            }
            let table = node.as_table_mut().ok_or_else(|| {
                CromeError::Config(format!("override path {path:?} crosses a non-table"))
            })?;
            if !table.contains_key(*last) {
                return Err(CromeError::Config(format!("unknown config key {path:?}")));
            }
            table.insert(last.to_string(), parsed.clone());
        }
        let updated: RunConfig = value
            .try_into()
            .map_err(|e| CromeError::Config(format!("override produced invalid config: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Human-readable reference for every config key, generated from the same
/// definitions the parser uses.
pub fn config_reference() -> String {
    let defaults = RunConfig::default();
    let mut out = String::new();
    out.push_str("# Configuration reference\n\n");
    out.push_str("Config files are TOML with the sections below. Every key has a default;\n");
    out.push_str("a config file only needs the keys it changes. CLI `--set section.key=value`\n");
    out.push_str("overrides file keys, and `--seed` overrides `seed`.\n\n");

    let rows: Vec<(&str, String, &str)> = vec![
        ("seed", defaults.seed.to_string(), "Master seed; every random stream derives from it by name."),
        ("dims.d_raw", defaults.dims.d_raw.to_string(), "Width of raw feature tokens in the dataset."),
        ("dims.d_hidden", defaults.dims.d_hidden.to_string(), "Hidden width of the toy encoders."),
        ("dims.d_emb", defaults.dims.d_emb.to_string(), "Output width of every modality encoding."),
        ("dims.k_img", defaults.dims.k_img.to_string(), "Image tokens per sample (must equal dims.k_txt)."),
        ("dims.k_txt", defaults.dims.k_txt.to_string(), "Text tokens per sample (must equal dims.k_img)."),
        ("metric.alpha", defaults.metric.alpha.to_string(), "Proxy anchor scaling factor."),
        ("metric.delta", defaults.metric.delta.to_string(), "Proxy anchor margin."),
        ("metric.beta", defaults.metric.beta.to_string(), "Weight of the metric loss in the total objective."),
        ("metric.epochs_per_modality", defaults.metric.epochs_per_modality.to_string(), "Epochs before the modality schedule advances."),
        ("metric.similarity", "\"cosine\"".to_string(), "s(x, p) kind: \"cosine\" (default) or \"dot\"."),
        ("fusion.d_c", defaults.fusion.d_c.to_string(), "Width of the correlation features and attention streams."),
        ("fusion.heads", defaults.fusion.heads.to_string(), "Attention heads per stream (must divide fusion.d_c)."),
        ("fusion.dropout", defaults.fusion.dropout.to_string(), "Dropout rate inside the Zc combiner."),
        ("detector.hidden", defaults.detector.hidden.to_string(), "Hidden width of the classifier head."),
        ("training.lr", defaults.training.lr.to_string(), "Learning rate shared by all six Adam optimizers."),
        ("training.batch", defaults.training.batch.to_string(), "Batch size (>= 2 for batch norm)."),
        ("training.epochs", defaults.training.epochs.to_string(), "Training epochs."),
        ("training.train_fraction", defaults.training.train_fraction.to_string(), "Stratified train split fraction."),
        ("training.ce_all_modalities", defaults.training.ce_all_modalities.to_string(), "Step every available encoder group on cross-entropy gradients each batch instead of only the schedule-active one."),
        ("training.checkpoint_every", defaults.training.checkpoint_every.to_string(), "Write (overwrite) the checkpoint every N epochs."),
        ("sweep.alphas", "[4.0, 8.0, 16.0, 32.0]".to_string(), "Alpha values for the sweep grid."),
        ("sweep.deltas", "[0.1, 0.2, 0.3, 0.4]".to_string(), "Delta values for the sweep grid."),
        ("sweep.epochs", defaults.sweep.epochs.to_string(), "Epoch budget per sweep cell."),
        ("ablate.no_image", "false".to_string(), "Drop z_i1/z_i2; C1 sees a zero image stream."),
        ("ablate.no_text", "false".to_string(), "Drop z_t1/z_t2; C1 sees a zero text stream."),
        ("ablate.no_blip", "false".to_string(), "Drop z_i2/z_t2/z_b; C2 becomes a learned constant."),
        ("ablate.no_blip_joint", "false".to_string(), "Drop z_b; similarity terms touching it are removed."),
        ("ablate.no_cm", "false".to_string(), "Replace Zc with a learned constant token."),
        ("ablate.no_mt", "false".to_string(), "Disable the metric term and the modality schedule."),
        ("ablate.no_tt", "false".to_string(), "Replace the tri-transformer with pooled concatenation plus one linear layer."),
        ("gen.n_samples", defaults.gen.n_samples.to_string(), "Generated dataset size."),
        ("gen.fake_fraction", defaults.gen.fake_fraction.to_string(), "Fraction of fake samples (exact stratified count)."),
        ("gen.archetype_mix", "[0.25, 0.25, 0.25, 0.25]".to_string(), "Fake mix over archetypes a (image-tampered), b (both), c (unrelated), d (partial mismatch)."),
        ("gen.n_topics", defaults.gen.n_topics.to_string(), "Topic count (< gen.d_raw)."),
        ("gen.noise_sigma", defaults.gen.noise_sigma.to_string(), "Per-entry Gaussian noise on generated tokens."),
        ("gen.d_raw", defaults.gen.d_raw.to_string(), "Raw token width of generated data."),
        ("gen.k_img", defaults.gen.k_img.to_string(), "Image tokens per generated sample."),
        ("gen.k_txt", defaults.gen.k_txt.to_string(), "Text tokens per generated sample."),
        ("gen.seed", defaults.gen.seed.to_string(), "Generator seed (gen-data sets this from --seed)."),
    ];
    out.push_str("| Key | Default | Meaning |\n|---|---|---|\n");
    for (key, default, doc) in rows {
        out.push_str(&format!("| `{key}` | `{default}` | {doc} |\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn paper_defaults_present() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.metric.alpha, 16.0);
        assert_eq!(cfg.metric.delta, 0.1);
        assert_eq!(cfg.metric.beta, 0.1);
        assert_eq!(cfg.metric.epochs_per_modality, 5);
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.training.batch, 64);
        assert_eq!(cfg.training.epochs, 50);
        assert_eq!(cfg.training.train_fraction, 0.8);
    }

    #[test]
    fn beta_grid_values_accepted() {
        // beta in [0.1, 1] step 0.1 must all validate.
        for i in 1..=10 {
            let mut cfg = RunConfig::default();
            cfg.metric.beta = i as f64 / 10.0;
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("nonsense = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[metric]\nalfa = 16.0\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[metric]\nalpha = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[fusion]\nd_c = 65\n").is_err());
        assert!(RunConfig::from_toml_str("[training]\nbatch = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[ablate]\nno_image = true\nno_text = true\n").is_err());
        assert!(RunConfig::from_toml_str("[gen]\nfake_fraction = 0.0\n").is_err());
    }

    #[test]
    fn overrides_apply_with_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "metric.alpha=8.0".to_string(),
            "training.epochs=3".to_string(),
            "ablate.no_cm=true".to_string(),
        ])
        .unwrap();
        assert_eq!(cfg.metric.alpha, 8.0);
        assert_eq!(cfg.training.epochs, 3);
        assert!(cfg.ablate.no_cm);
        assert!(cfg.apply_overrides(&["metric.alfa=1.0".to_string()]).is_err());
        assert!(cfg
            .apply_overrides(&["metric.alpha=-2.0".to_string()])
            .is_err());
    }

    #[test]
    fn reference_page_covers_every_key() {
        let reference = config_reference();
        let toml_text = RunConfig::default().to_toml_string();
        let table: toml::Table = toml_text.parse().unwrap();
        let value = toml::Value::Table(table);
        fn keys(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
            if let Some(table) = v.as_table() {
                for (k, child) in table {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    if child.is_table() {
                        keys(&path, child, out);
                    } else {
                        out.push(path);
                    }
                }
            }
        }
        let mut all = Vec::new();
        keys("", &value, &mut all);
        for key in all {
            assert!(
                reference.contains(&format!("`{key}`")),
                "config reference is missing key {key}"
            );
        }
    }
}
