//! The training harness: six Adam groups over the iterative modality
//! schedule, deterministic evaluation, checkpointing, the alpha/delta sweep,
//! the ablation suite, and embedding export.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split, Dataset};
use crate::detector::{ablation_manifest, predictions_from};
use crate::encoders::{Modality, Sample};
use crate::error::{CromeError, Result};
use crate::metric::assign_proxies;
use crate::model::{CroMeModel, ModelState};
use crate::numerics::adam::AdamState;
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Mode, Tape};
use crate::params::{Group, ParamId};

pub const CHECKPOINT_FORMAT_VERSION: &str = "cromekit-ckpt-1";

// ── optimizer groups ─────────────────────────────────────────────────

/// Six Adam optimizers: one per modality encoder plus one for the fusion and
/// detector parameters. Together they cover every trainable parameter.
#[derive(Debug, Clone)]
pub struct OptimizerGroups {
    groups: BTreeMap<Group, AdamState>,
}

impl OptimizerGroups {
    pub fn new(lr: f64) -> Self {
        let mut groups = BTreeMap::new();
        for g in Group::ALL {
            groups.insert(g, AdamState::new(lr));
        }
        OptimizerGroups { groups }
    }

    pub fn get(&self, group: Group) -> &AdamState {
        &self.groups[&group]
    }

    pub fn get_mut(&mut self, group: Group) -> &mut AdamState {
        self.groups.get_mut(&group).expect("all groups present")
    }

    pub fn step_counters(&self) -> BTreeMap<Group, u64> {
        self.groups.iter().map(|(g, s)| (*g, s.step)).collect()
    }
}

// ── metrics ──────────────────────────────────────────────────────────

/// Confusion counts plus the derived report. `fake` is the positive class
/// (label 1). Zero-denominator metrics are reported as 0 with the warning
/// flag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_fake: f64,
    pub recall_fake: f64,
    pub f1_fake: f64,
    pub precision_real: f64,
    pub recall_real: f64,
    pub f1_real: f64,
    /// [actual][predicted]: confusion[1][1] = true positives for fake.
    pub confusion: [[usize; 2]; 2],
    pub zero_division: bool,
}

impl MetricsReport {
    pub fn from_pairs(pairs: &[(u8, u8)]) -> MetricsReport {
        let mut confusion = [[0usize; 2]; 2];
        for &(actual, predicted) in pairs {
            confusion[actual as usize][predicted as usize] += 1;
        }
        let tp = confusion[1][1] as f64;
        let tn = confusion[0][0] as f64;
        let fp = confusion[0][1] as f64;
        let fn_ = confusion[1][0] as f64;
        let n = (tp + tn + fp + fn_).max(1.0);
        let mut zero_division = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                zero_division = true;
                0.0
            } else {
                num / den
            }
        };
        let precision_fake = ratio(tp, tp + fp);
        let recall_fake = ratio(tp, tp + fn_);
        let f1_fake = ratio(2.0 * precision_fake * recall_fake, precision_fake + recall_fake);
        let precision_real = ratio(tn, tn + fn_);
        let recall_real = ratio(tn, tn + fp);
        let f1_real = ratio(2.0 * precision_real * recall_real, precision_real + recall_real);
        MetricsReport {
            accuracy: (tp + tn) / n,
            precision_fake,
            recall_fake,
            f1_fake,
            precision_real,
            recall_real,
            f1_real,
            confusion,
            zero_division,
        }
    }
}

// ── trainer ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub active_modality: Option<String>,
    pub batches: usize,
    pub mean_ce: f64,
    pub mean_metric: f64,
    pub mean_total: f64,
    pub eval: MetricsReport,
}

pub struct Trainer {
    pub model: CroMeModel,
    pub state: ModelState,
    pub optimizers: OptimizerGroups,
    pub dropout_rng: RngStream,
    pub shuffle_rng: RngStream,
    pub epoch: usize,
}

/// Per-sample prediction row from an evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub label: u8,
    pub predicted: u8,
    pub p_fake: f64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Trainer> {
        let (model, state) = CroMeModel::build(config)?;
        Ok(Trainer {
            optimizers: OptimizerGroups::new(config.training.lr),
            dropout_rng: RngStream::new(config.seed, "dropout"),
            shuffle_rng: RngStream::new(config.seed, "shuffle"),
            epoch: 0,
            model,
            state,
        })
    }

    /// One epoch over the training split. Steps the head optimizer every
    /// batch, plus the schedule-active encoder (other encoder groups are not
    /// stepped, which is what freezes the non-active modalities).
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(usize, f64, f64, f64)> {
        let batch_size = self.model.config.training.batch;
        let ce_all_modalities = self.model.config.training.ce_all_modalities;
        let available = self.model.config.ablate.available_modalities();
        let assignment = assign_proxies(&train.labels())?;
        let proxy_classes = assignment.classes();
        let proxy_indices = assignment.indices();
        let active = self.model.active_modality(self.epoch);

        let mut order: Vec<usize> = (0..train.len()).collect();
        self.shuffle_rng.shuffle(&mut order);

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                // A trailing single-sample batch cannot pass train-mode
                // batch norm; skip it.
                continue;
            }
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let proxy_samples: Vec<&Sample> =
                proxy_indices.iter().map(|&i| &train.samples[i]).collect();
            let mut tape = Tape::new();
            let out = self.model.forward_batch(
                &mut tape,
                &mut self.state,
                &samples,
                Mode::Train,
                active,
                Some((&proxy_classes, proxy_samples)),
                &mut self.dropout_rng,
                false,
            )?;
            let ce = tape.value(out.ce).item();
            let metric = out.metric.map(|m| tape.value(m).item()).unwrap_or(0.0);
            let total = tape.value(out.total).item();
            if !total.is_finite() {
                return Err(CromeError::NonFinite(format!(
                    "total loss at epoch {} batch {batches} (ce={ce}, metric={metric})",
                    self.epoch
                )));
            }
            let grads = tape.backward(out.total)?;
            let param_grads = tape.param_grads(&self.model.params, &grads);

            self.step_group(Group::Head, &param_grads)?;
            if let Some(active) = active {
                if ce_all_modalities {
                    for m in &available {
                        self.step_group(m.group(), &param_grads)?;
                    }
                } else {
                    self.step_group(active.group(), &param_grads)?;
                }
            }
            sums.0 += ce;
            sums.1 += metric;
            sums.2 += total;
            batches += 1;
        }
        if batches == 0 {
            return Err(CromeError::Data(
                "training split too small for one batch".into(),
            ));
        }
        self.epoch += 1;
        let nf = batches as f64;
        Ok((batches, sums.0 / nf, sums.1 / nf, sums.2 / nf))
    }

    fn step_group(&mut self, group: Group, grads: &HashMap<ParamId, Matrix>) -> Result<()> {
        let ids = self.model.params.ids_in_group(group);
        if ids.is_empty() {
            return Ok(());
        }
        // Parameters that never touched the tape (ablated branches) default
        // to zero gradients.
        let mut filled = HashMap::new();
        for &id in &ids {
            let m = self.model.params.get(id);
            filled.insert(
                id,
                grads
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols)),
            );
        }
        self.optimizers
            .get_mut(group)
            .step(&mut self.model.params, &ids, &filled)
    }

    /// Deterministic eval-mode pass: batch norm running statistics, dropout
    /// off. Returns the report plus per-sample rows.
    pub fn evaluate(&mut self, dataset: &Dataset) -> Result<(MetricsReport, Vec<PredictionRow>)> {
        evaluate_model(&self.model, &mut self.state, dataset)
    }
}

/// Evaluation helper shared by the trainer and checkpoint loading.
pub fn evaluate_model(
    model: &CroMeModel,
    state: &mut ModelState,
    dataset: &Dataset,
) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    model.check_dataset(dataset)?;
    let batch = model.config.training.batch.max(2);
    let mut rows = Vec::with_capacity(dataset.len());
    let mut rng = RngStream::new(0, "eval-dropout"); // eval mode: never drawn
    for chunk in dataset.samples.chunks(batch) {
        let samples: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward_batch(
            &mut tape,
            state,
            &samples,
            Mode::Eval,
            None,
            None,
            &mut rng,
            false,
        )?;
        let preds = predictions_from(&tape, out.logits, out.probs);
        for (s, p) in chunk.iter().zip(preds.iter()) {
            rows.push(PredictionRow {
                id: s.id.clone(),
                label: s.label,
                predicted: p.predicted_label(),
                p_fake: p.y_hat[1],
            });
        }
    }
    let pairs: Vec<(u8, u8)> = rows.iter().map(|r| (r.label, r.predicted)).collect();
    Ok((MetricsReport::from_pairs(&pairs), rows))
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ParamBlob {
    name: String,
    value: Matrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentBlob {
    name: String,
    m: Matrix,
    v: Matrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimBlob {
    group: String,
    step: u64,
    moments: Vec<MomentBlob>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    version: String,
    epoch: usize,
    config: RunConfig,
    params: Vec<ParamBlob>,
    optimizers: Vec<OptimBlob>,
    bn: ModelState,
    rng: Vec<(String, u64)>,
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let model = &trainer.model;
    let params = model
        .params
        .ids()
        .map(|id| ParamBlob {
            name: model.params.name(id).to_string(),
            value: model.params.get(id).clone(),
        })
        .collect();
    let optimizers = Group::ALL
        .iter()
        .map(|&g| {
            let adam = trainer.optimizers.get(g);
            let mut moments: Vec<MomentBlob> = adam
                .moments()
                .iter()
                .map(|(id, (m, v))| MomentBlob {
                    name: model.params.name(*id).to_string(),
                    m: m.clone(),
                    v: v.clone(),
                })
                .collect();
            moments.sort_by(|a, b| a.name.cmp(&b.name));
            OptimBlob {
                group: g.name().to_string(),
                step: adam.step,
                moments,
            }
        })
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_FORMAT_VERSION.to_string(),
        epoch: trainer.epoch,
        config: model.config.clone(),
        params,
        optimizers,
        bn: trainer.state.clone(),
        rng: vec![
            ("dropout".to_string(), trainer.dropout_rng.counter()),
            ("shuffle".to_string(), trainer.shuffle_rng.counter()),
        ],
    };
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_FORMAT_VERSION {
        return Err(CromeError::Checkpoint(format!(
            "unsupported checkpoint version {:?} (expected {CHECKPOINT_FORMAT_VERSION:?})",
            ckpt.version
        )));
    }
    let mut trainer = Trainer::new(&ckpt.config)?;
    for blob in &ckpt.params {
        let id = trainer.model.params.by_name(&blob.name).ok_or_else(|| {
            CromeError::Checkpoint(format!("checkpoint parameter {} not in model", blob.name))
        })?;
        if trainer.model.params.get(id).shape() != blob.value.shape() {
            return Err(CromeError::Checkpoint(format!(
                "checkpoint parameter {} has shape {:?}, model expects {:?}",
                blob.name,
                blob.value.shape(),
                trainer.model.params.get(id).shape()
            )));
        }
        *trainer.model.params.get_mut(id) = blob.value.clone();
    }
    for blob in &ckpt.optimizers {
        let group = Group::ALL
            .iter()
            .copied()
            .find(|g| g.name() == blob.group)
            .ok_or_else(|| {
                CromeError::Checkpoint(format!("unknown optimizer group {}", blob.group))
            })?;
        let mut moments = HashMap::new();
        for m in &blob.moments {
            let id = trainer.model.params.by_name(&m.name).ok_or_else(|| {
                CromeError::Checkpoint(format!("moment for unknown parameter {}", m.name))
            })?;
            moments.insert(id, (m.m.clone(), m.v.clone()));
        }
        let adam = trainer.optimizers.get_mut(group);
        adam.step = blob.step;
        adam.restore_moments(moments);
    }
    trainer.state = ckpt.bn.clone();
    for (name, counter) in &ckpt.rng {
        match name.as_str() {
            "dropout" => {
                trainer.dropout_rng = RngStream::restore(ckpt.config.seed, "dropout", *counter)
            }
            "shuffle" => {
                trainer.shuffle_rng = RngStream::restore(ckpt.config.seed, "shuffle", *counter)
            }
            other => {
                return Err(CromeError::Checkpoint(format!(
                    "unknown rng stream {other} in checkpoint"
                )))
            }
        }
    }
    trainer.epoch = ckpt.epoch;
    Ok(trainer)
}

// ── full training run ────────────────────────────────────────────────

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub epoch_logs: Vec<EpochLog>,
    pub final_report: MetricsReport,
    pub test_rows: Vec<PredictionRow>,
}

/// Train on a stratified split of `dataset`, evaluating on the held-out
/// split each epoch. When `out_dir` is given, writes `train_log.jsonl` (one
/// epoch object per line), `metrics.json` (final summary), and
/// `checkpoint.json` (overwritten per the checkpoint cadence).
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut trainer = Trainer::new(config)?;
    trainer.model.check_dataset(dataset)?;
    let (train_ds, test_ds) = split(dataset, config.training.train_fraction, config.seed)?;

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };

    let mut epoch_logs = Vec::with_capacity(config.training.epochs);
    for epoch in 0..config.training.epochs {
        let active = trainer.model.active_modality(epoch);
        let (batches, mean_ce, mean_metric, mean_total) = trainer.train_epoch(&train_ds)?;
        let (eval, _) = trainer.evaluate(&test_ds)?;
        let log = EpochLog {
            epoch,
            active_modality: active.map(|m| m.tag().to_string()),
            batches,
            mean_ce,
            mean_metric,
            mean_total,
            eval,
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &log)?;
            f.write_all(b"\n")?;
        }
        on_epoch(&log);
        epoch_logs.push(log);
        if let Some(dir) = out_dir {
            let last = epoch + 1 == config.training.epochs;
            if (epoch + 1) % config.training.checkpoint_every == 0 || last {
                save_checkpoint(&trainer, &dir.join("checkpoint.json"))?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let (final_report, test_rows) = trainer.evaluate(&test_ds)?;
    if let Some(dir) = out_dir {
        let file = File::create(dir.join("metrics.json"))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &final_report)?;
        w.flush()?;
    }
    Ok(TrainOutcome {
        trainer,
        epoch_logs,
        final_report,
        test_rows,
    })
}

// ── metric-only training (beta-only objective) ───────────────────────

/// Train a single modality's encoder with the proxy anchor loss alone for a
/// fixed number of optimizer steps. Returns the class-separation statistic
/// (mean intra-class cosine minus mean inter-class cosine) before and after.
pub fn metric_only_training(
    config: &RunConfig,
    dataset: &Dataset,
    modality: Modality,
    steps: usize,
) -> Result<(f64, f64)> {
    config.validate()?;
    let mut trainer = Trainer::new(config)?;
    trainer.model.check_dataset(dataset)?;
    let assignment = assign_proxies(&dataset.labels())?;
    let proxy_classes = assignment.classes();
    let proxy_indices = assignment.indices();

    let before = class_separation(&trainer.model, dataset, modality)?;
    let batch_size = config.training.batch.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = 0usize;
    for _ in 0..steps {
        if cursor + batch_size > order.len() {
            trainer.shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let chunk = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
        let proxy_samples: Vec<&Sample> =
            proxy_indices.iter().map(|&i| &dataset.samples[i]).collect();
        let mut tape = Tape::new();
        let bundles = samples
            .iter()
            .map(|s| trainer.model.encode_bundle_flagged(&mut tape, s))
            .collect::<Result<Vec<_>>>()?;
        let proxy_bundles = proxy_samples
            .iter()
            .map(|s| trainer.model.encode_bundle_flagged(&mut tape, s))
            .collect::<Result<Vec<_>>>()?;
        let loss = crate::metric::metric_loss_for_epoch(
            &mut tape,
            &bundles,
            &labels,
            &proxy_bundles,
            &proxy_classes,
            &config.metric,
            modality,
        )?;
        let grads = tape.backward(loss)?;
        let param_grads = tape.param_grads(&trainer.model.params, &grads);
        trainer.step_group(modality.group(), &param_grads)?;
    }
    let after = class_separation(&trainer.model, dataset, modality)?;
    Ok((before, after))
}

/// Mean intra-class cosine similarity minus mean inter-class cosine
/// similarity over pooled embeddings of one modality.
pub fn class_separation(
    model: &CroMeModel,
    dataset: &Dataset,
    modality: Modality,
) -> Result<f64> {
    let mut pooled: Vec<(u8, Vec<f64>)> = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let mut tape = Tape::new();
        let b = model.encode_bundle_flagged(&mut tape, s)?;
        let p = tape.mean_rows(b.modality(modality));
        pooled.push((s.label, tape.value(p).data.clone()));
    }
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            let cos = crate::numerics::matrix::cosine_sim(&pooled[i].1, &pooled[j].1)?;
            if pooled[i].0 == pooled[j].0 {
                intra.0 += cos;
                intra.1 += 1;
            } else {
                inter.0 += cos;
                inter.1 += 1;
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(CromeError::Data(
            "class separation needs both classes present".into(),
        ));
    }
    Ok(intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64)
}

// ── sweep ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Row-major accuracy per (alpha, delta); None marks a failed cell.
    pub cells: Vec<Option<f64>>,
}

impl SweepGrid {
    pub fn cell(&self, ai: usize, di: usize) -> Option<f64> {
        self.cells[ai * self.deltas.len() + di]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha/delta");
        for d in &self.deltas {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
        for (ai, a) in self.alphas.iter().enumerate() {
            out.push_str(&format!("{a}"));
            for di in 0..self.deltas.len() {
                match self.cell(ai, di) {
                    Some(acc) => out.push_str(&format!(",{acc}")),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SweepGrid> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CromeError::Parse {
            line: 1,
            msg: "empty sweep grid".into(),
        })?;
        let mut cols = header.split(',');
        let tag = cols.next().unwrap_or_default();
        if tag != "alpha/delta" {
            return Err(CromeError::Parse {
                line: 1,
                msg: format!("expected header to start with alpha/delta, got {tag:?}"),
            });
        }
        let deltas: Vec<f64> = cols
            .map(|c| {
                c.parse().map_err(|e| CromeError::Parse {
                    line: 1,
                    msg: format!("bad delta {c:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let mut alphas = Vec::new();
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let a: f64 = cols
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| CromeError::Parse {
                    line: i + 2,
                    msg: format!("bad alpha: {e}"),
                })?;
            alphas.push(a);
            let row: Vec<Option<f64>> = cols
                .map(|c| {
                    if c == "NA" {
                        Ok(None)
                    } else {
                        c.parse().map(Some).map_err(|e| CromeError::Parse {
                            line: i + 2,
                            msg: format!("bad cell {c:?}: {e}"),
                        })
                    }
                })
                .collect::<Result<_>>()?;
            if row.len() != deltas.len() {
                return Err(CromeError::Parse {
                    line: i + 2,
                    msg: format!("expected {} cells, got {}", deltas.len(), row.len()),
                });
            }
            cells.extend(row);
        }
        Ok(SweepGrid {
            alphas,
            deltas,
            cells,
        })
    }
}

/// Full-factorial (alpha, delta) sweep at the configured sweep epoch budget.
/// Each cell is an independent deterministic run; failures are recorded as
/// missing cells and do not abort the grid.
pub fn sweep(config: &RunConfig, dataset: &Dataset) -> Result<SweepGrid> {
    config.validate()?;
    let alphas = config.sweep.alphas.clone();
    let deltas = config.sweep.deltas.clone();
    let mut cells = Vec::with_capacity(alphas.len() * deltas.len());
    for &alpha in &alphas {
        for &delta in &deltas {
            let mut cell_cfg = config.clone();
            cell_cfg.metric.alpha = alpha;
            cell_cfg.metric.delta = delta;
            cell_cfg.training.epochs = config.sweep.epochs;
            let accuracy = train(&cell_cfg, dataset, None, |_| {})
                .map(|out| out.final_report.accuracy)
                .ok();
            cells.push(accuracy);
        }
    }
    Ok(SweepGrid {
        alphas,
        deltas,
        cells,
    })
}

// ── embedding export ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportStage {
    /// Unified fused features right before the classifier (width 3 * d_c).
    PreClassifier,
    /// Pooled per-modality embeddings z_i1..z_b concatenated (width 5 * d_emb).
    PerModality,
}

impl ExportStage {
    pub fn parse(s: &str) -> Result<ExportStage> {
        match s {
            "pre-classifier" => Ok(ExportStage::PreClassifier),
            "per-modality" => Ok(ExportStage::PerModality),
            other => Err(CromeError::Config(format!(
                "unknown export stage {other:?} (expected pre-classifier or per-modality)"
            ))),
        }
    }

    pub fn width(&self, config: &RunConfig) -> usize {
        match self {
            ExportStage::PreClassifier => 3 * config.fusion.d_c,
            ExportStage::PerModality => 5 * config.dims.d_emb,
        }
    }
}

/// One row per sample: id, label, feature vector at the requested stage.
pub fn export_embeddings(
    model: &CroMeModel,
    state: &mut ModelState,
    dataset: &Dataset,
    stage: ExportStage,
) -> Result<Vec<(String, u8, Vec<f64>)>> {
    model.check_dataset(dataset)?;
    let mut rows = Vec::with_capacity(dataset.len());
    match stage {
        ExportStage::PerModality => {
            for s in &dataset.samples {
                rows.push((s.id.clone(), s.label, model.pooled_modalities(s)?));
            }
        }
        ExportStage::PreClassifier => {
            let batch = model.config.training.batch.max(2);
            let mut rng = RngStream::new(0, "export-dropout");
            for chunk in dataset.samples.chunks(batch) {
                let samples: Vec<&Sample> = chunk.iter().collect();
                let mut tape = Tape::new();
                let out = model.forward_batch(
                    &mut tape,
                    state,
                    &samples,
                    Mode::Eval,
                    None,
                    None,
                    &mut rng,
                    false,
                )?;
                let unified = tape.value(out.unified);
                for (i, s) in chunk.iter().enumerate() {
                    rows.push((s.id.clone(), s.label, unified.row(i).to_vec()));
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_embeddings_csv(
    rows: &[(String, u8, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let width = rows.first().map(|r| r.2.len()).unwrap_or(0);
    write!(w, "id,label")?;
    for i in 0..width {
        write!(w, ",f{i}")?;
    }
    writeln!(w)?;
    for (id, label, feats) in rows {
        write!(w, "{id},{label}")?;
        for f in feats {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

// ── ablation suite ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub baseline: bool,
    pub seeds: Vec<u64>,
    /// Per-seed (accuracy, f1_fake, f1_real); None marks a failed run.
    pub per_seed: Vec<Option<(f64, f64, f64)>>,
    pub mean_accuracy: Option<f64>,
    pub mean_f1_fake: Option<f64>,
    pub mean_f1_real: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateReport {
    pub rows: Vec<VariantResult>,
}

impl AblateReport {
    /// Table-2 style layout: variant, baseline flag, mean accuracy and the
    /// two per-class F1 means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,baseline,accuracy,f1_fake,f1_real\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.variant,
                row.baseline,
                fmt(row.mean_accuracy),
                fmt(row.mean_f1_fake),
                fmt(row.mean_f1_real),
            ));
        }
        out
    }
}

/// Run the eight-variant ablation over the given seeds. Per-variant failures
/// are isolated: a failed run leaves a missing cell, the suite continues.
/// When `out_dir` is set, each run's logs land in
/// `<out_dir>/<variant>/seed-<s>/`.
pub fn ablate_suite(
    config: &RunConfig,
    dataset: &Dataset,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblateReport> {
    if seeds.is_empty() {
        return Err(CromeError::Config("ablate needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, flags) in ablation_manifest() {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.ablate = flags;
            cfg.seed = seed;
            let run_dir = out_dir.map(|d| d.join(&name).join(format!("seed-{seed}")));
            let result = train(&cfg, dataset, run_dir.as_deref(), |_| {});
            per_seed.push(result.ok().map(|out| {
                (
                    out.final_report.accuracy,
                    out.final_report.f1_fake,
                    out.final_report.f1_real,
                )
            }));
        }
        let mean = |pick: fn(&(f64, f64, f64)) -> f64| {
            let ok: Vec<f64> = per_seed.iter().flatten().map(pick).collect();
            if ok.is_empty() {
                None
            } else {
                Some(ok.iter().sum::<f64>() / ok.len() as f64)
            }
        };
        rows.push(VariantResult {
            baseline: name == "full",
            variant: name,
            seeds: seeds.to_vec(),
            mean_accuracy: mean(|t| t.0),
            mean_f1_fake: mean(|t| t.1),
            mean_f1_real: mean(|t| t.2),
            per_seed,
        });
    }
    Ok(AblateReport { rows })
}
