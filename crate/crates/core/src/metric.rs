//! Proxy anchor metric learning: static proxy assignment, the pull/push loss
//! over pooled embeddings, and the per-modality round-robin schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{BundleIds, Modality};
use crate::error::{CromeError, Result};
use crate::numerics::tape::{Tape, ValueId};

pub use crate::numerics::matrix::cosine_sim;

/// How s(x, p) is computed. Cosine is the default; dot is kept as the one
/// documented alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub alpha: f64,
    pub delta: f64,
    pub beta: f64,
    pub epochs_per_modality: usize,
    pub similarity: Similarity,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            alpha: 16.0,
            delta: 0.1,
            beta: 0.1,
            epochs_per_modality: 5,
            similarity: Similarity::Cosine,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(CromeError::Config(format!(
                "metric.alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.delta <= 0.0 {
            return Err(CromeError::Config(format!(
                "metric.delta must be > 0, got {}",
                self.delta
            )));
        }
        if self.beta < 0.0 {
            return Err(CromeError::Config(format!(
                "metric.beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.epochs_per_modality == 0 {
            return Err(CromeError::Config(
                "metric.epochs_per_modality must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Static proxy choice: the lowest-index sample of each class, fixed at run
/// start. Proxies are data points; their embeddings are recomputed under the
/// current encoder parameters at every loss evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyAssignment {
    pub proxy_index_per_class: BTreeMap<usize, usize>,
}

impl ProxyAssignment {
    pub fn classes(&self) -> Vec<usize> {
        self.proxy_index_per_class.keys().copied().collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.proxy_index_per_class.values().copied().collect()
    }
}

/// Choose the lowest-index sample of each class in dataset order. The choice
/// is order-dependent by design: a shuffled copy of the dataset may elect
/// different proxies.
pub fn assign_proxies(labels: &[u8]) -> Result<ProxyAssignment> {
    let mut map = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l as usize).or_insert(i);
    }
    for class in [0usize, 1] {
        if !map.contains_key(&class) {
            return Err(CromeError::Data(format!(
                "class {class} has no samples; cannot assign a proxy"
            )));
        }
    }
    Ok(ProxyAssignment {
        proxy_index_per_class: map,
    })
}

/// Mean over token rows: k x d -> 1 x d.
pub fn pool_tokens(tape: &mut Tape, z: ValueId) -> ValueId {
    tape.mean_rows(z)
}

/// One pooled embedding per sample plus the proxy rows, all on the tape.
#[derive(Debug, Clone)]
pub struct MetricBatch {
    pub embeddings: ValueId,
    pub labels: Vec<usize>,
    pub proxies: ValueId,
    pub proxy_classes: Vec<usize>,
}

impl MetricBatch {
    fn validate(&self, tape: &Tape) -> Result<()> {
        let n = tape.value(self.embeddings).rows;
        let p = tape.value(self.proxies).rows;
        if self.labels.len() != n {
            return Err(CromeError::Config(format!(
                "metric batch has {n} embedding rows but {} labels",
                self.labels.len()
            )));
        }
        if self.proxy_classes.len() != p {
            return Err(CromeError::Config(format!(
                "metric batch has {p} proxy rows but {} proxy classes",
                self.proxy_classes.len()
            )));
        }
        for &l in &self.labels {
            if !self.proxy_classes.contains(&l) {
                return Err(CromeError::Config(format!(
                    "label {l} has no proxy in the batch"
                )));
            }
        }
        Ok(())
    }
}

/// Proxy anchor loss over a batch. Gradients flow through both the batch
/// embeddings and the proxy embeddings.
pub fn proxy_anchor_loss(
    tape: &mut Tape,
    batch: &MetricBatch,
    cfg: &MetricConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    batch.validate(tape)?;
    let sims = match cfg.similarity {
        Similarity::Cosine => tape.cosine_sim(batch.embeddings, batch.proxies)?,
        Similarity::Dot => {
            let pt = tape.transpose(batch.proxies);
            tape.matmul(batch.embeddings, pt)?
        }
    };
    tape.proxy_anchor(sims, &batch.labels, &batch.proxy_classes, cfg.alpha, cfg.delta)
}

/// Round-robin over the active modalities: index = (epoch / epochs_per_modality) mod |set|.
pub fn schedule_over(available: &[Modality], epoch: usize, cfg: &MetricConfig) -> Modality {
    assert!(!available.is_empty(), "empty modality set");
    available[(epoch / cfg.epochs_per_modality) % available.len()]
}

/// The full five-modality schedule in the fixed order
/// (z_i1, z_i2, z_t1, z_t2, z_b).
pub fn modality_schedule(epoch: usize, cfg: &MetricConfig) -> Modality {
    schedule_over(&Modality::ALL, epoch, cfg)
}

/// Metric loss for the active modality only: pooled embeddings of that
/// modality for every batch sample and every proxy sample. Because the
/// pooled rows touch only the active modality's encoder outputs, every other
/// encoder's parameters receive exactly zero gradient from this term.
pub fn metric_loss_for_epoch(
    tape: &mut Tape,
    bundles: &[BundleIds],
    labels: &[usize],
    proxy_bundles: &[BundleIds],
    proxy_classes: &[usize],
    cfg: &MetricConfig,
    active: Modality,
) -> Result<ValueId> {
    let pooled: Vec<ValueId> = bundles
        .iter()
        .map(|b| pool_tokens(tape, b.modality(active)))
        .collect();
    let embeddings = tape.concat_rows(&pooled)?;
    let pooled_proxies: Vec<ValueId> = proxy_bundles
        .iter()
        .map(|b| pool_tokens(tape, b.modality(active)))
        .collect();
    let proxies = tape.concat_rows(&pooled_proxies)?;
    let batch = MetricBatch {
        embeddings,
        labels: labels.to_vec(),
        proxies,
        proxy_classes: proxy_classes.to_vec(),
    };
    proxy_anchor_loss(tape, &batch, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::reverse_grads;
    use crate::numerics::matrix::Matrix;
    use crate::numerics::rng::RngStream;
    use crate::params::{Group, Params};

    /// Independent brute-force evaluation of the loss: explicit loops over
    /// P, X+ and X-, plain ln(1 + sum), no clamping, no log1p.
    pub fn brute_force_loss(
        embeddings: &Matrix,
        labels: &[usize],
        proxies: &Matrix,
        proxy_classes: &[usize],
        alpha: f64,
        delta: f64,
    ) -> f64 {
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let p_count = proxies.rows;
        let pos_proxies: Vec<usize> = (0..p_count)
            .filter(|&j| labels.iter().any(|&l| l == proxy_classes[j]))
            .collect();
        let mut loss = 0.0;
        if !pos_proxies.is_empty() {
            let mut acc = 0.0;
            for &j in &pos_proxies {
                let mut inner = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    if l == proxy_classes[j] {
                        let s = cos(embeddings.row(i), proxies.row(j));
                        inner += (-alpha * (s - delta)).exp();
                    }
                }
                acc += (1.0 + inner).ln();
            }
            loss += acc / pos_proxies.len() as f64;
        }
        let mut acc = 0.0;
        for j in 0..p_count {
            let mut inner = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                if l != proxy_classes[j] {
                    let s = cos(embeddings.row(i), proxies.row(j));
                    inner += (alpha * (s + delta)).exp();
                }
            }
            acc += (1.0 + inner).ln();
        }
        loss += acc / p_count as f64;
        loss
    }

    fn loss_of(
        embeddings: Matrix,
        labels: Vec<usize>,
        proxies: Matrix,
        proxy_classes: Vec<usize>,
        cfg: &MetricConfig,
    ) -> f64 {
        let mut tape = Tape::new();
        let e = tape.leaf(embeddings);
        let p = tape.leaf(proxies);
        let batch = MetricBatch {
            embeddings: e,
            labels,
            proxies: p,
            proxy_classes,
        };
        let loss = proxy_anchor_loss(&mut tape, &batch, cfg).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn one_positive_at_margin_gives_log_two() {
        let cfg = MetricConfig::default();
        let delta = cfg.delta;
        // cos(x, p) = delta exactly: p = (1, 0), x = (delta, sqrt(1 - delta^2)).
        let proxies = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let x = Matrix::from_rows(&[vec![delta, (1.0 - delta * delta).sqrt()]]);
        let loss = loss_of(x, vec![0], proxies, vec![0], &cfg);
        assert!((loss - 2.0f64.ln()).abs() <= 1e-9, "loss = {loss}");
    }

    #[test]
    fn saturated_positive_is_tiny() {
        let cfg = MetricConfig::default();
        let proxies = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let x = Matrix::from_rows(&[vec![2.0, 0.0]]); // cos = 1
        let loss = loss_of(x, vec![0], proxies, vec![0], &cfg);
        let expect = (-16.0f64 * 0.9).exp().ln_1p();
        assert!((loss - expect).abs() <= 1e-9, "loss = {loss}");
        assert!((loss - 5.58e-7).abs() < 1e-8);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        let mut rng = RngStream::new(2024, "eq1");
        for case in 0..10 {
            let n = 2 + rng.next_below(7); // up to 8 points
            let d = 2 + rng.next_below(4); // up to 5 dims
            let alpha = if rng.next_below(2) == 0 { 4.0 } else { 16.0 };
            let delta = if rng.next_below(2) == 0 { 0.1 } else { 0.4 };
            let embeddings =
                Matrix::from_vec(n, d, (0..n * d).map(|_| rng.next_normal()).collect());
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let proxies = Matrix::from_vec(2, d, (0..2 * d).map(|_| rng.next_normal()).collect());
            let proxy_classes = vec![0, 1];
            let cfg = MetricConfig {
                alpha,
                delta,
                ..MetricConfig::default()
            };
            let got = loss_of(
                embeddings.clone(),
                labels.clone(),
                proxies.clone(),
                proxy_classes.clone(),
                &cfg,
            );
            let want = brute_force_loss(&embeddings, &labels, &proxies, &proxy_classes, alpha, delta);
            assert!(
                (got - want).abs() <= 1e-12,
                "case {case}: got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn loss_is_nonnegative_and_scale_invariant() {
        let mut rng = RngStream::new(55, "scale");
        let n = 6;
        let d = 4;
        let embeddings = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.next_normal()).collect());
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let proxies = Matrix::from_vec(2, d, (0..2 * d).map(|_| rng.next_normal()).collect());
        let cfg = MetricConfig::default();
        let base = loss_of(
            embeddings.clone(),
            labels.clone(),
            proxies.clone(),
            vec![0, 1],
            &cfg,
        );
        assert!(base >= 0.0);
        // Positive rescaling of any embedding row leaves cosine, hence the loss.
        let mut scaled = embeddings.clone();
        for v in scaled.row_mut(2).iter_mut() {
            *v *= 37.5;
        }
        let after = loss_of(scaled, labels, proxies, vec![0, 1], &cfg);
        assert!((base - after).abs() <= 1e-10);
    }

    #[test]
    fn loss_decreases_as_positives_approach_proxies() {
        // Move one positive along a path toward its proxy; the loss must
        // decrease monotonically.
        let cfg = MetricConfig::default();
        let proxies = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let mut last = f64::INFINITY;
        for step in 0..8 {
            let t = step as f64 / 8.0;
            // Interpolate angle from 80 degrees down toward 0.
            let angle = (1.0 - t) * 80.0f64.to_radians();
            let x = Matrix::from_rows(&[
                vec![angle.cos(), angle.sin()],
                vec![-0.9, 0.1], // fixed member of class 1
            ]);
            let loss = loss_of(x, vec![0, 1], proxies.clone(), vec![0, 1], &cfg);
            assert!(loss < last, "loss {loss} did not decrease at step {step}");
            last = loss;
        }
    }

    #[test]
    fn gradient_pulls_positives_and_pushes_negatives() {
        let cfg = MetricConfig::default();
        let mut params = Params::new();
        let emb = params.register(
            "emb",
            Group::Head,
            Matrix::from_rows(&[vec![0.3, 0.9], vec![0.4, -0.8]]),
        );
        let proxies_m = Matrix::from_rows(&[vec![1.0, 0.1], vec![-0.6, -0.7]]);
        let labels = vec![0usize, 1];
        let proxies_fixed = proxies_m.clone();
        let loss_fn = {
            let cfg = cfg.clone();
            move |p: &Params, tape: &mut Tape| {
                let e = tape.param(p, emb);
                let pr = tape.leaf(proxies_fixed.clone());
                let batch = MetricBatch {
                    embeddings: e,
                    labels: labels.clone(),
                    proxies: pr,
                    proxy_classes: vec![0, 1],
                };
                proxy_anchor_loss(tape, &batch, &cfg)
            }
        };
        let (_, grads) = reverse_grads(&params, &loss_fn).unwrap();
        let g = &grads[&emb];
        // One descent step on row 0 (a positive of proxy 0) must increase
        // cos(x0, p0); the same step on row 1 must decrease cos(x1, p0).
        let step = 1e-3;
        let before = params.get(emb).clone();
        let cos_before_pos = cosine_sim(before.row(0), proxies_m.row(0)).unwrap();
        let cos_before_neg = cosine_sim(before.row(1), proxies_m.row(0)).unwrap();
        let mut after = before.clone();
        after.add_scaled(g, -step);
        let cos_after_pos = cosine_sim(after.row(0), proxies_m.row(0)).unwrap();
        let cos_after_neg = cosine_sim(after.row(1), proxies_m.row(0)).unwrap();
        assert!(cos_after_pos > cos_before_pos, "positive was not pulled");
        assert!(cos_after_neg < cos_before_neg, "negative was not pushed");
    }

    #[test]
    fn assign_proxies_picks_lowest_index_per_class() {
        let labels = vec![1u8, 0, 1, 0, 0];
        let a = assign_proxies(&labels).unwrap();
        assert_eq!(a.proxy_index_per_class[&0], 1);
        assert_eq!(a.proxy_index_per_class[&1], 0);
        // Shuffled copy may elect different proxies (order dependence).
        let shuffled = vec![0u8, 1, 1, 0, 0];
        let b = assign_proxies(&shuffled).unwrap();
        assert_eq!(b.proxy_index_per_class[&0], 0);
        assert_eq!(b.proxy_index_per_class[&1], 1);
    }

    #[test]
    fn empty_class_is_dataset_error() {
        assert!(assign_proxies(&[0, 0, 0]).is_err());
    }

    #[test]
    fn schedule_round_robin() {
        let cfg = MetricConfig::default();
        assert_eq!(modality_schedule(0, &cfg), Modality::ImagePrimary);
        assert_eq!(modality_schedule(4, &cfg), Modality::ImagePrimary);
        assert_eq!(modality_schedule(5, &cfg), Modality::ImageBlip);
        assert_eq!(modality_schedule(10, &cfg), Modality::TextPrimary);
        assert_eq!(modality_schedule(15, &cfg), Modality::TextBlip);
        assert_eq!(modality_schedule(20, &cfg), Modality::Joint);
        // (26 / 5) mod 5 = 5 mod 5 = 0: the cycle wraps back to z_i1.
        assert_eq!(modality_schedule(26, &cfg), Modality::ImagePrimary);
    }

    #[test]
    fn pool_tokens_cases() {
        let mut tape = Tape::new();
        let single = tape.leaf(Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]));
        let p = pool_tokens(&mut tape, single);
        assert_eq!(tape.value(p).data, vec![0.5, -1.0, 2.0]);

        let opposite = tape.leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]));
        let p2 = pool_tokens(&mut tape, opposite);
        assert_eq!(tape.value(p2).data, vec![0.0, 0.0]);

        let mut rng = RngStream::new(3, "pool");
        let m = Matrix::from_vec(4, 3, (0..12).map(|_| rng.next_normal()).collect());
        let l = tape.leaf(m.clone());
        let p3 = pool_tokens(&mut tape, l);
        let oracle = m.col_mean();
        for (a, b) in tape.value(p3).data.iter().zip(oracle.data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_norm_embedding_is_degenerate_vector_error() {
        let cfg = MetricConfig::default();
        let mut tape = Tape::new();
        let e = tape.leaf(Matrix::from_rows(&[vec![0.0, 0.0]]));
        let p = tape.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let batch = MetricBatch {
            embeddings: e,
            labels: vec![0],
            proxies: p,
            proxy_classes: vec![0, 1],
        };
        assert!(matches!(
            proxy_anchor_loss(&mut tape, &batch, &cfg),
            Err(CromeError::DegenerateVector(_))
        ));
    }
}
