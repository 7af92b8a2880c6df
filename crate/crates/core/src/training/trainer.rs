use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{compute_loss, label_statistics, stats_for, BatchTargets, HeadStats, LossComponents};
use super::{Dataset, HeadLabels, TrainingError};
use crate::autodiff::checkpoint::{read_checkpoint, write_checkpoint};
use crate::autodiff::{Adam, AdamConfig, AutodiffError, Tape};
use crate::binio::FormatError;
use crate::model::{HeadKind, Model, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 factor; unset picks 1e-4 for attention variants and 5e-4 for `none`.
    pub weight_decay: Option<f64>,
    /// Scale on the attention-position term (ablation only).
    pub attention_loss_weight: f64,
    pub train_fraction: f64,
    /// Share of the training split actually used, for data-efficiency runs.
    pub data_fraction: f64,
    /// Stop after this many epochs without a new best validation score; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: None,
            attention_loss_weight: 1.0,
            train_fraction: 0.8,
            data_fraction: 1.0,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn weight_decay_for(&self, variant: Variant) -> f64 {
        self.weight_decay.unwrap_or(match variant {
            Variant::None => 5e-4,
            Variant::Trajectory | Variant::SelfAttention => 1e-4,
        })
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let ok = self.batch_size > 0
            && self.epochs > 0
            && self.learning_rate > 0.0
            && self.weight_decay.map_or(true, |w| w >= 0.0)
            && self.attention_loss_weight >= 0.0
            && self.train_fraction > 0.0
            && self.train_fraction < 1.0
            && self.data_fraction > 0.0
            && self.data_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(TrainingError::Config(format!("{self:?}")))
        }
    }
}

/// Stored alongside the weights in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub validation_score: f64,
    /// Provenance of the training dataset.
    pub dataset: String,
    pub train_fraction: f64,
    pub model: ModelConfig,
    pub standardization: Vec<HeadStats>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl TrainedModel {
    pub fn write<W: Write>(&self, out: W) -> Result<(), FormatError> {
        let meta = toml::to_string(&self.meta)
            .map_err(|e| FormatError::Malformed { format: "checkpoint", reason: e.to_string() })?;
        write_checkpoint(out, &meta, self.model.params())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, FormatError> {
        let (meta, params) = read_checkpoint(input)?;
        let malformed = |reason: String| FormatError::Malformed { format: "checkpoint", reason };
        let meta: CheckpointMeta = toml::from_str(&meta).map_err(|e| malformed(e.to_string()))?;
        let model = Model::from_params(meta.model.clone(), params).map_err(|e| malformed(e.to_string()))?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn stats(&self, head: &str) -> Option<&HeadStats> {
        stats_for(&self.meta.standardization, head)
    }

    pub fn evaluate(&self, dataset: &Dataset, indices: &[usize]) -> Result<EvalReport, TrainingError> {
        evaluate(&self.model, &self.meta.standardization, dataset, indices)
    }

    /// The held-out split when `dataset` is the one this model was trained
    /// on, otherwise `None`.
    pub fn validation_split(&self, dataset: &Dataset) -> Option<Vec<usize>> {
        (dataset.provenance == self.meta.dataset)
            .then(|| dataset.split(self.meta.seed, self.meta.train_fraction).validation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub head: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<(), TrainingError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMetric {
    pub name: String,
    /// `accuracy` for discrete heads, `mse` for continuous ones.
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub heads: Vec<HeadMetric>,
    /// Per-sample means, attention term unweighted.
    pub loss: LossComponents,
    /// Mean feature-map distance between where the model attends and the
    /// projected true path; mask centroid for the self-attention variant.
    pub attention_distance: Option<f64>,
    /// Mean entropy of the normalized masks.
    pub mask_entropy: Option<f64>,
}

impl EvalReport {
    pub fn metric(&self, head: &str) -> Option<f64> {
        self.heads.iter().find(|h| h.name == head).map(|h| h.value)
    }

    /// Accuracy of the first discrete head.
    pub fn primary_accuracy(&self) -> Option<f64> {
        self.heads.iter().find(|h| h.metric == "accuracy").map(|h| h.value)
    }
}

#[derive(Clone, Debug, Default)]
struct Partial {
    head_sums: Vec<f64>,
    head_counts: Vec<usize>,
    loss: LossComponents,
    distance: f64,
    entropy: f64,
    mask_count: usize,
}

const EVAL_CHUNK: usize = 64;

fn evaluate_chunk(model: &Model, stats: &[HeadStats], dataset: &Dataset, idx: &[usize]) -> Result<Partial, TrainingError> {
    let config = model.config();
    let out = model.predict(&dataset.images(idx), &dataset.actions(idx))?;
    let h = config.horizon;
    let mut p = Partial {
        head_sums: vec![0.0; config.heads.len()],
        head_counts: vec![0; config.heads.len()],
        ..Partial::default()
    };
    for (k, head) in config.heads.iter().enumerate() {
        let pred = out.events[k].data();
        match head.kind {
            HeadKind::Discrete(n) => {
                for (b, &i) in idx.iter().enumerate() {
                    let HeadLabels::Discrete(labels) = &dataset.samples[i].labels[k] else { unreachable!() };
                    for (step, &label) in labels.iter().enumerate() {
                        let probs = &pred[(b * h + step) * n..(b * h + step + 1) * n];
                        let best = (0..n).fold(0, |best, c| if probs[c] > probs[best] { c } else { best });
                        if best == label {
                            p.head_sums[k] += 1.0;
                        }
                        p.loss.discrete -= probs[label].max(f64::MIN_POSITIVE).ln();
                    }
                    p.head_counts[k] += labels.len();
                }
            }
            HeadKind::Continuous(dim) => {
                let st = stats_for(stats, &head.name);
                for (b, &i) in idx.iter().enumerate() {
                    let HeadLabels::Continuous(labels) = &dataset.samples[i].labels[k] else { unreachable!() };
                    for (j, &truth) in labels.iter().enumerate() {
                        let d = j % dim;
                        let raw = pred[b * h * dim + j];
                        let value = st.map_or(raw, |s| s.destandardize(d, raw));
                        p.head_sums[k] += (value - truth) * (value - truth);
                        let z = st.map_or(truth, |s| s.standardize(d, truth));
                        p.loss.continuous += (raw - z) * (raw - z);
                    }
                    p.head_counts[k] += labels.len();
                }
            }
        }
    }
    let project = |b: usize, step: usize| model.project_to_feature(dataset.samples[idx[b]].positions[step]);
    if let Some(pos) = &out.positions {
        for b in 0..idx.len() {
            for step in 0..h {
                let at = (b * h + step) * 2;
                let pred = [pos.data()[at], pos.data()[at + 1]];
                let truth = dataset.samples[idx[b]].positions[step];
                p.loss.attention += (pred[0] - truth[0]).powi(2) + (pred[1] - truth[1]).powi(2);
                let (a, t) = (model.project_to_feature(pred), project(b, step));
                p.distance += ((a[0] - t[0]).powi(2) + (a[1] - t[1]).powi(2)).sqrt();
            }
        }
    }
    if let Some(masks) = &out.masks {
        let g = model.feature_geometry();
        let area = g.feature_w * g.feature_h;
        for (j, m) in masks.data().chunks(area).enumerate() {
            let total: f64 = m.iter().sum();
            p.entropy -= m.iter().filter(|&&v| v > 0.0).map(|&v| (v / total) * (v / total).ln()).sum::<f64>();
            p.mask_count += 1;
            if config.variant == Variant::SelfAttention {
                let (mut cx, mut cy) = (0.0, 0.0);
                for (cell, &v) in m.iter().enumerate() {
                    cx += v * (cell % g.feature_w) as f64;
                    cy += v * (cell / g.feature_w) as f64;
                }
                let t = project(j / h, j % h);
                p.distance += ((cx / total - t[0]).powi(2) + (cy / total - t[1]).powi(2)).sqrt();
            }
        }
    }
    Ok(p)
}

/// Per-head accuracy (argmax, ties to the lowest class) or mean squared
/// error in label units, averaged over every (sample, step).
pub fn evaluate(model: &Model, stats: &[HeadStats], dataset: &Dataset, indices: &[usize]) -> Result<EvalReport, TrainingError> {
    if indices.is_empty() {
        return Err(TrainingError::Dataset("cannot evaluate on an empty sample set".into()));
    }
    dataset.check_compatible(model.config())?;
    let parts: Vec<Partial> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|idx| evaluate_chunk(model, stats, dataset, idx))
        .collect::<Result<_, _>>()?;
    let config = model.config();
    let mut sums = vec![0.0; config.heads.len()];
    let mut counts = vec![0usize; config.heads.len()];
    let mut acc = Partial::default();
    for p in &parts {
        for k in 0..sums.len() {
            sums[k] += p.head_sums[k];
            counts[k] += p.head_counts[k];
        }
        acc.loss.discrete += p.loss.discrete;
        acc.loss.continuous += p.loss.continuous;
        acc.loss.attention += p.loss.attention;
        acc.distance += p.distance;
        acc.entropy += p.entropy;
        acc.mask_count += p.mask_count;
    }
    let n = indices.len() as f64;
    let heads = config
        .heads
        .iter()
        .enumerate()
        .map(|(k, head)| HeadMetric {
            name: head.name.clone(),
            metric: if head.is_discrete() { "accuracy" } else { "mse" },
            value: sums[k] / counts[k] as f64,
        })
        .collect();
    let loss = LossComponents {
        total: (acc.loss.discrete + acc.loss.continuous + acc.loss.attention) / n,
        discrete: acc.loss.discrete / n,
        continuous: acc.loss.continuous / n,
        attention: acc.loss.attention / n,
    };
    let has_mask = config.variant.has_mask();
    let steps = (indices.len() * config.horizon) as f64;
    Ok(EvalReport {
        samples: indices.len(),
        heads,
        loss,
        attention_distance: has_mask.then(|| acc.distance / steps),
        mask_entropy: has_mask.then(|| acc.entropy / acc.mask_count as f64),
    })
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation score.
    pub trained: TrainedModel,
    pub metrics: Vec<MetricRow>,
    pub best_epoch: usize,
    pub split: super::Split,
}

/// Minibatch Adam on the summed objective with a seeded split, shuffle and
/// initialization. Model selection uses validation accuracy of the first
/// discrete head, or validation loss when there is none.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    dataset.validate()?;
    dataset.check_compatible(model_config)?;
    let mut split = dataset.split(seed, cfg.train_fraction);
    let used = ((split.train.len() as f64) * cfg.data_fraction).round() as usize;
    split.train.truncate(used);
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(TrainingError::Dataset(format!(
            "split of {} samples leaves {} training and {} validation samples",
            dataset.len(),
            split.train.len(),
            split.validation.len()
        )));
    }
    let stats = label_statistics(dataset, &split.train);
    let mut model = Model::new(model_config.clone(), seed)?;
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay_for(model_config.variant),
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut metrics = Vec::new();
    let row = |epoch: usize, split: &str, head: &str, metric: &str, value: f64| MetricRow {
        epoch,
        split: split.into(),
        head: head.into(),
        metric: metric.into(),
        value,
        seed,
        config_hash: config_hash.into(),
    };
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let mut order = split.train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let images = tape.constant(dataset.images(idx));
            let (_, vars) = model.forward_full(&mut tape, &p, images, &dataset.actions(idx))?;
            let targets = BatchTargets::from_dataset(dataset, idx, &stats);
            let loss = compute_loss(&mut tape, model.config(), &vars, &targets, cfg.attention_loss_weight)?;
            let c = loss.components;
            if !c.is_finite() {
                return Err(TrainingError::NonFinite { epoch, batch: batch_no, components: c });
            }
            tape.backward(loss.total)?;
            let grads = p.gradients(&tape);
            match adam.step(model.params_mut(), &grads) {
                Err(AutodiffError::NonFiniteGradient { .. }) => {
                    return Err(TrainingError::NonFinite { epoch, batch: batch_no, components: c })
                }
                other => other?,
            }
            let w = idx.len() as f64;
            sums.total += c.total * w;
            sums.discrete += c.discrete * w;
            sums.continuous += c.continuous * w;
            sums.attention += c.attention * w;
        }
        let n = order.len() as f64;
        metrics.push(row(epoch, "train", "all", "loss_total", sums.total / n));
        metrics.push(row(epoch, "train", "all", "loss_discrete", sums.discrete / n));
        metrics.push(row(epoch, "train", "all", "loss_continuous", sums.continuous / n));
        metrics.push(row(epoch, "train", "all", "loss_attention", sums.attention / n));
        let report = evaluate(&model, &stats, dataset, &split.validation)?;
        for h in &report.heads {
            metrics.push(row(epoch, "val", &h.name, h.metric, h.value));
        }
        metrics.push(row(epoch, "val", "all", "loss_total", report.loss.total));
        if let Some(d) = report.attention_distance {
            metrics.push(row(epoch, "val", "attention", "distance", d));
        }
        if let Some(e) = report.mask_entropy {
            metrics.push(row(epoch, "val", "attention", "entropy", e));
        }
        let score = report.primary_accuracy().unwrap_or(-report.loss.total);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params().clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (score, best_epoch, params) = best.expect("at least one epoch ran");
    let model = Model::from_params(model_config.clone(), params)?;
    let meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        seed,
        epoch: best_epoch,
        validation_score: score,
        dataset: dataset.provenance.clone(),
        train_fraction: cfg.train_fraction,
        model: model_config.clone(),
        standardization: stats,
    };
    Ok(TrainOutcome { trained: TrainedModel { model, meta }, metrics, best_epoch, split })
}
