use serde::{Deserialize, Serialize};

use super::{Dataset, HeadLabels, TrainingError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{ForwardVars, HeadKind, ModelConfig, Variant};

/// Per-dimension mean and standard deviation of a continuous head's labels
/// over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl HeadStats {
    pub fn standardize(&self, dim: usize, v: f64) -> f64 {
        (v - self.mean[dim]) / self.std[dim]
    }

    pub fn destandardize(&self, dim: usize, v: f64) -> f64 {
        v * self.std[dim] + self.mean[dim]
    }
}

/// Standardization statistics for every continuous head.
pub fn label_statistics(dataset: &Dataset, indices: &[usize]) -> Vec<HeadStats> {
    let mut stats = Vec::new();
    for (k, head) in dataset.heads.iter().enumerate() {
        let HeadKind::Continuous(dim) = head.kind else { continue };
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for &i in indices {
            if let HeadLabels::Continuous(v) = &dataset.samples[i].labels[k] {
                for step in v.chunks(dim) {
                    for d in 0..dim {
                        sum[d] += step[d];
                        sq[d] += step[d] * step[d];
                    }
                    n += 1;
                }
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-16 { var.sqrt() } else { 1.0 }
            })
            .collect();
        stats.push(HeadStats { name: head.name.clone(), mean, std });
    }
    stats
}

pub(crate) fn stats_for<'a>(stats: &'a [HeadStats], name: &str) -> Option<&'a HeadStats> {
    stats.iter().find(|s| s.name == name)
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadTargets {
    /// Per step, one class per batch entry.
    Discrete(Vec<Vec<usize>>),
    /// Per step `[B, dim]`, standardized.
    Continuous(Vec<Tensor>),
}

/// Labels for one minibatch, laid out to match the per-step model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    pub heads: Vec<HeadTargets>,
    /// Per step `[B, 2]` robot-frame positions.
    pub positions: Vec<Tensor>,
}

impl BatchTargets {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize], stats: &[HeadStats]) -> Self {
        let h = dataset.horizon;
        let b = indices.len();
        let mut heads = Vec::with_capacity(dataset.heads.len());
        for (k, head) in dataset.heads.iter().enumerate() {
            heads.push(match head.kind {
                HeadKind::Discrete(_) => HeadTargets::Discrete(
                    (0..h)
                        .map(|step| {
                            indices
                                .iter()
                                .map(|&i| match &dataset.samples[i].labels[k] {
                                    HeadLabels::Discrete(c) => c[step],
                                    HeadLabels::Continuous(_) => unreachable!("validated dataset"),
                                })
                                .collect()
                        })
                        .collect(),
                ),
                HeadKind::Continuous(dim) => {
                    let st = stats_for(stats, &head.name);
                    HeadTargets::Continuous(
                        (0..h)
                            .map(|step| {
                                let mut data = Vec::with_capacity(b * dim);
                                for &i in indices {
                                    let HeadLabels::Continuous(v) = &dataset.samples[i].labels[k] else {
                                        unreachable!("validated dataset")
                                    };
                                    for d in 0..dim {
                                        let raw = v[step * dim + d];
                                        data.push(st.map_or(raw, |s| s.standardize(d, raw)));
                                    }
                                }
                                Tensor::new(vec![b, dim], data).expect("sized above")
                            })
                            .collect(),
                    )
                }
            });
        }
        let positions = (0..h)
            .map(|step| {
                let data = indices.iter().flat_map(|&i| dataset.samples[i].positions[step]).collect();
                Tensor::new(vec![b, 2], data).expect("sized above")
            })
            .collect();
        Self { heads, positions }
    }
}

/// Batch means of the objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub continuous: f64,
    pub discrete: f64,
    pub attention: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.continuous.is_finite() && self.discrete.is_finite() && self.attention.is_finite()
    }
}

pub struct Loss {
    pub total: Var,
    pub components: LossComponents,
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Var, TrainingError> {
    Ok(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    })
}

/// Squared error summed over steps, cross-entropy summed over steps, and
/// squared attention-position error summed over steps (trajectory variant
/// only), each summed over heads and averaged over the batch.
/// `attention_weight` scales the last term in the total.
pub fn compute_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ForwardVars,
    targets: &BatchTargets,
    attention_weight: f64,
) -> Result<Loss, TrainingError> {
    if vars.outputs.len() != config.heads.len() || targets.heads.len() != config.heads.len() {
        return Err(TrainingError::Labels(format!(
            "{} head outputs and {} label sets for {} heads",
            vars.outputs.len(),
            targets.heads.len(),
            config.heads.len()
        )));
    }
    let batch = vars.outputs.first().and_then(|s| s.first()).map_or(0, |&v| tape.shape(v)[0]);
    if batch == 0 {
        return Err(TrainingError::Labels("empty batch".into()));
    }
    let (mut disc, mut cont, mut attn) = (None, None, None);
    for ((head, steps), target) in config.heads.iter().zip(&vars.outputs).zip(&targets.heads) {
        match (head.kind, target) {
            (HeadKind::Discrete(_), HeadTargets::Discrete(labels)) if labels.len() == steps.len() => {
                for (&logits, cls) in steps.iter().zip(labels) {
                    let lp = tape.log_softmax(logits, 1)?;
                    let picked = tape.pick(lp, cls)?;
                    let s = tape.sum(picked);
                    let nll = tape.scale(s, -1.0);
                    disc = Some(accumulate(tape, disc, nll)?);
                }
            }
            (HeadKind::Continuous(_), HeadTargets::Continuous(values)) if values.len() == steps.len() => {
                for (&pred, truth) in steps.iter().zip(values) {
                    let t = tape.constant(truth.clone());
                    let diff = tape.sub(pred, t)?;
                    let sq = tape.square(diff);
                    let s = tape.sum(sq);
                    cont = Some(accumulate(tape, cont, s)?);
                }
            }
            _ => return Err(TrainingError::Labels(format!("labels for head {} do not match its kind or horizon", head.name))),
        }
    }
    if config.variant == Variant::Trajectory {
        if vars.positions.len() != targets.positions.len() {
            return Err(TrainingError::Labels("position targets do not cover the horizon".into()));
        }
        for (&pred, truth) in vars.positions.iter().zip(&targets.positions) {
            let t = tape.constant(truth.clone());
            let diff = tape.sub(pred, t)?;
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            attn = Some(accumulate(tape, attn, s)?);
        }
    }
    let inv = 1.0 / batch as f64;
    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item() * inv);
    let components = LossComponents {
        continuous: value(tape, cont),
        discrete: value(tape, disc),
        attention: value(tape, attn),
        total: 0.0,
    };
    let mut total = None;
    for term in [disc, cont] {
        if let Some(t) = term {
            total = Some(accumulate(tape, total, t)?);
        }
    }
    if let Some(a) = attn {
        let a = tape.scale(a, attention_weight);
        total = Some(accumulate(tape, total, a)?);
    }
    let total = tape.scale(total.expect("at least one head"), inv);
    let components = LossComponents { total: tape.value(total).item(), ..components };
    Ok(Loss { total, components })
}
