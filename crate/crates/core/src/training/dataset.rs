//! Trajectory samples and the dataset container file.
//!
//! Layout (little-endian): magic `TRAJDS`, version `u32`, provenance
//! string, horizon `u32`, action dim `u32`, image channels/height/width
//! `u32` each, head count `u32` and per head (name, kind `u8` 0 = discrete
//! 1 = continuous, width `u32`), sample count `u64`, then each sample as a
//! `u32` byte length followed by: episode `u32`, timestep `u32`, image
//! bytes, actions `f64`, labels per head (`u32` classes or `f64` values),
//! robot-frame positions `f64` pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainingError;
use crate::autodiff::Tensor;
use crate::binio::{BinReader, BinWriter, FormatError};
use crate::model::{EventHeadSpec, HeadKind, ModelConfig};

pub const MAGIC: &str = "TRAJDS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum HeadLabels {
    /// One class per step.
    Discrete(Vec<usize>),
    /// `H * dim` values, step-major.
    Continuous(Vec<f64>),
}

/// One observation with the actions taken after it and what followed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    /// `[C, H, W]` 8-bit colour planes.
    pub observation: Vec<u8>,
    /// `H * action_dim`, step-major.
    pub actions: Vec<f64>,
    /// One entry per dataset head.
    pub labels: Vec<HeadLabels>,
    /// Robot-frame planar positions at steps `t+1..=t+H`, metres.
    pub positions: Vec<[f64; 2]>,
    pub episode: u32,
    pub timestep: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub horizon: usize,
    pub action_dim: usize,
    /// `(channels, height, width)`
    pub image: (usize, usize, usize),
    pub heads: Vec<EventHeadSpec>,
    pub samples: Vec<TrajectorySample>,
    /// Config hash and seed of the run that produced the data.
    pub provenance: String,
}

/// Train/validation index partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Dataset {
    pub fn new(
        horizon: usize,
        action_dim: usize,
        image: (usize, usize, usize),
        heads: Vec<EventHeadSpec>,
    ) -> Self {
        Self { horizon, action_dim, image, heads, samples: Vec::new(), provenance: String::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    /// Checks every sample against the header.
    pub fn validate(&self) -> Result<(), TrainingError> {
        let (c, h, w) = self.image;
        for (i, s) in self.samples.iter().enumerate() {
            let bad = |reason: String| Err(TrainingError::Dataset(format!("sample {i}: {reason}")));
            if s.observation.len() != c * h * w {
                return bad(format!("image has {} bytes, expected {}", s.observation.len(), c * h * w));
            }
            if s.actions.len() != self.horizon * self.action_dim {
                return bad("action sequence length differs from horizon".into());
            }
            if s.positions.len() != self.horizon || s.positions.iter().flatten().any(|v| !v.is_finite()) {
                return bad("positions must be H finite pairs".into());
            }
            if s.labels.len() != self.heads.len() {
                return bad("label count differs from head count".into());
            }
            for (spec, labels) in self.heads.iter().zip(&s.labels) {
                match (spec.kind, labels) {
                    (HeadKind::Discrete(n), HeadLabels::Discrete(cls)) => {
                        if cls.len() != self.horizon || cls.iter().any(|&c| c >= n) {
                            return bad(format!("head {}: classes must be H values below {n}", spec.name));
                        }
                    }
                    (HeadKind::Continuous(d), HeadLabels::Continuous(v)) => {
                        if v.len() != self.horizon * d || v.iter().any(|x| !x.is_finite()) {
                            return bad(format!("head {}: expected H*{d} finite values", spec.name));
                        }
                    }
                    _ => return bad(format!("head {}: label kind differs from head kind", spec.name)),
                }
            }
        }
        Ok(())
    }

    /// Errors unless the model's heads, horizon and shapes match this data.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<(), TrainingError> {
        let image = (config.image_channels, config.image_height, config.image_width);
        if config.heads != self.heads {
            return Err(TrainingError::Dataset(format!(
                "model heads {:?} do not match dataset heads {:?}",
                config.heads.iter().map(|h| &h.name).collect::<Vec<_>>(),
                self.heads.iter().map(|h| &h.name).collect::<Vec<_>>()
            )));
        }
        if config.horizon != self.horizon || config.action_dim != self.action_dim || image != self.image {
            return Err(TrainingError::Dataset(format!(
                "model expects horizon {}, action dim {}, image {:?}; dataset has {}, {}, {:?}",
                config.horizon, config.action_dim, image, self.horizon, self.action_dim, self.image
            )));
        }
        Ok(())
    }

    /// Seeded shuffle, first `train_fraction` to training.
    pub fn split(&self, seed: u64, train_fraction: f64) -> Split {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.min(self.len());
        let validation = idx.split_off(cut);
        Split { train: idx, validation }
    }

    /// `[B, C, H, W]` images scaled to [0, 1].
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.image;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend(self.samples[i].observation.iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("validated image size")
    }

    /// `[B, H, A]`
    pub fn actions(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.horizon * self.action_dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].actions);
        }
        Tensor::new(vec![indices.len(), self.horizon, self.action_dim], data).expect("validated action size")
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), FormatError> {
        let mut w = BinWriter::new(out);
        w.bytes(MAGIC.as_bytes())?;
        w.u32(VERSION)?;
        w.str(&self.provenance)?;
        w.u32(self.horizon as u32)?;
        w.u32(self.action_dim as u32)?;
        for d in [self.image.0, self.image.1, self.image.2] {
            w.u32(d as u32)?;
        }
        w.u32(self.heads.len() as u32)?;
        for h in &self.heads {
            w.str(&h.name)?;
            w.u8(if h.is_discrete() { 0 } else { 1 })?;
            w.u32(h.width() as u32)?;
        }
        w.u64(self.samples.len() as u64)?;
        for s in &self.samples {
            let mut rec = BinWriter::new(Vec::new());
            rec.u32(s.episode)?;
            rec.u32(s.timestep)?;
            rec.bytes(&s.observation)?;
            rec.f64s(&s.actions)?;
            for l in &s.labels {
                match l {
                    HeadLabels::Discrete(c) => c.iter().try_for_each(|&c| rec.u32(c as u32))?,
                    HeadLabels::Continuous(v) => rec.f64s(v)?,
                }
            }
            for p in &s.positions {
                rec.f64s(p)?;
            }
            let rec = rec.finish()?;
            w.u32(rec.len() as u32)?;
            w.bytes(&rec)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, FormatError> {
        let mut r = BinReader::new(input, "dataset");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let provenance = r.str()?;
        let horizon = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let image = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let nheads = r.u32()? as usize;
        let mut heads = Vec::with_capacity(nheads);
        for _ in 0..nheads {
            let name = r.str()?;
            let kind = r.u8()?;
            let width = r.u32()? as usize;
            heads.push(match kind {
                0 => EventHeadSpec { name, kind: HeadKind::Discrete(width) },
                1 => EventHeadSpec { name, kind: HeadKind::Continuous(width) },
                k => return Err(r.malformed(format!("unknown head kind {k}"))),
            });
        }
        let count = r.u64()?;
        let pixels = image.0 * image.1 * image.2;
        let expected_len = 8
            + pixels
            + 8 * horizon * action_dim
            + heads.iter().map(|h| if h.is_discrete() { 4 * horizon } else { 8 * horizon * h.width() }).sum::<usize>()
            + 16 * horizon;
        let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
        for i in 0..count {
            let len = r.u32()? as usize;
            if len != expected_len {
                return Err(r.malformed(format!("sample {i} record is {len} bytes, expected {expected_len}")));
            }
            let raw = r.bytes(len)?;
            let mut rec = BinReader::new(raw.as_slice(), "dataset");
            let episode = rec.u32()?;
            let timestep = rec.u32()?;
            let observation = rec.bytes(pixels)?;
            let actions = rec.f64s(horizon * action_dim)?;
            let mut labels = Vec::with_capacity(heads.len());
            for h in &heads {
                labels.push(if h.is_discrete() {
                    HeadLabels::Discrete((0..horizon).map(|_| rec.u32().map(|c| c as usize)).collect::<Result<_, _>>()?)
                } else {
                    HeadLabels::Continuous(rec.f64s(horizon * h.width())?)
                });
            }
            let positions = (0..horizon).map(|_| Ok([rec.f64()?, rec.f64()?])).collect::<Result<_, FormatError>>()?;
            samples.push(TrajectorySample { observation, actions, labels, positions, episode, timestep });
        }
        r.expect_end()?;
        let ds = Self { horizon, action_dim, image, heads, samples, provenance };
        ds.validate().map_err(|e| FormatError::Malformed { format: "dataset", reason: e.to_string() })?;
        Ok(ds)
    }
}
