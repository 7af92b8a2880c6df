use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Variant};
use crate::autodiff::{lstm_cell, BoundParams, LstmWeights, ParamStore, Tape, Tensor, Var};
use crate::geometry::{
    gaussian_mask, gaussian_mask_vjp, pixel_to_featuremap, robot_to_pixel, AttentionCovariance, CovarianceVariant,
    FeatureMapGeometry, PoseSE3, MIN_VARIANCE,
};

/// Tape handles for the encoder output.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, C, fh, fw]`, post-ReLU.
    pub fmap: Var,
    /// `[B, hidden]` image embedding.
    pub h0: Var,
}

/// Encoder output for a single observation, shared by many rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub fmap: Tensor,
    pub h0: Tensor,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[head][step]`, each `[B, width]`: logits for discrete heads, values for continuous ones.
    pub outputs: Vec<Vec<Var>>,
    /// Trajectory variant only: per-step `[B, 2]` robot-frame positions in metres.
    pub positions: Vec<Var>,
    /// Per-step `[B, fh, fw]` masks; empty for the `none` variant.
    pub masks: Vec<Var>,
}

/// Plain-value predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Per head `[B, H, width]`: class probabilities or (standardized) values.
    pub events: Vec<Tensor>,
    /// `[B, H, 2]`
    pub positions: Option<Tensor>,
    /// `[B, H, fh, fw]`
    pub masks: Option<Tensor>,
    /// `[B, C, fh, fw]`
    pub feature_map: Tensor,
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    geometry: FeatureMapGeometry,
    camera_pose: PoseSE3,
    encode_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            geometry: self.geometry.clone(),
            camera_pose: self.camera_pose,
            encode_calls: AtomicUsize::new(self.encode_count()),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("variant", &self.config.variant)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name: name.into(), shape, init }
}

fn lstm_specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}.w_ih"), vec![input, 4 * hidden], Init::Xavier { fan_in: input, fan_out: 4 * hidden }),
        spec(format!("{prefix}.w_hh"), vec![hidden, 4 * hidden], Init::Xavier { fan_in: hidden, fan_out: 4 * hidden }),
        spec(format!("{prefix}.bias"), vec![4 * hidden], Init::Zeros),
    ]
}

fn dense_specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}.weight"), vec![input, output], Init::Xavier { fan_in: input, fan_out: output }),
        spec(format!("{prefix}.bias"), vec![output], Init::Zeros),
    ]
}

fn param_specs(c: &ModelConfig, geometry: &FeatureMapGeometry) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut in_ch = c.image_channels;
    for (i, conv) in c.convs.iter().enumerate() {
        let k2 = conv.kernel * conv.kernel;
        specs.push(spec(
            format!("conv{i}.weight"),
            vec![conv.channels, in_ch, conv.kernel, conv.kernel],
            Init::Xavier { fan_in: in_ch * k2, fan_out: conv.channels * k2 },
        ));
        specs.push(spec(format!("conv{i}.bias"), vec![conv.channels], Init::Zeros));
        in_ch = conv.channels;
    }
    specs.extend(dense_specs("image_embed", in_ch, c.hidden));
    specs.extend(dense_specs("action_embed", c.action_dim, c.action_embedding));
    match c.variant {
        Variant::Trajectory => {
            specs.extend(lstm_specs("lower", c.action_embedding, c.hidden));
            specs.extend(dense_specs("attn_head", c.hidden, 2 + c.covariance.num_params()));
        }
        Variant::SelfAttention => {
            specs.extend(lstm_specs("lower", c.action_embedding, c.hidden));
            specs.extend(dense_specs("attn_head", c.hidden, geometry.feature_w * geometry.feature_h));
        }
        Variant::None => {}
    }
    specs.extend(lstm_specs("upper", in_ch + c.action_embedding, c.hidden));
    for h in &c.heads {
        specs.extend(dense_specs(&format!("head.{}", h.name), c.hidden, h.width()));
    }
    specs
}

/// Range of the bounded log-variance, `(ln MIN_VARIANCE, 2 ln max_sigma)`.
fn log_var_range(max_sigma: f64) -> (f64, f64) {
    (MIN_VARIANCE.ln(), 2.0 * max_sigma.ln())
}

/// Raw head outputs that produce `init_sigma` after `bound_covariance`.
pub(crate) fn covariance_init(c: &ModelConfig) -> Vec<f64> {
    let log_var = match c.max_sigma {
        None => (c.init_sigma * c.init_sigma).ln(),
        Some(m) => {
            let (lo, hi) = log_var_range(m);
            let t = ((c.init_sigma * c.init_sigma).ln() - lo) / (hi - lo);
            (t / (1.0 - t)).ln()
        }
    };
    let diag = match c.max_sigma {
        None => c.init_sigma,
        Some(m) => (c.init_sigma / m).atanh(),
    };
    match c.covariance {
        CovarianceVariant::Isotropic => vec![log_var],
        CovarianceVariant::Diagonal => vec![log_var; 2],
        CovarianceVariant::Full => vec![diag, 0.0, 0.0, diag],
    }
}

fn dims_of(tape: &Tape, v: Var) -> Vec<usize> {
    tape.shape(v).to_vec()
}

impl Model {
    /// Fresh model with Xavier-uniform weights and zero biases. The mask
    /// covariance outputs start at `init_sigma` independent of the input.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let geometry = config.feature_geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in param_specs(&config, &geometry) {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
            };
            params.insert(s.name, Tensor::new(s.shape, data)?);
        }
        if config.variant == Variant::Trajectory {
            let ncov = config.covariance.num_params();
            let width = 2 + ncov;
            let w = params.get_mut("attn_head.weight").expect("trajectory head exists");
            for row in w.data_mut().chunks_mut(width) {
                row[2..].iter_mut().for_each(|v| *v = 0.0);
            }
            let b = params.get_mut("attn_head.bias").expect("trajectory head exists");
            b.data_mut()[2..].copy_from_slice(&covariance_init(&config));
        }
        Self::assemble(config, geometry, params)
    }

    /// Wraps existing weights, checking every expected parameter is present
    /// with the right shape and nothing else is.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let geometry = config.feature_geometry()?;
        let specs = param_specs(&config, &geometry);
        let mut ordered = ParamStore::new();
        for s in &specs {
            let t = params
                .get(&s.name)
                .ok_or_else(|| ModelError::Param { name: s.name.clone(), reason: "missing".into() })?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::Param {
                    name: s.name.clone(),
                    reason: format!("expected shape {:?}, found {:?}", s.shape, t.shape()),
                });
            }
            ordered.insert(s.name.clone(), t.clone());
        }
        if let Some((extra, _)) = params.iter().find(|(n, _)| !specs.iter().any(|s| s.name == *n)) {
            return Err(ModelError::Param { name: extra.to_string(), reason: "not used by this config".into() });
        }
        Self::assemble(config, geometry, ordered)
    }

    fn assemble(config: ModelConfig, geometry: FeatureMapGeometry, params: ParamStore) -> Result<Self, ModelError> {
        let camera_pose = config.camera.pose_in_robot();
        Ok(Self { config, params, geometry, camera_pose, encode_calls: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_geometry(&self) -> &FeatureMapGeometry {
        &self.geometry
    }

    /// Number of [`Model::encode_image`] calls so far.
    pub fn encode_count(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn reset_encode_count(&self) {
        self.encode_calls.store(0, Ordering::Relaxed);
    }

    /// Feature-map coordinate of a robot-frame ground point, clamped to the map.
    pub fn project_to_feature(&self, position: [f64; 2]) -> [f64; 2] {
        let x_r = Vector3::new(position[0], position[1], 0.0);
        let proj = robot_to_pixel(&x_r, &self.camera_pose, &self.config.camera.intrinsics);
        let fc = pixel_to_featuremap(proj.u, proj.v, &self.geometry);
        [fc.x, fc.y]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.params.bind(tape, trainable)
    }

    fn lstm(&self, p: &BoundParams, prefix: &str) -> Result<LstmWeights, ModelError> {
        Ok(LstmWeights {
            w_ih: p.get(&format!("{prefix}.w_ih"))?,
            w_hh: p.get(&format!("{prefix}.w_hh"))?,
            bias: p.get(&format!("{prefix}.bias"))?,
        })
    }

    fn dense(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w = p.get(&format!("{prefix}.weight"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        Ok(tape.linear(x, w, b)?)
    }

    /// Convolutional encoder on `images[B, C, H, W]`.
    pub fn encode_image(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Encoded, ModelError> {
        let c = &self.config;
        let s = dims_of(tape, images);
        if s.len() != 4 || s[1..] != [c.image_channels, c.image_height, c.image_width] {
            return Err(ModelError::Shape {
                what: "image batch",
                expected: vec![s.first().copied().unwrap_or(1), c.image_channels, c.image_height, c.image_width],
                found: s,
            });
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = images;
        for (i, conv) in c.convs.iter().enumerate() {
            let w = p.get(&format!("conv{i}.weight"))?;
            let b = p.get(&format!("conv{i}.bias"))?;
            let y = tape.conv2d(x, w, b, conv.stride, (conv.kernel - 1) / 2)?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x)?;
        let embed = self.dense(tape, p, "image_embed", pooled)?;
        let h0 = tape.tanh(embed);
        Ok(Encoded { fmap: x, h0 })
    }

    /// Per-step action embeddings `[B, E]` from `actions[B, H, A]`.
    pub fn embed_actions(&self, tape: &mut Tape, p: &BoundParams, actions: &Tensor) -> Result<Vec<Var>, ModelError> {
        let c = &self.config;
        let s = actions.shape();
        if s.len() != 3 || s[1] != c.horizon || s[2] != c.action_dim {
            return Err(ModelError::Shape {
                what: "action sequence",
                expected: vec![s.first().copied().unwrap_or(1), c.horizon, c.action_dim],
                found: s.to_vec(),
            });
        }
        let (batch, steps, dim) = (s[0], s[1], s[2]);
        let src = actions.data();
        let mut step_major = Vec::with_capacity(src.len());
        for i in 0..steps {
            for b in 0..batch {
                let at = (b * steps + i) * dim;
                step_major.extend_from_slice(&src[at..at + dim]);
            }
        }
        let a = tape.constant(Tensor::new(vec![steps * batch, dim], step_major)?);
        let e = self.dense(tape, p, "action_embed", a)?;
        let e = tape.relu(e);
        (0..steps).map(|i| Ok(tape.slice(e, 0, i * batch, batch)?)).collect()
    }

    fn zero_state(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[batch, self.config.hidden]))
    }

    fn lower_recurrence(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        h0: Var,
        action_emb: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        let weights = self.lstm(p, "lower")?;
        let batch = tape.shape(h0)[0];
        let (mut h, mut c) = (h0, self.zero_state(tape, batch));
        let mut outs = Vec::with_capacity(action_emb.len());
        for &e in action_emb {
            (h, c) = lstm_cell(tape, e, h, c, &weights)?;
            outs.push(self.dense(tape, p, "attn_head", h)?);
        }
        Ok(outs)
    }

    /// Robot-frame planar positions `[B, 2]` and covariance parameters per
    /// step. The head emits per-step displacements; positions are their
    /// running sum, so a straight constant-speed path is a constant output.
    pub fn predict_attention_sequence(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        h0: Var,
        action_emb: &[Var],
    ) -> Result<Vec<(Var, Var)>, ModelError> {
        if self.config.variant != Variant::Trajectory {
            return Err(ModelError::Variant { op: "predict_attention_sequence", variant: self.config.variant });
        }
        let ncov = self.config.covariance.num_params();
        let raw = self.lower_recurrence(tape, p, h0, action_emb)?;
        let mut seq = Vec::with_capacity(raw.len());
        let mut pos: Option<Var> = None;
        for out in raw {
            let step = tape.slice(out, 1, 0, 2)?;
            let step = tape.scale(step, self.config.position_scale);
            let next = match pos {
                Some(prev) => tape.add(prev, step)?,
                None => step,
            };
            pos = Some(next);
            let raw_cov = tape.slice(out, 1, 2, ncov)?;
            seq.push((next, self.bound_covariance(tape, raw_cov)?));
        }
        Ok(seq)
    }

    /// Squashes raw covariance outputs so the mask spread stays below
    /// `max_sigma`: log-variances through a scaled sigmoid, factor entries
    /// through `max_sigma * tanh`.
    pub(crate) fn bound_covariance(&self, tape: &mut Tape, raw: Var) -> Result<Var, ModelError> {
        let Some(m) = self.config.max_sigma else {
            return Ok(raw);
        };
        Ok(match self.config.covariance {
            CovarianceVariant::Full => {
                let t = tape.tanh(raw);
                tape.scale(t, m)
            }
            CovarianceVariant::Isotropic | CovarianceVariant::Diagonal => {
                let (lo, hi) = log_var_range(m);
                let s = tape.sigmoid(raw);
                let s = tape.scale(s, hi - lo);
                let offset = tape.constant(Tensor::full(&tape.shape(raw).to_vec(), lo));
                tape.add(s, offset)?
            }
        })
    }

    /// Gaussian masks `[B, fh, fw]` for robot-frame positions `[B, 2]`
    /// (ground plane, z = 0) and covariance parameters `[B, ncov]`.
    pub fn coord_to_mask(&self, tape: &mut Tape, position: Var, cov: Var) -> Result<Var, ModelError> {
        let ncov = self.config.covariance.num_params();
        let (sp, sc) = (dims_of(tape, position), dims_of(tape, cov));
        if sp.len() != 2 || sp[1] != 2 {
            return Err(ModelError::Shape { what: "attention position", expected: vec![sp[0], 2], found: sp });
        }
        if sc != [sp[0], ncov] {
            return Err(ModelError::Shape { what: "covariance parameters", expected: vec![sp[0], ncov], found: sc });
        }
        let batch = sp[0];
        let (fw, fh) = (self.geometry.feature_w, self.geometry.feature_h);
        let area = fw * fh;
        let pos = tape.value(position).data().to_vec();
        let covp = tape.value(cov).data().to_vec();
        let mut values = Vec::with_capacity(batch * area);
        let mut saved = Vec::with_capacity(batch);
        for b in 0..batch {
            let x_r = Vector3::new(pos[2 * b], pos[2 * b + 1], 0.0);
            let proj = robot_to_pixel(&x_r, &self.camera_pose, &self.config.camera.intrinsics);
            let fc = pixel_to_featuremap(proj.u, proj.v, &self.geometry);
            let j = fc.jacobian_robot(&proj);
            let cov = AttentionCovariance::from_params(self.config.covariance, &covp[b * ncov..(b + 1) * ncov])?;
            let x_attn = [fc.x, fc.y];
            values.extend(gaussian_mask(x_attn, &cov, fw, fh).values);
            saved.push((x_attn, cov, [j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)]]));
        }
        let output = Tensor::new(vec![batch, fh, fw], values)?;
        let backward = Box::new(move |g: &[f64]| {
            let mut d_pos = vec![0.0; batch * 2];
            let mut d_cov = vec![0.0; batch * ncov];
            for (b, (x_attn, cov, j)) in saved.iter().enumerate() {
                let (dx, dc) = gaussian_mask_vjp(*x_attn, cov, fw, fh, &g[b * area..(b + 1) * area]);
                d_pos[2 * b] = j[0] * dx[0] + j[2] * dx[1];
                d_pos[2 * b + 1] = j[1] * dx[0] + j[3] * dx[1];
                d_cov[b * ncov..(b + 1) * ncov].copy_from_slice(&dc);
            }
            vec![d_pos, d_cov]
        });
        Ok(tape.custom(&[position, cov], output, backward))
    }

    /// Spatial-softmax masks `[B, fh, fw]` per step, each summing to one.
    pub fn self_attention_mask(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        h0: Var,
        action_emb: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        if self.config.variant != Variant::SelfAttention {
            return Err(ModelError::Variant { op: "self_attention_mask", variant: self.config.variant });
        }
        let (fw, fh) = (self.geometry.feature_w, self.geometry.feature_h);
        let raw = self.lower_recurrence(tape, p, h0, action_emb)?;
        raw.into_iter()
            .map(|logits| {
                let batch = tape.shape(logits)[0];
                let m = tape.softmax(logits, 1)?;
                Ok(tape.reshape(m, &[batch, fh, fw])?)
            })
            .collect()
    }

    /// Event recurrence. With masks, each step reads the pooled masked
    /// feature map; without, the pooled raw map. Returns `[head][step]`.
    pub fn predict_events(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        fmap: Var,
        masks: Option<&[Var]>,
        initial_hidden: Option<Var>,
        action_emb: &[Var],
    ) -> Result<Vec<Vec<Var>>, ModelError> {
        if let Some(m) = masks {
            if m.len() != action_emb.len() {
                return Err(ModelError::Shape {
                    what: "mask sequence",
                    expected: vec![action_emb.len()],
                    found: vec![m.len()],
                });
            }
        }
        let weights = self.lstm(p, "upper")?;
        let batch = tape.shape(fmap)[0];
        let mut h = initial_hidden.unwrap_or_else(|| self.zero_state(tape, batch));
        let mut c = self.zero_state(tape, batch);
        let unmasked = if masks.is_none() { Some(tape.global_avg_pool(fmap)?) } else { None };
        let mut outputs = vec![Vec::with_capacity(action_emb.len()); self.config.heads.len()];
        for (i, &e) in action_emb.iter().enumerate() {
            let pooled = match (masks, unmasked) {
                (Some(m), _) => {
                    let filtered = tape.broadcast_mul(m[i], fmap)?;
                    tape.global_avg_pool(filtered)?
                }
                (None, Some(pooled)) => pooled,
                (None, None) => unreachable!("pooled map computed when no masks are given"),
            };
            let x = tape.concat(&[pooled, e], 1)?;
            (h, c) = lstm_cell(tape, x, h, c, &weights)?;
            for (k, head) in self.config.heads.iter().enumerate() {
                outputs[k].push(self.dense(tape, p, &format!("head.{}", head.name), h)?);
            }
        }
        Ok(outputs)
    }

    /// Variant-specific recurrent part on an already encoded image batch.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        enc: Encoded,
        actions: &Tensor,
    ) -> Result<ForwardVars, ModelError> {
        let batch = tape.shape(enc.fmap)[0];
        if actions.shape().first() != Some(&batch) {
            return Err(ModelError::Shape {
                what: "action sequence",
                expected: vec![batch, self.config.horizon, self.config.action_dim],
                found: actions.shape().to_vec(),
            });
        }
        let emb = self.embed_actions(tape, p, actions)?;
        match self.config.variant {
            Variant::Trajectory => {
                let seq = self.predict_attention_sequence(tape, p, enc.h0, &emb)?;
                let mut masks = Vec::with_capacity(seq.len());
                for &(pos, cov) in &seq {
                    masks.push(self.coord_to_mask(tape, pos, cov)?);
                }
                let outputs = self.predict_events(tape, p, enc.fmap, Some(&masks), None, &emb)?;
                Ok(ForwardVars { outputs, positions: seq.into_iter().map(|s| s.0).collect(), masks })
            }
            Variant::SelfAttention => {
                let masks = self.self_attention_mask(tape, p, enc.h0, &emb)?;
                let outputs = self.predict_events(tape, p, enc.fmap, Some(&masks), None, &emb)?;
                Ok(ForwardVars { outputs, positions: Vec::new(), masks })
            }
            Variant::None => {
                let outputs = self.predict_events(tape, p, enc.fmap, None, Some(enc.h0), &emb)?;
                Ok(ForwardVars { outputs, positions: Vec::new(), masks: Vec::new() })
            }
        }
    }

    pub fn forward_full(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        images: Var,
        actions: &Tensor,
    ) -> Result<(Encoded, ForwardVars), ModelError> {
        let enc = self.encode_image(tape, p, images)?;
        let vars = self.decode(tape, p, enc, actions)?;
        Ok((enc, vars))
    }

    /// Collects tape values into `[B, H, ...]` tensors, softmaxing discrete heads.
    pub fn collect_output(&self, tape: &mut Tape, fmap: Var, vars: &ForwardVars) -> Result<ForwardOutput, ModelError> {
        let mut events = Vec::with_capacity(vars.outputs.len());
        for (head, steps) in self.config.heads.iter().zip(&vars.outputs) {
            let mut values = Vec::with_capacity(steps.len());
            for &v in steps {
                let v = if head.is_discrete() { tape.softmax(v, 1)? } else { v };
                values.push(tape.value(v).clone());
            }
            events.push(batch_major(&values));
        }
        let gather = |vs: &[Var], tape: &Tape| -> Option<Tensor> {
            if vs.is_empty() {
                return None;
            }
            let values: Vec<Tensor> = vs.iter().map(|&v| tape.value(v).clone()).collect();
            Some(batch_major(&values))
        };
        Ok(ForwardOutput {
            events,
            positions: gather(&vars.positions, tape),
            masks: gather(&vars.masks, tape),
            feature_map: tape.value(fmap).clone(),
        })
    }

    /// Inference on `images[B, C, H, W]` and `actions[B, H, A]`.
    pub fn predict(&self, images: &Tensor, actions: &Tensor) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let img = tape.constant(images.clone());
        let (enc, vars) = self.forward_full(&mut tape, &p, img, actions)?;
        self.collect_output(&mut tape, enc.fmap, &vars)
    }

    /// Encodes one observation `[1, C, H, W]` for reuse across rollouts.
    pub fn encode(&self, image: &Tensor) -> Result<EncodedImage, ModelError> {
        if image.shape().first() != Some(&1) {
            return Err(ModelError::Shape {
                what: "single observation",
                expected: vec![1, self.config.image_channels, self.config.image_height, self.config.image_width],
                found: image.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let enc = self.encode_image(&mut tape, &p, img)?;
        Ok(EncodedImage { fmap: tape.value(enc.fmap).clone(), h0: tape.value(enc.h0).clone() })
    }

    /// Evaluates `actions[N, H, A]` against one encoded observation without
    /// re-running the encoder.
    pub fn predict_rollouts(&self, enc: &EncodedImage, actions: &Tensor) -> Result<ForwardOutput, ModelError> {
        let n = actions.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(ModelError::Shape { what: "rollout batch", expected: vec![1], found: vec![0] });
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fmap = tape.constant(repeat_batch(&enc.fmap, n)?);
        let h0 = tape.constant(repeat_batch(&enc.h0, n)?);
        let vars = self.decode(&mut tape, &p, Encoded { fmap, h0 }, actions)?;
        self.collect_output(&mut tape, fmap, &vars)
    }
}

/// Repeats a `[1, ...]` tensor `n` times along the leading axis.
fn repeat_batch(t: &Tensor, n: usize) -> Result<Tensor, ModelError> {
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    let mut data = Vec::with_capacity(t.numel() * n);
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Interleaves per-step `[B, ...]` tensors into `[B, H, ...]`.
fn batch_major(steps: &[Tensor]) -> Tensor {
    let first = steps[0].shape();
    let batch = first[0];
    let inner: usize = first[1..].iter().product();
    let mut data = Vec::with_capacity(batch * steps.len() * inner);
    for b in 0..batch {
        for s in steps {
            data.extend_from_slice(&s.data()[b * inner..(b + 1) * inner]);
        }
    }
    let mut shape = vec![batch, steps.len()];
    shape.extend_from_slice(&first[1..]);
    Tensor::new(shape, data).expect("step tensors share a shape")
}
