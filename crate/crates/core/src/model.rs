//! Encoder `f(x) = f_m(g_m(x))` built from per-pixel channel-mixing stages,
//! global average pooling and an embedding head, plus cosine classifier heads.
//!
//! The style jitter is inserted after stage `sjm_stage`. Each stage keeps the
//! spatial extent, so channel statistics stay meaningful at every depth.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::snapshot::{self, FloatReader};
use crate::synthgen::Sample;
use crate::tensor::{StyleTarget, Tape, Tensor, Var};

/// Lower clamp applied to the temperature after every optimizer step.
pub const TAU_MIN: f64 = 1e-3;

fn d_stage_channels() -> Vec<usize> {
    vec![32, 32, 32]
}
fn d_embed_dim() -> usize {
    32
}
fn d_sjm_stage() -> usize {
    1
}
fn d_tau() -> f64 {
    1.0 / 16.0
}
fn d_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    /// Output channels of each stage; its length is the stage count.
    #[serde(default = "d_stage_channels")]
    pub stage_channels: Vec<usize>,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    /// Jitter is applied to the output of this stage.
    #[serde(default = "d_sjm_stage")]
    pub sjm_stage: usize,
    #[serde(default = "d_tau")]
    pub tau_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: d_in_channels(),
            stage_channels: d_stage_channels(),
            embed_dim: d_embed_dim(),
            sjm_stage: d_sjm_stage(),
            tau_init: d_tau(),
        }
    }
}

impl EncoderConfig {
    /// Checks the config against the image geometry it will run on.
    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("encoder.in_channels", "must be positive"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config(
                "encoder.stage_channels",
                "need at least one stage, all widths positive",
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("encoder.embed_dim", "must be positive"));
        }
        if self.sjm_stage >= self.stage_channels.len() {
            return Err(Error::config(
                "encoder.sjm_stage",
                format!("must be < number of stages ({})", self.stage_channels.len()),
            ));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::config("encoder.tau_init", "must be positive"));
        }
        if pixels < 2 {
            return Err(Error::config(
                "dataset.height",
                "feature maps need more than one pixel for channel statistics",
            ));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Channel count of the map the jitter acts on.
    pub fn sjm_channels(&self) -> usize {
        self.stage_channels[self.sjm_stage]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub stages: Vec<StageParams>,
    pub embed_weight: Tensor,
    pub embed_bias: Tensor,
    /// `|Y_g| x d` global classifier.
    pub global_head: Tensor,
    /// `|Y_k| x d` per-domain classifiers.
    pub domain_heads: Vec<Tensor>,
    pub temperature: Tensor,
}

/// Disjoint parameter subsets that the optimizer updates at different rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Temperature,
    GlobalHead,
    DomainHead(usize),
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl ModelParams {
    pub fn init(cfg: &EncoderConfig, num_global: usize, domain_sizes: &[usize], seed: u64) -> Result<Self> {
        if num_global == 0 || domain_sizes.contains(&0) {
            return Err(Error::invalid("classifier heads need at least one class"));
        }
        let mut rng = substream(seed, Purpose::ParamInit, 0);
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for &cout in &cfg.stage_channels {
            stages.push(StageParams {
                weight: Tensor::new(vec![cout, cin], gaussian(&mut rng, cout * cin, (2.0 / cin as f64).sqrt()))?,
                bias: Tensor::new(vec![cout], vec![0.1; cout])?,
            });
            cin = cout;
        }
        let d = cfg.embed_dim;
        let embed_weight = Tensor::new(vec![d, cin], gaussian(&mut rng, d * cin, (1.0 / cin as f64).sqrt()))?;
        let embed_bias = Tensor::zeros(vec![d]);
        let global_head = Tensor::new(vec![num_global, d], gaussian(&mut rng, num_global * d, 1.0))?;
        let domain_heads = domain_sizes
            .iter()
            .map(|&n| Tensor::new(vec![n, d], gaussian(&mut rng, n * d, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            stages,
            embed_weight,
            embed_bias,
            global_head,
            domain_heads,
            temperature: Tensor::scalar(cfg.tau_init),
        })
    }

    fn tensors(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.push((ParamGroup::Encoder, &s.weight));
            v.push((ParamGroup::Encoder, &s.bias));
        }
        v.push((ParamGroup::Encoder, &self.embed_weight));
        v.push((ParamGroup::Encoder, &self.embed_bias));
        v.push((ParamGroup::GlobalHead, &self.global_head));
        for (k, h) in self.domain_heads.iter().enumerate() {
            v.push((ParamGroup::DomainHead(k), h));
        }
        v.push((ParamGroup::Temperature, &self.temperature));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.push((ParamGroup::Encoder, &mut s.weight));
            v.push((ParamGroup::Encoder, &mut s.bias));
        }
        v.push((ParamGroup::Encoder, &mut self.embed_weight));
        v.push((ParamGroup::Encoder, &mut self.embed_bias));
        v.push((ParamGroup::GlobalHead, &mut self.global_head));
        for (k, h) in self.domain_heads.iter_mut().enumerate() {
            v.push((ParamGroup::DomainHead(k), h));
        }
        v.push((ParamGroup::Temperature, &mut self.temperature));
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.values().iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector laid out like [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::shape(
                "set_flat",
                format!("{} values for {} parameters", flat.len(), self.num_values()),
            ));
        }
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|((_, x), (_, y))| x.shape() != y.shape()) {
            return Err(Error::shape("params", "parameter layouts differ"));
        }
        Ok(())
    }

    /// `self += a * other` restricted to tensors of `group`.
    pub fn axpy_group(&mut self, group: ParamGroup, a: f64, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        let src = other.tensors();
        for ((g, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            if g == group {
                for (d, v) in dst.values_mut().iter_mut().zip(s.values()) {
                    *d += a * v;
                }
            }
        }
        Ok(())
    }

    /// `self += a * other` on every tensor.
    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.values_mut().iter_mut().zip(s.values()) {
                *d += a * v;
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.temperature.item()
    }

    pub fn clamp_temperature(&mut self) {
        let t = self.temperature.values_mut();
        t[0] = t[0].max(TAU_MIN);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            stages: self
                .stages
                .iter()
                .map(|s| (tape.leaf(s.weight.clone()), tape.leaf(s.bias.clone())))
                .collect(),
            embed: (
                tape.leaf(self.embed_weight.clone()),
                tape.leaf(self.embed_bias.clone()),
            ),
            global_head: tape.leaf(self.global_head.clone()),
            domain_heads: self.domain_heads.iter().map(|h| tape.leaf(h.clone())).collect(),
            temperature: tape.leaf(self.temperature.clone()),
        }
    }

    pub fn write_checkpoint(&self, cfg: &EncoderConfig, stem: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            encoder: cfg.clone(),
            num_global: self.global_head.shape()[0],
            domain_sizes: self.domain_heads.iter().map(|h| h.shape()[0]).collect(),
        };
        snapshot::write(stem, "checkpoint", &manifest, &self.to_flat())
    }

    pub fn read_checkpoint(stem: &Path) -> Result<(EncoderConfig, Self)> {
        let (m, floats): (CheckpointManifest, Vec<f64>) = snapshot::read(stem, "checkpoint")?;
        let mut params = ModelParams::init(&m.encoder, m.num_global, &m.domain_sizes, 0)?;
        let mut reader = FloatReader::new(&floats);
        for (_, t) in params.tensors_mut() {
            let n = t.numel();
            t.values_mut().copy_from_slice(&reader.take(n)?);
        }
        reader.finish()?;
        Ok((m.encoder, params))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    encoder: EncoderConfig,
    num_global: usize,
    domain_sizes: Vec<usize>,
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub stages: Vec<(Var, Var)>,
    pub embed: (Var, Var),
    pub global_head: Var,
    pub domain_heads: Vec<Var>,
    pub temperature: Var,
}

impl Bound {
    /// Collects gradients into a tensor set shaped like `like`. Parameters
    /// that the loss does not reach get zeros.
    pub fn gradients(&self, tape: &Tape, like: &ModelParams) -> ModelParams {
        let mut g = like.zeros_like();
        let mut vars = Vec::new();
        for &(w, b) in &self.stages {
            vars.push(w);
            vars.push(b);
        }
        vars.push(self.embed.0);
        vars.push(self.embed.1);
        vars.push(self.global_head);
        vars.extend(&self.domain_heads);
        vars.push(self.temperature);
        for ((_, t), v) in g.tensors_mut().into_iter().zip(vars) {
            if let Some(gr) = tape.grad(v) {
                t.values_mut().copy_from_slice(gr);
            }
        }
        g
    }
}

/// Stacks sample images into a `[n, c, pixels]` tensor.
pub fn stack_images(samples: &[&Sample], channels: usize) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let len = first.image.len();
    if len % channels != 0 || samples.iter().any(|s| s.image.len() != len) {
        return Err(Error::shape("stack_images", "images differ in size or channel count"));
    }
    let values: Vec<f64> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(vec![samples.len(), channels, len / channels], values)
}

/// Which batch rows get a replacement style, and which.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JitterPlan {
    pub entries: Vec<(usize, StyleTarget)>,
}

impl JitterPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn targets(&self, n: usize) -> Result<Vec<Option<StyleTarget>>> {
        let mut out = vec![None; n];
        for (i, t) in &self.entries {
            if *i >= n {
                return Err(Error::invalid(format!(
                    "jitter plan references sample {i} in a batch of {n}"
                )));
            }
            out[*i] = Some(t.clone());
        }
        Ok(out)
    }
}

/// The first `floor(k/2)` occurrences of every identity, in batch order.
pub fn half_per_identity(labels: &[usize]) -> Vec<usize> {
    let mut counts = std::collections::HashMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    let mut seen = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let s = seen.entry(y).or_insert(0usize);
        if *s < counts[&y] / 2 {
            out.push(i);
        }
        *s += 1;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Output of stage `sjm_stage`, before any jitter.
    pub stage_features: Var,
    /// Pre-normalization feature vectors `f(x)`.
    pub embeddings: Var,
}

pub fn forward(
    cfg: &EncoderConfig,
    tape: &mut Tape,
    bound: &Bound,
    images: Var,
    plan: Option<&JitterPlan>,
) -> Result<ForwardOutput> {
    let n = tape.value(images).shape()[0];
    let mut h = images;
    let mut stage_features = None;
    for (s, &(w, b)) in bound.stages.iter().enumerate() {
        let z = tape.channel_mix(h, w, b)?;
        h = tape.relu(z)?;
        if s == cfg.sjm_stage {
            stage_features = Some(h);
            if let Some(plan) = plan.filter(|p| !p.is_empty()) {
                let targets = plan.targets(n)?;
                h = tape.style_jitter(h, &targets)?;
            }
        }
    }
    let pooled = tape.global_avg_pool(h)?;
    let embeddings = tape.dense(pooled, bound.embed.0, bound.embed.1)?;
    Ok(ForwardOutput {
        stage_features: stage_features.ok_or_else(|| Error::config("encoder.sjm_stage", "out of range"))?,
        embeddings,
    })
}

/// Cosine logits `cos(W_j, f) / tau` of one head.
pub fn head_logits(tape: &mut Tape, embeddings: Var, head: Var, temperature: Var) -> Result<Var> {
    let f = tape.l2_normalize_rows(embeddings)?;
    let w = tape.l2_normalize_rows(head)?;
    let cos = tape.matmul_nt(f, w)?;
    tape.div_scalar(cos, temperature)
}

/// Inference-time embeddings (no jitter), one row per sample.
pub fn extract_features(cfg: &EncoderConfig, params: &ModelParams, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(stack_images(chunk, cfg.in_channels)?);
        let fo = forward(cfg, &mut tape, &bound, x, None)?;
        let e = tape.value(fo.embeddings);
        out.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
    }
    Ok(out)
}

/// Stage-`sjm_stage` feature maps `[c, pixels]` per sample, without jitter.
pub fn extract_stage_features(cfg: &EncoderConfig, params: &ModelParams, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(stack_images(chunk, cfg.in_channels)?);
        let fo = forward(cfg, &mut tape, &bound, x, None)?;
        let f = tape.value(fo.stage_features);
        out.extend((0..chunk.len()).map(|i| f.row(i).to_vec()));
    }
    Ok(out)
}

/// Row-wise L2 normalization for retrieval.
pub fn normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}
