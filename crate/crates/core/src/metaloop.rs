//! Training loop: PK batches per source domain, style jitter on half of each
//! identity's features, `L_all`, and the first-order meta-train / meta-test /
//! meta-optimize cycle with memory bookkeeping.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalResult, ItemMeta};
use crate::losses::{all_loss, check_lambda, specific_loss, DomainSlice, LossBreakdown};
use crate::model::{
    extract_features, forward, half_per_identity, normalize_rows, stack_images, EncoderConfig, JitterPlan,
    ModelParams, ParamGroup,
};
use crate::rng::{substream, Purpose};
use crate::sjm::{
    compute_beta, id_weight, similarity_from_weights, style_memory_init, style_stats, DomainDistanceMemory, Kernel,
    Memories, SimilarityMemory, StyleStats, StyleUpdateRule, WeightMode,
};
use crate::synthgen::{pk_sample_batch, Sample};
use crate::tensor::Tape;

fn d_inner_lr() -> f64 {
    0.05
}
fn d_outer_lr() -> f64 {
    0.05
}
fn d_meta_test_weight() -> f64 {
    1.0
}
fn d_lambda() -> f64 {
    crate::losses::DEFAULT_LAMBDA
}
fn d_margin() -> f64 {
    crate::losses::DEFAULT_MARGIN
}
fn d_momentum() -> f64 {
    0.9
}
fn d_p() -> usize {
    4
}
fn d_k() -> usize {
    4
}
fn d_true() -> bool {
    true
}
fn d_epochs() -> usize {
    30
}
fn d_iters() -> usize {
    32
}
fn d_milestones() -> Vec<usize> {
    vec![10, 20]
}
fn d_decay() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaStepConfig {
    /// Inner (meta-train) step size.
    #[serde(default = "d_inner_lr")]
    pub inner_lr: f64,
    /// Outer step size.
    #[serde(default = "d_outer_lr")]
    pub outer_lr: f64,
    /// Weight of the meta-test gradient in the outer step; also the step
    /// size of the meta-test classifier update.
    #[serde(default = "d_meta_test_weight")]
    pub meta_test_weight: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Identities per domain in a batch.
    #[serde(default = "d_p")]
    pub ids_per_batch: usize,
    /// Images per identity in a batch.
    #[serde(default = "d_k")]
    pub images_per_id: usize,
    #[serde(default = "d_true")]
    pub sjm: bool,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "d_true")]
    pub cross_domain: bool,
    #[serde(default = "d_true")]
    pub maml: bool,
    /// Only the first-order meta gradient is implemented; `false` is rejected.
    #[serde(default = "d_true")]
    pub first_order: bool,
    #[serde(default)]
    pub style_update: StyleUpdateRule,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_iters")]
    pub iterations_per_epoch: usize,
    /// Epochs (0-based) at which every step size is multiplied by `lr_decay`.
    #[serde(default = "d_milestones")]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
}

impl Default for MetaStepConfig {
    fn default() -> Self {
        MetaStepConfig {
            inner_lr: d_inner_lr(),
            outer_lr: d_outer_lr(),
            meta_test_weight: d_meta_test_weight(),
            lambda: d_lambda(),
            margin: d_margin(),
            momentum: d_momentum(),
            ids_per_batch: d_p(),
            images_per_id: d_k(),
            sjm: true,
            weight_mode: WeightMode::default(),
            cross_domain: true,
            maml: true,
            first_order: true,
            style_update: StyleUpdateRule::JitteredMean,
            epochs: d_epochs(),
            iterations_per_epoch: d_iters(),
            lr_milestones: d_milestones(),
            lr_decay: d_decay(),
        }
    }
}

impl MetaStepConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.inner_lr", self.inner_lr),
            ("train.outer_lr", self.outer_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.meta_test_weight >= 0.0) {
            return Err(Error::config("train.meta_test_weight", "must be nonnegative"));
        }
        check_lambda(self.lambda).map_err(|e| Error::config("train.lambda", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1]"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("train.margin", "must be nonnegative"));
        }
        if self.ids_per_batch < 2 {
            return Err(Error::config("train.ids_per_batch", "need at least 2 identities for negatives"));
        }
        if self.images_per_id < 2 {
            return Err(Error::config("train.images_per_id", "need at least 2 images for positives"));
        }
        if !self.first_order {
            return Err(Error::config("train.first_order", "only first-order meta gradients are supported"));
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::config("train.epochs", "epochs and iterations_per_epoch must be positive"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::config("train.lr_decay", "must be positive"));
        }
        Ok(())
    }

    /// Step-size multiplier in effect during `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr_decay.powi(passed as i32)
    }
}

/// One training domain with labels in its own and in the global label space.
#[derive(Clone, Debug)]
pub struct TrainDomain {
    pub samples: Vec<Sample>,
    pub local_labels: Vec<usize>,
    pub global_labels: Vec<usize>,
    pub num_local: usize,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub domains: Vec<TrainDomain>,
    pub num_global: usize,
    /// Training domain of each global identity (the first one, if shared).
    pub domain_of_global: Vec<usize>,
}

impl TrainingSet {
    /// Builds training domains from groups of samples. Identities are keyed
    /// by `identity_global`; each group gets its own dense local label space
    /// and all groups share one dense global label space, so identities
    /// appearing in several groups keep a single global label.
    pub fn from_groups(groups: Vec<Vec<Sample>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::invalid("training set: empty domain"));
        }
        let mut global_ids: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &groups {
            for s in g {
                global_ids.entry(s.identity_global).or_insert(0);
            }
        }
        for (i, v) in global_ids.values_mut().enumerate() {
            *v = i;
        }
        let mut domain_of_global = vec![usize::MAX; global_ids.len()];
        let mut domains = Vec::with_capacity(groups.len());
        for (k, samples) in groups.into_iter().enumerate() {
            let mut local: BTreeMap<usize, usize> = BTreeMap::new();
            for s in &samples {
                local.entry(s.identity_global).or_insert(0);
            }
            for (i, v) in local.values_mut().enumerate() {
                *v = i;
            }
            let local_labels = samples.iter().map(|s| local[&s.identity_global]).collect();
            let global_labels: Vec<usize> = samples.iter().map(|s| global_ids[&s.identity_global]).collect();
            for &g in &global_labels {
                if domain_of_global[g] == usize::MAX {
                    domain_of_global[g] = k;
                }
            }
            domains.push(TrainDomain {
                samples,
                local_labels,
                global_labels,
                num_local: local.len(),
            });
        }
        Ok(TrainingSet {
            domains,
            num_global: global_ids.len(),
            domain_of_global,
        })
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.num_local).collect()
    }

    fn all_samples(&self) -> (Vec<&Sample>, Vec<usize>) {
        let mut s = Vec::new();
        let mut y = Vec::new();
        for d in &self.domains {
            s.extend(d.samples.iter());
            y.extend(&d.global_labels);
        }
        (s, y)
    }
}

/// Query / gallery partition of an evaluation domain.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl EvalSplit {
    /// The first image of every (identity, camera) pair is a query; all
    /// other images form the gallery.
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut seen = std::collections::HashSet::new();
        let (mut query, mut gallery) = (Vec::new(), Vec::new());
        for s in samples {
            if seen.insert((s.identity_global, s.camera_id)) {
                query.push(s.clone());
            } else {
                gallery.push(s.clone());
            }
        }
        EvalSplit { query, gallery }
    }
}

fn metas(samples: &[Sample]) -> Vec<ItemMeta> {
    samples
        .iter()
        .map(|s| ItemMeta {
            identity: s.identity_global,
            camera: s.camera_id,
        })
        .collect()
}

pub const EVAL_MAX_RANK: usize = 20;

pub fn evaluate_model(cfg: &EncoderConfig, params: &ModelParams, split: &EvalSplit) -> Result<EvalResult> {
    let q: Vec<&Sample> = split.query.iter().collect();
    let g: Vec<&Sample> = split.gallery.iter().collect();
    let qf = normalize_rows(&extract_features(cfg, params, &q)?);
    let gf = normalize_rows(&extract_features(cfg, params, &g)?);
    evaluate(&qf, &metas(&split.query), &gf, &metas(&split.gallery), EVAL_MAX_RANK)
}

/// Uniformly picks one meta-test domain; the rest are meta-train.
pub fn split_meta_domains<R: Rng>(k: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "meta split needs at least 2 domains, got {k}; disable maml"
        )));
    }
    let test = rng.gen_range(0..k);
    Ok(((0..k).filter(|&d| d != test).collect(), test))
}

/// Parameter containers the meta updates operate on.
pub trait ParamVec: Clone {
    fn axpy(&mut self, a: f64, x: &Self) -> Result<()>;
}

impl ParamVec for Vec<f64> {
    fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        if self.len() != x.len() {
            return Err(Error::shape("axpy", format!("{} vs {}", self.len(), x.len())));
        }
        for (d, v) in self.iter_mut().zip(x) {
            *d += a * v;
        }
        Ok(())
    }
}

impl ParamVec for ModelParams {
    fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        ModelParams::axpy(self, a, x)
    }
}

/// `theta - lr * grads`.
pub fn inner_update<P: ParamVec>(theta: &P, grads: &P, lr: f64) -> Result<P> {
    let mut out = theta.clone();
    out.axpy(-lr, grads)?;
    Ok(out)
}

/// `theta - gamma * (g_mtr + beta * g_mte)`, with `g_mte` taken at the
/// inner-updated parameters (first-order).
pub fn meta_optimize<P: ParamVec>(theta: &P, g_mtr: &P, g_mte: &P, beta: f64, gamma: f64) -> Result<P> {
    let mut out = theta.clone();
    out.axpy(-gamma, g_mtr)?;
    out.axpy(-gamma * beta, g_mte)?;
    Ok(out)
}

/// Rows of a sampled batch and their bookkeeping.
pub struct Batch<'s> {
    pub samples: Vec<&'s Sample>,
    pub global_labels: Vec<usize>,
    pub slices: Vec<DomainSlice>,
}

impl<'s> Batch<'s> {
    pub fn domain_of_row(&self) -> Vec<usize> {
        let mut out = vec![0; self.samples.len()];
        for s in &self.slices {
            for &r in &s.rows {
                out[r] = s.domain;
            }
        }
        out
    }
}

/// Result of one loss evaluation with gradients.
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
    /// Stage features of every row before jitter, `[c * pixels]` each.
    pub stage_features: Vec<Vec<f64>>,
    /// `f(x)` of every row.
    pub embeddings: Vec<Vec<f64>>,
}

/// `L_all` on a batch, optionally with jitter, plus its gradient.
pub fn all_loss_with_grads(
    encoder: &EncoderConfig,
    params: &ModelParams,
    batch: &Batch<'_>,
    plan: Option<&JitterPlan>,
    lambda: f64,
    margin: f64,
) -> Result<LossEval> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(stack_images(&batch.samples, encoder.in_channels)?);
    let fo = forward(encoder, &mut tape, &bound, x, plan)?;
    let loss = all_loss(
        &mut tape,
        fo.embeddings,
        &batch.global_labels,
        bound.global_head,
        &batch.slices,
        &bound.domain_heads,
        bound.temperature,
        margin,
        lambda,
    )?;
    tape.backward(loss.total)?;
    let grads = bound.gradients(&tape, params);
    let n = batch.samples.len();
    let sf = tape.value(fo.stage_features);
    let emb = tape.value(fo.embeddings);
    Ok(LossEval {
        breakdown: loss.breakdown,
        grads,
        stage_features: (0..n).map(|i| sf.row(i).to_vec()).collect(),
        embeddings: (0..n).map(|i| emb.row(i).to_vec()).collect(),
    })
}

/// Single-domain loss (own head + triplet) without jitter, and its gradient.
pub fn single_domain_loss_with_grads(
    encoder: &EncoderConfig,
    params: &ModelParams,
    batch: &Batch<'_>,
    margin: f64,
) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(stack_images(&batch.samples, encoder.in_channels)?);
    let fo = forward(encoder, &mut tape, &bound, x, None)?;
    let spec = specific_loss(
        &mut tape,
        fo.embeddings,
        &batch.slices,
        &bound.domain_heads,
        bound.temperature,
        margin,
    )?;
    tape.backward(spec.total)?;
    Ok((tape.value(spec.total).item(), bound.gradients(&tape, params)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub meta_train: Vec<usize>,
    pub meta_test: Option<usize>,
    pub losses: LossBreakdown,
    pub meta_test_loss: Option<f64>,
    /// Style memory version read by the jitter in this iteration.
    pub style_memory_version: Option<u64>,
    pub style_memory_norm: f64,
    pub similarity_memory_norm: f64,
    pub domain_memory_norm: f64,
    pub temperature: f64,
    pub lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Iteration(IterationRecord),
    Epoch(EpochRecord),
}

/// Hooks into the training timeline.
pub trait StepObserver {
    /// Called right before the jitter reads the style memory.
    fn on_style_read(&mut self, _iteration: u64, _memories: &Memories) {}
    fn on_record(&mut self, _record: &Record) {}
    fn on_epoch_end(&mut self, _epoch: usize, _params: &ModelParams, _memories: &Memories) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;
impl StepObserver for NoObserver {}

/// Observer collecting every record.
#[derive(Default)]
pub struct RecordCollector {
    pub records: Vec<Record>,
}

impl StepObserver for RecordCollector {
    fn on_record(&mut self, record: &Record) {
        self.records.push(record.clone());
    }
}

pub struct MetaTrainOutcome {
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
    /// Parameters after the inner step.
    pub inner: ModelParams,
    pub style_version_read: Option<u64>,
}

pub struct Trainer<'a> {
    pub encoder: EncoderConfig,
    pub cfg: MetaStepConfig,
    pub set: &'a TrainingSet,
    pub params: ModelParams,
    pub memories: Memories,
    pub iteration: u64,
    batch_rng: ChaCha8Rng,
    split_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(encoder: EncoderConfig, cfg: MetaStepConfig, set: &'a TrainingSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pixels = set.domains[0].samples[0].image.len() / encoder.in_channels.max(1);
        encoder.validate(pixels)?;
        if cfg.maml && set.domains.len() < 2 {
            return Err(Error::config("train.maml", "meta-learning needs at least 2 source domains"));
        }
        for (k, d) in set.domains.iter().enumerate() {
            if d.num_local < cfg.ids_per_batch {
                return Err(Error::config(
                    "train.ids_per_batch",
                    format!("domain {k} has only {} identities", d.num_local),
                ));
            }
        }
        let params = ModelParams::init(&encoder, set.num_global, &set.domain_sizes(), seed)?;
        let style = if cfg.sjm {
            let (samples, labels) = set.all_samples();
            Some(style_memory_init(&encoder, &params, &samples, &labels, set.num_global, cfg.momentum)?)
        } else {
            None
        };
        let memories = Memories {
            style,
            similarity: SimilarityMemory::uniform(set.num_global, cfg.momentum)?,
            domain: DomainDistanceMemory::zeros(set.domains.len(), cfg.momentum)?,
        };
        Ok(Trainer {
            encoder,
            cfg,
            set,
            params,
            memories,
            iteration: 0,
            batch_rng: substream(seed, Purpose::Batches, 0),
            split_rng: substream(seed, Purpose::MetaSplit, 0),
        })
    }

    pub fn epoch(&self) -> usize {
        (self.iteration / self.cfg.iterations_per_epoch as u64) as usize
    }

    /// PK batch drawn from each listed domain, rows grouped by domain.
    pub fn sample_batch(&mut self, domains: &[usize]) -> Result<Batch<'a>> {
        let set = self.set;
        let mut batch = Batch {
            samples: Vec::new(),
            global_labels: Vec::new(),
            slices: Vec::new(),
        };
        for &d in domains {
            let dom = &set.domains[d];
            let picks = pk_sample_batch(&dom.local_labels, self.cfg.ids_per_batch, self.cfg.images_per_id, &mut self.batch_rng)?;
            let start = batch.samples.len();
            batch.slices.push(DomainSlice {
                domain: d,
                rows: (start..start + picks.len()).collect(),
                local_labels: picks.iter().map(|&i| dom.local_labels[i]).collect(),
            });
            for &i in &picks {
                batch.samples.push(&dom.samples[i]);
                batch.global_labels.push(dom.global_labels[i]);
            }
        }
        Ok(batch)
    }

    /// Jitter targets for the first half of each identity's rows, fused
    /// from the current memories. One weight per identity.
    pub fn jitter_plan(&self, batch: &Batch<'_>) -> Result<(JitterPlan, Vec<usize>)> {
        let style = self
            .memories
            .style
            .as_ref()
            .ok_or_else(|| Error::invalid("style memory not initialized"))?;
        let flagged = half_per_identity(&batch.global_labels);
        let mut cache: HashMap<usize, crate::tensor::StyleTarget> = HashMap::new();
        let mut entries = Vec::with_capacity(flagged.len());
        for &row in &flagged {
            let j = batch.global_labels[row];
            if !cache.contains_key(&j) {
                let domains = self
                    .cfg
                    .cross_domain
                    .then_some((&self.memories.domain, self.set.domain_of_global.as_slice()));
                let beta = compute_beta(j, &self.memories.similarity, domains)?;
                let alpha = id_weight(&beta, self.cfg.weight_mode)?;
                cache.insert(j, style.mix(&alpha)?.as_target());
            }
            entries.push((row, cache[&j].clone()));
        }
        Ok((JitterPlan { entries }, flagged))
    }

    fn update_style_memory(&mut self, batch: &Batch<'_>, flagged: &[usize], stage_features: &[Vec<f64>]) -> Result<()> {
        let c = self.encoder.sjm_channels();
        let rows: Vec<usize> = match self.cfg.style_update {
            StyleUpdateRule::JitteredMean => flagged.to_vec(),
            StyleUpdateRule::PrintedFactor => (0..batch.samples.len()).collect(),
        };
        let mut groups: BTreeMap<usize, Vec<StyleStats>> = BTreeMap::new();
        for r in rows {
            groups
                .entry(batch.global_labels[r])
                .or_default()
                .push(style_stats(&stage_features[r], c)?);
        }
        let groups: Vec<(usize, Vec<StyleStats>)> = groups.into_iter().collect();
        if let Some(style) = self.memories.style.as_mut() {
            style.update(&groups, self.cfg.style_update)?;
        }
        Ok(())
    }

    fn update_relation_memories(&mut self, params: &ModelParams, batch: &Batch<'_>, embeddings: &[Vec<f64>]) -> Result<()> {
        let s = similarity_from_weights(&params.global_head)?;
        self.memories.similarity.update(&s)?;
        let sets: Vec<(usize, Vec<Vec<f64>>)> = batch
            .slices
            .iter()
            .map(|sl| (sl.domain, sl.rows.iter().map(|&r| embeddings[r].clone()).collect()))
            .collect();
        self.memories.domain.update(&sets, Kernel::RbfMedian)
    }

    /// Meta-train half of an iteration on `domains`: jittered forward, `L_all`,
    /// style memory update, inner step, then similarity and domain memory
    /// updates from the inner-updated classifier and the batch features.
    pub fn meta_train_step(&mut self, domains: &[usize], observer: &mut dyn StepObserver) -> Result<MetaTrainOutcome> {
        let batch = self.sample_batch(domains)?;
        let (plan, flagged) = if self.cfg.sjm {
            observer.on_style_read(self.iteration, &self.memories);
            let (p, f) = self.jitter_plan(&batch)?;
            (Some(p), f)
        } else {
            (None, Vec::new())
        };
        let version = self.memories.style.as_ref().filter(|_| self.cfg.sjm).map(|s| s.version);
        let eval = all_loss_with_grads(&self.encoder, &self.params, &batch, plan.as_ref(), self.cfg.lambda, self.cfg.margin)?;
        if self.cfg.sjm {
            self.update_style_memory(&batch, &flagged, &eval.stage_features)?;
        }
        let lr = self.cfg.inner_lr * self.cfg.lr_scale(self.epoch());
        let mut inner = inner_update(&self.params, &eval.grads, lr)?;
        inner.clamp_temperature();
        self.update_relation_memories(&inner, &batch, &eval.embeddings)?;
        Ok(MetaTrainOutcome {
            breakdown: eval.breakdown,
            grads: eval.grads,
            inner,
            style_version_read: version,
        })
    }

    /// Meta-test loss of domain `domain` under `inner`, no jitter, and its
    /// gradient at `inner`.
    pub fn meta_test_step(&mut self, inner: &ModelParams, domain: usize) -> Result<(f64, ModelParams)> {
        let batch = self.sample_batch(&[domain])?;
        single_domain_loss_with_grads(&self.encoder, inner, &batch, self.cfg.margin)
    }

    /// One full training iteration.
    pub fn step(&mut self, observer: &mut dyn StepObserver) -> Result<IterationRecord> {
        let epoch = self.epoch();
        let scale = self.cfg.lr_scale(epoch);
        let k = self.set.domains.len();
        let (train, test) = if self.cfg.maml {
            let (tr, te) = split_meta_domains(k, &mut self.split_rng)?;
            (tr, Some(te))
        } else {
            ((0..k).collect(), None)
        };
        let mtr = self.meta_train_step(&train, observer)?;
        let mut meta_test_loss = None;
        match test {
            Some(t) => {
                let (l_mte, g_mte) = self.meta_test_step(&mtr.inner, t)?;
                meta_test_loss = Some(l_mte);
                let gamma = self.cfg.outer_lr * scale;
                let beta = self.cfg.meta_test_weight;
                let outer = meta_optimize(&self.params, &mtr.grads, &g_mte, beta, gamma)?;
                let mut theta = outer;
                // heads keep their inner-step values; the meta-test head takes its own step
                theta.global_head = mtr.inner.global_head.clone();
                for (d, h) in theta.domain_heads.iter_mut().enumerate() {
                    *h = mtr.inner.domain_heads[d].clone();
                }
                theta.axpy_group(ParamGroup::DomainHead(t), -beta * scale, &g_mte)?;
                theta.clamp_temperature();
                self.params = theta;
            }
            None => {
                let mut theta = self.params.clone();
                theta.axpy(-self.cfg.outer_lr * scale, &mtr.grads)?;
                theta.clamp_temperature();
                self.params = theta;
            }
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite { op: "parameter update" });
        }
        let record = IterationRecord {
            iteration: self.iteration,
            epoch,
            meta_train: train,
            meta_test: test,
            losses: mtr.breakdown,
            meta_test_loss,
            style_memory_version: mtr.style_version_read,
            style_memory_norm: self.memories.style.as_ref().map_or(0.0, |s| s.norm()),
            similarity_memory_norm: self.memories.similarity.values.norm(),
            domain_memory_norm: self.memories.domain.values.norm(),
            temperature: self.params.tau(),
            lr_scale: scale,
        };
        self.iteration += 1;
        Ok(record)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub memories: Memories,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: Option<EvalResult>,
}

/// Full training run with optional per-epoch evaluation on `eval`.
pub fn run_training(
    encoder: &EncoderConfig,
    cfg: &MetaStepConfig,
    set: &TrainingSet,
    eval: Option<&EvalSplit>,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(encoder.clone(), cfg.clone(), set, seed)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.iterations_per_epoch {
            let rec = trainer.step(observer)?;
            loss_sum += rec.losses.total;
            observer.on_record(&Record::Iteration(rec));
        }
        let result = eval
            .map(|split| evaluate_model(&trainer.encoder, &trainer.params, split))
            .transpose()?;
        let rec = EpochRecord {
            epoch,
            mean_total_loss: loss_sum / cfg.iterations_per_epoch as f64,
            map: result.as_ref().map(|r| r.map),
            rank1: result.as_ref().map(|r| r.rank(1)),
            rank5: result.as_ref().map(|r| r.rank(5)),
            rank10: result.as_ref().map(|r| r.rank(10)),
        };
        observer.on_record(&Record::Epoch(rec.clone()));
        observer.on_epoch_end(epoch, &trainer.params, &trainer.memories)?;
        epochs.push(rec);
        final_eval = result;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        memories: trainer.memories,
        epochs,
        final_eval,
    })
}
