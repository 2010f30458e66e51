//! Style jitter: channel style statistics, the identity style / identity
//! similarity / domain distance memories, identity-relationship weights and
//! the stylized feature generation.
//!
//! Memories are history buffers. They are read and written with plain
//! values and never take part in differentiation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{extract_stage_features, EncoderConfig, ModelParams};
use crate::snapshot::{self, FloatReader};
use crate::synthgen::Sample;
use crate::tensor::{channel_stats, dot, softmax, StyleTarget, Tape, Tensor, STD_EPS};

/// Per-channel mean and `sqrt(variance + eps)` of one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StyleStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn as_target(&self) -> StyleTarget {
        StyleTarget {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
        }
    }
}

/// Statistics of a `[channels, pixels]` map.
pub fn style_stats(map: &[f64], channels: usize) -> Result<StyleStats> {
    if channels == 0 || map.is_empty() || map.len() % channels != 0 {
        return Err(Error::shape(
            "style_stats",
            format!("{} values for {channels} channels", map.len()),
        ));
    }
    let p = map.len() / channels;
    let (mu, sigma) = map.chunks(p).map(|ch| channel_stats(ch, STD_EPS)).unzip();
    Ok(StyleStats { mu, sigma })
}

/// How a batch of statistics enters the style memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleUpdateRule {
    /// Plain mean of the supplied statistics (the jittered half of each identity).
    #[default]
    JitteredMean,
    /// `2/|B_j|` times the sum over all `|B_j|` samples of the identity.
    PrintedFactor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleMemory {
    pub mu_bank: Vec<Vec<f64>>,
    pub sigma_bank: Vec<Vec<f64>>,
    pub momentum: f64,
    /// Number of updates applied since initialization.
    pub version: u64,
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
    }
    Ok(())
}

impl StyleMemory {
    /// Row `j` is the mean of the statistics of all samples of identity `j`.
    pub fn from_stats(num_identities: usize, stats: &[(usize, StyleStats)], momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        let c = stats
            .first()
            .map(|(_, s)| s.channels())
            .ok_or_else(|| Error::invalid("style memory init: no samples"))?;
        let mut mu = vec![vec![0.0; c]; num_identities];
        let mut sigma = vec![vec![0.0; c]; num_identities];
        let mut count = vec![0usize; num_identities];
        for (j, s) in stats {
            if *j >= num_identities || s.channels() != c {
                return Err(Error::invalid(format!(
                    "style memory init: bad entry for identity {j}"
                )));
            }
            count[*j] += 1;
            for ch in 0..c {
                mu[*j][ch] += s.mu[ch];
                sigma[*j][ch] += s.sigma[ch];
            }
        }
        if let Some(j) = count.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!(
                "style memory init: identity {j} has no samples"
            )));
        }
        for j in 0..num_identities {
            let n = count[j] as f64;
            mu[j].iter_mut().for_each(|v| *v /= n);
            sigma[j].iter_mut().for_each(|v| *v /= n);
        }
        Ok(StyleMemory {
            mu_bank: mu,
            sigma_bank: sigma,
            momentum,
            version: 0,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.mu_bank.len()
    }

    pub fn channels(&self) -> usize {
        self.mu_bank.first().map_or(0, Vec::len)
    }

    pub fn row(&self, j: usize) -> StyleStats {
        StyleStats {
            mu: self.mu_bank[j].clone(),
            sigma: self.sigma_bank[j].clone(),
        }
    }

    /// Momentum update of the rows named in `groups`; other rows are untouched.
    pub fn update(&mut self, groups: &[(usize, Vec<StyleStats>)], rule: StyleUpdateRule) -> Result<()> {
        let m = self.momentum;
        let c = self.channels();
        for (j, stats) in groups {
            if *j >= self.num_identities() {
                return Err(Error::invalid(format!("style memory: unknown identity {j}")));
            }
            if stats.is_empty() {
                continue;
            }
            let factor = match rule {
                StyleUpdateRule::JitteredMean => 1.0 / stats.len() as f64,
                StyleUpdateRule::PrintedFactor => 2.0 / stats.len() as f64,
            };
            for ch in 0..c {
                let bm: f64 = stats.iter().map(|s| s.mu[ch]).sum::<f64>() * factor;
                let bs: f64 = stats.iter().map(|s| s.sigma[ch]).sum::<f64>() * factor;
                self.mu_bank[*j][ch] = m * self.mu_bank[*j][ch] + (1.0 - m) * bm;
                self.sigma_bank[*j][ch] = m * self.sigma_bank[*j][ch] + (1.0 - m) * bs;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Weighted fusion of the stored styles: `(sum_j a_j mu[j], sum_j a_j sigma[j])`.
    pub fn mix(&self, weight: &IdentityWeight) -> Result<StyleStats> {
        if weight.alpha.len() != self.num_identities() {
            return Err(Error::shape(
                "style_mix",
                format!("{} weights for {} identities", weight.alpha.len(), self.num_identities()),
            ));
        }
        let c = self.channels();
        let mut mu = vec![0.0; c];
        let mut sigma = vec![0.0; c];
        for (j, &a) in weight.alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for ch in 0..c {
                mu[ch] += a * self.mu_bank[j][ch];
                sigma[ch] += a * self.sigma_bank[j][ch];
            }
        }
        Ok(StyleStats { mu, sigma })
    }

    pub fn norm(&self) -> f64 {
        self.mu_bank
            .iter()
            .chain(&self.sigma_bank)
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Initializes the style memory from stage features of `samples` under the
/// current model. `global_labels[i]` is the identity of `samples[i]`.
pub fn style_memory_init(
    cfg: &EncoderConfig,
    params: &ModelParams,
    samples: &[&Sample],
    global_labels: &[usize],
    num_identities: usize,
    momentum: f64,
) -> Result<StyleMemory> {
    let feats = extract_stage_features(cfg, params, samples)?;
    let c = cfg.sjm_channels();
    let stats = feats
        .iter()
        .zip(global_labels)
        .map(|(f, &j)| Ok((j, style_stats(f, c)?)))
        .collect::<Result<Vec<_>>>()?;
    StyleMemory::from_stats(num_identities, &stats, momentum)
}

/// Dense `n x n` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Cosine similarity between the rows of a `|Y_g| x d` classifier weight,
/// with the diagonal set to zero.
pub fn similarity_from_weights(w: &Tensor) -> Result<SquareMatrix> {
    if w.shape().len() != 2 {
        return Err(Error::shape("similarity_from_weights", format!("{:?}", w.shape())));
    }
    let n = w.shape()[0];
    let norms: Vec<f64> = (0..n).map(|i| dot(w.row(i), w.row(i)).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::invalid(format!("classifier row {i} has zero norm")));
    }
    let mut s = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = (dot(w.row(i), w.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            s.set(i, j, c);
            s.set(j, i, c);
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMemory {
    pub values: SquareMatrix,
    pub momentum: f64,
}

impl SimilarityMemory {
    /// Every off-diagonal entry `1/n`, diagonal 0.
    pub fn uniform(n: usize, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        let mut values = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values.set(i, j, 1.0 / n as f64);
                }
            }
        }
        Ok(SimilarityMemory { values, momentum })
    }

    pub fn update(&mut self, s: &SquareMatrix) -> Result<()> {
        if s.n != self.values.n {
            return Err(Error::shape(
                "similarity_memory_update",
                format!("{} vs {}", s.n, self.values.n),
            ));
        }
        let m = self.momentum;
        for (dst, &v) in self.values.data.iter_mut().zip(&s.data) {
            *dst = m * *dst + (1.0 - m) * v;
        }
        for i in 0..s.n {
            self.values.set(i, i, 0.0);
        }
        Ok(())
    }
}

/// Kernel used by [`mmd2`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `exp(-gamma ||a - b||^2)`.
    Rbf { gamma: f64 },
    /// RBF with `gamma = 1 / median` of the pairwise squared distances in
    /// the union of both sets (median floored at 1e-12).
    RbfMedian,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_gamma(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            d.push(sq_dist(all[i], all[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let med = if d.is_empty() {
        0.0
    } else if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    1.0 / med.max(1e-12)
}

/// Biased squared maximum mean discrepancy between two point sets.
pub fn mmd2(a: &[Vec<f64>], b: &[Vec<f64>], kernel: Kernel) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("mmd2: empty feature set"));
    }
    let gamma = match kernel {
        Kernel::Rbf { gamma } => gamma,
        Kernel::RbfMedian => median_gamma(a, b),
    };
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let mean_k = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += k(x, y);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    let v = mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b);
    Ok(v.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDistanceMemory {
    pub values: SquareMatrix,
    pub momentum: f64,
}

impl DomainDistanceMemory {
    pub fn zeros(k: usize, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(DomainDistanceMemory {
            values: SquareMatrix::zeros(k),
            momentum,
        })
    }

    /// Momentum update from the per-domain feature sets present in a batch.
    /// Rows and columns of absent domains are untouched.
    pub fn update(&mut self, sets: &[(usize, Vec<Vec<f64>>)], kernel: Kernel) -> Result<()> {
        let m = self.momentum;
        let k = self.values.n;
        if let Some((d, _)) = sets.iter().find(|(d, _)| *d >= k) {
            return Err(Error::invalid(format!("domain distance memory: unknown domain {d}")));
        }
        let mut next = self.values.clone();
        for (s, a) in sets {
            for (t, b) in sets {
                let v = mmd2(a, b, kernel)?;
                next.set(*s, *t, m * self.values.get(*s, *t) + (1.0 - m) * v);
            }
        }
        for i in 0..k {
            for j in 0..k {
                let v = if i == j {
                    0.0
                } else {
                    0.5 * (next.get(i, j) + next.get(j, i))
                };
                self.values.set(i, j, v);
            }
        }
        Ok(())
    }
}

/// Identity-related factor `beta` with the anchor's own entry masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityFactor {
    pub values: Vec<f64>,
    pub masked: Vec<bool>,
}

pub fn compute_beta(
    j: usize,
    similarity: &SimilarityMemory,
    domains: Option<(&DomainDistanceMemory, &[usize])>,
) -> Result<IdentityFactor> {
    let n = similarity.values.n;
    if j >= n {
        return Err(Error::invalid(format!("compute_beta: unknown identity {j}")));
    }
    let mut values = similarity.values.row(j).to_vec();
    if let Some((dist, domain_of)) = domains {
        if domain_of.len() != n {
            return Err(Error::shape(
                "compute_beta",
                format!("domain map covers {} of {n} identities", domain_of.len()),
            ));
        }
        let dj = domain_of[j];
        for (i, v) in values.iter_mut().enumerate() {
            *v += dist.values.get(dj, domain_of[i]);
        }
    }
    let mut masked = vec![false; n];
    masked[j] = true;
    Ok(IdentityFactor { values, masked })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Soft,
    #[default]
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityWeight {
    pub alpha: Vec<f64>,
}

impl IdentityWeight {
    pub fn one_hot(n: usize, j: usize) -> Self {
        let mut alpha = vec![0.0; n];
        alpha[j] = 1.0;
        IdentityWeight { alpha }
    }
}

/// Softmax (soft) or first-index argmax (hard) over the unmasked entries.
pub fn id_weight(beta: &IdentityFactor, mode: WeightMode) -> Result<IdentityWeight> {
    let open: Vec<usize> = (0..beta.values.len()).filter(|&i| !beta.masked[i]).collect();
    if open.is_empty() {
        return Err(Error::invalid("id_weight: every entry is masked"));
    }
    let mut alpha = vec![0.0; beta.values.len()];
    match mode {
        WeightMode::Soft => {
            let vals: Vec<f64> = open.iter().map(|&i| beta.values[i]).collect();
            for (&i, p) in open.iter().zip(softmax(&vals)) {
                alpha[i] = p;
            }
        }
        WeightMode::Hard => {
            let mut best = open[0];
            for &i in &open[1..] {
                if beta.values[i] > beta.values[best] {
                    best = i;
                }
            }
            alpha[best] = 1.0;
        }
    }
    Ok(IdentityWeight { alpha })
}

/// Stylized feature map: the content of `map` (`[channels, pixels]`) with
/// the style fused from memory under `weight`.
pub fn jitter(map: &[f64], channels: usize, weight: &IdentityWeight, memory: &StyleMemory) -> Result<Vec<f64>> {
    if channels != memory.channels() || map.len() % channels != 0 {
        return Err(Error::shape(
            "jitter",
            format!("{} values, {channels} channels, memory has {}", map.len(), memory.channels()),
        ));
    }
    let target = memory.mix(weight)?;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, channels, map.len() / channels], map.to_vec())?);
    let y = tape.style_jitter(x, &[Some(target.as_target())])?;
    Ok(tape.value(y).values().to_vec())
}

#[derive(Serialize, Deserialize)]
struct MemoryManifest {
    identities: usize,
    channels: usize,
    domains: usize,
    style_momentum: f64,
    style_version: u64,
    similarity_momentum: f64,
    domain_momentum: f64,
}

/// All three memories, as persisted together.
#[derive(Clone, Debug, PartialEq)]
pub struct Memories {
    pub style: Option<StyleMemory>,
    pub similarity: SimilarityMemory,
    pub domain: DomainDistanceMemory,
}

impl Memories {
    pub fn write_snapshot(&self, stem: &Path) -> Result<()> {
        let (channels, style_momentum, style_version) = self
            .style
            .as_ref()
            .map_or((0, 0.0, 0), |s| (s.channels(), s.momentum, s.version));
        let manifest = MemoryManifest {
            identities: self.similarity.values.n,
            channels,
            domains: self.domain.values.n,
            style_momentum,
            style_version,
            similarity_momentum: self.similarity.momentum,
            domain_momentum: self.domain.momentum,
        };
        let mut floats = Vec::new();
        if let Some(s) = &self.style {
            floats.extend(s.mu_bank.iter().flatten());
            floats.extend(s.sigma_bank.iter().flatten());
        }
        floats.extend(&self.similarity.values.data);
        floats.extend(&self.domain.values.data);
        snapshot::write(stem, "memories", &manifest, &floats)
    }

    pub fn read_snapshot(stem: &Path) -> Result<Self> {
        let (m, floats): (MemoryManifest, Vec<f64>) = snapshot::read(stem, "memories")?;
        let mut r = FloatReader::new(&floats);
        let style = if m.channels > 0 {
            let mut take_bank = || -> Result<Vec<Vec<f64>>> {
                (0..m.identities).map(|_| r.take(m.channels)).collect()
            };
            let mu_bank = take_bank()?;
            let sigma_bank = take_bank()?;
            Some(StyleMemory {
                mu_bank,
                sigma_bank,
                momentum: m.style_momentum,
                version: m.style_version,
            })
        } else {
            None
        };
        let similarity = SimilarityMemory {
            values: SquareMatrix {
                n: m.identities,
                data: r.take(m.identities * m.identities)?,
            },
            momentum: m.similarity_momentum,
        };
        let domain = DomainDistanceMemory {
            values: SquareMatrix {
                n: m.domains,
                data: r.take(m.domains * m.domains)?,
            },
            momentum: m.domain_momentum,
        };
        r.finish()?;
        Ok(Memories {
            style,
            similarity,
            domain,
        })
    }
}
