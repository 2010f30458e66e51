//! Scalar reference implementations used as independent oracles.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svil_core::losses::DomainSlice;
use svil_core::metaloop::Batch;
use svil_core::model::{half_per_identity, EncoderConfig, JitterPlan, ModelParams};
use svil_core::synthgen::{generate_dataset, Dataset, DatasetSpec};
use svil_core::tensor::StyleTarget;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean and `sqrt(E[x^2] - E[x]^2 + eps)` per channel of a `[c, p]` map.
pub fn stats(map: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let p = map.len() / c;
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for ch in 0..c {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for k in 0..p {
            let v = map[ch * p + k];
            s += v;
            s2 += v * v;
        }
        let m = s / p as f64;
        mu.push(m);
        sigma.push((s2 / p as f64 - m * m + EPS).sqrt());
    }
    (mu, sigma)
}

pub fn momentum_step(old: f64, new: f64, m: f64) -> f64 {
    old + (1.0 - m) * (new - old)
}

/// AdaIN of one `[c, p]` map towards `(mu_t, sigma_t)`.
pub fn adain(map: &[f64], c: usize, mu_t: &[f64], sigma_t: &[f64]) -> Vec<f64> {
    let p = map.len() / c;
    let (mu, sigma) = stats(map, c);
    let mut out = vec![0.0; map.len()];
    for ch in 0..c {
        for k in 0..p {
            let i = ch * p + k;
            out[i] = mu_t[ch] + sigma_t[ch] * (map[i] - mu[ch]) / sigma[ch];
        }
    }
    out
}

/// Target style fused from the banks, then AdaIN.
pub fn jitter(map: &[f64], c: usize, alpha: &[f64], mu_bank: &[Vec<f64>], sigma_bank: &[Vec<f64>]) -> Vec<f64> {
    let mut mu_t = vec![0.0; c];
    let mut sigma_t = vec![0.0; c];
    for ch in 0..c {
        for j in 0..alpha.len() {
            mu_t[ch] += alpha[j] * mu_bank[j][ch];
            sigma_t[ch] += alpha[j] * sigma_bank[j][ch];
        }
    }
    adain(map, c, &mu_t, &sigma_t)
}

/// Plain exponential normalization over unmasked entries.
pub fn soft_weight(beta: &[f64], masked: &[bool]) -> Vec<f64> {
    let z: f64 = (0..beta.len()).filter(|&i| !masked[i]).map(|i| beta[i].exp()).sum();
    (0..beta.len())
        .map(|i| if masked[i] { 0.0 } else { beta[i].exp() / z })
        .collect()
}

/// One-hot on the smallest index attaining the unmasked maximum.
pub fn hard_weight(beta: &[f64], masked: &[bool]) -> Vec<f64> {
    let best = (0..beta.len())
        .filter(|&i| !masked[i])
        .fold(None::<usize>, |acc, i| match acc {
            Some(b) if beta[b] >= beta[i] => Some(b),
            _ => Some(i),
        })
        .unwrap();
    (0..beta.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median of all pairwise squared distances within the union of both sets.
pub fn median_gamma(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let mut d = Vec::new();
    for (i, x) in all.iter().enumerate() {
        for y in &all[..i] {
            d.push(sq_dist(x, y));
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
    1.0 / med.max(1e-12)
}

/// Squared distance between kernel mean embeddings, via the full Gram matrix
/// of the union with signed weights.
pub fn mmd2(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    let all: Vec<(&Vec<f64>, f64)> = a
        .iter()
        .map(|x| (x, 1.0 / a.len() as f64))
        .chain(b.iter().map(|x| (x, -1.0 / b.len() as f64)))
        .collect();
    let mut s = 0.0;
    for (x, wx) in &all {
        for (y, wy) in &all {
            s += wx * wy * (-gamma * sq_dist(x, y)).exp();
        }
    }
    s.max(0.0)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Mean over rows of `-log softmax(cos(W, f) / tau)[label]`.
pub fn cosine_ce(features: &[Vec<f64>], labels: &[usize], weights: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let logits: Vec<f64> = weights.iter().map(|w| cosine(f, w) / tau).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / features.len() as f64
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    (sq_dist(a, b) + 1e-12).sqrt()
}

/// Batch-hard triplet by enumerating every (positive, negative) pair per anchor.
pub fn triplet(features: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = features.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let pos: Vec<f64> = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| distance(&features[a], &features[j]))
            .collect();
        let neg: Vec<f64> = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| distance(&features[a], &features[j]))
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let hardest_pos = pos.iter().cloned().fold(f64::MIN, f64::max);
        let hardest_neg = neg.iter().cloned().fold(f64::MAX, f64::min);
        total += (hardest_pos - hardest_neg + margin).max(0.0);
        anchors += 1;
    }
    total / anchors as f64
}

/// Exhaustive retrieval oracle: every gallery item's rank is counted
/// directly instead of sorting.
pub struct RetrievalOracle {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub aps: Vec<Option<f64>>,
}

pub fn retrieval(
    query: &[Vec<f64>],
    query_meta: &[(usize, usize)],
    gallery: &[Vec<f64>],
    gallery_meta: &[(usize, usize)],
    max_rank: usize,
) -> RetrievalOracle {
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    for (q, &(qid, qcam)) in query.iter().zip(query_meta) {
        let kept: Vec<usize> = (0..gallery.len())
            .filter(|&g| gallery_meta[g] != (qid, qcam))
            .collect();
        let score = |g: usize| q.iter().zip(&gallery[g]).map(|(a, b)| a * b).sum::<f64>();
        let rank_of = |g: usize| {
            kept.iter()
                .filter(|&&h| score(h) > score(g) || (score(h) == score(g) && h < g))
                .count()
        };
        let mut ranks: Vec<usize> = kept
            .iter()
            .filter(|&&g| gallery_meta[g].0 == qid)
            .map(|&g| rank_of(g))
            .collect();
        ranks.sort_unstable();
        if ranks.is_empty() {
            aps.push(None);
            continue;
        }
        let ap = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        aps.push(Some(ap));
        first_hits.push(ranks[0]);
    }
    let valid = first_hits.len();
    let map = if valid == 0 {
        0.0
    } else {
        aps.iter().flatten().sum::<f64>() / valid as f64
    };
    let cmc = (0..max_rank)
        .map(|k| first_hits.iter().filter(|&&r| r <= k).count() as f64 / valid.max(1) as f64)
        .collect();
    RetrievalOracle { map, cmc, aps }
}

/// A tiny two-domain dataset and encoder for gradient checks.
pub struct Micro {
    pub data: Dataset,
    pub encoder: EncoderConfig,
    pub params: ModelParams,
}

pub const MICRO_IDS: usize = 3;

pub fn micro(seed: u64) -> Micro {
    let spec = DatasetSpec {
        domains: 2,
        identities_per_domain: MICRO_IDS,
        images_per_identity: 2,
        cameras_per_domain: 2,
        channels: 2,
        height: 3,
        width: 2,
        seed,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let encoder = EncoderConfig {
        in_channels: 2,
        stage_channels: vec![3, 3],
        embed_dim: 3,
        sjm_stage: 0,
        tau_init: 0.5,
    };
    let mut params = ModelParams::init(&encoder, 2 * MICRO_IDS, &[MICRO_IDS, MICRO_IDS], seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for st in &mut params.stages {
        st.bias.values_mut().iter_mut().for_each(|b| *b = r.gen_range(0.0..0.5));
    }
    params
        .embed_bias
        .values_mut()
        .iter_mut()
        .for_each(|b| *b = r.gen_range(-0.5..0.5));
    Micro { data, encoder, params }
}

impl Micro {
    /// Every sample of both domains in generator order.
    pub fn batch(&self) -> Batch<'_> {
        let samples: Vec<_> = self.data.samples.iter().collect();
        let global_labels = samples.iter().map(|s| s.identity_global).collect();
        let slices = (0..2)
            .map(|d| {
                let rows: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].domain_id == d).collect();
                let local_labels = rows.iter().map(|&i| samples[i].identity_local).collect();
                DomainSlice {
                    domain: d,
                    rows,
                    local_labels,
                }
            })
            .collect();
        Batch {
            samples,
            global_labels,
            slices,
        }
    }

    /// Random targets on the first half of every identity's rows.
    pub fn plan(&self, batch: &Batch<'_>, rng: &mut ChaCha8Rng) -> JitterPlan {
        let c = self.encoder.sjm_channels();
        let entries = half_per_identity(&batch.global_labels)
            .into_iter()
            .map(|i| {
                (
                    i,
                    StyleTarget {
                        mu: uniform_vec(rng, c, -1.0, 1.0),
                        sigma: uniform_vec(rng, c, 0.5, 1.5),
                    },
                )
            })
            .collect();
        JitterPlan { entries }
    }
}
