//! Synthetic multi-domain re-identification data.
//!
//! An identity is a fixed spatial colour layout (head / upper body / lower
//! body blocks plus a smooth low-frequency field). A domain is a per-channel
//! affine style applied on top of the standardized content; each camera of a
//! domain perturbs that style slightly. Label spaces of different domains are
//! disjoint.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::snapshot::{self, FloatReader};
use crate::tensor::STD_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain_id: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub noise: f64,
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::invalid("style mu/sigma lengths differ"));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "domain {} style sigma must be strictly positive",
                self.domain_id
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise level must be nonnegative"));
        }
        Ok(())
    }
}

fn d_domains() -> usize {
    4
}
fn d_ids() -> usize {
    16
}
fn d_imgs() -> usize {
    12
}
fn d_cams() -> usize {
    3
}
fn d_channels() -> usize {
    3
}
fn d_height() -> usize {
    16
}
fn d_width() -> usize {
    8
}
fn d_style_shift() -> f64 {
    1.0
}
fn d_style_scale() -> f64 {
    2.0
}
fn d_camera_shift() -> f64 {
    0.02
}
fn d_camera_scale() -> f64 {
    0.02
}
fn d_max_shift() -> usize {
    2
}
fn d_noise() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "d_domains")]
    pub domains: usize,
    #[serde(default = "d_ids")]
    pub identities_per_domain: usize,
    #[serde(default = "d_imgs")]
    pub images_per_identity: usize,
    #[serde(default = "d_cams")]
    pub cameras_per_domain: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_height")]
    pub height: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
    /// Domain style means are drawn from `U(-style_shift, style_shift)`.
    #[serde(default = "d_style_shift")]
    pub style_shift: f64,
    /// Domain style scales are log-uniform in `[1/style_scale, style_scale]`.
    #[serde(default = "d_style_scale")]
    pub style_scale: f64,
    /// Std of per-camera mean offsets.
    #[serde(default = "d_camera_shift")]
    pub camera_shift: f64,
    /// Std of per-camera log-scale offsets.
    #[serde(default = "d_camera_scale")]
    pub camera_scale: f64,
    /// Per-image vertical pose shift is uniform in `-max_shift..=max_shift` rows.
    #[serde(default = "d_max_shift")]
    pub max_shift: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Explicit per-domain styles, overriding the random draw.
    #[serde(default)]
    pub styles: Option<Vec<DomainStyle>>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            domains: d_domains(),
            identities_per_domain: d_ids(),
            images_per_identity: d_imgs(),
            cameras_per_domain: d_cams(),
            channels: d_channels(),
            height: d_height(),
            width: d_width(),
            seed: 0,
            style_shift: d_style_shift(),
            style_scale: d_style_scale(),
            camera_shift: d_camera_shift(),
            camera_scale: d_camera_scale(),
            max_shift: d_max_shift(),
            noise: d_noise(),
            styles: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dataset.domains", self.domains),
            ("dataset.identities_per_domain", self.identities_per_domain),
            ("dataset.images_per_identity", self.images_per_identity),
            ("dataset.cameras_per_domain", self.cameras_per_domain),
            ("dataset.channels", self.channels),
            ("dataset.height", self.height),
            ("dataset.width", self.width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.style_scale >= 1.0) {
            return Err(Error::config("dataset.style_scale", "must be >= 1"));
        }
        for (name, v) in [
            ("dataset.style_shift", self.style_shift),
            ("dataset.camera_shift", self.camera_shift),
            ("dataset.camera_scale", self.camera_scale),
            ("dataset.noise", self.noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be a finite nonnegative number"));
            }
        }
        if let Some(styles) = &self.styles {
            if styles.len() != self.domains {
                return Err(Error::config(
                    "dataset.styles",
                    format!("{} styles for {} domains", styles.len(), self.domains),
                ));
            }
            for s in styles {
                if s.mu.len() != self.channels {
                    return Err(Error::config("dataset.styles", "channel count mismatch"));
                }
                s.validate()
                    .map_err(|e| Error::config("dataset.styles", e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.pixels()
    }

    pub fn num_global_identities(&self) -> usize {
        self.domains * self.identities_per_domain
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `channels x height x width`, row-major.
    pub image: Vec<f64>,
    pub identity_local: usize,
    pub identity_global: usize,
    pub domain_id: usize,
    pub camera_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub identity_local: usize,
    pub identity_global: usize,
    pub domain_id: usize,
    pub camera_id: usize,
}

impl Sample {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            identity_local: self.identity_local,
            identity_global: self.identity_global,
            domain_id: self.domain_id,
            camera_id: self.camera_id,
        }
    }
}

/// Per-camera perturbation of a domain style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    pub mu_offset: Vec<f64>,
    pub sigma_factor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub styles: Vec<DomainStyle>,
    pub cameras: Vec<Vec<CameraStyle>>,
    pub samples: Vec<Sample>,
}

/// Global label of a local identity under the generator's indexing.
pub fn global_label(spec: &DatasetSpec, domain: usize, local: usize) -> usize {
    domain * spec.identities_per_domain + local
}

/// Inverse of [`global_label`].
pub fn local_label(spec: &DatasetSpec, global: usize) -> (usize, usize) {
    (
        global / spec.identities_per_domain,
        global % spec.identities_per_domain,
    )
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_styles(spec: &DatasetSpec) -> Vec<DomainStyle> {
    if let Some(s) = &spec.styles {
        return s.clone();
    }
    let mut rng = substream(spec.seed, Purpose::Styles, 0);
    let log_range = spec.style_scale.ln();
    (0..spec.domains)
        .map(|d| DomainStyle {
            domain_id: d,
            mu: (0..spec.channels)
                .map(|_| rng.gen_range(-1.0..=1.0) * spec.style_shift)
                .collect(),
            sigma: (0..spec.channels)
                .map(|_| (rng.gen_range(-1.0..=1.0) * log_range).exp())
                .collect(),
            noise: spec.noise,
        })
        .collect()
}

/// Camera perturbations, centred so the offsets and the log-factors each
/// average to zero across a domain's cameras.
fn draw_cameras(spec: &DatasetSpec) -> Vec<Vec<CameraStyle>> {
    (0..spec.domains)
        .map(|d| {
            let mut rng = substream(spec.seed, Purpose::Styles, 1 + d as u64);
            let n = spec.cameras_per_domain;
            let c = spec.channels;
            let mut shift: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| normal(&mut rng) * spec.camera_shift).collect())
                .collect();
            let mut logs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| normal(&mut rng) * spec.camera_scale).collect())
                .collect();
            for field in [&mut shift, &mut logs] {
                for ch in 0..c {
                    let m = field.iter().map(|v| v[ch]).sum::<f64>() / n as f64;
                    for v in field.iter_mut() {
                        v[ch] -= m;
                    }
                }
            }
            shift
                .into_iter()
                .zip(logs)
                .map(|(s, l)| CameraStyle {
                    mu_offset: s,
                    sigma_factor: l.into_iter().map(f64::exp).collect(),
                })
                .collect()
        })
        .collect()
}

/// Identity content: block colours for three body parts plus a smooth
/// field, standardized per channel.
fn identity_template(spec: &DatasetSpec, global: usize) -> Vec<f64> {
    let mut rng = substream(spec.seed, Purpose::Templates, global as u64);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let hf = h as f64;
    let b1 = ((hf * rng.gen_range(0.15..0.25)).round() as usize).clamp(1, h.saturating_sub(1).max(1));
    let b2 = ((hf * rng.gen_range(0.5..0.62)).round() as usize).clamp(b1, h);
    let colors: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..c).map(|_| normal(&mut rng)).collect())
        .collect();
    let freqs: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..9).map(|_| normal(&mut rng) * 0.35).collect())
        .collect();
    let mut t = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let part = if y < b1 { 0 } else if y < b2 { 1 } else { 2 };
            for x in 0..w {
                let mut v = colors[part][ch];
                for u in 0..3 {
                    for vv in 0..3 {
                        let cy = (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / hf).cos();
                        let cx = (std::f64::consts::PI * vv as f64 * (x as f64 + 0.5) / w as f64).cos();
                        v += freqs[ch][u * 3 + vv] * cy * cx;
                    }
                }
                t[(ch * h + y) * w + x] = v;
            }
        }
        standardize(&mut t[ch * h * w..(ch + 1) * h * w]);
    }
    t
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let s = var.max(STD_EPS).sqrt();
    for x in v.iter_mut() {
        *x = (*x - m) / s;
    }
}

/// Deterministically builds every domain's samples and styles.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let styles = draw_styles(spec);
    let cameras = draw_cameras(spec);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut samples = Vec::with_capacity(
        spec.domains * spec.identities_per_domain * spec.images_per_identity,
    );
    for d in 0..spec.domains {
        let style = &styles[d];
        for local in 0..spec.identities_per_domain {
            let global = global_label(spec, d, local);
            let template = identity_template(spec, global);
            let mut rng = substream(spec.seed, Purpose::Images, global as u64);
            let max_shift = spec.max_shift as i64;
            for k in 0..spec.images_per_identity {
                let camera = k % spec.cameras_per_domain;
                let cam = &cameras[d][camera];
                let shift = rng.gen_range(-max_shift..=max_shift);
                let mut image = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut image[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        let sy = (y as i64 + shift).clamp(0, h as i64 - 1) as usize;
                        for x in 0..w {
                            let noise = if style.noise > 0.0 {
                                style.noise * normal(&mut rng)
                            } else {
                                0.0
                            };
                            plane[y * w + x] = template[(ch * h + sy) * w + x] + noise;
                        }
                    }
                    standardize(plane);
                    let scale = style.sigma[ch] * cam.sigma_factor[ch];
                    let offset = style.mu[ch] + cam.mu_offset[ch];
                    for v in plane.iter_mut() {
                        *v = scale * *v + offset;
                    }
                }
                samples.push(Sample {
                    image,
                    identity_local: local,
                    identity_global: global,
                    domain_id: d,
                    camera_id: camera,
                });
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        styles,
        cameras,
        samples,
    })
}

impl Dataset {
    pub fn domain_samples(&self, domain: usize) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.domain_id == domain).collect()
    }

    pub fn write_snapshot(&self, stem: &Path) -> Result<()> {
        let manifest = DatasetManifest {
            spec: self.spec.clone(),
            styles: self.styles.clone(),
            cameras: self.cameras.clone(),
            samples: self.samples.iter().map(Sample::meta).collect(),
        };
        let floats: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| s.image.iter().copied())
            .collect();
        snapshot::write(stem, "dataset", &manifest, &floats)
    }

    pub fn read_snapshot(stem: &Path) -> Result<Self> {
        let (m, floats): (DatasetManifest, _) = snapshot::read(stem, "dataset")?;
        let len = m.spec.image_len();
        let mut reader = FloatReader::new(&floats);
        let mut samples = Vec::with_capacity(m.samples.len());
        for meta in m.samples {
            samples.push(Sample {
                image: reader.take(len)?,
                identity_local: meta.identity_local,
                identity_global: meta.identity_global,
                domain_id: meta.domain_id,
                camera_id: meta.camera_id,
            });
        }
        reader.finish()?;
        Ok(Dataset {
            spec: m.spec,
            styles: m.styles,
            cameras: m.cameras,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    styles: Vec<DomainStyle>,
    cameras: Vec<Vec<CameraStyle>>,
    samples: Vec<SampleMeta>,
}

/// Pixel-space style replacement: each channel of each image is
/// standardized and re-scaled to the target mean and standard deviation.
///
/// The channel variance is floored at [`STD_EPS`], so a constant channel
/// maps to the constant target mean.
pub fn stylize_images(samples: &[Sample], target: &DomainStyle, pixels: usize) -> Result<Vec<Sample>> {
    target.validate()?;
    samples
        .iter()
        .map(|s| {
            let c = s.image.len() / pixels;
            if c != target.mu.len() || c * pixels != s.image.len() {
                return Err(Error::invalid(format!(
                    "image with {} values does not match {} channels x {pixels} pixels",
                    s.image.len(),
                    target.mu.len()
                )));
            }
            let mut image = s.image.clone();
            for ch in 0..c {
                let v = &mut image[ch * pixels..(ch + 1) * pixels];
                let n = pixels as f64;
                let m = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                let sd = var.max(STD_EPS).sqrt();
                for x in v.iter_mut() {
                    *x = target.sigma[ch] * (*x - m) / sd + target.mu[ch];
                }
            }
            Ok(Sample {
                image,
                ..s.clone()
            })
        })
        .collect()
}

/// Partitions one domain's samples into `n_subsets` groups of whole cameras.
///
/// Distinct camera ids are sorted and dealt into contiguous, equally sized
/// (up to one) runs. Returns sample indices into `samples` per subset.
pub fn camera_split(samples: &[Sample], n_subsets: usize) -> Result<Vec<Vec<usize>>> {
    let cams: Vec<usize> = samples
        .iter()
        .map(|s| s.camera_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if n_subsets == 0 || n_subsets > cams.len() {
        return Err(Error::invalid(format!(
            "camera_split: {n_subsets} subsets requested but only {} distinct cameras",
            cams.len()
        )));
    }
    let subset_of = |cam: usize| {
        let rank = cams.binary_search(&cam).expect("camera present");
        rank * n_subsets / cams.len()
    };
    let mut out = vec![Vec::new(); n_subsets];
    for (i, s) in samples.iter().enumerate() {
        out[subset_of(s.camera_id)].push(i);
    }
    Ok(out)
}

/// Draws `p` distinct identities and `k` images of each.
///
/// `labels[i]` is the identity of candidate `i`. Identities with fewer than
/// `k` images are sampled with replacement. Returns candidate indices grouped
/// identity by identity, in sampled order.
pub fn pk_sample_batch<R: Rng>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::invalid("pk_sample_batch: P and K must be positive"));
    }
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &y) in labels.iter().enumerate() {
        by_id.entry(y).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::invalid(format!(
            "pk_sample_batch: need {p} identities, domain has {}",
            by_id.len()
        )));
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    let chosen: Vec<usize> = ids.choose_multiple(rng, p).copied().collect();
    let mut out = Vec::with_capacity(p * k);
    for id in chosen {
        let pool = &by_id[&id];
        if pool.len() >= k {
            out.extend(pool.choose_multiple(rng, k).copied());
        } else {
            out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            domains: 2,
            identities_per_domain: 3,
            images_per_identity: 4,
            cameras_per_domain: 2,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_counts_rejected() {
        let spec = DatasetSpec {
            images_per_identity: 0,
            ..small_spec()
        };
        let err = generate_dataset(&spec).unwrap_err();
        assert!(err.to_string().contains("images_per_identity"));
    }

    #[test]
    fn identities_in_one_domain_differ() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let a = &ds.samples[0];
        let b = ds
            .samples
            .iter()
            .find(|s| s.domain_id == 0 && s.identity_local == 1)
            .unwrap();
        let d: f64 = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn unit_style_domain_has_zero_channel_mean() {
        let spec = DatasetSpec {
            domains: 1,
            identities_per_domain: 20,
            images_per_identity: 10,
            cameras_per_domain: 2,
            noise: 0.0,
            styles: Some(vec![DomainStyle {
                domain_id: 0,
                mu: vec![0.0; 3],
                sigma: vec![1.0; 3],
                noise: 0.0,
            }]),
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.samples.len(), 200);
        let p = spec.pixels();
        for ch in 0..3 {
            let mut sum = 0.0;
            for s in &ds.samples {
                sum += s.image[ch * p..(ch + 1) * p].iter().sum::<f64>();
            }
            let mean = sum / (200 * p) as f64;
            assert!(mean.abs() < 0.05, "channel {ch} mean {mean}");
        }
    }

    #[test]
    fn global_label_round_trips() {
        let ds = generate_dataset(&small_spec()).unwrap();
        for s in &ds.samples {
            assert_eq!(global_label(&ds.spec, s.domain_id, s.identity_local), s.identity_global);
            assert_eq!(local_label(&ds.spec, s.identity_global), (s.domain_id, s.identity_local));
        }
    }

    fn channel_mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn stylize_hits_target_statistics() {
        // channel stats (2, 4) -> target (0, 1)
        let img: Vec<f64> = vec![-2.0, 6.0, -2.0, 6.0];
        let (m, s) = channel_mean_std(&img);
        assert_eq!((m, s), (2.0, 4.0));
        let sample = Sample {
            image: img,
            identity_local: 0,
            identity_global: 0,
            domain_id: 0,
            camera_id: 0,
        };
        let target = DomainStyle {
            domain_id: 1,
            mu: vec![0.0],
            sigma: vec![1.0],
            noise: 0.0,
        };
        let out = stylize_images(&[sample], &target, 4).unwrap();
        let (m, s) = channel_mean_std(&out[0].image);
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stylize_own_style_is_identity_and_constant_collapses() {
        let img = vec![1.0, 2.0, 4.0, 7.0, 3.0, 3.0, 3.0, 3.0];
        let (m, s) = channel_mean_std(&img[..4]);
        let sample = Sample {
            image: img.clone(),
            identity_local: 0,
            identity_global: 0,
            domain_id: 0,
            camera_id: 0,
        };
        let target = DomainStyle {
            domain_id: 0,
            mu: vec![m, 5.0],
            sigma: vec![s, 2.0],
            noise: 0.0,
        };
        let out = stylize_images(&[sample], &target, 4).unwrap();
        for k in 0..4 {
            assert!((out[0].image[k] - img[k]).abs() < 1e-9);
            assert_eq!(out[0].image[4 + k], 5.0);
        }
    }

    #[test]
    fn camera_split_partitions_by_camera() {
        let samples: Vec<Sample> = (0..24)
            .map(|i| Sample {
                image: vec![0.0],
                identity_local: i % 4,
                identity_global: i % 4,
                domain_id: 0,
                camera_id: i % 6,
            })
            .collect();
        let parts = camera_split(&samples, 3).unwrap();
        assert_eq!(parts.len(), 3);
        let mut seen = vec![false; 24];
        for part in &parts {
            let cams: BTreeSet<usize> = part.iter().map(|&i| samples[i].camera_id).collect();
            assert_eq!(cams.len(), 2);
            for &i in part {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(parts, camera_split(&samples, 3).unwrap());
        assert!(camera_split(&samples, 7).is_err());
    }

    #[test]
    fn pk_batch_contract() {
        let labels = vec![0, 0, 0, 1, 1, 2, 2, 2, 2];
        let mut rng = substream(1, Purpose::Test, 0);
        let b = pk_sample_batch(&labels, 2, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(labels[b[0]], labels[b[1]]);
        assert_eq!(labels[b[2]], labels[b[3]]);
        assert_ne!(labels[b[0]], labels[b[2]]);
        assert!(pk_sample_batch(&labels, 4, 2, &mut rng).is_err());
    }

    #[test]
    fn pk_batch_repeats_single_image() {
        let labels = vec![5];
        let mut rng = substream(1, Purpose::Test, 1);
        assert_eq!(pk_sample_batch(&labels, 1, 4, &mut rng).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn pk_batch_deterministic() {
        let labels: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let run = || {
            let mut rng = substream(9, Purpose::Batches, 0);
            (0..5)
                .map(|_| pk_sample_batch(&labels, 3, 4, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
