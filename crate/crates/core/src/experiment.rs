//! Experiment configs, the canonical experiment kinds, ablation matrices and
//! the artifacts a run leaves on disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::{domain_gap, mean_off_diagonal, EvalResult};
use crate::metaloop::{
    evaluate_model, run_training, EvalSplit, MetaStepConfig, Record, StepObserver, TrainOutcome, TrainingSet,
};
use crate::model::{extract_features, normalize_rows, EncoderConfig, ModelParams};
use crate::sjm::{Memories, SquareMatrix, WeightMode};
use crate::synthgen::{camera_split, generate_dataset, stylize_images, Dataset, DatasetSpec, Sample};

pub const ENV_OUTPUT_DIR: &str = "SVIL_OUTPUT_DIR";
pub const ENV_SEED: &str = "SVIL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Train on every domain but the target, evaluate on the target.
    MultiSource,
    /// Train on one source domain split into camera groups.
    SingleSourceCameraSplit,
    /// Train on one source domain as generated and again after re-styling
    /// it to the target style; compare on the target.
    Fig1StyleReplacement,
}

fn d_subsets() -> usize {
    3
}
fn d_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub kind: ExperimentKind,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    /// Held-out domain; defaults to the last one.
    #[serde(default)]
    pub target_domain: Option<usize>,
    /// Source domain for the single-source kinds.
    #[serde(default)]
    pub source_domain: usize,
    /// Pseudo-domains for the camera-split kind.
    #[serde(default = "d_subsets")]
    pub camera_subsets: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Omitted on purpose so a missing section is reported by name.
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: MetaStepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `SVIL_OUTPUT_DIR` and `SVIL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::config(ENV_SEED, format!("not an unsigned integer: {seed:?}")))?;
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<&DatasetSpec> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "missing [dataset] section"))
    }

    pub fn target(&self) -> Result<usize> {
        let spec = self.dataset_spec()?;
        let t = self.target_domain.unwrap_or(spec.domains.saturating_sub(1));
        if t >= spec.domains {
            return Err(Error::config("target_domain", format!("{t} out of range for {} domains", spec.domains)));
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.dataset_spec()?;
        spec.validate()?;
        self.encoder.validate(spec.pixels())?;
        if self.encoder.in_channels != spec.channels {
            return Err(Error::config("encoder.in_channels", "must equal dataset.channels"));
        }
        self.train.validate()?;
        let target = self.target()?;
        if spec.domains < 2 {
            return Err(Error::config("dataset.domains", "need a source and a target domain"));
        }
        match self.kind {
            ExperimentKind::MultiSource => {
                if self.train.maml && spec.domains < 3 {
                    return Err(Error::config("train.maml", "meta-learning needs at least 2 source domains"));
                }
            }
            ExperimentKind::SingleSourceCameraSplit => {
                self.check_source(target)?;
                if self.camera_subsets < 2 {
                    return Err(Error::config("camera_subsets", "need at least 2 subsets"));
                }
                if spec.cameras_per_domain < self.camera_subsets {
                    return Err(Error::config(
                        "camera_subsets",
                        format!("{} subsets but only {} cameras", self.camera_subsets, spec.cameras_per_domain),
                    ));
                }
            }
            ExperimentKind::Fig1StyleReplacement => {
                self.check_source(target)?;
                if self.train.maml {
                    return Err(Error::config("train.maml", "a single source domain cannot be meta-split"));
                }
            }
        }
        if self.train.ids_per_batch > spec.identities_per_domain {
            return Err(Error::config("train.ids_per_batch", "exceeds dataset.identities_per_domain"));
        }
        Ok(())
    }

    fn check_source(&self, target: usize) -> Result<()> {
        let spec = self.dataset_spec()?;
        if self.source_domain >= spec.domains || self.source_domain == target {
            return Err(Error::config("source_domain", "must be a valid domain other than the target"));
        }
        Ok(())
    }

    /// Canonical JSON form with the output location left out; the stamp
    /// hash is taken over it.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        Ok(serde_json::to_string(&v)?)
    }

    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Target-domain result of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub toggles: BTreeMap<String, String>,
    pub eval: EvalResult,
    /// Domains in `domain_gap` row order (sources, then the target).
    pub gap_domains: Vec<usize>,
    pub domain_gap: SquareMatrix,
    pub mean_domain_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub map_delta: f64,
    pub rank1_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub runs: Vec<RunSummary>,
    pub comparison: Option<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_sha256: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub crate_version: String,
    pub snapshot_format: String,
}

/// One metrics line: a training record tagged with its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub run: String,
    #[serde(flatten)]
    pub record: Record,
}

/// Training sets of one run, built from the dataset.
pub struct RunInputs {
    pub name: String,
    pub set: TrainingSet,
}

/// Training inputs for every run of an experiment kind.
pub fn plan_runs(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<RunInputs>> {
    let target = cfg.target()?;
    let owned = |d: usize| dataset.domain_samples(d).into_iter().cloned().collect::<Vec<Sample>>();
    Ok(match cfg.kind {
        ExperimentKind::MultiSource => {
            let groups = (0..dataset.spec.domains).filter(|&d| d != target).map(owned).collect();
            vec![RunInputs {
                name: "main".into(),
                set: TrainingSet::from_groups(groups)?,
            }]
        }
        ExperimentKind::SingleSourceCameraSplit => {
            let source = owned(cfg.source_domain);
            let groups = camera_split(&source, cfg.camera_subsets)?
                .into_iter()
                .map(|idx| idx.into_iter().map(|i| source[i].clone()).collect())
                .collect();
            vec![RunInputs {
                name: "main".into(),
                set: TrainingSet::from_groups(groups)?,
            }]
        }
        ExperimentKind::Fig1StyleReplacement => {
            let source = owned(cfg.source_domain);
            let stylized = stylize_images(&source, &dataset.styles[target], dataset.spec.pixels())?;
            vec![
                RunInputs {
                    name: "original".into(),
                    set: TrainingSet::from_groups(vec![source])?,
                },
                RunInputs {
                    name: "stylized".into(),
                    set: TrainingSet::from_groups(vec![stylized])?,
                },
            ]
        }
    })
}

/// Source domains whose embeddings enter the domain-gap table.
fn gap_sources(cfg: &ExperimentConfig, target: usize, domains: usize) -> Vec<usize> {
    match cfg.kind {
        ExperimentKind::MultiSource => (0..domains).filter(|&d| d != target).collect(),
        _ => vec![cfg.source_domain],
    }
}

/// Domain-gap table of normalized embeddings over `domains` in order.
pub fn embedding_gap(
    encoder: &EncoderConfig,
    params: &ModelParams,
    dataset: &Dataset,
    domains: &[usize],
) -> Result<SquareMatrix> {
    let groups = domains
        .iter()
        .map(|&d| Ok(normalize_rows(&extract_features(encoder, params, &dataset.domain_samples(d))?)))
        .collect::<Result<Vec<_>>>()?;
    domain_gap(&groups)
}

/// Trains one run and summarizes it on the target domain.
pub fn train_and_summarize(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    inputs: &RunInputs,
    toggles: BTreeMap<String, String>,
    observer: &mut dyn StepObserver,
) -> Result<(RunSummary, TrainOutcome)> {
    let target = cfg.target()?;
    let split = EvalSplit::from_samples(&dataset.domain_samples(target).into_iter().cloned().collect::<Vec<_>>());
    let outcome = run_training(&cfg.encoder, &cfg.train, &inputs.set, Some(&split), cfg.seed, observer)?;
    let eval = match &outcome.final_eval {
        Some(e) => e.clone(),
        None => evaluate_model(&cfg.encoder, &outcome.params, &split)?,
    };
    let mut gap_domains = gap_sources(cfg, target, dataset.spec.domains);
    gap_domains.push(target);
    let gap = embedding_gap(&cfg.encoder, &outcome.params, dataset, &gap_domains)?;
    let summary = RunSummary {
        name: inputs.name.clone(),
        toggles,
        eval,
        gap_domains,
        mean_domain_gap: mean_off_diagonal(&gap),
        domain_gap: gap,
    };
    Ok((summary, outcome))
}

/// Writes metrics lines as they arrive and periodic checkpoints.
struct ArtifactWriter<'w> {
    run: String,
    metrics: &'w mut dyn Write,
    checkpoint_dir: PathBuf,
    every: usize,
    encoder: EncoderConfig,
    error: Option<Error>,
}

impl StepObserver for ArtifactWriter<'_> {
    fn on_record(&mut self, record: &Record) {
        if self.error.is_some() {
            return;
        }
        let line = MetricsLine {
            run: self.run.clone(),
            record: record.clone(),
        };
        let res = serde_json::to_string(&line)
            .map_err(Error::from)
            .and_then(|s| writeln!(self.metrics, "{s}").map_err(Error::from));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    fn on_epoch_end(&mut self, epoch: usize, params: &ModelParams, memories: &Memories) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if self.every > 0 && (epoch + 1) % self.every == 0 {
            let stem = self.checkpoint_dir.join(format!("{}-epoch{:03}", self.run, epoch + 1));
            write_run_state(&stem, params, memories, &self.encoder)?;
        }
        Ok(())
    }
}

fn write_run_state(stem: &Path, params: &ModelParams, memories: &Memories, encoder: &EncoderConfig) -> Result<()> {
    params.write_checkpoint(encoder, stem)?;
    let mut mem = stem.as_os_str().to_owned();
    mem.push("-memories");
    memories.write_snapshot(Path::new(&mem))
}

fn summary_tsv(report: &FinalReport) -> String {
    let mut keys: Vec<&String> = report.runs.iter().flat_map(|r| r.toggles.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut out = String::from("run");
    for k in &keys {
        out.push('\t');
        out.push_str(k);
    }
    out.push_str("\tmap\trank1\trank5\trank10\tmean_domain_gap\n");
    for r in &report.runs {
        out.push_str(&r.name);
        for k in &keys {
            out.push('\t');
            out.push_str(r.toggles.get(*k).map_or("", String::as_str));
        }
        out.push_str(&format!(
            "\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.eval.map,
            r.eval.rank(1),
            r.eval.rank(5),
            r.eval.rank(10),
            r.mean_domain_gap
        ));
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Executes `runs` (name, toggles, config) and writes every artifact.
fn execute(base: &ExperimentConfig, runs: Vec<(BTreeMap<String, String>, ExperimentConfig)>) -> Result<FinalReport> {
    let out = &base.output_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let dataset = generate_dataset(base.dataset_spec()?)?;
    let mut metrics = std::io::BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let mut summaries = Vec::new();
    for (toggles, cfg) in runs {
        for inputs in plan_runs(&cfg, &dataset)? {
            let name = if toggles.is_empty() {
                inputs.name.clone()
            } else {
                toggles.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
            };
            let inputs = RunInputs { name: name.clone(), ..inputs };
            let mut writer = ArtifactWriter {
                run: name.clone(),
                metrics: &mut metrics,
                checkpoint_dir: ckpt_dir.clone(),
                every: cfg.checkpoint_every,
                encoder: cfg.encoder.clone(),
                error: None,
            };
            let (summary, outcome) = train_and_summarize(&cfg, &dataset, &inputs, toggles.clone(), &mut writer)?;
            if let Some(e) = writer.error.take() {
                return Err(e);
            }
            write_run_state(&ckpt_dir.join(&name), &outcome.params, &outcome.memories, &cfg.encoder)?;
            summaries.push(summary);
        }
    }
    metrics.flush()?;
    let comparison = (base.kind == ExperimentKind::Fig1StyleReplacement && summaries.len() == 2).then(|| Comparison {
        baseline: summaries[0].name.clone(),
        candidate: summaries[1].name.clone(),
        map_delta: summaries[1].eval.map - summaries[0].eval.map,
        rank1_delta: summaries[1].eval.rank(1) - summaries[0].eval.rank(1),
    });
    let report = FinalReport {
        kind: base.kind,
        seed: base.seed,
        runs: summaries,
        comparison,
    };
    write_json(&out.join("final.json"), &report)?;
    fs::write(out.join("summary.tsv"), summary_tsv(&report))?;
    let stamp = Stamp {
        config_sha256: base.hash()?,
        seed: base.seed,
        dataset_seed: base.dataset_spec()?.seed,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        snapshot_format: crate::snapshot::FORMAT.into(),
    };
    write_json(&out.join("stamp.json"), &stamp)?;
    Ok(report)
}

/// Runs the experiment described by `cfg`.
pub fn run(cfg: &ExperimentConfig) -> Result<FinalReport> {
    cfg.validate()?;
    execute(cfg, vec![(BTreeMap::new(), cfg.clone())])
}

/// Ablation switches and the values each takes.
pub const TOGGLES: &[&str] = &["sjm", "maml", "loss", "weight_mode", "cross_domain", "sjm_stage"];

fn toggle_values(cfg: &ExperimentConfig, name: &str) -> Result<Vec<String>> {
    Ok(match name {
        "sjm" | "maml" | "cross_domain" => vec!["off".into(), "on".into()],
        "loss" => vec!["spec".into(), "all".into()],
        "weight_mode" => vec!["soft".into(), "hard".into()],
        "sjm_stage" => (0..cfg.encoder.num_stages()).map(|s| s.to_string()).collect(),
        other => {
            return Err(Error::config(
                "toggles",
                format!("unknown toggle {other:?}; expected one of {}", TOGGLES.join(", ")),
            ))
        }
    })
}

fn apply_toggle(cfg: &mut ExperimentConfig, name: &str, value: &str) {
    let on = value == "on";
    match name {
        "sjm" => cfg.train.sjm = on,
        "maml" => cfg.train.maml = on,
        "cross_domain" => cfg.train.cross_domain = on,
        "loss" => {
            cfg.train.lambda = if value == "spec" {
                0.0
            } else if cfg.train.lambda > 0.0 {
                cfg.train.lambda
            } else {
                crate::losses::DEFAULT_LAMBDA
            }
        }
        "weight_mode" => {
            cfg.train.weight_mode = if value == "hard" {
                WeightMode::Hard
            } else {
                WeightMode::Soft
            }
        }
        "sjm_stage" => cfg.encoder.sjm_stage = value.parse().unwrap_or(cfg.encoder.sjm_stage),
        _ => {}
    }
}

/// Every combination of the named toggles, in row-major order with the
/// first toggle varying slowest.
pub fn ablation_grid(cfg: &ExperimentConfig, toggles: &[String]) -> Result<Vec<(BTreeMap<String, String>, ExperimentConfig)>> {
    let mut seen = std::collections::HashSet::new();
    for t in toggles {
        if !seen.insert(t) {
            return Err(Error::config("toggles", format!("toggle {t:?} given twice")));
        }
    }
    let mut grid = vec![(BTreeMap::new(), cfg.clone())];
    for t in toggles {
        let values = toggle_values(cfg, t)?;
        let mut next = Vec::with_capacity(grid.len() * values.len());
        for (tags, c) in &grid {
            for v in &values {
                let mut tags = tags.clone();
                tags.insert(t.clone(), v.clone());
                let mut c = c.clone();
                apply_toggle(&mut c, t, v);
                next.push((tags, c));
            }
        }
        grid = next;
    }
    Ok(grid)
}

/// Runs one experiment per toggle combination on a shared dataset.
pub fn ablate(cfg: &ExperimentConfig, toggles: &[String]) -> Result<FinalReport> {
    if cfg.kind == ExperimentKind::Fig1StyleReplacement {
        return Err(Error::config("kind", "ablation needs a multi-source or camera-split experiment"));
    }
    let grid = ablation_grid(cfg, toggles)?;
    for (_, c) in &grid {
        c.validate()?;
    }
    execute(cfg, grid)
}

/// Generates the configured dataset and writes its snapshot under
/// `<output_dir>/dataset`. Returns the snapshot stem.
pub fn dump_dataset(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let spec = cfg.dataset_spec()?;
    spec.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let stem = cfg.output_dir.join("dataset");
    generate_dataset(spec)?.write_snapshot(&stem)?;
    Ok(stem)
}

/// Evaluates a checkpoint on one domain of a dataset snapshot (default:
/// the last domain).
pub fn eval_checkpoint(checkpoint: &Path, dataset: &Path, domain: Option<usize>) -> Result<EvalResult> {
    let (encoder, params) = ModelParams::read_checkpoint(checkpoint)?;
    let data = Dataset::read_snapshot(dataset)?;
    let d = domain.unwrap_or(data.spec.domains - 1);
    if d >= data.spec.domains {
        return Err(Error::config("domain", format!("{d} out of range")));
    }
    let samples: Vec<Sample> = data.domain_samples(d).into_iter().cloned().collect();
    evaluate_model(&encoder, &params, &EvalSplit::from_samples(&samples))
}

/// Parses a metrics stream back into its lines.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
