mod common;

use svil_core::experiment::{self, parse_metrics, ExperimentConfig, ExperimentKind};
use svil_core::metaloop::{all_loss_with_grads, MetaStepConfig, Record, StepObserver, Trainer, TrainingSet};
use svil_core::model::{EncoderConfig, ModelParams};
use svil_core::sjm::{mmd2, Kernel, Memories};
use svil_core::synthgen::{generate_dataset, Dataset, DatasetSpec, Sample};

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        domains: 4,
        identities_per_domain: 4,
        images_per_identity: 4,
        cameras_per_domain: 2,
        height: 4,
        width: 2,
        seed,
        ..DatasetSpec::default()
    }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        stage_channels: vec![4, 4],
        embed_dim: 4,
        sjm_stage: 0,
        ..EncoderConfig::default()
    }
}

fn small_train() -> MetaStepConfig {
    MetaStepConfig {
        ids_per_batch: 2,
        images_per_id: 2,
        epochs: 2,
        iterations_per_epoch: 3,
        lr_milestones: vec![1],
        ..MetaStepConfig::default()
    }
}

fn sources(data: &Dataset) -> TrainingSet {
    let groups: Vec<Vec<Sample>> = (0..3)
        .map(|d| data.domain_samples(d).into_iter().cloned().collect())
        .collect();
    TrainingSet::from_groups(groups).unwrap()
}

fn small_config(kind: ExperimentKind, dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        kind,
        output_dir: dir.to_path_buf(),
        target_domain: None,
        source_domain: 0,
        camera_subsets: 2,
        checkpoint_every: 1,
        dataset: Some(small_spec(5)),
        encoder: small_encoder(),
        train: small_train(),
    }
}

#[test]
fn maml_off_step_is_plain_sgd_on_the_frozen_batch() {
    let data = generate_dataset(&small_spec(1)).unwrap();
    let set = sources(&data);
    for sjm in [false, true] {
        let cfg = MetaStepConfig {
            maml: false,
            sjm,
            ..small_train()
        };
        let mut live = Trainer::new(small_encoder(), cfg.clone(), &set, 9).unwrap();
        let mut shadow = Trainer::new(small_encoder(), cfg.clone(), &set, 9).unwrap();

        let batch = shadow.sample_batch(&[0, 1, 2]).unwrap();
        let plan = sjm.then(|| shadow.jitter_plan(&batch).unwrap().0);
        let eval = all_loss_with_grads(&shadow.encoder, &shadow.params, &batch, plan.as_ref(), cfg.lambda, cfg.margin).unwrap();
        let theta = shadow.params.to_flat();
        let g = eval.grads.to_flat();
        let expected: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - cfg.outer_lr * d).collect();

        live.step(&mut svil_core::metaloop::NoObserver).unwrap();
        let mut want = shadow.params.clone();
        want.set_flat(&expected).unwrap();
        want.clamp_temperature();
        assert_eq!(live.params.to_flat(), want.to_flat(), "sjm={sjm}");
    }
}

#[test]
fn meta_test_loss_does_not_depend_on_the_jitter_switch() {
    let data = generate_dataset(&small_spec(2)).unwrap();
    let set = sources(&data);
    let theta = ModelParams::init(&small_encoder(), set.num_global, &set.domain_sizes(), 77).unwrap();
    let losses: Vec<(f64, Vec<f64>)> = [false, true]
        .iter()
        .map(|&sjm| {
            let cfg = MetaStepConfig { sjm, ..small_train() };
            let mut t = Trainer::new(small_encoder(), cfg, &set, 4).unwrap();
            let (l, g) = t.meta_test_step(&theta, 1).unwrap();
            (l, g.to_flat())
        })
        .collect();
    assert_eq!(losses[0].0.to_bits(), losses[1].0.to_bits());
    assert_eq!(losses[0].1, losses[1].1);
}

#[derive(Default)]
struct Timeline {
    reads: Vec<(u64, Memories)>,
}

impl StepObserver for Timeline {
    fn on_style_read(&mut self, iteration: u64, memories: &Memories) {
        self.reads.push((iteration, memories.clone()));
    }
}

#[test]
fn jitter_reads_memories_left_by_the_previous_iteration() {
    let data = generate_dataset(&small_spec(3)).unwrap();
    let set = sources(&data);
    let mut trainer = Trainer::new(small_encoder(), small_train(), &set, 8).unwrap();
    let mut obs = Timeline::default();
    let mut after = vec![trainer.memories.clone()];
    let mut versions = Vec::new();
    for _ in 0..5 {
        let rec = trainer.step(&mut obs).unwrap();
        versions.push(rec.style_memory_version);
        after.push(trainer.memories.clone());
    }
    assert_eq!(obs.reads.len(), 5);
    for (t, (iteration, seen)) in obs.reads.iter().enumerate() {
        assert_eq!(*iteration, t as u64);
        assert_eq!(seen, &after[t], "iteration {t}");
        assert_eq!(seen.style.as_ref().unwrap().version, t as u64);
        assert_eq!(versions[t], Some(t as u64));
    }
    assert_ne!(after[0], after[5]);
}

#[test]
fn training_lowers_the_loss() {
    let data = generate_dataset(&small_spec(4)).unwrap();
    let set = sources(&data);
    let cfg = MetaStepConfig {
        epochs: 6,
        iterations_per_epoch: 8,
        lr_milestones: vec![],
        ..small_train()
    };
    let out = svil_core::metaloop::run_training(&small_encoder(), &cfg, &set, None, 2, &mut svil_core::metaloop::NoObserver).unwrap();
    let first = out.epochs.first().unwrap().mean_total_loss;
    let last = out.epochs.last().unwrap().mean_total_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn domain_styles_separate_pixel_statistics() {
    for seed in 0..20 {
        let data = generate_dataset(&DatasetSpec {
            seed,
            ..DatasetSpec::default()
        })
        .unwrap();
        let c = data.spec.channels;
        let p = data.spec.pixels();
        let pixels = |d: usize, range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
            data.domain_samples(d)[range]
                .iter()
                .flat_map(|s| (0..p).map(move |k| (0..c).map(|ch| s.image[ch * p + k]).collect::<Vec<f64>>()))
                .step_by(3)
                .collect()
        };
        let a0 = pixels(0, 0..4);
        let a1 = pixels(0, 4..8);
        let b = pixels(1, 0..4);
        let within = mmd2(&a0, &a1, Kernel::RbfMedian).unwrap();
        let across = mmd2(&a0, &b, Kernel::RbfMedian).unwrap();
        assert!(across > within, "seed {seed}: {across} <= {within}");
    }
}

#[test]
fn run_writes_parseable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ExperimentKind::MultiSource, dir.path());
    let report = experiment::run(&cfg).unwrap();
    assert_eq!(report.runs.len(), 1);

    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines = parse_metrics(&text).unwrap();
    let iterations = lines.iter().filter(|l| matches!(l.record, Record::Iteration(_))).count();
    assert_eq!(iterations, cfg.train.epochs * cfg.train.iterations_per_epoch);
    for (raw, parsed) in text.lines().zip(&lines) {
        assert_eq!(serde_json::to_string(parsed).unwrap(), raw);
    }

    let stamp: experiment::Stamp = serde_json::from_slice(&std::fs::read(dir.path().join("stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp.config_sha256, cfg.hash().unwrap());
    let tsv = std::fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 2);

    let stem = experiment::dump_dataset(&cfg).unwrap();
    let eval = experiment::eval_checkpoint(&dir.path().join("checkpoints/main"), &stem, None).unwrap();
    assert_eq!(eval, report.runs[0].eval);
    assert!(dir.path().join("checkpoints/main-epoch001.json").exists());
    assert!(dir.path().join("checkpoints/main-epoch001-memories.bin").exists());
}

#[test]
fn snapshots_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small_spec(6)).unwrap();
    data.write_snapshot(&dir.path().join("data")).unwrap();
    assert_eq!(Dataset::read_snapshot(&dir.path().join("data")).unwrap(), data);

    let set = sources(&data);
    let mut trainer = Trainer::new(small_encoder(), small_train(), &set, 1).unwrap();
    trainer.step(&mut svil_core::metaloop::NoObserver).unwrap();
    trainer.params.write_checkpoint(&trainer.encoder, &dir.path().join("ckpt")).unwrap();
    let (enc, params) = ModelParams::read_checkpoint(&dir.path().join("ckpt")).unwrap();
    assert_eq!(enc, trainer.encoder);
    let bits = |p: &ModelParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&params), bits(&trainer.params));

    trainer.memories.write_snapshot(&dir.path().join("mem")).unwrap();
    assert_eq!(Memories::read_snapshot(&dir.path().join("mem")).unwrap(), trainer.memories);
}

#[test]
fn camera_split_and_style_replacement_kinds_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ExperimentKind::SingleSourceCameraSplit, dir.path());
    let report = experiment::run(&cfg).unwrap();
    assert_eq!(report.runs[0].gap_domains, vec![0, 3]);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ExperimentKind::Fig1StyleReplacement, dir.path());
    cfg.train.maml = false;
    let report = experiment::run(&cfg).unwrap();
    let names: Vec<&str> = report.runs.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["original", "stylized"]);
    let cmp = report.comparison.unwrap();
    assert_eq!(cmp.map_delta, report.runs[1].eval.map - report.runs[0].eval.map);

    cfg.train.maml = true;
    assert!(experiment::run(&cfg).unwrap_err().is_config());
}

#[test]
fn ablation_runs_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ExperimentKind::MultiSource, dir.path());
    let toggles = ["sjm".to_string(), "loss".to_string()];
    let report = experiment::ablate(&cfg, &toggles).unwrap();
    let names: Vec<&str> = report.runs.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names.len(), 4);
    let tsv = std::fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    let err = experiment::ablate(&cfg, &["sjm".to_string(), "sjm".to_string()]).unwrap_err();
    assert!(err.is_config());
}
