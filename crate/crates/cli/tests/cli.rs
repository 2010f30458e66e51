use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
kind = "multi-source"
seed = 3

[dataset]
domains = 3
identities_per_domain = 4
images_per_identity = 4
cameras_per_domain = 2
height = 4
width = 2

[encoder]
stage_channels = [4, 4]
embed_dim = 4
sjm_stage = 0

[train]
ids_per_batch = 2
images_per_id = 2
epochs = 2
iterations_per_epoch = 2
lr_milestones = [1]
"#;

fn svil(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svil"))
        .args(args)
        .env("SVIL_OUTPUT_DIR", out)
        .env_remove("SVIL_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_is_reproducible_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = svil(&["run", &cfg], out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.jsonl", "final.json", "summary.tsv", "stamp.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn seed_override_changes_the_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("seeded");
    let o = Command::new(env!("CARGO_BIN_EXE_svil"))
        .args(["run", &cfg])
        .env("SVIL_OUTPUT_DIR", &out)
        .env("SVIL_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stamp: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 17);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(dir.path(), "kind = \"multi-source\"\n");
    let o = svil(&["run", &missing], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    let unknown = write_config(dir.path(), &format!("{CONFIG}\nbogus = 1\n"));
    assert_eq!(svil(&["run", &unknown], dir.path()).status.code(), Some(2));

    let cfg = write_config(dir.path(), CONFIG);
    let o = svil(&["ablate", &cfg, "--toggles", "sjm,warp"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = svil(&["eval", "no/such/checkpoint", "no/such/dataset"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_dump_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("ablate");
    let o = svil(&["ablate", &cfg, "--toggles", "sjm,maml"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("mAP")).count(), 4);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("final.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);

    let o = svil(&["dump-dataset", &cfg], &out);
    assert_eq!(o.status.code(), Some(0));
    let stem = String::from_utf8_lossy(&o.stdout).trim().to_string();
    let ckpt = out.join("checkpoints").join("maml=on,sjm=on");
    let o = svil(&["eval", ckpt.to_str().unwrap(), &stem], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let full = report["runs"].as_array().unwrap().iter().find(|r| r["name"] == "maml=on,sjm=on").unwrap();
    assert_eq!(eval["map"], full["eval"]["map"]);
}
