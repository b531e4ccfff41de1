use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cgmm");

const TINY: &str = r#"{
  "seed": 3,
  "dataset": {
    "frame_height": 32, "frame_width": 48,
    "train_frames": 12, "standard_frames": 4, "generalization_frames": 4,
    "train_templates": 3, "generalization_templates": 1
  },
  "train": {"epochs": 1, "pretrain_epochs": 1, "eval_every_epoch": false},
  "grid": [
    {"name": "full", "drop": [], "strategy": "joint"},
    {"name": "no_nlp", "drop": ["nlp"], "strategy": "joint"}
  ]
}"#;

fn cgmm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CGMM_SEED").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(cgmm(&["gen-data", "--config", p(&config), "--out", p(&data)]));
    Workspace {
        _tmp: tmp,
        root,
        config,
        data,
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = cgmm(&["gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn gradcheck_argument_errors() {
    assert_eq!(code(&cgmm(&["gradcheck", "--module", "nonsense"])), 2);
    assert_eq!(code(&cgmm(&["gradcheck", "--trials", "0"])), 2);
}

#[test]
fn gradcheck_single_module_prints_a_table() {
    let out = ok(cgmm(&["gradcheck", "--module", "correlationnet", "--trials", "2"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("max_rel_err"));
    assert!(text.lines().skip(1).all(|l| l.starts_with("correlationnet") && l.ends_with("pass")), "{text}");
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let out = cgmm(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, TINY).unwrap();
    let seed_of = |dir: &Path| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    let a = tmp.path().join("a");
    ok(cgmm(&["gen-data", "--config", p(&cfg), "--out", p(&a)]));
    assert_eq!(seed_of(&a), 3);
    let b = tmp.path().join("b");
    let out = Command::new(BIN)
        .args(["gen-data", "--config", p(&cfg), "--out", p(&b)])
        .env("CGMM_SEED", "17")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(seed_of(&b), 17);
    let c = tmp.path().join("c");
    let out = Command::new(BIN)
        .args(["gen-data", "--config", p(&cfg), "--out", p(&c), "--seed", "5"])
        .env("CGMM_SEED", "17")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(seed_of(&c), 5);
}

#[test]
fn finetune_without_checkpoint_is_rejected() {
    let ws = workspace();
    let cfg = ws.root.join("ft.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["ablation"] = serde_json::json!({"name": "full", "drop": [], "strategy": "finetune"});
    fs::write(&cfg, v.to_string()).unwrap();
    let out = cgmm(&["train", "--config", p(&cfg), "--data", p(&ws.data), "--out", p(&ws.root.join("t"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn missing_data_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cgmm(&["eval", "--data", p(&tmp.path().join("nope")), "--checkpoint", "x", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn pretrain_train_eval_pipeline() {
    let ws = workspace();
    let pre = ws.root.join("pre");
    ok(cgmm(&["pretrain", "--config", p(&ws.config), "--data", p(&ws.data), "--out", p(&pre)]));
    assert!(pre.join("checkpoint/checkpoint.json").is_file());
    assert_eq!(csv_rows(&pre.join("loss.csv")).len(), 2);

    let cfg = ws.root.join("ft.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["ablation"] = serde_json::json!({"name": "full", "drop": [], "strategy": "finetune"});
    fs::write(&cfg, v.to_string()).unwrap();
    let tr = ws.root.join("train");
    let ck = pre.join("checkpoint");
    ok(cgmm(&["train", "--config", p(&cfg), "--data", p(&ws.data), "--checkpoint", p(&ck), "--out", p(&tr)]));
    let header = fs::read_to_string(tr.join("loss.csv")).unwrap();
    assert!(header.starts_with("epoch,step,loss,lr\n"));

    let ev = ws.root.join("eval");
    let trained = tr.join("checkpoint");
    let out = ok(cgmm(&["eval", "--config", p(&cfg), "--data", p(&ws.data), "--checkpoint", p(&trained), "--out", p(&ev)]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("generalization"));
    for split in ["standard", "generalization"] {
        let rows = csv_rows(&ev.join(format!("metrics_{split}.csv")));
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r[0] == "full-seed3" && r[1] == split));
        assert_eq!(rows[4][3], "macro");
    }
}

#[test]
fn ablate_writes_one_block_per_spec_and_split() {
    let ws = workspace();
    let out_dir = ws.root.join("ablate");
    let out = ok(cgmm(&["ablate", "--config", p(&ws.config), "--data", p(&ws.data), "--out", p(&out_dir)]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("full-seed3") && stdout.contains("no_nlp-seed3"), "{stdout}");
    let rows = csv_rows(&out_dir.join("ablation.csv"));
    assert_eq!(rows.len(), 2 * 2 * 5);
    for (spec, block) in ["full", "no_nlp"].iter().zip(rows.chunks(10)) {
        assert!(block.iter().all(|r| r[2] == *spec));
        assert_eq!(block[0][1], "standard");
        assert_eq!(block[5][1], "generalization");
    }
}

#[test]
fn eval_rejects_checkpoint_for_other_data() {
    let ws = workspace();
    let tr = ws.root.join("train");
    ok(cgmm(&["train", "--config", p(&ws.config), "--data", p(&ws.data), "--out", p(&tr)]));
    let other_cfg = ws.root.join("other.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["dataset"]["frame_width"] = serde_json::json!(40);
    fs::write(&other_cfg, v.to_string()).unwrap();
    let other = ws.root.join("other");
    ok(cgmm(&["gen-data", "--config", p(&other_cfg), "--out", p(&other)]));
    let out = cgmm(&["eval", "--data", p(&other), "--checkpoint", p(&tr.join("checkpoint")), "--out", p(&ws.root.join("e"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
