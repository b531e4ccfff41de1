//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgmm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cgmm::contrastive::{contrastive_loss_value, joint_loss};
use cgmm::correlation::build_neighbor_graph;
use cgmm::data::{generate, BoxCoords, Dataset, DatasetConfig, Split};
use cgmm::fusion::{roi_align_tensor, RoiConfig};
use cgmm::gradcheck::GradCheckOptions;
use cgmm::gradsuite;
use cgmm::metrics::MetricsOptions;
use cgmm::model::{ArchConfig, Cgmm, InputMask, ModelConfig};
use cgmm::nn::uniform;
use cgmm::train::{ablate, evaluate, train, AblationRow, AblationSpec, TrainConfig};
use cgmm::{Execution, Graph, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

// 1. Gradient suite.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::run("all", 100, GradCheckOptions::default(), 0, Execution::Parallel).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{}: {}", r.module, r.case, r.first_failure.clone().unwrap_or_default()))
        .collect();
    let has_e2e = results.iter().any(|r| r.case == "end_to_end" && r.trials == 100);
    check(
        failed.is_empty() && has_e2e && elapsed < Duration::from_secs(120),
        format!("{} cases x 100 trials, max rel err {worst:.2e}, {:.0?}", results.len(), elapsed),
        format!("failures {failed:?}, end-to-end present {has_e2e}, {elapsed:.0?}"),
    )
}

/// Bilinear sampling written as a sum of tent weights over every cell.
fn roi_oracle(values: &Tensor, b: &BoxCoords, cfg: &RoiConfig) -> Vec<f64> {
    let (c, h, w) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let s = cfg.samples_per_bin as f64;
    let bin_w = (b.x1 - b.x0) * w as f64 / cfg.out_width as f64;
    let bin_h = (b.y1 - b.y0) * h as f64 / cfg.out_height as f64;
    let mut out = Vec::new();
    for ch in 0..c {
        for py in 0..cfg.out_height {
            for px in 0..cfg.out_width {
                let mut total = 0.0;
                for iy in 0..cfg.samples_per_bin {
                    for ix in 0..cfg.samples_per_bin {
                        let y = b.y0 * h as f64 - 0.5 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / s;
                        let x = b.x0 * w as f64 - 0.5 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / s;
                        if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
                            continue;
                        }
                        let (y, x) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
                        for i in 0..h {
                            for j in 0..w {
                                let t = (1.0 - (y - i as f64).abs()).max(0.0) * (1.0 - (x - j as f64).abs()).max(0.0);
                                total += t * values.data()[(ch * h + i) * w + j];
                            }
                        }
                    }
                }
                out.push(total / (s * s));
            }
        }
    }
    out
}

// 2. ROI align against the brute-force oracle.
fn roi_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let shape = [rng.gen_range(1..4), rng.gen_range(3..10), rng.gen_range(3..10)];
        let values = uniform(&mut rng, &shape, 3.0);
        let (x0, y0) = (rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9));
        let b = BoxCoords::new(x0, y0, rng.gen_range(x0 + 0.01..=1.0), rng.gen_range(y0 + 0.01..=1.0)).unwrap();
        let cfg = RoiConfig {
            out_height: rng.gen_range(1..4),
            out_width: rng.gen_range(1..4),
            samples_per_bin: rng.gen_range(1..4),
        };
        let got = roi_align_tensor(&values, &b, &cfg).map_err(|e| e.to_string())?;
        for (a, o) in got.data().iter().zip(roi_oracle(&values, &b, &cfg)) {
            worst = worst.max((a - o).abs());
        }
    }
    check(worst <= 1e-12, format!("200 instances, max abs diff {worst:.1e}"), format!("max abs diff {worst:e}"))
}

// 3. Closed-form losses.
fn closed_forms() -> Outcome {
    let run = || -> cgmm::Result<(f64, f64, bool)> {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, 4], 0.7))?;
        let ce = g.cross_entropy(logits, &[0, 3, 2])?;
        let ce = g.value(ce).data()[0];
        let same = Tensor::full(&[4, 5], 0.3);
        let nt = contrastive_loss_value(&same, 0.2)?;
        let mut bit_exact = true;
        for (c, s) in [(2.0, 1.0), (0.123456789, 7.654321), (1e-300, 3.0)] {
            let lc = g.constant(Tensor::scalar(c))?;
            let ls = g.constant(Tensor::scalar(s))?;
            let j0 = joint_loss(&mut g, lc, ls, 0.0)?;
            let j1 = joint_loss(&mut g, lc, ls, 1.0)?;
            bit_exact &= g.value(j0).data()[0].to_bits() == s.to_bits() && g.value(j1).data()[0].to_bits() == c.to_bits();
        }
        Ok((ce, nt, bit_exact))
    };
    let (ce, nt, bit_exact) = run().map_err(|e| e.to_string())?;
    let (e_ce, e_nt) = ((ce - 4f64.ln()).abs(), (nt - 3f64.ln()).abs());
    check(
        e_ce <= 1e-9 && e_nt <= 1e-9 && bit_exact,
        format!("|ce - ln 4| = {e_ce:.1e}, |nt-xent - ln 3| = {e_nt:.1e}, alpha boundaries bit-exact"),
        format!("ce err {e_ce:e}, nt-xent err {e_nt:e}, alpha boundaries bit-exact {bit_exact}"),
    )
}

// 4. Graph aggregation against direct summation on generated frames.
fn aggregation_equivalence() -> Outcome {
    let cfg = DatasetConfig {
        frame_height: 32,
        frame_width: 48,
        train_frames: 100,
        standard_frames: 0,
        generalization_frames: 0,
        generalization_templates: 0,
        min_boxes: 1,
        ..DatasetConfig::default()
    };
    let data = generate(&cfg, 4, Execution::Parallel).map_err(|e| e.to_string())?;
    let model = Cgmm::new(&ModelConfig::for_dataset(&ArchConfig::default(), &cfg), 4).map_err(|e| e.to_string())?;
    let d = model.d_fused();
    let (mut worst_feat, mut worst_sum, mut worst_w): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut bad_len = 0;
    for s in &data.samples {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g).map_err(|e| e.to_string())?;
        let out = model.forward(&mut g, &p, s, &InputMask::default()).map_err(|e| e.to_string())?;
        let f1 = g.value(out.embeddings.fused).clone();
        let fin = g.value(out.final_features).clone();
        if fin.cols() != 2 * d {
            bad_len += 1;
        }
        let rows: Vec<Vec<f64>> = (0..f1.rows()).map(|i| f1.row_slice(i).to_vec()).collect();
        let mut graph = build_neighbor_graph(&Cgmm::boxes(s, &InputMask::default()), model.config.arch.correlation.max_neighbors);
        let tape_w = out.weights.map(|w| g.value(w).clone());
        model.correlation.compute_weights(&model.store, &rows, &mut graph).map_err(|e| e.to_string())?;
        let weights = graph.weights.unwrap();
        for (j, nbrs) in graph.neighbors.iter().enumerate() {
            if let Some(tw) = &tape_w {
                worst_sum = worst_sum.max((tw.row_slice(j).iter().sum::<f64>() - 1.0).abs());
                for (a, b) in tw.row_slice(j).iter().zip(&weights[j]) {
                    worst_w = worst_w.max((a - b).abs());
                }
            }
            let mut want = vec![0.0; d];
            for (&i, &w) in nbrs.iter().zip(&weights[j]) {
                for (o, f) in want.iter_mut().zip(&rows[i]) {
                    *o += w * f;
                }
            }
            want.extend_from_slice(&rows[j]);
            for (a, b) in fin.row_slice(j).iter().zip(&want) {
                worst_feat = worst_feat.max((a - b).abs());
            }
        }
    }
    check(
        worst_feat <= 1e-12 && worst_w <= 1e-12 && worst_sum <= 1e-9 && bad_len == 0,
        format!("100 frames, feature diff {worst_feat:.1e}, weight diff {worst_w:.1e}, |sum w - 1| {worst_sum:.1e}"),
        format!("feature diff {worst_feat:e}, weight diff {worst_w:e}, |sum w - 1| {worst_sum:e}, wrong widths {bad_len}"),
    )
}

fn synthetic() -> Dataset {
    generate(&DatasetConfig::default(), 42, Execution::Parallel).unwrap().into()
}

// 5. Full model, joint strategy, default configuration.
fn end_to_end(data: &Dataset) -> Outcome {
    let cfg = TrainConfig {
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let spec = AblationSpec::full();
    let out = train(data, &spec, &ArchConfig::default(), &cfg, 42, None, Execution::Parallel).map_err(|e| e.to_string())?;
    let score = |split| evaluate(&out.model, data, split, &spec.mask(), MetricsOptions::default(), Execution::Parallel).map(|r| r.f1());
    let std_f1 = score(Split::Standard).map_err(|e| e.to_string())?;
    let gen_f1 = score(Split::Generalization).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        std_f1 >= 0.90 && gen_f1 >= 0.80 && elapsed < Duration::from_secs(600),
        format!("{} epochs, standard F1 {std_f1:.4}, generalization F1 {gen_f1:.4}, {elapsed:.0?}", cfg.epochs),
        format!("standard F1 {std_f1:.4} (>= 0.90), generalization F1 {gen_f1:.4} (>= 0.80), {elapsed:.0?}"),
    )
}

// 6. Ablation ordering over three seeds.
fn ablation_direction(data: &Dataset) -> Outcome {
    let cfg = TrainConfig::default();
    let grid = AblationSpec::default_grid();
    let mut rows: Vec<AblationRow> = Vec::new();
    for seed in [1, 2, 3] {
        rows.extend(
            ablate(data, &grid, &ArchConfig::default(), &cfg, MetricsOptions::default(), seed, Execution::Parallel)
                .map_err(|e| e.to_string())?,
        );
    }
    let mut mean: BTreeMap<&str, f64> = BTreeMap::new();
    for spec in &grid {
        let scores: Vec<f64> = rows.iter().filter(|r| r.spec.name == spec.name).filter_map(AblationRow::mean_f1).collect();
        if scores.len() != 3 {
            return Err(format!("{} failed on some seed", spec.name));
        }
        mean.insert(&spec.name, scores.iter().sum::<f64>() / 3.0);
    }
    let full = mean["full"];
    let mut violated = Vec::new();
    for other in ["no_correlationnet", "no_contrastive", "no_pos"] {
        if full <= mean[other] {
            violated.push(format!("full <= {other}"));
        }
    }
    let worst = mean.iter().filter(|(k, _)| **k != "full").min_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| *k);
    if worst != Some("no_nlp") {
        violated.push(format!("worst ablation is {worst:?}"));
    }
    let table = mean.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ");
    check(violated.is_empty(), table.clone(), format!("{} [{table}]", violated.join("; ")))
}

const BIN: &str = env!("CARGO_BIN_EXE_cgmm");

const TINY: &str = r#"{
  "seed": 11,
  "dataset": {
    "frame_height": 32, "frame_width": 48,
    "train_frames": 12, "standard_frames": 4, "generalization_frames": 4,
    "train_templates": 3, "generalization_templates": 1
  },
  "train": {"epochs": 2, "pretrain_epochs": 1},
  "grid": [
    {"name": "full", "drop": [], "strategy": "joint"},
    {"name": "no_cv", "drop": ["cv"], "strategy": "joint"},
    {"name": "ft", "drop": [], "strategy": "finetune"}
  ]
}"#;

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs every command, then re-runs each from its echoed config.
fn pipeline(root: &Path, config: &Path, from_echo: bool) -> Result<(), String> {
    let cfg_for = |out: &str| -> PathBuf {
        if from_echo {
            root.parent().unwrap().join("first").join(out).join("config.json")
        } else {
            config.to_path_buf()
        }
    };
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let data = s(root.join("data"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("data", vec!["gen-data".into()]),
        ("pre", vec!["pretrain".into(), "--data".into(), data.clone()]),
        ("train", vec!["train".into(), "--data".into(), data.clone()]),
        (
            "eval",
            vec!["eval".into(), "--data".into(), data.clone(), "--checkpoint".into(), s(root.join("train/checkpoint"))],
        ),
        ("ablate", vec!["ablate".into(), "--data".into(), data.clone()]),
    ];
    for (out, mut args) in runs {
        args.extend(["--config".into(), s(cfg_for(out)), "--out".into(), s(root.join(out))]);
        let o = Command::new(BIN).args(&args).env_remove("CGMM_SEED").output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

// 7. Bit-identical outputs when re-run from the echoed configuration.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("tiny.json");
    fs::write(&config, TINY).map_err(|e| e.to_string())?;
    let (first, second) = (tmp.path().join("first"), tmp.path().join("second"));
    pipeline(&first, &config, false)?;
    pipeline(&second, &config, true)?;
    let (a, b) = (files(&first), files(&second));
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let csvs = a.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).count();
    let blobs = a.keys().filter(|k| k.ends_with("tensors.bin")).count();
    check(
        differing.is_empty() && a.len() == b.len() && csvs >= 6 && blobs == 2,
        format!("{} files identical ({csvs} CSVs, {blobs} checkpoints)", a.len()),
        format!("differing files {differing:?}, counts {} vs {}", a.len(), b.len()),
    )
}

// 8. Checkpoint round trip.
fn checkpoint_round_trip() -> Outcome {
    let cfg = DatasetConfig {
        frame_height: 32,
        frame_width: 48,
        train_frames: 8,
        standard_frames: 20,
        generalization_frames: 0,
        train_templates: 2,
        generalization_templates: 0,
        ..DatasetConfig::default()
    };
    let data: Dataset = generate(&cfg, 8, Execution::Parallel).map_err(|e| e.to_string())?.into();
    let train_cfg = TrainConfig {
        epochs: 1,
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let out = train(&data, &AblationSpec::full(), &ArchConfig::default(), &train_cfg, 8, None, Execution::Parallel)
        .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck = Checkpoint {
        model: out.model,
        optimizer: Some(out.optimizer),
        seed: 8,
    };
    save_checkpoint(tmp.path(), &ck).map_err(|e| e.to_string())?;
    let back = load_checkpoint(tmp.path()).map_err(|e| e.to_string())?;
    let mut mismatched = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for s in data.split(Split::Standard) {
        // Random pixels on top of the generated layout.
        let mut s = s.clone();
        s.frame = uniform(&mut rng, s.frame.shape(), 0.5).map(|v| v + 0.5);
        let a = ck.model.logits(&s, &InputMask::default()).map_err(|e| e.to_string())?;
        let b = back.model.logits(&s, &InputMask::default()).map_err(|e| e.to_string())?;
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        mismatched += usize::from(!same);
    }
    let state_same = back.optimizer == ck.optimizer && back.model.store.tensors() == ck.model.store.tensors();
    check(
        mismatched == 0 && state_same,
        "20 inputs bit-exact, optimizer state restored".into(),
        format!("{mismatched} of 20 forwards differ, state restored {state_same}"),
    )
}

#[test]
fn acceptance() {
    let data = synthetic();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("roi align oracle", Box::new(roi_equivalence)),
        ("closed-form losses", Box::new(closed_forms)),
        ("graph aggregation oracle", Box::new(aggregation_equivalence)),
        ("end-to-end synthetic run", Box::new(|| end_to_end(&data))),
        ("ablation direction", Box::new(|| ablation_direction(&data))),
        ("determinism", Box::new(determinism)),
        ("checkpoint round trip", Box::new(checkpoint_round_trip)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(msg) => println!("criterion {}: PASS  {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                println!("criterion {}: FAIL  {name}: {msg} [{secs:.1}s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
