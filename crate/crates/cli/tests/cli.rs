use std::fs;
use std::path::Path;
use std::process::Command;

use mmfuse::probe::{evaluate_representation, SearchSpace};
use mmfuse::{generate, FusionModel, GeneratorConfig};
use mmfuse_cli::{commands, RunConfig};
use tempfile::TempDir;

const TINY: &str = r#"{
  "generator": {"n_subjects": 120},
  "encoder": {"d_z": 6, "d_loc": 8, "hidden": [16]},
  "train": {"epochs": 2},
  "probe": {"iterations": 4},
  "saliency": {"max_subjects": 8}
}"#;

fn mmfuse(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mmfuse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(dir: &Path, args: &[&str]) {
    let (code, err) = mmfuse(dir, args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

fn workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("tiny.json"), TINY).unwrap();
    ok(tmp.path(), &["--config", "tiny.json", "--out", "data", "generate"]);
    tmp
}

#[test]
fn generate_writes_parseable_manifest_and_config_echo() {
    let tmp = workspace();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("data/data.json")).unwrap()).unwrap();
    assert_eq!(manifest["rows"], 120);
    let echoed = tmp.path().join("data/generate.config.json");
    let cfg = RunConfig::load(&echoed).unwrap();
    assert_eq!(cfg.generator.n_subjects, 120);
    // re-running from the echo reproduces the data
    ok(tmp.path(), &["--config", "data/generate.config.json", "--out", "again", "generate"]);
    assert_eq!(
        fs::read(tmp.path().join("data/data.mmdt")).unwrap(),
        fs::read(tmp.path().join("again/data.mmdt")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_data() {
    let tmp = workspace();
    ok(tmp.path(), &["--config", "tiny.json", "--seed", "3", "--out", "other", "generate"]);
    assert_ne!(
        fs::read(tmp.path().join("data/data.mmdt")).unwrap(),
        fs::read(tmp.path().join("other/data.mmdt")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = workspace();
    fs::write(tmp.path().join("bad.json"), "{\n  \"seed\": 1,\n  \"train\": {\n").unwrap();
    let (code, err) = mmfuse(tmp.path(), &["--config", "bad.json", "--out", "x", "generate"]);
    assert_eq!(code, 2);
    assert!(err.contains("line"), "{err}");
    fs::write(tmp.path().join("unknown.json"), r#"{"trian": {}}"#).unwrap();
    let (code, err) = mmfuse(tmp.path(), &["--config", "unknown.json", "--out", "x", "generate"]);
    assert_eq!(code, 2);
    assert!(err.contains("trian"), "{err}");
    let (code, err) = mmfuse(
        tmp.path(),
        &["--config", "tiny.json", "--out", "r", "train", "--data", "data/data.json", "--preset", "XYZ"],
    );
    assert_eq!(code, 2);
    assert!(err.contains("CL-CS") && err.contains("Supervised"), "{err}");
    let (code, _) = mmfuse(tmp.path(), &["generate"]);
    assert_eq!(code, 2);
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let tmp = workspace();
    let (code, err) = mmfuse(tmp.path(), &["--config", "tiny.json", "--out", "r", "train", "--data", "missing.json"]);
    assert_eq!(code, 1, "{err}");
    let (code, _) = mmfuse(tmp.path(), &["probe", "--model", "nowhere", "--data", "data/data.json"]);
    assert_eq!(code, 1);
}

fn history_terms(path: &Path) -> Vec<(usize, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].to_string())
        })
        .collect()
}

#[test]
fn history_has_one_row_per_epoch_and_term() {
    let tmp = workspace();
    ok(tmp.path(), &["--config", "tiny.json", "--out", "s", "train", "--data", "data/data.json", "--preset", "S"]);
    let rows = history_terms(&tmp.path().join("s/history.csv"));
    assert_eq!(rows.len(), 2 * 2);
    ok(tmp.path(), &["--config", "tiny.json", "--out", "sae", "train", "--data", "data/data.json", "--preset", "S-AE"]);
    let rows = history_terms(&tmp.path().join("sae/history.csv"));
    assert_eq!(rows.len(), 2 * 4);
    for m in ["recon:1", "recon:2"] {
        assert_eq!(rows.iter().filter(|(_, t)| t == m).count(), 2);
    }
}

#[test]
fn evaluation_commands_emit_their_reports() {
    let tmp = workspace();
    let p = tmp.path();
    ok(p, &["--config", "tiny.json", "--out", "runs/s", "train", "--data", "data/data.json", "--preset", "S"]);
    ok(p, &["--config", "tiny.json", "probe", "--model", "runs/s", "--data", "data/data.json"]);
    ok(p, &["--config", "tiny.json", "similarity", "--model", "runs/s", "--data", "data/data.json"]);
    ok(p, &["--config", "tiny.json", "saliency", "--model", "runs/s", "--data", "data/data.json"]);

    let probe = fs::read_to_string(p.join("runs/s/probe.csv")).unwrap();
    assert_eq!(probe.lines().count(), 3);
    assert!(probe.lines().nth(1).unwrap().starts_with("S,0,S,1,"));

    let sim = fs::read_to_string(p.join("runs/s/similarity.csv")).unwrap();
    // all, hc, ad, other; two metrics each
    assert_eq!(sim.lines().count(), 1 + 4 * 2);
    let mut cells: Vec<(String, String)> = sim
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].to_string(), f[5].to_string())
        })
        .collect();
    let n = cells.len();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), n);

    let sal = p.join("runs/s/saliency");
    for m in 1..=2 {
        let pgms = fs::read_dir(&sal)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.starts_with(&format!("m{m}_dim")) && name.ends_with(".pgm")
            })
            .count();
        assert_eq!(pgms, 6);
    }
    let summary: commands::SaliencySummary = serde_json::from_str(&fs::read_to_string(p.join("runs/s/saliency.json")).unwrap()).unwrap();
    assert!(summary.pair.m1_dim < 6 && summary.pair.m2_dim < 6);
    assert_eq!(summary.contrasts.len(), 4);
    assert_eq!(summary.percentile, 90.0);
    let pgm = fs::read(sal.join("m1_dim00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);
}

#[test]
fn report_marks_missing_metrics_absent() {
    let tmp = workspace();
    let p = tmp.path();
    ok(p, &["--config", "tiny.json", "--out", "runs/a", "train", "--data", "data/data.json", "--preset", "S"]);
    ok(p, &["--config", "tiny.json", "--out", "runs/b", "train", "--data", "data/data.json", "--preset", "L"]);
    ok(p, &["--config", "tiny.json", "probe", "--model", "runs/b", "--data", "data/data.json"]);
    ok(p, &["report", "runs"]);
    let csv = fs::read_to_string(p.join("runs/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,b,L,"));
    assert!(lines[2].starts_with("2,a,S,") && lines[2].contains("absent"));
    assert!(fs::read_to_string(p.join("runs/report.md")).unwrap().contains("absent"));
}

#[test]
fn commands_are_byte_reproducible() {
    let tmp = workspace();
    let p = tmp.path();
    for run in ["r1", "r2"] {
        let out = format!("runs/{run}");
        ok(p, &["--config", "tiny.json", "--out", &out, "train", "--data", "data/data.json", "--preset", "CL-CS"]);
        ok(p, &["--config", "tiny.json", "probe", "--model", &out, "--data", "data/data.json"]);
        ok(p, &["--config", "tiny.json", "similarity", "--model", &out, "--data", "data/data.json"]);
        ok(p, &["--config", "tiny.json", "saliency", "--model", &out, "--data", "data/data.json"]);
    }
    for file in ["model.mmdt", "history.csv", "run.json", "probe.json", "similarity.csv", "saliency.json", "saliency/m2_dim03.csv"] {
        assert_eq!(
            fs::read(p.join("runs/r1").join(file)).unwrap(),
            fs::read(p.join("runs/r2").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = workspace();
    let p = tmp.path();
    ok(p, &["--config", "tiny.json", "--out", "run", "train", "--data", "data/data.json", "--preset", "S"]);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = format!("eval{threads}");
        let status = Command::new(env!("CARGO_BIN_EXE_mmfuse"))
            .current_dir(p)
            .env("MMFUSE_THREADS", threads)
            .args(["--config", "tiny.json", "--out", &out, "saliency", "--model", "run", "--data", "data/data.json"])
            .output()
            .unwrap();
        assert!(status.status.success());
        outputs.push(fs::read(p.join(&out).join("saliency.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn trained_similarity_model_beats_untrained_encoder() {
    let enc = mmfuse::EncoderConfig::default();
    let space = SearchSpace { iterations: 10, max_iter: 300, ..Default::default() };
    let mut wins = 0;
    for seed in 0..5 {
        let data = generate(&GeneratorConfig { seed, ..Default::default() }).unwrap();
        let graph = mmfuse::ObjectiveGraph::preset("S").unwrap();
        let untrained = FusionModel::init(&enc, &graph, seed).unwrap();
        let cfg = mmfuse::TrainConfig { epochs: 20, seed, preset: "S".into(), ..Default::default() };
        let trained = mmfuse::train(&cfg, &enc, &data).unwrap().model;
        let before = evaluate_representation(&untrained, &data, &space, seed).unwrap().mean_auc;
        let after = evaluate_representation(&trained, &data, &space, seed).unwrap().mean_auc;
        wins += usize::from(after > before);
    }
    assert!(wins >= 4, "trained S beat the untrained encoder in {wins}/5 seeds");
}
