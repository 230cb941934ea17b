//! Consolidated comparison of trained runs, sorted by mean probe AUC.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use mmfuse::stats::spearman;
use serde::Serialize;

use crate::commands::{run_dirs, ProbeSummary, RunInfo, PROBE_FILE, RUN_FILE, SIMILARITY_CSV};
use crate::output::{csv_line, read_json, write_json, write_text};

pub const ABSENT: &str = "absent";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    /// Run directory name.
    pub run: String,
    pub model: String,
    pub seed: u64,
    pub preset: String,
    pub auc: [Option<f64>; 2],
    pub mean_auc: Option<f64>,
    /// Cross-modal similarity over all subjects.
    pub cka: Option<f64>,
    pub svcca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub model: String,
    pub runs: usize,
    pub auc: [Option<f64>; 2],
    pub mean_auc: Option<f64>,
    pub cka: Option<f64>,
    pub svcca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub runs: Vec<RunRow>,
    pub models: Vec<ModelRow>,
    /// Spearman correlation between run-level CKA and mean AUC; needs three
    /// runs with both values.
    pub cka_auc_spearman: Option<f64>,
}

fn similarity_cells(path: &Path) -> Result<(Option<f64>, Option<f64>)> {
    if !path.is_file() {
        return Ok((None, None));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut cka, mut svcca) = (None, None);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 || f[3] != "all" {
            continue;
        }
        let value = f[6].parse::<f64>().ok();
        match f[5] {
            "cka" => cka = value,
            "svcca" => svcca = value,
            _ => {}
        }
    }
    Ok((cka, svcca))
}

fn load_row(dir: &Path) -> Result<RunRow> {
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    let probe_path = dir.join(PROBE_FILE);
    let probe: Option<ProbeSummary> = if probe_path.is_file() { Some(read_json(&probe_path)?) } else { None };
    let auc_of = |m: usize| {
        probe
            .as_ref()
            .and_then(|p| p.modalities.iter().find(|r| r.modality == m).map(|r| r.holdout_auc))
    };
    let (cka, svcca) = similarity_cells(&dir.join(SIMILARITY_CSV))?;
    Ok(RunRow {
        run: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        model: info.model,
        seed: info.seed,
        preset: info.preset,
        auc: [auc_of(1), auc_of(2)],
        mean_auc: probe.as_ref().map(|p| p.mean_auc),
        cka,
        svcca,
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Descending by mean AUC, absent last, then by name.
fn sort_key_cmp(a: (Option<f64>, &str), b: (Option<f64>, &str)) -> std::cmp::Ordering {
    match (a.0, b.0) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.1.cmp(b.1)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(b.1),
    }
}

pub fn build(rows: Vec<RunRow>) -> Result<Report> {
    let mut runs = rows;
    runs.sort_by(|a, b| sort_key_cmp((a.mean_auc, &a.run), (b.mean_auc, &b.run)));
    let mut names: Vec<String> = runs.iter().map(|r| r.model.clone()).collect();
    names.sort();
    names.dedup();
    let mut models: Vec<ModelRow> = names
        .into_iter()
        .map(|model| {
            let mine: Vec<&RunRow> = runs.iter().filter(|r| r.model == model).collect();
            ModelRow {
                runs: mine.len(),
                auc: [mean_of(mine.iter().map(|r| r.auc[0])), mean_of(mine.iter().map(|r| r.auc[1]))],
                mean_auc: mean_of(mine.iter().map(|r| r.mean_auc)),
                cka: mean_of(mine.iter().map(|r| r.cka)),
                svcca: mean_of(mine.iter().map(|r| r.svcca)),
                model,
            }
        })
        .collect();
    models.sort_by(|a, b| sort_key_cmp((a.mean_auc, &a.model), (b.mean_auc, &b.model)));
    let paired: Vec<(f64, f64)> = runs.iter().filter_map(|r| Some((r.cka?, r.mean_auc?))).collect();
    let cka_auc_spearman = if paired.len() >= 3 {
        let (c, a): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
        Some(spearman(&c, &a)?)
    } else {
        None
    };
    Ok(Report { runs, models, cka_auc_spearman })
}

pub fn collect(root: &Path) -> Result<Report> {
    let rows = run_dirs(root)?.iter().map(|d| load_row(d)).collect::<Result<Vec<_>>>()?;
    build(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or(ABSENT.into(), |x| x.to_string())
}

fn short(v: Option<f64>) -> String {
    v.map_or(ABSENT.into(), |x| format!("{x:.4}"))
}

pub fn runs_csv(report: &Report) -> String {
    let mut out = String::from("rank,run,model,seed,preset,auc_m1,auc_m2,mean_auc,cka,svcca\n");
    for (i, r) in report.runs.iter().enumerate() {
        out.push_str(&csv_line(&[
            (i + 1).to_string(),
            r.run.clone(),
            r.model.clone(),
            r.seed.to_string(),
            r.preset.clone(),
            cell(r.auc[0]),
            cell(r.auc[1]),
            cell(r.mean_auc),
            cell(r.cka),
            cell(r.svcca),
        ]));
    }
    out
}

pub fn models_csv(report: &Report) -> String {
    let mut out = String::from("rank,model,runs,auc_m1,auc_m2,mean_auc,cka,svcca\n");
    for (i, m) in report.models.iter().enumerate() {
        out.push_str(&csv_line(&[
            (i + 1).to_string(),
            m.model.clone(),
            m.runs.to_string(),
            cell(m.auc[0]),
            cell(m.auc[1]),
            cell(m.mean_auc),
            cell(m.cka),
            cell(m.svcca),
        ]));
    }
    out
}

pub fn markdown(report: &Report) -> String {
    let mut s = String::from("# Run comparison\n\nModels sorted by mean holdout AUC across modalities.\n\n");
    s.push_str("| rank | model | runs | AUC m1 | AUC m2 | mean AUC | CKA | SVCCA |\n");
    s.push_str("|---:|---|---:|---:|---:|---:|---:|---:|\n");
    for (i, m) in report.models.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            i + 1,
            m.model,
            m.runs,
            short(m.auc[0]),
            short(m.auc[1]),
            short(m.mean_auc),
            short(m.cka),
            short(m.svcca)
        );
    }
    let _ = writeln!(
        s,
        "\nSpearman correlation between cross-modal CKA and mean AUC over runs: {}\n",
        short(report.cka_auc_spearman)
    );
    s.push_str("## Runs\n\n| rank | run | model | seed | AUC m1 | AUC m2 | mean AUC | CKA |\n");
    s.push_str("|---:|---|---|---:|---:|---:|---:|---:|\n");
    for (i, r) in report.runs.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            i + 1,
            r.run,
            r.model,
            r.seed,
            short(r.auc[0]),
            short(r.auc[1]),
            short(r.mean_auc),
            short(r.cka)
        );
    }
    s
}

pub fn write(report: &Report, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("report.csv"), &runs_csv(report))?;
    write_text(&out.join("report_models.csv"), &models_csv(report))?;
    write_text(&out.join("report.md"), &markdown(report))?;
    write_json(&out.join("report.json"), report)
}
