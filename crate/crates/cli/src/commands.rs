//! One function per subcommand. Every command writes its resolved config as
//! `<command>.config.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmfuse::introspect::{
    cross_modal_saliency_correlation, group_diff_map, mean_map, percentile_threshold, postprocess,
    select_extreme_dims, smoothgrad,
};
use mmfuse::optim::{history_csv, train_with_hook};
use mmfuse::probe::{dataset_latents, evaluate_representation, fit_logreg, labelled_rows, ProbeConfig, Standardizer};
use mmfuse::similarity::group_similarity_report;
use mmfuse::{generate as generate_data, FusionModel, Group, PairedDataset, Split, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{csv_line, read_json, write_heatmap, write_json, write_text};

pub const TRAIN_CONFIG: &str = "train.config.json";
pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.mmdt";
pub const HISTORY_FILE: &str = "history.csv";
pub const PROBE_FILE: &str = "probe.json";
pub const PROBE_CSV: &str = "probe.csv";
pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const SALIENCY_DIR: &str = "saliency";
pub const SALIENCY_FILE: &str = "saliency.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn echo_config(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(format!("{command}.config.json")), &cfg.to_json())
}

fn load_data(path: &Path) -> Result<PairedDataset> {
    PairedDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Provenance of a trained run, shared by every report it feeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub seed: u64,
    pub preset: String,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_bound: Option<f64>,
}

/// A trained run directory: its training config, provenance and weights.
pub struct Run {
    pub config: RunConfig,
    pub info: RunInfo,
    pub model: FusionModel,
}

pub fn load_run(dir: &Path) -> Result<Run> {
    let config: RunConfig = read_json(&dir.join(TRAIN_CONFIG))?;
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    let model = FusionModel::load(&config.encoder, dir.join(MODEL_FILE))
        .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    Ok(Run { config, info, model })
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let data = generate_data(&cfg.generator)?;
    data.save(out, "data")?;
    echo_config(out, "generate", cfg)
}

pub fn train(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<RunInfo> {
    let data = load_data(data_path)?;
    create_dir(out)?;
    echo_config(out, "train", cfg)?;
    let mut hook = |epoch: usize, model: &FusionModel| model.save(out.join(format!("model.epoch{epoch:04}.mmdt")));
    let outcome = train_with_hook(&cfg.train, &cfg.encoder, &data, &mut hook)
        .with_context(|| format!("training {}", cfg.model_name()))?;
    outcome.model.save(out.join(MODEL_FILE))?;
    write_text(&out.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    let info = RunInfo {
        model: cfg.model_name(),
        seed: cfg.seed,
        preset: cfg.preset_label(),
        epochs: cfg.train.epochs,
        steps: outcome.step_losses.len(),
        final_loss: outcome.step_losses.last().copied(),
        final_bound: outcome.step_bounds.last().copied(),
    };
    write_json(&out.join(RUN_FILE), &info)?;
    Ok(info)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityProbe {
    /// 1-based modality index.
    pub modality: usize,
    pub cv_auc: f64,
    pub holdout_auc: f64,
    pub c: f64,
    pub penalty: String,
    pub l1_ratio: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub model: String,
    pub seed: u64,
    pub preset: String,
    pub mean_auc: f64,
    pub modalities: Vec<ModalityProbe>,
}

pub fn probe(cfg: &RunConfig, run_dir: &Path, data_path: &Path, out: &Path) -> Result<ProbeSummary> {
    let run = load_run(run_dir)?;
    let data = load_data(data_path)?;
    create_dir(out)?;
    echo_config(out, "probe", cfg)?;
    let report = evaluate_representation(&run.model, &data, &cfg.probe, cfg.seed)?;
    let summary = ProbeSummary {
        model: run.info.model.clone(),
        seed: run.info.seed,
        preset: run.info.preset.clone(),
        mean_auc: report.mean_auc,
        modalities: report
            .modalities
            .iter()
            .enumerate()
            .map(|(m, r)| ModalityProbe {
                modality: m + 1,
                cv_auc: r.search.cv_auc,
                holdout_auc: r.holdout_auc,
                c: r.search.best.c,
                penalty: serde_json::to_value(r.search.best.penalty)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                l1_ratio: r.search.best.l1_ratio,
                weights: r.weights.clone(),
                bias: r.bias,
            })
            .collect(),
    };
    write_json(&out.join(PROBE_FILE), &summary)?;
    let mut csv = String::from("model,seed,preset,modality,cv_auc,holdout_auc,c,penalty,l1_ratio\n");
    for m in &summary.modalities {
        csv.push_str(&csv_line(&[
            summary.model.clone(),
            summary.seed.to_string(),
            summary.preset.clone(),
            m.modality.to_string(),
            m.cv_auc.to_string(),
            m.holdout_auc.to_string(),
            m.c.to_string(),
            m.penalty.clone(),
            m.l1_ratio.to_string(),
        ]));
    }
    write_text(&out.join(PROBE_CSV), &csv)?;
    Ok(summary)
}

/// Cross-modal CKA and SVCCA over one pair per subject from every split.
pub fn similarity(cfg: &RunConfig, run_dir: &Path, data_path: &Path, out: &Path) -> Result<mmfuse::SimilarityReport> {
    let run = load_run(run_dir)?;
    let data = load_data(data_path)?;
    create_dir(out)?;
    echo_config(out, "similarity", cfg)?;
    let rows = data.one_pair_per_subject(&(0..data.len()).collect::<Vec<_>>());
    let [z1, z2] = dataset_latents(&run.model, &data, &rows)?;
    let groups: Vec<Group> = rows.iter().map(|&r| data.groups[r]).collect();
    let report = group_similarity_report(&z1, &z2, &groups)?;
    let mut csv = String::from("model,seed,preset,group,n,metric,value\n");
    for g in &report.groups {
        for (metric, value) in [("cka", g.cka), ("svcca", g.svcca)] {
            csv.push_str(&csv_line(&[
                run.info.model.clone(),
                run.info.seed.to_string(),
                run.info.preset.clone(),
                g.group.clone(),
                g.n.to_string(),
                metric.to_string(),
                value.map_or("absent".into(), |v| v.to_string()),
            ]));
        }
    }
    write_text(&out.join(SIMILARITY_CSV), &csv)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPair {
    pub m1_dim: usize,
    pub m2_dim: usize,
    pub correlation: f64,
    /// Display thresholds of the pair's mean maps at the configured percentile.
    pub m1_threshold: f64,
    pub m2_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContrast {
    pub modality: usize,
    pub dim: usize,
    /// "positive" or "negative" probe weight.
    pub weight_sign: String,
    pub weight: f64,
    /// `[row, col]` of the largest |rbc| (AD vs HC).
    pub peak: [usize; 2],
    pub peak_rbc: f64,
    pub peak_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub model: String,
    pub seed: u64,
    pub preset: String,
    pub subjects: usize,
    pub percentile: f64,
    pub pair: SaliencyPair,
    /// `matrix[a][b]`: correlation of modality-1 dim `a` with modality-2 dim `b`.
    pub matrix: Vec<Vec<f64>>,
    pub contrasts: Vec<GroupContrast>,
}

/// Probe weights for dimension selection: a default-strength L2 probe on
/// standardized training latents.
fn selection_weights(model: &FusionModel, data: &PairedDataset) -> Result<[Vec<f64>; 2]> {
    let (rows, y) = labelled_rows(data, Split::Train);
    let z = dataset_latents(model, data, &rows)?;
    let fit = |m: usize| -> Result<Vec<f64>> {
        let std = Standardizer::fit(&z[m]);
        Ok(fit_logreg(&std.apply(&z[m]), &y, &ProbeConfig::default())?.weights)
    };
    Ok([fit(0)?, fit(1)?])
}

/// Keeps at most `cap` rows (0 means all), alternating AD and HC so that
/// both groups survive the cap; the result stays in dataset order.
fn capped_rows(rows: &[usize], is_ad: &[bool], cap: usize) -> Vec<usize> {
    if cap == 0 || cap >= rows.len() {
        return rows.to_vec();
    }
    let ad: Vec<usize> = rows.iter().zip(is_ad).filter(|(_, a)| **a).map(|(r, _)| *r).collect();
    let hc: Vec<usize> = rows.iter().zip(is_ad).filter(|(_, a)| !**a).map(|(r, _)| *r).collect();
    let mut kept = Vec::with_capacity(cap);
    let (mut a, mut h) = (ad.iter(), hc.iter());
    while kept.len() < cap {
        let before = kept.len();
        kept.extend(a.next());
        if kept.len() < cap {
            kept.extend(h.next());
        }
        if kept.len() == before {
            break;
        }
    }
    kept.sort_unstable();
    kept
}

pub fn saliency(cfg: &RunConfig, run_dir: &Path, data_path: &Path, out: &Path) -> Result<SaliencySummary> {
    let run = load_run(run_dir)?;
    let data = load_data(data_path)?;
    let sc = &cfg.saliency;
    let dir = out.join(SALIENCY_DIR);
    create_dir(&dir)?;
    echo_config(out, "saliency", cfg)?;
    let (all, is_ad) = labelled_rows(&data, Split::Holdout);
    let rows = capped_rows(&all, &is_ad, sc.max_subjects);
    let n_ad = rows.iter().filter(|r| data.groups[**r] == Group::Ad).count();
    if rows.len() < 3 || n_ad == 0 || n_ad == rows.len() {
        bail!(
            "saliency needs at least three holdout subjects covering AD and HC, found {} ({n_ad} AD)",
            rows.len()
        );
    }
    let (norm, _) = data.normalized()?;
    let d_z = run.model.encoder.d_z;
    let dims: Vec<usize> = (0..d_z).collect();
    let side = data.side();
    // maps[m][subject][dim]
    let maps: Vec<Vec<Vec<Tensor>>> = (0..2)
        .map(|m| {
            rows.par_iter()
                .map(|&r| -> mmfuse::Result<Vec<Tensor>> {
                    let img = Tensor::new(vec![side, side], norm.images[m].row(r).to_vec())?;
                    let stream = data.subject_ids[r] * 2 + m as u64;
                    smoothgrad(&run.model, m, &img, &dims, &sc.smoothgrad, stream)?
                        .iter()
                        .map(|raw| postprocess(raw, &data.mask, sc.blur_sigma))
                        .collect()
                })
                .collect::<mmfuse::Result<Vec<_>>>()
        })
        .collect::<mmfuse::Result<Vec<_>>>()?;

    let mut means = Vec::with_capacity(2);
    for (m, subjects) in maps.iter().enumerate() {
        let per_dim: Vec<Tensor> = (0..d_z)
            .map(|d| mean_map(&subjects.iter().map(|s| &s[d]).collect::<Vec<_>>()))
            .collect::<mmfuse::Result<_>>()?;
        for (d, t) in per_dim.iter().enumerate() {
            write_heatmap(&dir, &format!("m{}_dim{d:02}", m + 1), t, 0.0, 1.0)?;
        }
        means.push(per_dim);
    }

    let corr = cross_modal_saliency_correlation(&maps[0], &maps[1], &data.mask, sc.summary)?;
    let (a, b) = corr.best;
    let pair = SaliencyPair {
        m1_dim: a,
        m2_dim: b,
        correlation: corr.best_value,
        m1_threshold: percentile_threshold(&means[0][a], &data.mask, sc.percentile)?,
        m2_threshold: percentile_threshold(&means[1][b], &data.mask, sc.percentile)?,
    };

    let weights = selection_weights(&run.model, &data)?;
    let is_ad: Vec<bool> = rows.iter().map(|&r| data.groups[r] == Group::Ad).collect();
    let mut contrasts = Vec::new();
    for m in 0..2 {
        let (pos, neg) = select_extreme_dims(&weights[m])?;
        for (dim, sign) in [(pos, "positive"), (neg, "negative")] {
            let per_subject: Vec<Tensor> = maps[m].iter().map(|s| s[dim].clone()).collect();
            let diff = group_diff_map(&per_subject, &is_ad)?;
            write_heatmap(&dir, &format!("m{}_rbc_{sign}_dim{dim:02}", m + 1), &diff.rbc, -1.0, 1.0)?;
            contrasts.push(GroupContrast {
                modality: m + 1,
                dim,
                weight_sign: sign.into(),
                weight: weights[m][dim],
                peak: [diff.peak.0, diff.peak.1],
                peak_rbc: diff.peak_rbc,
                peak_p: diff.p.at2(diff.peak.0, diff.peak.1),
            });
        }
    }

    let summary = SaliencySummary {
        model: run.info.model.clone(),
        seed: run.info.seed,
        preset: run.info.preset.clone(),
        subjects: rows.len(),
        percentile: sc.percentile,
        pair,
        matrix: (0..d_z).map(|i| corr.matrix.row(i).to_vec()).collect(),
        contrasts,
    };
    write_json(&out.join(SALIENCY_FILE), &summary)?;
    Ok(summary)
}

/// Subdirectories of `root` holding a `run.json`, sorted by name.
pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RUN_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
