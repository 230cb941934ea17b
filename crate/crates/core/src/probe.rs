//! Linear probes on frozen representations: penalised logistic regression,
//! ROC AUC, stratified folds and random hyperparameter search.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::rng::{stream, substream};
use crate::stats;
use crate::synthdata::{Group, PairedDataset, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L1,
    L2,
    ElasticNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Inverse regularisation strength.
    pub c: f64,
    pub penalty: Penalty,
    /// Share of L1 in the elastic-net mix.
    pub l1_ratio: f64,
    pub max_iter: usize,
    /// Stop once one iteration lowers the objective by less than this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            penalty: Penalty::L2,
            l1_ratio: 0.5,
            max_iter: 2000,
            tol: 1e-9,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config(format!("C must be positive, got {}", self.c)));
        }
        if self.penalty == Penalty::ElasticNet && !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(Error::config(format!("l1_ratio must be in [0, 1], got {}", self.l1_ratio)));
        }
        Ok(())
    }

    /// Weights of the L1 and squared-L2 parts of `R(w)`.
    fn mix(&self) -> (f64, f64) {
        match self.penalty {
            Penalty::L1 => (1.0, 0.0),
            Penalty::L2 => (0.0, 1.0),
            Penalty::ElasticNet => (self.l1_ratio, 1.0 - self.l1_ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogReg {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Objective at the starting point and after every accepted step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl LogReg {
    pub fn decision(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|i| dot(x.row(i), &self.weights) + self.bias)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Mean log-loss plus `(1/C)·R(w)`; the bias is not penalised.
pub fn logreg_objective(x: &Tensor, y: &[bool], w: &[f64], b: f64, cfg: &ProbeConfig) -> f64 {
    let n = x.rows() as f64;
    let loss = (0..x.rows())
        .map(|i| {
            let t = dot(x.row(i), w) + b;
            if y[i] {
                softplus(-t)
            } else {
                softplus(t)
            }
        })
        .sum::<f64>()
        / n;
    let (a1, a2) = cfg.mix();
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2: f64 = w.iter().map(|v| v * v).sum();
    loss + (a1 * l1 + a2 * 0.5 * l2) / cfg.c
}

fn check_inputs(x: &Tensor, y: &[bool]) -> Result<()> {
    if x.rank() != 2 || x.rows() != y.len() {
        return Err(Error::shape("fit_logreg", x.shape(), &[y.len()]));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("probe features".into()));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::contract("labels contain a single class"));
    }
    Ok(())
}

/// Proximal gradient (ISTA) with backtracking. The squared-L2 part is kept
/// in the smooth term; the L1 part is handled by soft-thresholding.
pub fn fit_logreg(x: &Tensor, y: &[bool], cfg: &ProbeConfig) -> Result<LogReg> {
    cfg.validate()?;
    check_inputs(x, y)?;
    let (n, d) = (x.rows(), x.row_len());
    let (a1, a2) = cfg.mix();
    let lam1 = a1 / cfg.c;
    let lam2 = a2 / cfg.c;

    // smooth part; fills the gradient when asked
    let smooth = |w: &[f64], b: f64, grad: Option<(&mut Vec<f64>, &mut f64)>| -> f64 {
        let mut loss = 0.0;
        let inv = 1.0 / n as f64;
        match grad {
            None => {
                for i in 0..n {
                    let t = dot(x.row(i), w) + b;
                    loss += if y[i] { softplus(-t) } else { softplus(t) };
                }
            }
            Some((gw, gb)) => {
                gw.iter_mut().for_each(|v| *v = 0.0);
                *gb = 0.0;
                for i in 0..n {
                    let row = x.row(i);
                    let t = dot(row, w) + b;
                    loss += if y[i] { softplus(-t) } else { softplus(t) };
                    let r = sigmoid(t) - if y[i] { 1.0 } else { 0.0 };
                    gw.iter_mut().zip(row).for_each(|(g, xj)| *g += r * xj);
                    *gb += r;
                }
                gw.iter_mut().zip(w).for_each(|(g, wj)| *g = *g * inv + lam2 * wj);
                *gb *= inv;
            }
        }
        loss * inv + 0.5 * lam2 * w.iter().map(|v| v * v).sum::<f64>()
    };
    let l1 = |w: &[f64]| lam1 * w.iter().map(|v| v.abs()).sum::<f64>();

    let mut w = vec![0.0; d];
    // start the bias at the base-rate log-odds
    let p = y.iter().filter(|v| **v).count() as f64 / n as f64;
    let mut b = (p / (1.0 - p)).ln();
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    let mut f = smooth(&w, b, Some((&mut gw, &mut gb)));
    let mut obj = f + l1(&w);
    let mut trace = vec![obj];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut w_new = vec![0.0; d];
    while iterations < cfg.max_iter {
        iterations += 1;
        step *= 2.0;
        let (b_new, f_new) = loop {
            for j in 0..d {
                let z = w[j] - step * gw[j];
                w_new[j] = z.signum() * (z.abs() - step * lam1).max(0.0);
            }
            let b_new = b - step * gb;
            let f_new = smooth(&w_new, b_new, None);
            let dw: f64 = (0..d).map(|j| (w_new[j] - w[j]) * gw[j]).sum::<f64>() + (b_new - b) * gb;
            let sq: f64 = (0..d).map(|j| (w_new[j] - w[j]).powi(2)).sum::<f64>() + (b_new - b).powi(2);
            if f_new <= f + dw + sq / (2.0 * step) || step < 1e-20 {
                break (b_new, f_new);
            }
            step *= 0.5;
        };
        let obj_new = f_new + l1(&w_new);
        if obj_new > obj {
            // numerical stall: the sufficient-decrease test passed on rounding noise
            break;
        }
        std::mem::swap(&mut w, &mut w_new);
        b = b_new;
        f = smooth(&w, b, Some((&mut gw, &mut gb)));
        let decrease = obj - obj_new;
        obj = obj_new;
        trace.push(obj);
        if decrease < cfg.tol {
            break;
        }
    }
    Ok(LogReg {
        weights: w,
        bias: b,
        objective: obj,
        iterations,
        trace,
    })
}

/// Area under the ROC curve as `P(s⁺ > s⁻) + ½·P(tie)`, computed from
/// midranks. The result is snapped to the 2⁻⁵² grid so that
/// `auc(s) == 1 − auc(−s)` holds bit for bit.
pub fn roc_auc(scores: &[f64], y: &[bool]) -> Result<f64> {
    if scores.len() != y.len() {
        return Err(Error::shape("roc_auc", &[scores.len()], &[y.len()]));
    }
    let pos: Vec<f64> = scores.iter().zip(y).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(y).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("roc_auc needs both classes"));
    }
    let (u2, _) = stats::doubled_u(&pos, &neg)?;
    let pairs2 = 2 * pos.len() as u128 * neg.len() as u128;
    // round(u2 / pairs2 · 2^52); ties cannot occur while pairs < 2^52
    let q = ((u2 << 53) + pairs2) / (2 * pairs2);
    Ok(q as f64 / (1u64 << 52) as f64)
}

/// Fold id per sample; each class is shuffled and dealt round-robin.
pub fn stratified_folds(y: &[bool], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    if k < 2 {
        return Err(Error::config("need at least two folds"));
    }
    let mut folds = vec![0; y.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if idx.len() < k {
            return Err(Error::contract(format!(
                "class {} has {} samples, fewer than {k} folds",
                u8::from(class),
                idx.len()
            )));
        }
        idx.shuffle(rng);
        for (pos, &i) in idx.iter().enumerate() {
            folds[i] = pos % k;
        }
    }
    Ok(folds)
}

/// Per-feature standardisation fitted on one set and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.row_len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                var[j] += (x.row(i)[j] - mean[j]).powi(2);
            }
        }
        // constant features map to zero
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) * self.scale[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub c_min: f64,
    pub c_max: f64,
    pub penalties: Vec<Penalty>,
    pub iterations: usize,
    pub folds: usize,
    /// Solver settings shared by every draw.
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            c_min: 1e-6,
            c_max: 1e3,
            penalties: vec![Penalty::L1, Penalty::L2, Penalty::ElasticNet],
            iterations: 500,
            folds: 5,
            max_iter: 500,
            tol: 1e-7,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_min > 0.0 && self.c_min <= self.c_max) || self.penalties.is_empty() || self.iterations == 0 {
            return Err(Error::config("search space needs 0 < c_min <= c_max, a penalty and iterations > 0"));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> ProbeConfig {
        let c = if self.c_min == self.c_max {
            self.c_min
        } else {
            rng.random_range(self.c_min.ln()..=self.c_max.ln()).exp()
        };
        let penalty = self.penalties[rng.random_range(0..self.penalties.len())];
        let l1_ratio = rng.random_range(0.0..=1.0);
        ProbeConfig {
            c,
            penalty,
            l1_ratio,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub best: ProbeConfig,
    pub cv_auc: f64,
    /// Index of the winning draw.
    pub draw: usize,
}

// probe streams
const S_FOLDS: u64 = 300;
const S_DRAWS: u64 = 301;

/// Mean AUC over stratified folds, z-scoring with training-fold statistics.
pub fn cross_val_auc(x: &Tensor, y: &[bool], folds: &[usize], k: usize, cfg: &ProbeConfig) -> Result<f64> {
    let mut total = 0.0;
    for f in 0..k {
        let tr: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        let te: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        let std = Standardizer::fit(&x.select_rows(&tr));
        let ytr: Vec<bool> = tr.iter().map(|&i| y[i]).collect();
        let yte: Vec<bool> = te.iter().map(|&i| y[i]).collect();
        let model = fit_logreg(&std.apply(&x.select_rows(&tr)), &ytr, cfg)?;
        total += roc_auc(&model.decision(&std.apply(&x.select_rows(&te))), &yte)?;
    }
    Ok(total / k as f64)
}

/// Random search; each draw has its own RNG substream so the winner does
/// not depend on evaluation order. Ties go to the earlier draw.
pub fn search_hyperparams(x: &Tensor, y: &[bool], space: &SearchSpace, seed: u64) -> Result<SearchResult> {
    space.validate()?;
    check_inputs(x, y)?;
    let folds = stratified_folds(y, space.folds, &mut stream(seed, S_FOLDS))?;
    let scored: Vec<(usize, ProbeConfig, f64)> = (0..space.iterations)
        .into_par_iter()
        .map(|i| {
            let cfg = space.draw(&mut substream(seed, S_DRAWS, i as u64));
            cross_val_auc(x, y, &folds, space.folds, &cfg).map(|s| (i, cfg, s))
        })
        .collect::<Result<_>>()?;
    let (draw, best, cv_auc) = scored
        .into_iter()
        .fold(None, |acc: Option<(usize, ProbeConfig, f64)>, cur| match acc {
            Some(a) if a.2 >= cur.2 => Some(a),
            _ => Some(cur),
        })
        .expect("at least one draw");
    Ok(SearchResult { best, cv_auc, draw })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub search: SearchResult,
    pub holdout_auc: f64,
    /// Weights of the probe refitted on the full training set.
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Search on the training set, refit the winner on all of it, score the
/// holdout set.
pub fn evaluate_latents(
    z_train: &Tensor,
    y_train: &[bool],
    z_hold: &Tensor,
    y_hold: &[bool],
    space: &SearchSpace,
    seed: u64,
) -> Result<ProbeResult> {
    let search = search_hyperparams(z_train, y_train, space, seed)?;
    let std = Standardizer::fit(z_train);
    let model = fit_logreg(&std.apply(z_train), y_train, &search.best)?;
    let holdout_auc = roc_auc(&model.decision(&std.apply(z_hold)), y_hold)?;
    Ok(ProbeResult {
        search,
        holdout_auc,
        weights: model.weights,
        bias: model.bias,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationReport {
    /// One entry per modality.
    pub modalities: Vec<ProbeResult>,
    /// Mean holdout AUC across modalities.
    pub mean_auc: f64,
}

/// Rows with a binary label (HC vs AD), one pair per subject.
pub fn labelled_rows(data: &PairedDataset, split: Split) -> (Vec<usize>, Vec<bool>) {
    let rows: Vec<usize> = data
        .one_pair_per_subject(&data.rows_in(split))
        .into_iter()
        .filter(|&r| data.groups[r] != Group::Other)
        .collect();
    let y = rows.iter().map(|&r| data.groups[r] == Group::Ad).collect();
    (rows, y)
}

/// Rejects datasets where a subject appears in both splits.
pub fn check_disjoint(data: &PairedDataset, a: Split, b: Split) -> Result<()> {
    let ids_a: std::collections::BTreeSet<u64> = data.rows_in(a).iter().map(|&r| data.subject_ids[r]).collect();
    if let Some(&r) = data.rows_in(b).iter().find(|&&r| ids_a.contains(&data.subject_ids[r])) {
        return Err(Error::contract(format!(
            "subject {} appears in both {a:?} and {b:?} splits",
            data.subject_ids[r]
        )));
    }
    Ok(())
}

/// Frozen latents of both modalities for `rows`, after training-split
/// normalisation.
pub fn dataset_latents(model: &FusionModel, data: &PairedDataset, rows: &[usize]) -> Result<[Tensor; 2]> {
    let (norm, _) = data.normalized()?;
    Ok([
        model.embed(0, &norm.images[0].select_rows(rows))?,
        model.embed(1, &norm.images[1].select_rows(rows))?,
    ])
}

pub fn evaluate_representation(
    model: &FusionModel,
    data: &PairedDataset,
    space: &SearchSpace,
    seed: u64,
) -> Result<RepresentationReport> {
    check_disjoint(data, Split::Train, Split::Holdout)?;
    let (tr, ytr) = labelled_rows(data, Split::Train);
    let (ho, yho) = labelled_rows(data, Split::Holdout);
    let ztr = dataset_latents(model, data, &tr)?;
    let zho = dataset_latents(model, data, &ho)?;
    let modalities = (0..2)
        .map(|m| evaluate_latents(&ztr[m], &ytr, &zho[m], &yho, space, seed))
        .collect::<Result<Vec<_>>>()?;
    let mean_auc = modalities.iter().map(|r| r.holdout_auc).sum::<f64>() / 2.0;
    Ok(RepresentationReport { modalities, mean_auc })
}

#[cfg(test)]
mod tests;
