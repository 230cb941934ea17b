//! Saliency introspection: SmoothGrad per latent dimension, map
//! post-processing, cross-modal saliency pairing and voxel-wise group
//! contrasts.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffcore::{Tape, Var};
use crate::encoder::encode_batch;
use crate::error::{Error, Result};
use crate::model::{FusionModel, PREFIXES};
use crate::rng::substream;
use crate::stats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothGradConfig {
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            samples: 5,
            seed: 0,
        }
    }
}

const S_SMOOTHGRAD: u64 = 400;

/// SmoothGrad maps for each of `dims`: `|mean_k ∂z[dim]/∂x|` over `samples`
/// copies of `image` with i.i.d. `N(0, σ²)` pixel noise. `encoder` maps a
/// batch `[n, s, s]` to latents `[n, d_z]`. `stream` selects the noise
/// substream, e.g. the subject index.
pub fn smoothgrad_with(
    encoder: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    image: &Tensor,
    dims: &[usize],
    cfg: &SmoothGradConfig,
    stream: u64,
) -> Result<Vec<Tensor>> {
    if image.rank() != 2 {
        return Err(Error::shape("smoothgrad", image.shape(), &[0, 0]));
    }
    if cfg.samples == 0 || !(cfg.sigma >= 0.0) {
        return Err(Error::config("smoothgrad needs samples >= 1 and sigma >= 0"));
    }
    let (n, pix) = (cfg.samples, image.len());
    let mut rng = substream(cfg.seed, S_SMOOTHGRAD, stream);
    let mut batch = Vec::with_capacity(n * pix);
    for _ in 0..n {
        batch.extend(image.data().iter().map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + cfg.sigma * e
        }));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(image.shape());
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(shape, batch)?);
    let z = encoder(&mut tape, x)?;
    let zs = tape.shape(z).to_vec();
    if zs.len() != 2 || zs[0] != n {
        return Err(Error::shape("smoothgrad", &zs, &[n, 0]));
    }
    let mut out = Vec::with_capacity(dims.len());
    for &d in dims {
        if d >= zs[1] {
            return Err(Error::contract(format!("latent dimension {d} out of range 0..{}", zs[1])));
        }
        // samples are independent, so the gradient of the batch sum holds
        // each sample's own gradient
        let col = tape.slice(z, 1, d, 1)?;
        let s = tape.sum(col);
        let g = tape.backward(s)?;
        let g = g.wrt(x).expect("input is a parameter");
        let mut mean = vec![0.0; pix];
        for k in 0..n {
            mean.iter_mut().zip(&g.data()[k * pix..(k + 1) * pix]).for_each(|(m, v)| *m += v);
        }
        let map = mean.into_iter().map(|v| (v / n as f64).abs()).collect();
        out.push(Tensor::new(image.shape().to_vec(), map)?);
    }
    Ok(out)
}

/// SmoothGrad through one modality's encoder of `model`.
pub fn smoothgrad(
    model: &FusionModel,
    modality: usize,
    image: &Tensor,
    dims: &[usize],
    cfg: &SmoothGradConfig,
    stream: u64,
) -> Result<Vec<Tensor>> {
    let prefix = *PREFIXES
        .get(modality)
        .ok_or_else(|| Error::contract(format!("modality index {modality} out of range")))?;
    let enc = &model.encoder;
    if image.shape() != [enc.image_side, enc.image_side] {
        return Err(Error::shape("smoothgrad", image.shape(), &[enc.image_side, enc.image_side]));
    }
    let f = |tape: &mut Tape, x: Var| -> Result<Var> {
        let bound = model.params.bind_frozen(tape);
        Ok(encode_batch(tape, &bound, prefix, enc, x)?.latent)
    };
    smoothgrad_with(&f, image, dims, cfg, stream)
}

fn check_mask(mask: &Tensor, shape: &[usize]) -> Result<usize> {
    if mask.shape() != shape {
        return Err(Error::shape("mask", mask.shape(), shape));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("mask must be binary"));
    }
    let inside = mask.data().iter().filter(|&&m| m == 1.0).count();
    if inside == 0 {
        return Err(Error::contract("mask is empty"));
    }
    Ok(inside)
}

/// Normalised Gaussian taps on `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with zero padding.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let pass = |src: &[f64], along_rows: bool| {
        let mut dst = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let o = t as i64 - r;
                    let (sy, sx) = if along_rows { (y, x + o) } else { (y + o, x) };
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        acc += kv * src[(sy * w as i64 + sx) as usize];
                    }
                }
                dst[(y * w as i64 + x) as usize] = acc;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

pub const SALIENCY_BLUR_SIGMA: f64 = 1.5;

/// Mask, min-max rescale in-mask values to [0, 1] (constant maps become 0),
/// blur, mask again.
pub fn postprocess(raw: &Tensor, mask: &Tensor, sigma: f64) -> Result<Tensor> {
    if raw.rank() != 2 {
        return Err(Error::shape("postprocess", raw.shape(), &[0, 0]));
    }
    check_mask(mask, raw.shape())?;
    if !raw.is_finite() {
        return Err(Error::NonFinite("saliency map".into()));
    }
    let (h, w) = (raw.shape()[0], raw.shape()[1]);
    let inside = || raw.data().iter().zip(mask.data()).filter(|(_, m)| **m == 1.0).map(|(v, _)| *v);
    let lo = inside().fold(f64::INFINITY, f64::min);
    let hi = inside().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let scaled: Vec<f64> = raw
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| if *m == 1.0 && range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect();
    let blurred = gaussian_blur(&scaled, h, w, sigma);
    let out = blurred
        .iter()
        .zip(mask.data())
        .map(|(v, m)| (v * m).clamp(0.0, 1.0))
        .collect();
    Tensor::new(raw.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub subject: u64,
    pub modality: usize,
    pub dim: usize,
}

/// Per-subject scalar summary used for cross-modal pairing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingSummary {
    /// Correlate mean in-mask saliency across subjects.
    #[default]
    MeanInMask,
    /// Correlate each in-mask pixel across subjects, then average.
    VoxelwiseMean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyCorrelation {
    /// `[d1, d2]` Pearson correlations.
    #[serde(skip)]
    pub matrix: Tensor,
    pub best: (usize, usize),
    pub best_value: f64,
}

/// `maps[m][subject][dim]`: post-processed maps of modality `m`.
pub fn cross_modal_saliency_correlation(
    maps1: &[Vec<Tensor>],
    maps2: &[Vec<Tensor>],
    mask: &Tensor,
    summary: PairingSummary,
) -> Result<SaliencyCorrelation> {
    let n = maps1.len();
    if n != maps2.len() {
        return Err(Error::contract("both modalities need the same subjects"));
    }
    if n < 3 {
        return Err(Error::contract("saliency correlation needs at least three subjects"));
    }
    let (d1, d2) = (maps1[0].len(), maps2[0].len());
    if d1 == 0 || d2 == 0 || maps1.iter().any(|s| s.len() != d1) || maps2.iter().any(|s| s.len() != d2) {
        return Err(Error::contract("every subject needs the same nonempty set of dimensions"));
    }
    let inside = check_mask(mask, maps1[0][0].shape())?;
    let in_mask: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] == 1.0).collect();
    let mut matrix = vec![0.0; d1 * d2];
    match summary {
        PairingSummary::MeanInMask => {
            let summarise = |maps: &[Vec<Tensor>], d: usize| -> Vec<Vec<f64>> {
                (0..d)
                    .map(|k| {
                        maps.iter()
                            .map(|s| in_mask.iter().map(|&i| s[k].data()[i]).sum::<f64>() / inside as f64)
                            .collect()
                    })
                    .collect()
            };
            let (a, b) = (summarise(maps1, d1), summarise(maps2, d2));
            for i in 0..d1 {
                for j in 0..d2 {
                    matrix[i * d2 + j] = stats::pearson(&a[i], &b[j]);
                }
            }
        }
        PairingSummary::VoxelwiseMean => {
            for i in 0..d1 {
                for j in 0..d2 {
                    let total: f64 = in_mask
                        .iter()
                        .map(|&p| {
                            let a: Vec<f64> = maps1.iter().map(|s| s[i].data()[p]).collect();
                            let b: Vec<f64> = maps2.iter().map(|s| s[j].data()[p]).collect();
                            stats::pearson(&a, &b)
                        })
                        .sum();
                    matrix[i * d2 + j] = total / inside as f64;
                }
            }
        }
    }
    let mut best = (0, 0);
    for i in 0..d1 {
        for j in 0..d2 {
            if matrix[i * d2 + j] > matrix[best.0 * d2 + best.1] {
                best = (i, j);
            }
        }
    }
    Ok(SaliencyCorrelation {
        best_value: matrix[best.0 * d2 + best.1],
        matrix: Tensor::new(vec![d1, d2], matrix)?,
        best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// Pairs with `a > b`, ties counted as one half.
    pub u: f64,
    /// Normal approximation with tie correction; 0 when all values tie.
    pub z: f64,
    /// Two-sided p-value of `z`.
    pub p: f64,
    /// Rank-biserial correlation `2U/(|a||b|) − 1`, positive when `a` tends
    /// to be larger.
    pub rbc: f64,
}

pub fn mann_whitney_rbc(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("mann_whitney_rbc needs two nonempty samples"));
    }
    let (u2, ties) = stats::doubled_u(a, b)?;
    let pairs = a.len() as u128 * b.len() as u128;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let u = u2 as f64 / 2.0;
    let rbc = (u2 as f64 - pairs as f64) / pairs as f64;
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let z = if var > 0.0 { (u - na * nb / 2.0) / var.sqrt() } else { 0.0 };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.sf(z.abs())).min(1.0);
    Ok(MannWhitney { u, z, p, rbc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupDiffMap {
    pub rbc: Tensor,
    pub u: Tensor,
    pub z: Tensor,
    pub p: Tensor,
    /// `(row, col)` of the largest `|rbc|`; the first in row-major order wins ties.
    pub peak: (usize, usize),
    pub peak_rbc: f64,
}

/// Pixel-wise Mann-Whitney between maps with `in_a[i] == true` (group A)
/// and the rest.
pub fn group_diff_map(maps: &[Tensor], in_a: &[bool]) -> Result<GroupDiffMap> {
    if maps.len() != in_a.len() || maps.is_empty() {
        return Err(Error::contract("one group flag per saliency map required"));
    }
    let shape = maps[0].shape().to_vec();
    if shape.len() != 2 || maps.iter().any(|m| m.shape() != shape.as_slice()) {
        return Err(Error::contract("saliency maps must share one 2-D shape"));
    }
    if in_a.iter().all(|v| *v) || in_a.iter().all(|v| !*v) {
        return Err(Error::contract("both groups need at least one map"));
    }
    let pix = maps[0].len();
    let cells: Vec<MannWhitney> = (0..pix)
        .into_par_iter()
        .map(|p| {
            let a: Vec<f64> = (0..maps.len()).filter(|&i| in_a[i]).map(|i| maps[i].data()[p]).collect();
            let b: Vec<f64> = (0..maps.len()).filter(|&i| !in_a[i]).map(|i| maps[i].data()[p]).collect();
            mann_whitney_rbc(&a, &b)
        })
        .collect::<Result<_>>()?;
    let mut peak = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.rbc.abs() > cells[peak].rbc.abs() {
            peak = i;
        }
    }
    let field = |f: fn(&MannWhitney) -> f64| Tensor::new(shape.clone(), cells.iter().map(f).collect());
    Ok(GroupDiffMap {
        rbc: field(|c| c.rbc)?,
        u: field(|c| c.u)?,
        z: field(|c| c.z)?,
        p: field(|c| c.p)?,
        peak: (peak / shape[1], peak % shape[1]),
        peak_rbc: cells[peak].rbc,
    })
}

/// Indices of the largest and smallest probe weights; lowest index on ties.
pub fn select_extreme_dims(weights: &[f64]) -> Result<(usize, usize)> {
    if weights.is_empty() {
        return Err(Error::contract("no probe weights"));
    }
    let (mut hi, mut lo) = (0, 0);
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[hi] {
            hi = i;
        }
        if w < weights[lo] {
            lo = i;
        }
    }
    Ok((hi, lo))
}

/// Value at percentile `pct` (0–100, linear interpolation) of the in-mask
/// pixels of a mean saliency map.
pub fn percentile_threshold(map: &Tensor, mask: &Tensor, pct: f64) -> Result<f64> {
    check_mask(mask, map.shape())?;
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::config(format!("percentile must be in [0, 100], got {pct}")));
    }
    let mut v: Vec<f64> = map
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m == 1.0)
        .map(|(x, _)| *x)
        .collect();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    Ok(if i + 1 < v.len() { v[i] * (1.0 - f) + v[i + 1] * f } else { v[i] })
}

/// Element-wise mean of equally shaped maps.
pub fn mean_map(maps: &[&Tensor]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::contract("no maps to average"))?;
    let mut acc = vec![0.0; first.len()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("mean_map", m.shape(), first.shape()));
        }
        acc.iter_mut().zip(m.data()).for_each(|(a, v)| *a += v);
    }
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v / maps.len() as f64).collect())
}
