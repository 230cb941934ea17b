//! Synthetic paired-modality cohorts.
//!
//! Each subject has shared factors `s` seen by both modalities and
//! specific factors seen by one. A modality is rendered as a template plus
//! a weighted sum of Gaussian-blob basis images plus pixel noise, inside a
//! disk-shaped mask. Labels depend on `s` alone.

mod container;
mod transforms;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use container::{decode_tensors, encode_tensors, load_tensors, save_tensors, MAGIC, VERSION};
pub use transforms::{augment_pair, flip, norm_stats, znormalize, AugmentFlags, NormStats};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Hc,
    Ad,
    Other,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Hc, Group::Ad, Group::Other];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Group> {
        Group::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Hc => "hc",
            Group::Ad => "ad",
            Group::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Holdout];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Split> {
        Split::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub image_side: usize,
    pub k_shared: usize,
    pub k_spec1: usize,
    pub k_spec2: usize,
    pub noise_sigma: f64,
    pub label_noise: f64,
    /// HC / AD / other proportions.
    pub group_ratios: [f64; 3],
    /// Train / val / holdout proportions, stratified by group.
    pub split_ratios: [f64; 3],
    /// Weight of the shared factors in each modality's rendering.
    pub shared_gain: [f64; 2],
    /// Weight of the specific factors in each modality's rendering.
    pub spec_gain: [f64; 2],
    /// Per-modality multiplier on `noise_sigma`.
    pub noise_gain: [f64; 2],
    /// Extra multiplier on the shared gain for AD subjects.
    pub ad_shared_boost: f64,
    /// Offset of the "other" group's shared factors, in standard deviations.
    pub other_shift: f64,
    pub pairs_per_subject: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_subjects: 1500,
            image_side: 16,
            k_shared: 4,
            k_spec1: 4,
            k_spec2: 8,
            noise_sigma: 0.3,
            label_noise: 0.05,
            group_ratios: [0.70, 0.15, 0.15],
            split_ratios: [0.70, 0.15, 0.15],
            shared_gain: [1.0, 0.6],
            spec_gain: [0.6, 1.0],
            noise_gain: [1.0, 1.0],
            ad_shared_boost: 1.0,
            other_shift: 1.5,
            pairs_per_subject: 1,
            seed: 0,
        }
    }
}

fn check_ratios(name: &str, r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("{name} must be in [0, 1] and sum to 1, got {r:?}")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.image_side < 4 || self.k_shared == 0 || self.pairs_per_subject == 0 {
            return Err(Error::config(
                "n_subjects, k_shared and pairs_per_subject must be positive and image_side at least 4",
            ));
        }
        check_ratios("group_ratios", &self.group_ratios)?;
        check_ratios("split_ratios", &self.split_ratios)?;
        let finite = [self.noise_sigma, self.label_noise, self.ad_shared_boost, self.other_shift]
            .iter()
            .chain(&self.shared_gain)
            .chain(&self.spec_gain)
            .chain(&self.noise_gain)
            .all(|v| v.is_finite());
        if !finite || self.noise_sigma < 0.0 || self.noise_gain.iter().any(|&g| g < 0.0) || !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("noise_sigma must be >= 0 and label_noise in [0, 1]"));
        }
        let counts = self.group_counts();
        if counts[0] == 0 || counts[1] == 0 {
            return Err(Error::config(format!(
                "group_ratios {:?} leave an empty HC or AD group at n_subjects = {}",
                self.group_ratios, self.n_subjects
            )));
        }
        if counts.iter().sum::<usize>() != self.n_subjects {
            return Err(Error::config(format!(
                "group_ratios {:?} cannot be realised with {} subjects",
                self.group_ratios, self.n_subjects
            )));
        }
        Ok(())
    }

    /// Exact subject counts per group; HC absorbs rounding.
    pub fn group_counts(&self) -> [usize; 3] {
        let n = self.n_subjects as f64;
        let ad = (n * self.group_ratios[1]).round() as usize;
        let other = (n * self.group_ratios[2]).round() as usize;
        [self.n_subjects.saturating_sub(ad + other), ad, other]
    }
}

/// Centered disk covering about 60% of the image.
pub fn disk_mask(side: usize) -> Tensor {
    let c = (side as f64 - 1.0) / 2.0;
    let r2 = 0.6 / std::f64::consts::PI * (side * side) as f64;
    let data = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
            if x * x + y * y <= r2 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![side, side], data).expect("mask shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    /// Per modality, `[rows, side, side]`.
    pub images: [Tensor; 2],
    pub groups: Vec<Group>,
    pub subject_ids: Vec<u64>,
    pub splits: Vec<Split>,
    pub mask: Tensor,
    /// Ground-truth shared factors per row, `[rows, k_shared]`.
    pub shared: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u16,
    pub container: String,
    pub rows: usize,
    pub image_side: usize,
    pub images: [String; 2],
    pub labels: String,
    pub ids: String,
    pub splits: String,
    pub mask: String,
    pub shared: String,
    pub group_codes: Vec<String>,
    pub split_codes: Vec<String>,
}

struct Basis {
    template: Vec<f64>,
    shared: Vec<Vec<f64>>,
    specific: Vec<Vec<f64>>,
}

fn blob(side: usize, mask: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let reach = 0.8 * (0.6 / std::f64::consts::PI).sqrt() * side as f64;
    let scale = side as f64 / 16.0;
    // rejection-sample a center inside the shrunken disk
    let (cy, cx) = loop {
        let y = rng.random_range(-reach..reach);
        let x = rng.random_range(-reach..reach);
        if x * x + y * y <= reach * reach {
            break (c + y, c + x);
        }
    };
    let width = rng.random_range(1.0..2.5) * scale;
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    (0..side * side)
        .map(|i| {
            let (dy, dx) = ((i / side) as f64 - cy, (i % side) as f64 - cx);
            sign * mask[i] * (-(dx * dx + dy * dy) / (2.0 * width * width)).exp()
        })
        .collect()
}

fn make_basis(side: usize, mask: &[f64], modality: usize, k_shared: usize, k_spec: usize, rng: &mut impl Rng) -> Basis {
    let c = (side as f64 - 1.0) / 2.0;
    let r2 = 0.6 / std::f64::consts::PI * (side * side) as f64;
    let template = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
            let t = if modality == 0 { 1.0 } else { 1.0 - 0.5 * (x * x + y * y) / r2 };
            t * mask[i]
        })
        .collect();
    let shared = (0..k_shared).map(|_| blob(side, mask, rng)).collect();
    let specific = (0..k_spec).map(|_| blob(side, mask, rng)).collect();
    Basis { template, shared, specific }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vector(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v = normal_matrix(1, k, rng);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

// stream ids
const S_BASIS: u64 = 0;
const S_SHARED: u64 = 1;
const S_GROUPS: u64 = 2;
const S_FLIPS: u64 = 3;
const S_SPEC: u64 = 4; // + modality
const S_NOISE: u64 = 6; // + modality
const S_SPLIT: u64 = 8;

pub fn generate(cfg: &GeneratorConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let side = cfg.image_side;
    let pix = side * side;
    let n = cfg.n_subjects;
    let k = cfg.k_shared;
    let mask = disk_mask(side);

    let mut rng = stream(cfg.seed, S_BASIS);
    let w = unit_vector(k, &mut rng);
    let shift_dir = unit_vector(k, &mut rng);
    let bases = [
        make_basis(side, mask.data(), 0, k, cfg.k_spec1, &mut rng),
        make_basis(side, mask.data(), 1, k, cfg.k_spec2, &mut rng),
    ];

    let mut s = normal_matrix(n, k, &mut stream(cfg.seed, S_SHARED));

    let [n_hc, n_ad, n_other] = cfg.group_counts();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, S_GROUPS));
    let mut groups = vec![Group::Hc; n];
    for &i in &order[..n_other] {
        groups[i] = Group::Other;
        for j in 0..k {
            s[i * k + j] += cfg.other_shift * shift_dir[j];
        }
    }
    let mut ranked: Vec<(f64, usize)> = order[n_other..]
        .iter()
        .map(|&i| ((0..k).map(|j| w[j] * s[i * k + j]).sum(), i))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &ranked[..n_ad] {
        groups[i] = Group::Ad;
    }
    debug_assert_eq!(groups.iter().filter(|g| **g == Group::Hc).count(), n_hc);

    // swap equal numbers of AD and HC labels so proportions are kept
    let n_flip = ((cfg.label_noise * n_ad as f64).round() as usize).min(n_hc);
    if n_flip > 0 {
        let mut frng = stream(cfg.seed, S_FLIPS);
        let mut ad: Vec<usize> = (0..n).filter(|&i| groups[i] == Group::Ad).collect();
        let mut hc: Vec<usize> = (0..n).filter(|&i| groups[i] == Group::Hc).collect();
        ad.shuffle(&mut frng);
        hc.shuffle(&mut frng);
        for (&a, &h) in ad[..n_flip].iter().zip(&hc[..n_flip]) {
            groups[a] = Group::Hc;
            groups[h] = Group::Ad;
        }
    }

    let splits = stratified_split(&groups, &cfg.split_ratios, cfg.seed);

    let rows = n * cfg.pairs_per_subject;
    let mut images = Vec::with_capacity(2);
    for (m, basis) in bases.iter().enumerate() {
        let k_spec = basis.specific.len();
        let spec = normal_matrix(rows, k_spec, &mut stream(cfg.seed, S_SPEC + m as u64));
        let mut nrng = stream(cfg.seed, S_NOISE + m as u64);
        let sigma = cfg.noise_sigma * cfg.noise_gain[m];
        let mut data = vec![0.0; rows * pix];
        for r in 0..rows {
            let i = r / cfg.pairs_per_subject;
            let img = &mut data[r * pix..(r + 1) * pix];
            img.copy_from_slice(&basis.template);
            let boost = if groups[i] == Group::Ad { cfg.ad_shared_boost } else { 1.0 };
            let g = cfg.shared_gain[m] * boost;
            for (j, b) in basis.shared.iter().enumerate() {
                let a = g * s[i * k + j];
                img.iter_mut().zip(b).for_each(|(p, &v)| *p += a * v);
            }
            for (j, b) in basis.specific.iter().enumerate() {
                let a = cfg.spec_gain[m] * spec[r * k_spec + j];
                img.iter_mut().zip(b).for_each(|(p, &v)| *p += a * v);
            }
            for (p, &mk) in img.iter_mut().zip(mask.data()) {
                let e: f64 = StandardNormal.sample(&mut nrng);
                *p = mk * (*p + sigma * e);
            }
        }
        images.push(Tensor::new(vec![rows, side, side], data)?);
    }
    let images: [Tensor; 2] = images.try_into().expect("two modalities");

    let subject_of: Vec<usize> = (0..rows).map(|r| r / cfg.pairs_per_subject).collect();
    let shared_rows: Vec<f64> = subject_of.iter().flat_map(|&i| s[i * k..(i + 1) * k].to_vec()).collect();
    Ok(PairedDataset {
        images,
        groups: subject_of.iter().map(|&i| groups[i]).collect(),
        subject_ids: subject_of.iter().map(|&i| i as u64 + 1).collect(),
        splits: subject_of.iter().map(|&i| splits[i]).collect(),
        mask,
        shared: Tensor::new(vec![rows, k], shared_rows)?,
    })
}

/// Per-group shuffle, then the first `round(r_train·n_g)` go to train and
/// the next `round(r_val·n_g)` to val.
fn stratified_split(groups: &[Group], ratios: &[f64; 3], seed: u64) -> Vec<Split> {
    let mut rng = stream(seed, S_SPLIT);
    let mut out = vec![Split::Holdout; groups.len()];
    for g in Group::ALL {
        let mut idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        idx.shuffle(&mut rng);
        let n_g = idx.len() as f64;
        let n_train = (ratios[0] * n_g).round() as usize;
        let n_val = ((ratios[1] * n_g).round() as usize).min(idx.len() - n_train);
        for (pos, &i) in idx.iter().enumerate() {
            out[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Holdout
            };
        }
    }
    out
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn side(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// First row of each subject, in row order.
    pub fn one_pair_per_subject(&self, rows: &[usize]) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        rows.iter().copied().filter(|&r| seen.insert(self.subject_ids[r])).collect()
    }

    /// Copy with each modality z-normalized by training-split statistics.
    pub fn normalized(&self) -> Result<(PairedDataset, [NormStats; 2])> {
        let train = self.rows_in(Split::Train);
        let stats = [norm_stats(&self.images[0], &train)?, norm_stats(&self.images[1], &train)?];
        let mut out = self.clone();
        for m in 0..2 {
            out.images[m] = znormalize(&self.images[m], stats[m]);
        }
        Ok((out, stats))
    }

    /// Checks alignment and that no subject spans two splits.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let side = self.side();
        for img in &self.images {
            if img.shape() != [n, side, side] {
                return Err(Error::contract(format!(
                    "modality images have shape {:?}, expected [{n}, {side}, {side}]",
                    img.shape()
                )));
            }
        }
        if self.subject_ids.len() != n || self.splits.len() != n || self.shared.rows() != n {
            return Err(Error::contract("dataset columns are not aligned"));
        }
        let mut owner = std::collections::BTreeMap::new();
        for i in 0..n {
            let prev = owner.insert(self.subject_ids[i], (self.splits[i], self.groups[i]));
            if let Some(p) = prev {
                if p != (self.splits[i], self.groups[i]) {
                    return Err(Error::contract(format!(
                        "subject {} appears in two splits or groups",
                        self.subject_ids[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let n = self.len();
        let col = |v: Vec<f64>| Tensor::new(vec![n], v).expect("column");
        vec![
            ("image.1".into(), self.images[0].clone()),
            ("image.2".into(), self.images[1].clone()),
            ("group".into(), col(self.groups.iter().map(|g| g.code() as f64).collect())),
            ("subject".into(), col(self.subject_ids.iter().map(|&s| s as f64).collect())),
            ("split".into(), col(self.splits.iter().map(|s| s.code() as f64).collect())),
            ("mask".into(), self.mask.clone()),
            ("shared".into(), self.shared.clone()),
        ]
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::contract(format!("dataset is missing tensor '{k}'")));
        let codes = |t: Tensor, what: &str| -> Result<Vec<u8>> {
            t.data()
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::contract(format!("bad {what} code {v}")))
                    }
                })
                .collect()
        };
        let images = [take("image.1")?, take("image.2")?];
        let groups = codes(take("group")?, "group")?
            .into_iter()
            .map(|c| Group::from_code(c).ok_or_else(|| Error::contract(format!("bad group code {c}"))))
            .collect::<Result<_>>()?;
        let subject_ids = take("subject")?.data().iter().map(|&v| v as u64).collect();
        let splits = codes(take("split")?, "split")?
            .into_iter()
            .map(|c| Split::from_code(c).ok_or_else(|| Error::contract(format!("bad split code {c}"))))
            .collect::<Result<_>>()?;
        let ds = PairedDataset {
            images,
            groups,
            subject_ids,
            splits,
            mask: take("mask")?,
            shared: take("shared")?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes `<stem>.mmdt` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Manifest> {
        let dir = dir.as_ref();
        let container = format!("{stem}.mmdt");
        save_tensors(dir.join(&container), &self.to_named())?;
        let manifest = Manifest {
            format: "MMDT".into(),
            version: VERSION,
            container,
            rows: self.len(),
            image_side: self.side(),
            images: ["image.1".into(), "image.2".into()],
            labels: "group".into(),
            ids: "subject".into(),
            splits: "split".into(),
            mask: "mask".into(),
            shared: "shared".into(),
            group_codes: Group::ALL.iter().map(|g| g.name().to_string()).collect(),
            split_codes: vec!["train".into(), "val".into(), "holdout".into()],
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    /// Loads from a manifest path or directly from a container path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let container = if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
            path.parent().unwrap_or(Path::new(".")).join(manifest.container)
        } else {
            path.to_path_buf()
        };
        Self::from_named(load_tensors(container)?)
    }
}

#[cfg(test)]
mod tests;
