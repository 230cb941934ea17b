use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and (population) std over every pixel of the listed rows of
/// `images: [N, ...]`. Callers pass training rows only.
pub fn norm_stats(images: &Tensor, rows: &[usize]) -> Result<NormStats> {
    if rows.is_empty() {
        return Err(Error::contract("normalization statistics need at least one row"));
    }
    let count = (rows.len() * images.row_len()) as f64;
    let mean = rows.iter().flat_map(|&r| images.row(r)).sum::<f64>() / count;
    let var = rows
        .iter()
        .flat_map(|&r| images.row(r))
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    Ok(NormStats { mean, std: var.sqrt() })
}

pub fn znormalize(images: &Tensor, stats: NormStats) -> Tensor {
    let sd = stats.std.max(STD_FLOOR);
    images.map(|v| (v - stats.mean) / sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    /// Side of the random crop, pasted back centered on a zero canvas.
    pub crop: Option<usize>,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            crop: Some(14),
        }
    }
}

impl AugmentFlags {
    pub fn off() -> Self {
        Self {
            hflip: false,
            vflip: false,
            crop: None,
        }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        match self.crop {
            Some(c) if c == 0 || c > side => {
                Err(Error::config(format!("crop side {c} does not fit in a {side}x{side} image")))
            }
            _ => Ok(()),
        }
    }
}

/// Mirrors a square image left-right (`horizontal`) and/or top-bottom.
pub fn flip(img: &[f64], side: usize, horizontal: bool, vertical: bool) -> Vec<f64> {
    (0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            let sy = if vertical { side - 1 - y } else { y };
            let sx = if horizontal { side - 1 - x } else { x };
            img[sy * side + sx]
        })
        .collect()
}

/// Samples one flip/crop and applies it to both images of a pair.
pub fn augment_pair(
    a: &[f64],
    b: &[f64],
    side: usize,
    rng: &mut impl Rng,
    flags: &AugmentFlags,
) -> Result<(Vec<f64>, Vec<f64>)> {
    flags.validate(side)?;
    if a.len() != side * side || b.len() != side * side {
        return Err(Error::shape("augment_pair", &[a.len()], &[side * side]));
    }
    let h = flags.hflip && rng.random_bool(0.5);
    let v = flags.vflip && rng.random_bool(0.5);
    let crop = flags.crop.map(|c| {
        let oy = rng.random_range(0..=side - c);
        let ox = rng.random_range(0..=side - c);
        (c, oy, ox)
    });
    let apply = |img: &[f64]| {
        let flipped = flip(img, side, h, v);
        match crop {
            None => flipped,
            Some((c, oy, ox)) => {
                let pad = (side - c) / 2;
                let mut out = vec![0.0; side * side];
                for y in 0..c {
                    for x in 0..c {
                        out[(y + pad) * side + x + pad] = flipped[(y + oy) * side + x + ox];
                    }
                }
                out
            }
        }
    };
    Ok((apply(a), apply(b)))
}
