//! Rank statistics and correlation helpers shared by the probe and the
//! saliency contrasts.

use crate::error::{Error, Result};

/// Twice the midrank of every value (ranks start at 1), so ties stay
/// integral. Also returns `Σ (t³ − t)` over tie groups.
pub fn doubled_midranks(values: &[f64]) -> Result<(Vec<u64>, f64)> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("ranked values".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        // -0.0 and 0.0 compare equal here, unlike total_cmp
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        for &k in &order[i..j] {
            ranks[k] = (i + 1 + j) as u64;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    Ok((ranks, ties))
}

/// `2·U` for sample `a` against `b`, where `U` counts pairs with `aᵢ > bⱼ`
/// plus one half per tie.
pub fn doubled_u(a: &[f64], b: &[f64]) -> Result<(u128, f64)> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_midranks(&pooled)?;
    let na = a.len() as u128;
    let r2: u128 = ranks[..a.len()].iter().map(|&r| r as u128).sum();
    Ok((r2 - na * (na + 1), ties))
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman rank correlation (Pearson on midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    let rx: Vec<f64> = doubled_midranks(x)?.0.into_iter().map(|r| r as f64).collect();
    let ry: Vec<f64> = doubled_midranks(y)?.0.into_iter().map(|r| r as f64).collect();
    Ok(pearson(&rx, &ry))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_with_ties() {
        let (r, ties) = doubled_midranks(&[3.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(r, [7, 2, 7, 4]);
        assert_eq!(ties, 6.0);
        assert!(doubled_midranks(&[f64::NAN]).is_err());
    }

    #[test]
    fn doubled_u_counts_pairs() {
        let (u2, _) = doubled_u(&[1.0, 2.0, 3.0], &[2.0, 0.0]).unwrap();
        // pairs a > b: 1>0, 2>0, 3>2, 3>0 = 4, one tie (2,2)
        assert_eq!(u2, 9);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
    }
}
