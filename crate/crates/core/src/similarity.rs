//! Cross-modal representation similarity: linear CKA and SVCCA, overall and
//! per group.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::synthdata::Group;
use crate::tensor::Tensor;

fn check_pair(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::shape(op, x.shape(), y.shape()));
    }
    if x.rows() < 2 {
        return Err(Error::contract(format!("{op} needs at least two samples")));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite(format!("{op} input")));
    }
    Ok(())
}

fn centered(x: &Tensor) -> Vec<f64> {
    let mut c = x.data().to_vec();
    linalg::center_columns(&mut c, x.rows(), x.row_len());
    c
}

fn frob_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Biased linear CKA `‖ȲᵀX̄‖²_F / (‖X̄ᵀX̄‖_F ‖ȲᵀȲ‖_F)`; 0 when either
/// representation is constant.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair("linear_cka", x, y)?;
    let (n, dx, dy) = (x.rows(), x.row_len(), y.row_len());
    let (xc, yc) = (centered(x), centered(y));
    let xy = linalg::matmul_tn(&yc, &xc, n, dy, dx);
    let xx = linalg::matmul_tn(&xc, &xc, n, dx, dx);
    let yy = linalg::matmul_tn(&yc, &yc, n, dy, dy);
    let den = frob_sq(&xx).sqrt() * frob_sq(&yy).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((frob_sq(&xy) / den).clamp(0.0, 1.0))
}

pub const SVCCA_VAR_KEEP: f64 = 0.99;
pub const SVCCA_RIDGE: f64 = 1e-6;

/// Leading left singular vectors of the centered input that explain
/// `var_keep` of its variance, `[N, k]` with orthonormal columns.
fn reduce(x: &Tensor, var_keep: f64) -> Result<(Vec<f64>, usize)> {
    let (n, d) = (x.rows(), x.row_len());
    let (u, s, _) = linalg::svd(&centered(x), n, d);
    let r = s.len();
    let total: f64 = s.iter().map(|v| v * v).sum();
    let tol = f64::EPSILON * (n.max(d) as f64) * s.first().copied().unwrap_or(0.0);
    if total == 0.0 || s[0] <= tol {
        return Err(Error::contract("svcca input has rank 0"));
    }
    let mut acc = 0.0;
    let mut k = 0;
    while k < r && s[k] > tol {
        acc += s[k] * s[k];
        k += 1;
        if acc >= var_keep * total {
            break;
        }
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        out[i * k..(i + 1) * k].copy_from_slice(&u[i * r..i * r + k]);
    }
    Ok((out, k))
}

/// Number of SVD directions `svcca` keeps for `x`.
pub fn svcca_kept(x: &Tensor, var_keep: f64) -> Result<usize> {
    Ok(reduce(x, var_keep)?.1)
}

/// Mean canonical correlation between the SVD-reduced inputs. The reduced
/// sets are expressed in whitened principal coordinates, so the ridge is
/// relative to unit variance.
pub fn svcca(x: &Tensor, y: &Tensor, var_keep: f64) -> Result<f64> {
    check_pair("svcca", x, y)?;
    if !(var_keep > 0.0 && var_keep <= 1.0) {
        return Err(Error::config(format!("var_keep must be in (0, 1], got {var_keep}")));
    }
    let n = x.rows();
    let (a, ka) = reduce(x, var_keep)?;
    let (b, kb) = reduce(y, var_keep)?;
    // with k + 1 centered samples any k directions correlate perfectly
    if n < ka.max(kb) + 2 {
        return Err(Error::contract(format!(
            "svcca keeps {} directions but has only {n} samples",
            ka.max(kb)
        )));
    }
    let ridge = |mut c: Vec<f64>, k: usize| {
        for i in 0..k {
            c[i * k + i] += SVCCA_RIDGE;
        }
        c
    };
    let saa = ridge(linalg::matmul_tn(&a, &a, n, ka, ka), ka);
    let sbb = ridge(linalg::matmul_tn(&b, &b, n, kb, kb), kb);
    let sab = linalg::matmul_tn(&a, &b, n, ka, kb);
    let wa = linalg::sym_inv_sqrt(&saa, ka, 0.0);
    let wb = linalg::sym_inv_sqrt(&sbb, kb, 0.0);
    let t = linalg::matmul(&linalg::matmul(&wa, &sab, ka, ka, kb), &wb, ka, kb, kb);
    let (_, rho, _) = linalg::svd(&t, ka, kb);
    Ok(rho.iter().map(|r| r.clamp(0.0, 1.0)).sum::<f64>() / rho.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSimilarity {
    pub group: String,
    pub n: usize,
    /// `None` when the group is too small to report.
    pub cka: Option<f64>,
    pub svcca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub groups: Vec<GroupSimilarity>,
}

impl SimilarityReport {
    pub fn get(&self, group: &str) -> Option<&GroupSimilarity> {
        self.groups.iter().find(|g| g.group == group)
    }

    /// `(group, metric, value)` cells; absent values render as "absent".
    pub fn cells(&self) -> Vec<(String, &'static str, String)> {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.17e}"));
        self.groups
            .iter()
            .flat_map(|g| [(g.group.clone(), "cka", fmt(g.cka)), (g.group.clone(), "svcca", fmt(g.svcca))])
            .collect()
    }
}

fn group_cell(name: &str, z1: &Tensor, z2: &Tensor, rows: &[usize]) -> Result<GroupSimilarity> {
    let absent = GroupSimilarity {
        group: name.to_string(),
        n: rows.len(),
        cka: None,
        svcca: None,
    };
    if rows.len() < 3 {
        return Ok(absent);
    }
    let (a, b) = (z1.select_rows(rows), z2.select_rows(rows));
    let kept = match (svcca_kept(&a, SVCCA_VAR_KEEP), svcca_kept(&b, SVCCA_VAR_KEEP)) {
        (Ok(x), Ok(y)) => x.max(y),
        _ => return Ok(absent),
    };
    if rows.len() < kept + 2 {
        return Ok(absent);
    }
    Ok(GroupSimilarity {
        cka: Some(linear_cka(&a, &b)?),
        svcca: Some(svcca(&a, &b, SVCCA_VAR_KEEP)?),
        ..absent
    })
}

/// Both metrics over all rows ("all") and within each group present in
/// `groups`. Groups with fewer rows than kept directions + 2 are reported
/// as absent rather than estimated.
pub fn group_similarity_report(z1: &Tensor, z2: &Tensor, groups: &[Group]) -> Result<SimilarityReport> {
    check_pair("group_similarity_report", z1, z2)?;
    if groups.len() != z1.rows() {
        return Err(Error::shape("group_similarity_report", z1.shape(), &[groups.len()]));
    }
    let mut out = vec![group_cell("all", z1, z2, &(0..groups.len()).collect::<Vec<_>>())?];
    for g in Group::ALL {
        let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        if !rows.is_empty() {
            out.push(group_cell(g.name(), z1, z2, &rows)?);
        }
    }
    Ok(SimilarityReport { groups: out })
}
