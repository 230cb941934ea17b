//! Contrastive objectives: the clipped separable critic, InfoNCE and its
//! location/cross-spatial variants, auxiliary CCA/reconstruction/supervised
//! terms, and the objective graph that composes them into one loss.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    /// Scores are squashed to `clip · tanh(s / clip)`.
    pub clip: f64,
    /// Weight of the squared-score penalty.
    pub penalty: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            clip: 20.0,
            penalty: 4e-2,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || !(self.penalty >= 0.0) {
            return Err(Error::config(format!(
                "critic needs clip > 0 and penalty >= 0, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Tape nodes of one contrastive term.
#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    /// `-bound + penalty`
    pub loss: Var,
    /// Mutual-information lower bound, at most `ln N`.
    pub bound: Var,
}

/// Clipped critic scores `c·tanh(uᵀv / (√n·c))` for every row pair: `[a, n] × [b, n] → [a, b]`.
pub fn critic_scores(tape: &mut Tape, u: Var, v: Var, cfg: &CriticConfig) -> Result<Var> {
    let (su, sv) = (tape.shape(u).to_vec(), tape.shape(v).to_vec());
    if su.len() != 2 || sv.len() != 2 || su[1] != sv[1] {
        return Err(Error::shape("critic", &su, &sv));
    }
    let n = su[1] as f64;
    let vt = tape.transpose(v)?;
    let raw = tape.matmul(u, vt)?;
    let scaled = tape.scale(raw, 1.0 / n.sqrt());
    Ok(tape.soft_clip(scaled, cfg.clip))
}

/// Critic value for a single pair of embeddings.
pub fn critic_score(u: &Tensor, v: &Tensor, cfg: &CriticConfig) -> Result<f64> {
    if u.rank() != 1 || u.shape() != v.shape() {
        return Err(Error::shape("critic", u.shape(), v.shape()));
    }
    let mut tape = Tape::new();
    let n = u.len();
    let uu = tape.constant(u.clone().reshaped(&[1, n])?);
    let vv = tape.constant(v.clone().reshaped(&[1, n])?);
    let s = critic_scores(&mut tape, uu, vv, cfg)?;
    Ok(tape.value(s).item())
}

/// InfoNCE over a score matrix `[r, k]` whose positive for row `i` sits in
/// column `positive[i]`.
fn contrast(tape: &mut Tape, scores: Var, positive: &[usize], cfg: &CriticConfig) -> Result<InfoNce> {
    let shape = tape.shape(scores).to_vec();
    let (r, k) = (shape[0], shape[1]);
    let mut mask = vec![0.0; r * k];
    for (i, &j) in positive.iter().enumerate() {
        mask[i * k + j] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![r, k], mask)?);
    let picked = tape.mul(scores, mask)?;
    let pos = tape.sum_axis(picked, 1)?;
    let lse = tape.logsumexp(scores, 1)?;
    let gap = tape.sub(pos, lse)?;
    let mean_gap = tape.mean(gap);
    let bound = tape.offset(mean_gap, (k as f64).ln());
    let neg_bound = tape.scale(bound, -1.0);
    let loss = if cfg.penalty > 0.0 {
        let sq = tape.square(scores);
        let msq = tape.mean(sq);
        let pen = tape.scale(msq, cfg.penalty);
        tape.add(neg_bound, pen)?
    } else {
        neg_bound
    };
    Ok(InfoNce { loss, bound })
}

/// InfoNCE between anchors `u: [N, n]` and positives `v: [N, n]`; row `m`
/// of `v` is the positive for anchor `m`, all other rows are negatives.
pub fn infonce(tape: &mut Tape, u: Var, v: Var, cfg: &CriticConfig) -> Result<InfoNce> {
    let (su, sv) = (tape.shape(u).to_vec(), tape.shape(v).to_vec());
    if su.len() != 2 || su != sv {
        return Err(Error::shape("infonce", &su, &sv));
    }
    let scores = critic_scores(tape, u, v, cfg)?;
    let positive: Vec<usize> = (0..su[0]).collect();
    contrast(tape, scores, &positive, cfg)
}

/// Every (sample, location) of `locations: [N, L, n]` is an anchor against
/// the targets `[N, n]` of the batch; averaged over locations.
pub fn location_infonce(
    tape: &mut Tape,
    locations: Var,
    targets: Var,
    cfg: &CriticConfig,
) -> Result<InfoNce> {
    let (sc, st) = (tape.shape(locations).to_vec(), tape.shape(targets).to_vec());
    if sc.len() != 3 || st.len() != 2 || sc[0] != st[0] || sc[2] != st[1] {
        return Err(Error::shape("location_infonce", &sc, &st));
    }
    let (n, l, d) = (sc[0], sc[1], sc[2]);
    let rows = tape.reshape(locations, &[n * l, d])?;
    let scores = critic_scores(tape, rows, targets, cfg)?;
    let positive: Vec<usize> = (0..n * l).map(|r| r / l).collect();
    contrast(tape, scores, &positive, cfg)
}

/// Anchor (m, ℓ) of `a` contrasts against `b`'s features at the same
/// location ℓ across the batch; averaged over locations.
pub fn cross_spatial_infonce(tape: &mut Tape, a: Var, b: Var, cfg: &CriticConfig) -> Result<InfoNce> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 3 || sa != sb {
        return Err(Error::shape("cross_spatial_infonce", &sa, &sb));
    }
    let (n, l, d) = (sa[0], sa[1], sa[2]);
    let mut losses = Vec::with_capacity(l);
    let mut bounds = Vec::with_capacity(l);
    for loc in 0..l {
        let ua = tape.slice(a, 1, loc, 1)?;
        let ua = tape.reshape(ua, &[n, d])?;
        let vb = tape.slice(b, 1, loc, 1)?;
        let vb = tape.reshape(vb, &[n, d])?;
        let term = infonce(tape, ua, vb, cfg)?;
        losses.push(tape.reshape(term.loss, &[1])?);
        bounds.push(tape.reshape(term.bound, &[1])?);
    }
    let losses = tape.concat(&losses, 0)?;
    let bounds = tape.concat(&bounds, 0)?;
    Ok(InfoNce {
        loss: tape.mean(losses),
        bound: tape.mean(bounds),
    })
}

/// Eigenvalue floor used inside the CCA whitening.
pub const CCA_EIGEN_FLOOR: f64 = 1e-6;

/// Negative sum of canonical correlations between `z1: [N, d1]` and
/// `z2: [N, d2]` using ridge-regularized batch covariances.
pub fn cca_loss(tape: &mut Tape, z1: Var, z2: Var, ridge: f64) -> Result<Var> {
    let (s1, s2) = (tape.shape(z1).to_vec(), tape.shape(z2).to_vec());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != s2[0] {
        return Err(Error::shape("cca_loss", &s1, &s2));
    }
    let n = s1[0];
    if n < 2 {
        return Err(Error::contract("cca_loss needs at least two samples"));
    }
    let mut h = Tensor::full(&[n, n], -1.0 / n as f64);
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0;
    }
    let h = tape.constant(h);
    let c1 = tape.matmul(h, z1)?;
    let c2 = tape.matmul(h, z2)?;
    let norm = 1.0 / (n as f64 - 1.0);
    let cov = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let at = tape.transpose(a)?;
        let m = tape.matmul(at, b)?;
        Ok(tape.scale(m, norm))
    };
    let ridged = |tape: &mut Tape, c: Var, d: usize| -> Result<Var> {
        let r = tape.constant(Tensor::eye(d).map(|x| x * ridge));
        tape.add(c, r)
    };
    let s11 = cov(tape, c1, c1)?;
    let s11 = ridged(tape, s11, s1[1])?;
    let s22 = cov(tape, c2, c2)?;
    let s22 = ridged(tape, s22, s2[1])?;
    let s12 = cov(tape, c1, c2)?;
    for v in [s11, s22, s12] {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFinite("cca covariance".into()));
        }
    }
    let w1 = tape.sym_inv_sqrt(s11, CCA_EIGEN_FLOOR)?;
    let w2 = tape.sym_inv_sqrt(s22, CCA_EIGEN_FLOOR)?;
    let t = tape.matmul(w1, s12)?;
    let t = tape.matmul(t, w2)?;
    let total = tape.nuclear_norm(t)?;
    Ok(tape.scale(total, -1.0))
}

/// Mean squared error between an image batch and its reconstruction.
pub fn recon_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::shape("recon_loss", tape.shape(x), tape.shape(x_hat)));
    }
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Masked binary cross-entropy on logits `[N]`; rows with zero mask are ignored.
pub fn masked_bce(tape: &mut Tape, logits: Var, targets: &[f64], mask: &[f64]) -> Result<Var> {
    let n = tape.value(logits).len();
    if targets.len() != n || mask.len() != n {
        return Err(Error::shape("masked_bce", &[n], &[targets.len(), mask.len()]));
    }
    let weight: f64 = mask.iter().sum();
    if weight <= 0.0 {
        return Err(Error::contract("supervised term has no labelled samples"));
    }
    let col = tape.reshape(logits, &[n, 1])?;
    let zeros = tape.constant(Tensor::zeros(&[n, 1]));
    let pair = tape.concat(&[zeros, col], 1)?;
    // softplus(l) - y·l
    let softplus = tape.logsumexp(pair, 1)?;
    let y = tape.constant(Tensor::vector(targets.to_vec()));
    let flat = tape.reshape(col, &[n])?;
    let yl = tape.mul(y, flat)?;
    let per = tape.sub(softplus, yl)?;
    let m = tape.constant(Tensor::vector(mask.to_vec()));
    let masked = tape.mul(per, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / weight))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Location,
    Latent,
}

/// A (modality, level) feature source. Modalities are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub modality: usize,
    pub level: Level,
}

impl Endpoint {
    pub fn new(modality: usize, level: Level) -> Self {
        Endpoint { modality, level }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    L,
    CL,
    CS,
    S,
}

/// Directed critic pairing: `src` supplies anchors, `dst` supplies the
/// positive and the negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "EdgeRepr", into = "EdgeRepr")]
pub struct Edge {
    src: Endpoint,
    dst: Endpoint,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRepr {
    src: Endpoint,
    dst: Endpoint,
}

impl TryFrom<EdgeRepr> for Edge {
    type Error = Error;
    fn try_from(r: EdgeRepr) -> Result<Edge> {
        Edge::new(r.src, r.dst)
    }
}

impl From<Edge> for EdgeRepr {
    fn from(e: Edge) -> Self {
        EdgeRepr {
            src: e.src,
            dst: e.dst,
        }
    }
}

impl Edge {
    pub fn new(src: Endpoint, dst: Endpoint) -> Result<Edge> {
        for m in [src.modality, dst.modality] {
            if !(1..=2).contains(&m) {
                return Err(Error::config(format!("modality {m} is not 1 or 2")));
            }
        }
        let e = Edge { src, dst };
        e.try_kind()?;
        Ok(e)
    }

    fn try_kind(&self) -> Result<EdgeKind> {
        use Level::*;
        let same = self.src.modality == self.dst.modality;
        match (same, self.src.level, self.dst.level) {
            (true, Location, Latent) => Ok(EdgeKind::L),
            (false, Location, Latent) => Ok(EdgeKind::CL),
            (false, Location, Location) => Ok(EdgeKind::CS),
            (false, Latent, Latent) => Ok(EdgeKind::S),
            _ => Err(Error::config(format!(
                "no objective pairs {:?} with {:?}",
                self.src, self.dst
            ))),
        }
    }

    pub fn kind(&self) -> EdgeKind {
        self.try_kind().expect("validated on construction")
    }

    pub fn src(&self) -> Endpoint {
        self.src
    }

    pub fn dst(&self) -> Endpoint {
        self.dst
    }

    pub fn local(modality: usize) -> Edge {
        Edge::new(
            Endpoint::new(modality, Level::Location),
            Endpoint::new(modality, Level::Latent),
        )
        .expect("valid")
    }

    pub fn cross_local(from: usize, to: usize) -> Edge {
        Edge::new(
            Endpoint::new(from, Level::Location),
            Endpoint::new(to, Level::Latent),
        )
        .expect("valid")
    }

    pub fn cross_spatial(from: usize, to: usize) -> Edge {
        Edge::new(
            Endpoint::new(from, Level::Location),
            Endpoint::new(to, Level::Location),
        )
        .expect("valid")
    }

    pub fn similarity(from: usize, to: usize) -> Edge {
        Edge::new(
            Endpoint::new(from, Level::Latent),
            Endpoint::new(to, Level::Latent),
        )
        .expect("valid")
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            EdgeKind::L => write!(f, "L:{}", self.src.modality),
            k => write!(f, "{:?}:{}->{}", k, self.src.modality, self.dst.modality),
        }
    }
}

/// Non-contrastive terms that can be mixed into an objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxTerms {
    /// Reconstruction per modality.
    pub recon: [bool; 2],
    pub recon_weight: f64,
    /// CCA between the two latents.
    pub cca: bool,
    pub cca_weight: f64,
    pub cca_ridge: f64,
    /// Cross-entropy on a linear head over each latent (supervised reference).
    pub supervised: bool,
    pub supervised_weight: f64,
}

impl Default for AuxTerms {
    fn default() -> Self {
        AuxTerms {
            recon: [false, false],
            recon_weight: 1.0,
            cca: false,
            cca_weight: 1.0,
            cca_ridge: 1e-3,
            supervised: false,
            supervised_weight: 1.0,
        }
    }
}

impl AuxTerms {
    pub fn any(&self) -> bool {
        self.recon[0] || self.recon[1] || self.cca || self.supervised
    }
}

/// Named objective presets.
pub const PRESETS: &[&str] = &[
    "L", "CL", "CS", "S", "L-CL", "L-CS", "L-S", "CL-CS", "S-CS", "S-CL", "L-CL-CS-S", "AE", "S-AE",
    "CCA", "L-CCA", "DCCAE", "Supervised",
];

/// Set of contrastive edges plus auxiliary terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveGraph {
    edges: Vec<Edge>,
    #[serde(default)]
    aux: AuxTerms,
}

impl ObjectiveGraph {
    pub fn new(edges: Vec<Edge>, aux: AuxTerms) -> Result<Self> {
        for (i, e) in edges.iter().enumerate() {
            if edges[..i].contains(e) {
                return Err(Error::config(format!("duplicate edge {e}")));
            }
        }
        if edges.is_empty() && !aux.any() {
            return Err(Error::contract("objective graph has no terms"));
        }
        Ok(ObjectiveGraph { edges, aux })
    }

    /// Resolves a preset name. Hyphenated names are unions of their parts.
    pub fn preset(name: &str) -> Result<Self> {
        if !PRESETS.contains(&name) {
            return Err(Error::config(format!(
                "unknown preset '{name}'; valid presets: {}",
                PRESETS.join(", ")
            )));
        }
        let mut edges = Vec::new();
        let mut aux = AuxTerms::default();
        let parts: Vec<&str> = match name {
            "DCCAE" => vec!["CCA", "AE"],
            other => other.split('-').collect(),
        };
        for part in parts {
            match part {
                "L" => edges.extend([Edge::local(1), Edge::local(2)]),
                "CL" => edges.extend([Edge::cross_local(1, 2), Edge::cross_local(2, 1)]),
                "CS" => edges.extend([Edge::cross_spatial(1, 2), Edge::cross_spatial(2, 1)]),
                "S" => edges.extend([Edge::similarity(1, 2), Edge::similarity(2, 1)]),
                "AE" => aux.recon = [true, true],
                "CCA" => aux.cca = true,
                "Supervised" => aux.supervised = true,
                _ => unreachable!("preset table is closed"),
            }
        }
        Self::new(edges, aux)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn aux(&self) -> &AuxTerms {
        &self.aux
    }

    pub fn aux_mut(&mut self) -> &mut AuxTerms {
        &mut self.aux
    }

    /// Whether modality `m` (1-based) needs projected location features.
    pub fn uses_locations(&self, m: usize) -> bool {
        self.edges.iter().any(|e| {
            [e.src, e.dst]
                .iter()
                .any(|p| p.modality == m && p.level == Level::Location)
        })
    }

    pub fn needs_decoder(&self) -> bool {
        self.aux.recon[0] || self.aux.recon[1]
    }

    /// Names of every reported term, in report order.
    pub fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.edges.iter().map(|e| e.to_string()).collect();
        for m in 0..2 {
            if self.aux.recon[m] {
                names.push(format!("recon:{}", m + 1));
            }
        }
        if self.aux.cca {
            names.push("cca".into());
        }
        if self.aux.supervised {
            names.push("sup:1".into());
            names.push("sup:2".into());
        }
        names
    }
}

/// Per-modality tape nodes consumed by [`build_loss`].
#[derive(Debug, Clone, Default)]
pub struct ModalityView {
    /// Projected locations `[N, L, n]`.
    pub locations: Option<Var>,
    /// Projected latent `[N, n]`.
    pub latent: Option<Var>,
    /// Raw latent `[N, d_z]` for CCA.
    pub raw_latent: Option<Var>,
    /// `(input, reconstruction)` image batches.
    pub recon: Option<(Var, Var)>,
    /// Supervised logits `[N]` with targets and a label mask.
    pub supervised: Option<(Var, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub name: String,
    /// Weighted contribution to the total loss.
    pub loss: f64,
    /// InfoNCE bound for contrastive edges.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: Var,
    pub terms: Vec<TermValue>,
}

impl LossReport {
    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.value(self.total).item()
    }

    /// Mean bound over contrastive edges, if any.
    pub fn mean_bound(&self) -> Option<f64> {
        let b: Vec<f64> = self.terms.iter().filter_map(|t| t.bound).collect();
        (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64)
    }
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::contract(format!("objective needs {what}")))
}

/// Sums every edge loss and weighted auxiliary term.
pub fn build_loss(
    tape: &mut Tape,
    graph: &ObjectiveGraph,
    views: &[ModalityView; 2],
    cfg: &CriticConfig,
) -> Result<LossReport> {
    let mut parts = Vec::new();
    let mut terms = Vec::new();
    for edge in graph.edges() {
        let (s, d) = (&views[edge.src.modality - 1], &views[edge.dst.modality - 1]);
        let term = match edge.kind() {
            EdgeKind::L | EdgeKind::CL => location_infonce(
                tape,
                need(s.locations, "location features")?,
                need(d.latent, "latent")?,
                cfg,
            )?,
            EdgeKind::CS => cross_spatial_infonce(
                tape,
                need(s.locations, "location features")?,
                need(d.locations, "location features")?,
                cfg,
            )?,
            EdgeKind::S => infonce(tape, need(s.latent, "latent")?, need(d.latent, "latent")?, cfg)?,
        };
        terms.push(TermValue {
            name: edge.to_string(),
            loss: tape.value(term.loss).item(),
            bound: Some(tape.value(term.bound).item()),
        });
        parts.push(term.loss);
    }
    let aux = graph.aux();
    let mut push_aux = |tape: &mut Tape, name: String, v: Var, w: f64| {
        let wv = tape.scale(v, w);
        terms.push(TermValue {
            name,
            loss: tape.value(wv).item(),
            bound: None,
        });
        parts.push(wv);
    };
    for m in 0..2 {
        if aux.recon[m] {
            let (x, xh) = views[m]
                .recon
                .ok_or_else(|| Error::contract("reconstruction term needs a decoder output"))?;
            let r = recon_loss(tape, x, xh)?;
            push_aux(tape, format!("recon:{}", m + 1), r, aux.recon_weight);
        }
    }
    if aux.cca {
        let c = cca_loss(
            tape,
            need(views[0].raw_latent, "latent")?,
            need(views[1].raw_latent, "latent")?,
            aux.cca_ridge,
        )?;
        push_aux(tape, "cca".into(), c, aux.cca_weight);
    }
    if aux.supervised {
        for (m, view) in views.iter().enumerate() {
            let (logits, y, mask) = view
                .supervised
                .clone()
                .ok_or_else(|| Error::contract("supervised term needs logits"))?;
            let b = masked_bce(tape, logits, &y, &mask)?;
            push_aux(tape, format!("sup:{}", m + 1), b, aux.supervised_weight);
        }
    }
    let first = *parts
        .first()
        .ok_or_else(|| Error::contract("objective graph has no terms"))?;
    let mut total = first;
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(LossReport { total, terms })
}
