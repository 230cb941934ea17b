//! RAdam, the one-cycle schedule, class-balanced sampling and the training
//! loop.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tape;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{BatchTargets, FusionModel};
use crate::objectives::{build_loss, CriticConfig, ObjectiveGraph};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::synthdata::{augment_pair, AugmentFlags, Group, PairedDataset, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Length of the approximated simple moving average at step `t`.
pub fn radam_rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// One RAdam update of every parameter that has a gradient.
pub fn radam_step(
    state: &mut OptimizerState,
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    hp: &RAdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("radam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step;
    let (b1, b2) = (hp.beta1, hp.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho = radam_rho(t, b2);
    let rect = (rho > 4.0).then(|| {
        ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
    });
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("checked above");
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            *pi -= match rect {
                Some(r) => lr * r * m_hat / ((*vi / bc2).sqrt() + hp.eps),
                None => lr * m_hat,
            };
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub pct_up: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 0.01,
            start_div: 25.0,
            final_div: 1e4,
            pct_up: 0.3,
        }
    }
}

impl OneCycle {
    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        onecycle_lr(step, total_steps, self.max_lr, self.start_div, self.final_div, self.pct_up)
    }
}

fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Cosine warm-up from `max_lr/start_div` to `max_lr` over the first
/// `pct_up` of the steps, then cosine decay to `max_lr/final_div`.
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    start_div: f64,
    final_div: f64,
    pct_up: f64,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule length {total_steps}")));
    }
    if !(0.0..=1.0).contains(&pct_up) || max_lr <= 0.0 || start_div <= 0.0 || final_div <= 0.0 {
        return Err(Error::config("one-cycle parameters out of range"));
    }
    let up = pct_up * total_steps as f64;
    let s = step as f64;
    let start = max_lr / start_div;
    let end = max_lr / final_div;
    if s <= up && up > 0.0 {
        Ok(cosine(start, max_lr, s / up))
    } else {
        let down = total_steps as f64 - up;
        let t = if down > 0.0 { ((s - up) / down).max(0.0) } else { 1.0 };
        Ok(cosine(max_lr, end, t))
    }
}

/// Draws `batch_size` indices: a class uniformly, then a member uniformly.
/// `labels[i]` is the class of index `i`, in `0..n_classes`.
pub fn balanced_sample(
    labels: &[usize],
    n_classes: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut members = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        members
            .get_mut(c)
            .ok_or_else(|| Error::contract(format!("label {c} outside 0..{n_classes}")))?
            .push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("class {c} has no members")));
    }
    Ok((0..batch_size)
        .map(|_| {
            let c = &members[rng.random_range(0..n_classes)];
            c[rng.random_range(0..c.len())]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub final_div: f64,
    pub pct_up: f64,
    pub seed: u64,
    /// Preset name; ignored when `graph` is given.
    pub preset: String,
    pub graph: Option<ObjectiveGraph>,
    pub augment: AugmentFlags,
    /// Class-balanced batches; uniform sampling otherwise.
    pub balanced: bool,
    pub critic: CriticConfig,
    pub radam: RAdamConfig,
    /// Checkpoint period in epochs, 0 for none.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            base_lr: 4e-4,
            max_lr: 0.01,
            final_div: 1e4,
            pct_up: 0.3,
            seed: 0,
            preset: "S".into(),
            graph: None,
            augment: AugmentFlags::default(),
            balanced: true,
            critic: CriticConfig::default(),
            radam: RAdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.base_lr <= 0.0 || self.max_lr <= 0.0 || self.final_div <= 0.0 {
            return Err(Error::config("batch_size and learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pct_up) {
            return Err(Error::config("pct_up must be in [0, 1]"));
        }
        self.critic.validate()
    }

    pub fn objective(&self) -> Result<ObjectiveGraph> {
        match &self.graph {
            Some(g) => ObjectiveGraph::new(g.edges().to_vec(), g.aux().clone()),
            None => ObjectiveGraph::preset(&self.preset),
        }
    }

    /// Starting lr is `base_lr`, so `start_div = max_lr / base_lr`.
    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            start_div: self.max_lr / self.base_lr,
            final_div: self.final_div,
            pct_up: self.pct_up,
        }
    }
}

/// One row of the long-format history: a term's epoch means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub term: String,
    pub bound: Option<f64>,
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub history: Vec<HistoryRow>,
    /// Total loss of every step.
    pub step_losses: Vec<f64>,
    /// Mean contrastive bound per step, when the objective has edges.
    pub step_bounds: Vec<f64>,
    pub state: OptimizerState,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,term,bound,loss,lr\n");
    for r in rows {
        let bound = r.bound.map(|b| format!("{b:.17e}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{:.17e},{:.17e}\n", r.epoch, r.term, bound, r.loss, r.lr));
    }
    out
}

// training streams
const S_SAMPLER: u64 = 200;
const S_AUGMENT: u64 = 201;

pub fn train(cfg: &TrainConfig, encoder: &EncoderConfig, data: &PairedDataset) -> Result<TrainOutcome> {
    train_with_hook(cfg, encoder, data, &mut |_, _| Ok(()))
}

/// `hook(epoch, model)` runs every `checkpoint_every` epochs.
pub fn train_with_hook(
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    data: &PairedDataset,
    hook: &mut dyn FnMut(usize, &FusionModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let graph = cfg.objective()?;
    if encoder.image_side != data.side() {
        return Err(Error::config(format!(
            "encoder image_side {} differs from dataset side {}",
            encoder.image_side,
            data.side()
        )));
    }
    cfg.augment.validate(data.side())?;
    let (data, _) = data.normalized()?;
    let rows = data.rows_in(Split::Train);
    if rows.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut model = FusionModel::init(encoder, &graph, cfg.seed)?;
    let mut state = OptimizerState::default();

    let present: Vec<Group> = Group::ALL
        .into_iter()
        .filter(|g| rows.iter().any(|&r| data.groups[r] == *g))
        .collect();
    let classes: Vec<usize> = if cfg.balanced {
        rows.iter()
            .map(|&r| present.iter().position(|g| *g == data.groups[r]).expect("present"))
            .collect()
    } else {
        vec![0; rows.len()]
    };
    let n_classes = if cfg.balanced { present.len() } else { 1 };

    let side = data.side();
    let pix = side * side;
    let steps_per_epoch = rows.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let schedule = cfg.schedule();
    let mut sampler = stream(cfg.seed, S_SAMPLER);
    let mut aug = stream(cfg.seed, S_AUGMENT);
    let names = graph.term_names();
    let mut history = Vec::new();
    let mut step_losses = Vec::with_capacity(total);
    let mut step_bounds = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        let mut lr = 0.0;
        for _ in 0..steps_per_epoch {
            let step = step_losses.len();
            lr = schedule.lr(step, total)?;
            let picks = balanced_sample(&classes, n_classes, cfg.batch_size, &mut sampler)?;
            let b = picks.len();
            let mut bufs = [Vec::with_capacity(b * pix), Vec::with_capacity(b * pix)];
            let mut targets = BatchTargets::default();
            for &p in &picks {
                let r = rows[p];
                let (x1, x2) = augment_pair(
                    data.images[0].row(r),
                    data.images[1].row(r),
                    side,
                    &mut aug,
                    &cfg.augment,
                )?;
                bufs[0].extend(x1);
                bufs[1].extend(x2);
                let (y, m) = match data.groups[r] {
                    Group::Ad => (1.0, 1.0),
                    Group::Hc => (0.0, 1.0),
                    Group::Other => (0.0, 0.0),
                };
                targets.labels.push(y);
                targets.mask.push(m);
            }
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let [b1, b2] = bufs;
            let x1 = tape.constant(Tensor::new(vec![b, side, side], b1)?);
            let x2 = tape.constant(Tensor::new(vec![b, side, side], b2)?);
            let views = model.views(&mut tape, &bound, &graph, [x1, x2], Some(&targets))?;
            let report = build_loss(&mut tape, &graph, &views, &cfg.critic)?;
            let total_loss = report.total_value(&tape);
            if !total_loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let grads = bound.collect_grads(&tape.backward(report.total)?);
            radam_step(&mut state, &mut model.params, &grads, lr, &cfg.radam)?;
            step_losses.push(total_loss);
            if let Some(mb) = report.mean_bound() {
                step_bounds.push(mb);
            }
            for t in &report.terms {
                let e = sums.entry(t.name.clone()).or_insert((0.0, 0.0));
                e.0 += t.bound.unwrap_or(0.0);
                e.1 += t.loss;
            }
        }
        let k = steps_per_epoch as f64;
        for name in &names {
            let (bsum, lsum) = sums[name];
            let is_edge = graph.edges().iter().any(|e| e.to_string() == *name);
            history.push(HistoryRow {
                epoch,
                term: name.clone(),
                bound: is_edge.then_some(bsum / k),
                loss: lsum / k,
                lr,
            });
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            hook(epoch, &model)?;
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        step_losses,
        step_bounds,
        state,
    })
}
