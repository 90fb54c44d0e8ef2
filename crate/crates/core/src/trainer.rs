//! Training loop: inner maximization, combined outer loss, SGD with momentum.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_batch, sample_seeds, AttackConfig, InnerKind, InnerObjective};
use crate::data::{batches, Dataset};
use crate::diagnostics::{argmax, gradient_cosine, gradient_distance, mean_remainder, GradientProbe, LinearityProbeConfig};
use crate::error::{config, contract, Error, Result};
use crate::loss::{LossGraph, LossSpec, RampSchedule};
use crate::model::{Mlp, ParamSet};
use crate::seed::derive_seed;
use crate::tape::LeafKind;
use crate::tensor::Tensor;

const ATTACK_STREAM: u64 = 0xa77a;
const EVAL_STREAM: u64 = 0xe7a1;

/// Source of wall-clock seconds. The core has no clock of its own.
pub trait Clock {
    fn now_seconds(&self) -> f64;
}

/// Clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}

fn default_eval_inner() -> InnerKind {
    InnerKind::PgdCe
}

/// Per-epoch measurements on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub probe: LinearityProbeConfig,
    /// Cap on held-out samples used; 0 means all.
    #[serde(default)]
    pub max_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub loss: LossSpec,
    pub inner_kind: InnerKind,
    pub inner_attack: AttackConfig,
    pub eval_attack: AttackConfig,
    #[serde(default = "default_eval_inner")]
    pub eval_inner: InnerKind,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsConfig>,
    /// Evaluate the auxiliary term even when its weight is always zero.
    #[serde(default)]
    pub force_aux: bool,
}

impl TrainConfig {
    /// SGD 0.1 / 0.9 / 5e-4, drops by 10x, training and PGD-20 attacks in `[0, 1]`.
    pub fn new(loss: LossSpec, inner_kind: InnerKind, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: Vec::new(),
            lr_drop_factor: 0.1,
            seed,
            loss,
            inner_kind,
            inner_attack: AttackConfig::training((0.0, 1.0)),
            eval_attack: AttackConfig::evaluation((0.0, 1.0)),
            eval_inner: InnerKind::PgdCe,
            diagnostics: None,
            force_aux: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return config("weight_decay must be non-negative");
        }
        if !(self.lr_drop_factor > 0.0) || !self.lr_drop_factor.is_finite() {
            return config("lr_drop_factor must be positive");
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return config("lr_drop_epochs must be strictly increasing");
        }
        if self.batch_size == 0 {
            return config("batch_size must be at least 1");
        }
        self.loss.validate()?;
        self.inner_attack.validate()?;
        self.eval_attack.validate()?;
        if self.eval_inner.needs_teacher() {
            return config("evaluation attacks target the student alone");
        }
        if let Some(d) = &self.diagnostics {
            d.probe.validate()?;
        }
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        self.loss.needs_teacher() || (self.loss.ad_kind.uses_perturbation() && self.inner_kind.needs_teacher())
    }
}

/// `lr * factor^(drops at or before epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    let mut lr = cfg.lr;
    for _ in 0..drops {
        lr *= cfg.lr_drop_factor;
    }
    lr
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<Tensor>);

impl Velocity {
    pub fn zeros(params: &ParamSet) -> Self {
        Velocity(params.tensors().map(|t| Tensor::zeros(t.shape())).collect())
    }
}

/// `v <- mu v + (g + wd theta); theta <- theta - lr v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let count = params.tensors().count();
    if grads.len() != count || velocity.0.len() != count {
        return Err(Error::Shape {
            expected: alloc::vec![count],
            got: alloc::vec![grads.len(), velocity.0.len()],
        });
    }
    for ((theta, g), v) in params.tensors().zip(grads).zip(&velocity.0) {
        g.expect_shape(theta.shape())?;
        v.expect_shape(theta.shape())?;
    }
    for ((theta, g), v) in params.tensors_mut().zip(grads).zip(velocity.0.iter_mut()) {
        for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ad: f64,
    /// Unweighted auxiliary term.
    pub loss_igdm: f64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub gd: Option<f64>,
    pub gc: Option<f64>,
    pub remainder: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<MetricRecord>,
    pub params: ParamSet,
    /// Wall time per epoch, as reported by the clock.
    pub epoch_seconds: Vec<f64>,
    /// Teacher batch forwards over the whole run.
    pub teacher_passes: u64,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }

    /// Records and parameters, ignoring timing.
    pub fn same_outcome(&self, other: &TrainHistory) -> bool {
        self.params.to_bits() == other.params.to_bits()
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| record_bits(a) == record_bits(b))
    }
}

fn record_bits(r: &MetricRecord) -> Vec<u64> {
    let opt = |v: Option<f64>| v.map_or(u64::MAX, f64::to_bits);
    alloc::vec![
        r.epoch as u64,
        r.loss_total.to_bits(),
        r.loss_ad.to_bits(),
        r.loss_igdm.to_bits(),
        r.clean_acc.to_bits(),
        r.pgd_acc.to_bits(),
        opt(r.gd),
        opt(r.gc),
        opt(r.remainder),
        r.lr.to_bits(),
    ]
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub ad: f64,
    pub aux: f64,
    pub weight: f64,
}

fn check_models(student: &Mlp, teacher: Option<&Mlp>, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    student.params.check_against(&student.arch)?;
    if student.input_dim() != data.dim() || student.num_classes() != data.num_classes {
        return config(format!(
            "student expects {} inputs and {} classes, data has {} and {}",
            student.input_dim(),
            student.num_classes(),
            data.dim(),
            data.num_classes
        ));
    }
    match teacher {
        None if cfg.needs_teacher() => config("this loss or inner objective needs a teacher"),
        Some(t) if t.input_dim() != data.dim() || t.num_classes() != data.num_classes => config(format!(
            "teacher expects {} inputs and {} classes, data has {} and {}",
            t.input_dim(),
            t.num_classes(),
            data.dim(),
            data.num_classes
        )),
        _ => Ok(()),
    }
}

/// Trains a copy of `student_init` on the first 80% of `data`; the last 20%
/// is held out for per-epoch evaluation.
pub fn run_training(
    student_init: &Mlp,
    teacher: Option<&Mlp>,
    data: &Dataset,
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_models(student_init, teacher, data, cfg)?;
    let (train, held) = data.split_holdout()?;
    if cfg.batch_size > train.len() {
        return config(format!("batch_size {} exceeds {} training samples", cfg.batch_size, train.len()));
    }
    let ramp = RampSchedule::new(cfg.loss.igdm_alpha, cfg.epochs.max(1))?;
    let use_aux = cfg.loss.has_aux_term() || cfg.force_aux;
    let mut model = student_init.clone();
    let mut velocity = Velocity::zeros(&model.params);
    let mut history = TrainHistory {
        records: Vec::with_capacity(cfg.epochs),
        params: model.params.clone(),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        teacher_passes: 0,
    };
    let eval_seed = derive_seed(cfg.seed, EVAL_STREAM, 0);
    for epoch in 0..cfg.epochs {
        let start = clock.now_seconds();
        let lr = lr_at_epoch(cfg, epoch);
        let weight = ramp.weight(epoch)?;
        let attack_seed = derive_seed(cfg.seed, ATTACK_STREAM, epoch as u64);
        let (mut sum_total, mut sum_ad, mut sum_aux) = (0.0, 0.0, 0.0);
        let order = batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        for idx in &order {
            let (xs, ys) = train.gather(idx);
            let delta = if cfg.loss.ad_kind.uses_perturbation() {
                let obj = InnerObjective::new(cfg.inner_kind, &model, teacher)?;
                let (delta, stats) = pgd_batch(&obj, &xs, &ys, &cfg.inner_attack, &sample_seeds(attack_seed, idx))?;
                history.teacher_passes += stats.teacher_passes;
                delta
            } else {
                Tensor::zeros(xs.shape())
            };
            let (step, grads, passes) = batch_loss_and_grads(&model, teacher, &xs, &delta, &ys, &cfg.loss, weight, use_aux)?;
            history.teacher_passes += passes;
            if !(step.total.is_finite()) {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            sgd_step(&mut model.params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            sum_total += step.total;
            sum_ad += step.ad;
            sum_aux += step.aux;
        }
        let nb = order.len() as f64;
        let (clean_acc, pgd_acc) = evaluate_with(&model, &held, Some((&cfg.eval_attack, cfg.eval_inner)), eval_seed)?;
        let (gd, gc, remainder) = match &cfg.diagnostics {
            Some(d) => epoch_diagnostics(&model, teacher, &held, d)?,
            None => (None, None, None),
        };
        history.records.push(MetricRecord {
            epoch,
            loss_total: sum_total / nb,
            loss_ad: sum_ad / nb,
            loss_igdm: sum_aux / nb,
            clean_acc,
            pgd_acc,
            gd,
            gc,
            remainder,
            lr,
        });
        history.epoch_seconds.push(clock.now_seconds() - start);
    }
    history.params = model.params;
    Ok(history)
}

/// Combined loss and parameter gradients for one batch.
///
/// Returns the loss values, gradients in [`ParamSet::tensors`] order and the
/// teacher forwards spent.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grads(
    model: &Mlp,
    teacher: Option<&Mlp>,
    xs: &Tensor,
    delta: &Tensor,
    ys: &[usize],
    spec: &LossSpec,
    weight: f64,
    use_aux: bool,
) -> Result<(StepLoss, Vec<Tensor>, u64)> {
    let mut g = LossGraph::new(model, LeafKind::Param, teacher, xs, delta, ys)?;
    let ad = g.ad_loss(spec)?;
    let (total, aux_value) = if use_aux {
        let aux = g.aux_term(spec)?;
        let aux_value = g.value(aux);
        if weight != 0.0 {
            let scaled = g.tape.scale(aux, weight)?;
            (g.tape.add(ad, scaled)?, aux_value)
        } else {
            (ad, aux_value)
        }
    } else {
        (ad, 0.0)
    };
    let leaves = g.student_leaves();
    let mut gm = g.tape.backprop_scalar(total, &leaves)?;
    let grads = leaves
        .iter()
        .map(|&l| gm.remove(l).expect("requested leaf"))
        .collect();
    let step = StepLoss {
        total: g.value(total),
        ad: g.value(ad),
        aux: aux_value,
        weight,
    };
    Ok((step, grads, g.teacher_passes()))
}

fn epoch_diagnostics(
    model: &Mlp,
    teacher: Option<&Mlp>,
    held: &Dataset,
    d: &DiagnosticsConfig,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let sub;
    let held = if d.max_samples > 0 && d.max_samples < held.len() {
        sub = held.subset(&(0..d.max_samples).collect::<Vec<_>>());
        &sub
    } else {
        held
    };
    let remainder = mean_remainder(model, &held.inputs, &d.probe, 0)?;
    let (gd, gc) = match teacher {
        Some(t) => (
            Some(gradient_distance(t, model, held, GradientProbe::CrossEntropy)?),
            Some(gradient_cosine(t, model, held, GradientProbe::CrossEntropy)?.mean),
        ),
        None => (None, None),
    };
    Ok((gd, gc, Some(remainder)))
}

/// Clean and PGD (`pgd_ce`) accuracy. See [`evaluate_with`].
pub fn evaluate(model: &Mlp, data: &Dataset, attack: Option<&AttackConfig>, seed: u64) -> Result<(f64, f64)> {
    evaluate_with(model, data, attack.map(|a| (a, InnerKind::PgdCe)), seed)
}

/// Clean accuracy and robust accuracy under the given attack.
///
/// A sample counts as robust when it is classified correctly both at `x` and
/// at `x + delta`. Without an attack, or with `epsilon == 0`, robust accuracy
/// equals clean accuracy. Argmax ties go to the lowest class index.
pub fn evaluate_with(
    model: &Mlp,
    data: &Dataset,
    attack: Option<(&AttackConfig, InnerKind)>,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return contract("empty dataset");
    }
    let n = data.len();
    let mut clean_ok = 0usize;
    let mut robust_ok = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(256) {
        let (xs, ys) = data.gather(chunk);
        let logits = model.logits_batch(&xs)?;
        let correct: Vec<bool> = (0..xs.rows()).map(|r| argmax(logits.row(r)) == ys[r]).collect();
        clean_ok += correct.iter().filter(|&&c| c).count();
        let adv_correct = match attack {
            Some((cfg, kind)) if cfg.epsilon != 0.0 => {
                let obj = InnerObjective::new(kind, model, None)?;
                let (delta, _) = pgd_batch(&obj, &xs, &ys, cfg, &sample_seeds(seed, chunk))?;
                let adv = model.logits_batch(&xs.add(&delta)?)?;
                (0..xs.rows()).map(|r| argmax(adv.row(r)) == ys[r]).collect()
            }
            _ => correct.clone(),
        };
        robust_ok += correct.iter().zip(&adv_correct).filter(|(&c, &a)| c && a).count();
    }
    Ok((clean_ok as f64 / n as f64, robust_ok as f64 / n as f64))
}

/// Outcome of one grid-search candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub history: TrainHistory,
}

/// Trains once per alpha and returns the index of the candidate with the best
/// final held-out PGD accuracy (earliest on ties) together with every run.
pub fn grid_search_alpha(
    student_init: &Mlp,
    teacher: Option<&Mlp>,
    data: &Dataset,
    cfg: &TrainConfig,
    alphas: &[f64],
    clock: &dyn Clock,
) -> Result<(usize, Vec<GridPoint>)> {
    if alphas.is_empty() {
        return config("alpha grid is empty");
    }
    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.loss.igdm_alpha = alpha;
        let history = run_training(student_init, teacher, data, &c, clock)?;
        points.push(GridPoint { alpha, history });
    }
    let score = |p: &GridPoint| p.history.records.last().map_or(f64::NEG_INFINITY, |r| r.pgd_acc);
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if score(p) > score(&points[best]) {
            best = i;
        }
    }
    Ok((best, points))
}
