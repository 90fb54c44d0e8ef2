//! Outer-minimization losses.
//!
//! Every loss is built on a [`Tape`] over a batch and reduced by the mean over
//! rows, so the same graph serves both the parameter update (student leaves
//! bound as parameters) and plain evaluation. Teacher outputs enter the graph
//! as constants.
//!
//! KL convention: `kl(pred, target) = sum_k q_k (log q_k - log p_k)` with `q`
//! the target distribution. Student outputs are the prediction side; teacher
//! or clean outputs are the target unless [`LossSpec::kl_reverse`] is set.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::model::{BoundMlp, Mlp};
use crate::tape::{LeafKind, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdKind {
    /// Cross-entropy on clean inputs only.
    Natural,
    PgdAt,
    Trades,
    Ard,
    Rslad,
    Adaad,
    /// ARD plus a TRADES-style regularizer in place of IGDM.
    TradesReg,
    /// ARD plus `D(S(x+d), S(x-d))` in place of IGDM.
    IgdmTradesLike,
}

impl AdKind {
    pub fn needs_teacher(self) -> bool {
        matches!(
            self,
            AdKind::Ard | AdKind::Rslad | AdKind::Adaad | AdKind::TradesReg | AdKind::IgdmTradesLike
        )
    }

    /// Whether the outer loss consumes the crafted perturbation.
    pub fn uses_perturbation(self) -> bool {
        !matches!(self, AdKind::Natural)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    Kl,
    L1,
    #[default]
    L2,
}

fn default_one() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    6.0
}

fn default_fd_step() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub ad_kind: AdKind,
    #[serde(default)]
    pub igdm_alpha: f64,
    #[serde(default)]
    pub surrogate: Surrogate,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default = "default_beta")]
    pub trades_beta: f64,
    #[serde(default = "default_one")]
    pub mix_lambda: f64,
    /// Swap prediction and target in the KL terms of the AD losses.
    #[serde(default)]
    pub kl_reverse: bool,
    /// Replace IGDM by finite-difference direct gradient matching.
    #[serde(default)]
    pub direct_matching: bool,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

impl LossSpec {
    pub fn new(ad_kind: AdKind) -> Self {
        LossSpec {
            ad_kind,
            igdm_alpha: 0.0,
            surrogate: Surrogate::L2,
            temperature: 1.0,
            trades_beta: default_beta(),
            mix_lambda: 1.0,
            kl_reverse: false,
            direct_matching: false,
            fd_step: default_fd_step(),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.igdm_alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.igdm_alpha >= 0.0) || !self.igdm_alpha.is_finite() {
            return config("igdm_alpha must be finite and >= 0");
        }
        if !(self.temperature > 0.0) {
            return config("temperature must be > 0");
        }
        if !(self.trades_beta >= 0.0) {
            return config("trades_beta must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.mix_lambda) {
            return config("mix_lambda must lie in [0, 1]");
        }
        if !(self.fd_step > 0.0) {
            return config("fd_step must be > 0");
        }
        Ok(())
    }

    /// Whether the auxiliary term (IGDM, direct matching or an ablation) is in play.
    pub fn has_aux_term(&self) -> bool {
        self.igdm_alpha > 0.0
            || matches!(self.ad_kind, AdKind::TradesReg | AdKind::IgdmTradesLike)
    }

    pub fn needs_teacher(&self) -> bool {
        self.ad_kind.needs_teacher() || (self.igdm_alpha > 0.0 && self.aux_needs_teacher())
    }

    fn aux_needs_teacher(&self) -> bool {
        !matches!(self.ad_kind, AdKind::TradesReg | AdKind::IgdmTradesLike)
    }
}

/// `T(alpha) = epoch / total_epochs * alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampSchedule {
    pub alpha: f64,
    pub total_epochs: usize,
}

impl RampSchedule {
    pub fn new(alpha: f64, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 {
            return contract("ramp needs at least one epoch");
        }
        Ok(RampSchedule { alpha, total_epochs })
    }

    pub fn weight(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return contract(format!("epoch {epoch} beyond {} total", self.total_epochs));
        }
        Ok(epoch as f64 / self.total_epochs as f64 * self.alpha)
    }
}

/// `ad + T(alpha) * igdm` at `epoch`.
pub fn combined_loss(ad: f64, igdm: f64, ramp: &RampSchedule, epoch: usize) -> Result<f64> {
    Ok(ad + ramp.weight(epoch)? * igdm)
}

// ---- tape primitives, row-wise over [b x k] ----

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return contract(format!("label {y} outside [0, {k})"));
        }
        t.data_mut()[i * k + y] = 1.0;
    }
    Ok(t)
}

/// Per-row cross-entropy `-log softmax(z)[y]`, `[b]`.
pub fn ce_rows(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let k = tape.value(logits).cols();
    let mask = tape.constant(one_hot(labels, k)?);
    let lsm = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(lsm, mask)?;
    let s = tape.sum_rows(picked)?;
    tape.scale(s, -1.0)
}

/// Per-row `KL(softmax(target/tau) || softmax(pred/tau))`, `[b]`.
pub fn kl_rows(tape: &mut Tape, pred: NodeId, target: NodeId, tau: f64) -> Result<NodeId> {
    let (p, q) = if tau == 1.0 {
        (pred, target)
    } else {
        (tape.scale(pred, 1.0 / tau)?, tape.scale(target, 1.0 / tau)?)
    };
    let log_p = tape.log_softmax_rows(p)?;
    let log_q = tape.log_softmax_rows(q)?;
    let q = tape.exp(log_q)?;
    let gap = tape.sub(log_q, log_p)?;
    let terms = tape.mul(q, gap)?;
    tape.sum_rows(terms)
}

/// Per-row discrepancy `D(a, b)`; `a` is the target side for KL.
pub fn surrogate_rows(tape: &mut Tape, metric: Surrogate, a: NodeId, b: NodeId) -> Result<NodeId> {
    match metric {
        Surrogate::L1 => {
            let d = tape.sub(a, b)?;
            let d = tape.abs(d)?;
            tape.sum_rows(d)
        }
        Surrogate::L2 => {
            let d = tape.sub(a, b)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum_rows(sq)?;
            tape.sqrt(s)
        }
        Surrogate::Kl => kl_rows(tape, b, a, 1.0),
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => x.clone().reshape(vec![1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::Shape {
            expected: vec![0, 0],
            got: x.shape().to_vec(),
        }),
    }
}

fn check_pair(student: &Mlp, teacher: &Mlp) -> Result<()> {
    if student.num_classes() != teacher.num_classes() || student.input_dim() != teacher.input_dim() {
        return config(format!(
            "student ({} -> {}) and teacher ({} -> {}) disagree on input or class count",
            student.input_dim(),
            student.num_classes(),
            teacher.input_dim(),
            teacher.num_classes()
        ));
    }
    Ok(())
}

/// Loss graph for one batch: `x`, its perturbation `delta` and labels.
///
/// Student outputs at `x`, `x + delta` and `x - delta` are recorded lazily and
/// shared between terms; teacher outputs are computed once as constants.
pub struct LossGraph<'a> {
    pub tape: Tape,
    student: BoundMlp,
    teacher: Option<&'a Mlp>,
    x: Tensor,
    delta: Tensor,
    labels: Vec<usize>,
    s_clean: Option<NodeId>,
    s_plus: Option<NodeId>,
    s_minus: Option<NodeId>,
    t_clean: Option<NodeId>,
    t_plus: Option<NodeId>,
    t_minus: Option<NodeId>,
    teacher_passes: u64,
}

impl<'a> LossGraph<'a> {
    pub fn new(
        student: &Mlp,
        student_leaves: LeafKind,
        teacher: Option<&'a Mlp>,
        x: &Tensor,
        delta: &Tensor,
        labels: &[usize],
    ) -> Result<Self> {
        let x = as_batch(x)?;
        let delta = as_batch(delta)?;
        delta.expect_shape(x.shape())?;
        if x.cols() != student.input_dim() {
            return Err(Error::Shape {
                expected: vec![x.rows(), student.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        if labels.len() != x.rows() {
            return Err(Error::Shape {
                expected: vec![x.rows()],
                got: vec![labels.len()],
            });
        }
        if let Some(t) = teacher {
            check_pair(student, t)?;
        }
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, student_leaves)?;
        Ok(LossGraph {
            tape,
            student: bound,
            teacher,
            x,
            delta,
            labels: labels.to_vec(),
            s_clean: None,
            s_plus: None,
            s_minus: None,
            t_clean: None,
            t_plus: None,
            t_minus: None,
            teacher_passes: 0,
        })
    }

    pub fn student_leaves(&self) -> Vec<NodeId> {
        self.student.param_leaves()
    }

    /// Teacher batch forwards performed so far.
    pub fn teacher_passes(&self) -> u64 {
        self.teacher_passes
    }

    fn shifted(&self, sign: f64) -> Result<Tensor> {
        self.x.zip_map(&self.delta, |a, d| a + sign * d)
    }

    fn student_at(&mut self, which: i8) -> Result<NodeId> {
        let slot = match which {
            0 => self.s_clean,
            1 => self.s_plus,
            _ => self.s_minus,
        };
        if let Some(id) = slot {
            return Ok(id);
        }
        let input = match which {
            0 => self.x.clone(),
            1 => self.shifted(1.0)?,
            _ => self.shifted(-1.0)?,
        };
        let leaf = self.tape.constant(input);
        let id = self.student.logits(&mut self.tape, leaf)?;
        match which {
            0 => self.s_clean = Some(id),
            1 => self.s_plus = Some(id),
            _ => self.s_minus = Some(id),
        }
        Ok(id)
    }

    fn teacher_at(&mut self, which: i8) -> Result<NodeId> {
        let slot = match which {
            0 => self.t_clean,
            1 => self.t_plus,
            _ => self.t_minus,
        };
        if let Some(id) = slot {
            return Ok(id);
        }
        let Some(teacher) = self.teacher else {
            return config("this loss needs a teacher model");
        };
        let input = match which {
            0 => self.x.clone(),
            1 => self.shifted(1.0)?,
            _ => self.shifted(-1.0)?,
        };
        let logits = teacher.logits_batch(&input)?;
        self.teacher_passes += 1;
        let id = self.tape.constant(logits);
        match which {
            0 => self.t_clean = Some(id),
            1 => self.t_plus = Some(id),
            _ => self.t_minus = Some(id),
        }
        Ok(id)
    }

    fn mean(&mut self, rows: NodeId) -> Result<NodeId> {
        self.tape.mean(rows)
    }

    fn kl_student(&mut self, student: NodeId, reference: NodeId, spec: &LossSpec, tau: f64) -> Result<NodeId> {
        if spec.kl_reverse {
            kl_rows(&mut self.tape, reference, student, tau)
        } else {
            kl_rows(&mut self.tape, student, reference, tau)
        }
    }

    fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, id) in terms {
            let t = if w == 1.0 { id } else { self.tape.scale(id, w)? };
            acc = Some(match acc {
                None => t,
                Some(a) => self.tape.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::Contract("empty loss".into()))
    }

    /// Mean cross-entropy of the student at `x`.
    pub fn clean_ce(&mut self) -> Result<NodeId> {
        let s = self.student_at(0)?;
        let labels = self.labels.clone();
        let rows = ce_rows(&mut self.tape, s, &labels)?;
        self.mean(rows)
    }

    /// Outer loss of the base adversarial method. The ablation kinds return
    /// their ARD base; their extra term comes from [`LossGraph::aux_term`].
    pub fn ad_loss(&mut self, spec: &LossSpec) -> Result<NodeId> {
        let lambda = spec.mix_lambda;
        let tau = spec.temperature;
        let labels = self.labels.clone();
        match spec.ad_kind {
            AdKind::Natural => self.clean_ce(),
            AdKind::PgdAt => {
                let s = self.student_at(1)?;
                let rows = ce_rows(&mut self.tape, s, &labels)?;
                self.mean(rows)
            }
            AdKind::Trades => {
                let ce = self.clean_ce()?;
                let s_adv = self.student_at(1)?;
                let s_clean = self.student_at(0)?;
                let kl = self.kl_student(s_adv, s_clean, spec, 1.0)?;
                let kl = self.mean(kl)?;
                self.weighted_sum(&[(1.0, ce), (spec.trades_beta, kl)])
            }
            AdKind::Ard | AdKind::TradesReg | AdKind::IgdmTradesLike => {
                let s_adv = self.student_at(1)?;
                let t_clean = self.teacher_at(0)?;
                let kl = self.kl_student(s_adv, t_clean, spec, tau)?;
                let kl = self.mean(kl)?;
                if lambda == 1.0 {
                    self.weighted_sum(&[(tau * tau, kl)])
                } else {
                    let ce = self.clean_ce()?;
                    self.weighted_sum(&[(1.0 - lambda, ce), (lambda * tau * tau, kl)])
                }
            }
            AdKind::Rslad | AdKind::Adaad => {
                let s_adv = self.student_at(1)?;
                let t_ref_adv = if spec.ad_kind == AdKind::Rslad {
                    self.teacher_at(0)?
                } else {
                    self.teacher_at(1)?
                };
                let adv = self.kl_student(s_adv, t_ref_adv, spec, 1.0)?;
                let adv = self.mean(adv)?;
                if lambda == 1.0 {
                    return Ok(adv);
                }
                let s_clean = self.student_at(0)?;
                let t_clean = self.teacher_at(0)?;
                let clean = self.kl_student(s_clean, t_clean, spec, 1.0)?;
                let clean = self.mean(clean)?;
                self.weighted_sum(&[(lambda, adv), (1.0 - lambda, clean)])
            }
        }
    }

    /// `D(T(x+d) - T(x-d), S(x+d) - S(x-d))`, batch mean.
    pub fn igdm(&mut self, metric: Surrogate) -> Result<NodeId> {
        let sp = self.student_at(1)?;
        let sm = self.student_at(-1)?;
        let tp = self.teacher_at(1)?;
        let tm = self.teacher_at(-1)?;
        let s_diff = self.tape.sub(sp, sm)?;
        let t_diff = self.tape.sub(tp, tm)?;
        let rows = surrogate_rows(&mut self.tape, metric, t_diff, s_diff)?;
        self.mean(rows)
    }

    /// `D(S(x+d), S(x))`, batch mean.
    pub fn trades_reg(&mut self, metric: Surrogate) -> Result<NodeId> {
        let sp = self.student_at(1)?;
        let sc = self.student_at(0)?;
        let rows = surrogate_rows(&mut self.tape, metric, sp, sc)?;
        self.mean(rows)
    }

    /// `D(S(x+d), S(x-d))`, batch mean.
    pub fn trades_like(&mut self, metric: Surrogate) -> Result<NodeId> {
        let sp = self.student_at(1)?;
        let sm = self.student_at(-1)?;
        let rows = surrogate_rows(&mut self.tape, metric, sp, sm)?;
        self.mean(rows)
    }

    /// Row-wise `D` between the student's finite-difference input Jacobian and
    /// the teacher's exact one, summed over logit rows, batch mean.
    pub fn direct(&mut self, metric: Surrogate, h: f64) -> Result<NodeId> {
        if !(h > 0.0) {
            return contract("finite-difference step must be positive");
        }
        let Some(teacher) = self.teacher else {
            return config("direct gradient matching needs a teacher model");
        };
        let (b, d) = (self.x.rows(), self.x.cols());
        let k = teacher.num_classes();
        let jac_t = teacher.batch_input_jacobians(&self.x)?;
        self.teacher_passes += 1;
        let mut t_rows = Vec::with_capacity(b * k * d);
        for j in &jac_t {
            t_rows.extend_from_slice(j.data());
        }
        let t_node = self.tape.constant(Tensor::matrix(b * k, d, t_rows));

        // student Jacobian assembled as [b*k x d], column i from a central difference along e_i
        let mut s_jac: Option<NodeId> = None;
        for i in 0..d {
            let mut plus = self.x.clone();
            let mut minus = self.x.clone();
            for r in 0..b {
                plus.data_mut()[r * d + i] += h;
                minus.data_mut()[r * d + i] -= h;
            }
            let lp = self.tape.constant(plus);
            let lm = self.tape.constant(minus);
            let sp = self.student.logits(&mut self.tape, lp)?;
            let sm = self.student.logits(&mut self.tape, lm)?;
            let diff = self.tape.sub(sp, sm)?;
            let col = self.tape.scale(diff, 0.5 / h)?;
            let col = self.tape.reshape(col, &[b * k, 1])?;
            let mut e = Tensor::zeros(&[1, d]);
            e.data_mut()[i] = 1.0;
            let e = self.tape.constant(e);
            let placed = self.tape.matmul(col, e)?;
            s_jac = Some(match s_jac {
                None => placed,
                Some(acc) => self.tape.add(acc, placed)?,
            });
        }
        let s_jac = s_jac.expect("input dimension is positive");
        let rows = surrogate_rows(&mut self.tape, metric, t_node, s_jac)?;
        let total = self.tape.sum(rows)?;
        self.tape.scale(total, 1.0 / b as f64)
    }

    /// The term weighted by the ramp in the combined objective.
    pub fn aux_term(&mut self, spec: &LossSpec) -> Result<NodeId> {
        match spec.ad_kind {
            AdKind::TradesReg => self.trades_reg(spec.surrogate),
            AdKind::IgdmTradesLike => self.trades_like(spec.surrogate),
            _ if spec.direct_matching => self.direct(spec.surrogate, spec.fd_step),
            _ => self.igdm(spec.surrogate),
        }
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.tape.value(id).item()
    }
}

// ---- value-level entry points ----

/// `-log softmax(logits)[y]` for a `K`-vector of logits.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(as_batch(logits)?);
    let rows = ce_rows(&mut tape, z, &[y])?;
    Ok(tape.value(rows).data()[0])
}

/// `KL(softmax(q/tau) || softmax(p/tau))`; `q_logits` is the target.
pub fn kl_div(p_logits: &Tensor, q_logits: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return contract("temperature must be > 0");
    }
    p_logits.expect_shape(q_logits.shape())?;
    let mut tape = Tape::new();
    let p = tape.constant(as_batch(p_logits)?);
    let q = tape.constant(as_batch(q_logits)?);
    let rows = kl_rows(&mut tape, p, q, tau)?;
    Ok(tape.value(rows).data()[0])
}

/// Discrepancy between two `K`-vectors; `a` is the target for KL.
pub fn surrogate_d(metric: Surrogate, a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape())?;
    let mut tape = Tape::new();
    let a = tape.constant(as_batch(a)?);
    let b = tape.constant(as_batch(b)?);
    let rows = surrogate_rows(&mut tape, metric, a, b)?;
    Ok(tape.value(rows).data()[0])
}

/// IGDM loss for a sample (`[d]`) or batch (`[b x d]`, batch mean).
pub fn igdm_loss(student: &Mlp, teacher: &Mlp, x: &Tensor, delta: &Tensor, spec: &LossSpec) -> Result<f64> {
    let labels = vec![0; as_batch(x)?.rows()];
    let mut g = LossGraph::new(student, LeafKind::Constant, Some(teacher), x, delta, &labels)?;
    let id = g.igdm(spec.surrogate)?;
    Ok(g.value(id))
}

/// Outer loss of `kind`; the ablation kinds return `weight * D(..)` only.
#[allow(clippy::too_many_arguments)]
pub fn ad_outer_loss(
    kind: AdKind,
    student: &Mlp,
    teacher: Option<&Mlp>,
    x: &Tensor,
    delta: &Tensor,
    labels: &[usize],
    spec: &LossSpec,
    weight: f64,
) -> Result<f64> {
    let mut g = LossGraph::new(student, LeafKind::Constant, teacher, x, delta, labels)?;
    let mut spec = spec.clone();
    spec.ad_kind = kind;
    match kind {
        AdKind::TradesReg => {
            let id = g.trades_reg(spec.surrogate)?;
            Ok(weight * g.value(id))
        }
        AdKind::IgdmTradesLike => {
            let id = g.trades_like(spec.surrogate)?;
            Ok(weight * g.value(id))
        }
        _ => {
            if kind.needs_teacher() && teacher.is_none() {
                return config("this loss needs a teacher model");
            }
            let id = g.ad_loss(&spec)?;
            Ok(g.value(id))
        }
    }
}

/// `weight * D(J_S, J_T)` with the student Jacobian from central differences.
pub fn direct_gradient_loss(
    student: &Mlp,
    teacher: &Mlp,
    x: &Tensor,
    spec: &LossSpec,
    h: f64,
    weight: f64,
) -> Result<f64> {
    let xb = as_batch(x)?;
    let labels = vec![0; xb.rows()];
    let zero = Tensor::zeros(xb.shape());
    let mut g = LossGraph::new(student, LeafKind::Constant, Some(teacher), &xb, &zero, &labels)?;
    let id = g.direct(spec.surrogate, h)?;
    Ok(weight * g.value(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_mlp, Activation, Architecture};

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn ce_uniform_and_shift_invariance() {
        let ce = cross_entropy(&v(&[0.3, 0.3]), 1).unwrap();
        assert!((ce - core::f64::consts::LN_2).abs() < 1e-15);
        let ce4 = cross_entropy(&v(&[0.0; 4]), 2).unwrap();
        assert!((ce4 - libm::log(4.0)).abs() < 1e-15);
        let a = cross_entropy(&v(&[1.0, -2.0, 0.5]), 2).unwrap();
        let b = cross_entropy(&v(&[101.0, 98.0, 100.5]), 2).unwrap();
        assert!((a - b).abs() <= 1e-12);
        assert!(cross_entropy(&v(&[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn ce_confident_logits() {
        // log(1 + e^-20) = 2.061153620314381e-9 (log1p expansion)
        let ce = cross_entropy(&v(&[10.0, -10.0]), 0).unwrap();
        assert!((ce - 2.061153620314381e-9).abs() < 1e-18, "{ce}");
    }

    #[test]
    fn kl_properties() {
        assert_eq!(kl_div(&v(&[0.2, 1.0]), &v(&[0.2, 1.0]), 1.0).unwrap(), 0.0);
        assert!(kl_div(&v(&[0.0]), &v(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn surrogate_values() {
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        for m in [Surrogate::Kl, Surrogate::L1, Surrogate::L2] {
            assert_eq!(surrogate_d(m, &a, &a).unwrap(), 0.0);
        }
        assert_eq!(surrogate_d(Surrogate::L2, &a, &b).unwrap(), core::f64::consts::SQRT_2);
        assert_eq!(surrogate_d(Surrogate::L1, &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap(), 3.0);
        assert!(surrogate_d(Surrogate::L1, &a, &v(&[1.0])).is_err());
    }

    #[test]
    fn ramp_and_combination() {
        let ramp = RampSchedule::new(100.0, 200).unwrap();
        assert_eq!(combined_loss(1.5, 2.0, &ramp, 0).unwrap(), 1.5);
        assert_eq!(combined_loss(1.5, 2.0, &ramp, 200).unwrap(), 1.5 + 200.0);
        assert_eq!(combined_loss(1.0, 1.0, &ramp, 100).unwrap(), 51.0);
        assert!(combined_loss(1.0, 1.0, &ramp, 201).is_err());
        assert!(RampSchedule::new(1.0, 0).is_err());
    }

    fn pair() -> (Mlp, Mlp) {
        let a = Architecture::new(3, vec![6], 3, Activation::Relu);
        (init_mlp(&a, 1).unwrap(), init_mlp(&a, 2).unwrap())
    }

    #[test]
    fn igdm_vanishes_for_identical_models_and_zero_delta() {
        let (s, t) = pair();
        let x = v(&[0.2, 0.4, 0.6]);
        let d = v(&[0.03, -0.03, 0.01]);
        for m in [Surrogate::Kl, Surrogate::L1, Surrogate::L2] {
            let mut spec = LossSpec::new(AdKind::Ard);
            spec.surrogate = m;
            assert_eq!(igdm_loss(&s, &s, &x, &d, &spec).unwrap(), 0.0);
            assert_eq!(igdm_loss(&s, &t, &x, &Tensor::zeros(&[3]), &spec).unwrap(), 0.0);
        }
    }

    #[test]
    fn igdm_rejects_mismatched_classes() {
        let (s, _) = pair();
        let t = init_mlp(&Architecture::new(3, vec![6], 4, Activation::Relu), 0).unwrap();
        let x = v(&[0.2, 0.4, 0.6]);
        let spec = LossSpec::new(AdKind::Ard);
        assert!(matches!(igdm_loss(&s, &t, &x, &x, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_outer_losses() {
        let (s, t) = pair();
        let x = v(&[0.2, 0.4, 0.6]);
        let d = v(&[0.03, -0.03, 0.01]);
        let mut spec = LossSpec::new(AdKind::Adaad);
        spec.mix_lambda = 1.0;
        assert_eq!(ad_outer_loss(AdKind::Adaad, &s, Some(&s), &x, &d, &[1], &spec, 0.0).unwrap(), 0.0);

        spec.trades_beta = 0.0;
        let trades = ad_outer_loss(AdKind::Trades, &s, None, &x, &d, &[1], &spec, 0.0).unwrap();
        let ce = cross_entropy(&s.forward(&x).unwrap(), 1).unwrap();
        assert_eq!(trades, ce);

        // rslad with S(x) = S(x+d) = T(x): zero perturbation and identical models
        spec.mix_lambda = 0.5;
        let zero = Tensor::zeros(&[3]);
        assert_eq!(ad_outer_loss(AdKind::Rslad, &s, Some(&s), &x, &zero, &[1], &spec, 0.0).unwrap(), 0.0);

        assert!(matches!(
            ad_outer_loss(AdKind::Ard, &s, None, &x, &d, &[1], &spec, 0.0),
            Err(Error::Config(_))
        ));
        assert!(ad_outer_loss(AdKind::Ard, &s, Some(&t), &x, &d, &[1], &spec, 0.0).unwrap() > 0.0);
    }

    #[test]
    fn direct_loss_weight_zero_and_identical_models() {
        let (s, t) = pair();
        let x = v(&[0.2, 0.4, 0.6]);
        let spec = LossSpec::new(AdKind::Ard);
        assert_eq!(direct_gradient_loss(&s, &t, &x, &spec, 1e-4, 0.0).unwrap(), 0.0);
        let same = direct_gradient_loss(&s, &s, &x, &spec, 1e-4, 1.0).unwrap();
        assert!(same <= 1e-8, "{same}");
    }
}
