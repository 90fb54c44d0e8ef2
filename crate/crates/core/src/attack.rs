//! l-infinity perturbations: FGSM and PGD over four inner objectives.
//!
//! Attacks run on batches, but every objective is a sum of per-row terms, so
//! the gradient of row `i` is exactly what a single-sample attack would see.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::loss::{ce_rows, kl_rows};
use crate::model::Mlp;
use crate::tape::{LeafKind, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    /// `CE(S(x+d), y)`
    PgdCe,
    /// `KL(S(x+d) || S(x))`
    TradesKl,
    /// `KL(S(x+d) || T(x))`
    RsladKl,
    /// `KL(S(x+d) || T(x+d))`
    AdaadKl,
}

impl InnerKind {
    pub fn needs_teacher(self) -> bool {
        matches!(self, InnerKind::RsladKl | InnerKind::AdaadKl)
    }

    pub fn name(self) -> &'static str {
        match self {
            InnerKind::PgdCe => "pgd_ce",
            InnerKind::TradesKl => "trades_kl",
            InnerKind::RsladKl => "rslad_kl",
            InnerKind::AdaadKl => "adaad_kl",
        }
    }
}

/// The function an attack maximizes.
#[derive(Debug, Clone, Copy)]
pub struct InnerObjective<'a> {
    pub kind: InnerKind,
    pub student: &'a Mlp,
    pub teacher: Option<&'a Mlp>,
}

impl<'a> InnerObjective<'a> {
    pub fn new(kind: InnerKind, student: &'a Mlp, teacher: Option<&'a Mlp>) -> Result<Self> {
        if kind.needs_teacher() && teacher.is_none() {
            return config(alloc::format!("inner objective {} needs a teacher", kind.name()));
        }
        Ok(InnerObjective { kind, student, teacher })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub clamp: (f64, f64),
}

impl AttackConfig {
    /// Training-time defaults: 10 steps of 2/255 inside an 8/255 ball, random start.
    pub fn training(clamp: (f64, f64)) -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: true,
            clamp,
        }
    }

    /// Evaluation defaults: PGD-20 with random start.
    pub fn evaluation(clamp: (f64, f64)) -> Self {
        AttackConfig {
            steps: 20,
            ..AttackConfig::training(clamp)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.step_size > 0.0) || self.steps == 0 {
            return config("attack needs epsilon > 0, step_size > 0 and steps >= 1");
        }
        if !(self.clamp.0 < self.clamp.1) {
            return config("attack clamp must satisfy lo < hi");
        }
        Ok(())
    }
}

/// Teacher batch forwards spent by an attack.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttackStats {
    pub teacher_passes: u64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Returns `d` such that `x + d` lands exactly on `target`, when a float allows it.
fn exact_offset(x: f64, target: f64) -> f64 {
    let mut d = target - x;
    for _ in 0..4 {
        let got = x + d;
        if got == target {
            break;
        }
        d = if got > target { d.next_down() } else { d.next_up() };
    }
    d
}

/// Projects every row of `delta` onto the ball and `x + delta` into the clamp range.
fn project(x: &Tensor, delta: &mut Tensor, cfg: &AttackConfig) {
    let (lo, hi) = cfg.clamp;
    for (d, &xv) in delta.data_mut().iter_mut().zip(x.data()) {
        let within = d.clamp(-cfg.epsilon, cfg.epsilon);
        let point = (xv + within).clamp(lo, hi);
        let mut off = exact_offset(xv, point);
        // the bound itself may not be reachable as xv + off; step inward instead
        for _ in 0..64 {
            let got = xv + off;
            if got > hi {
                off = off.next_down();
            } else if got < lo {
                off = off.next_up();
            } else {
                break;
            }
        }
        *d = off;
    }
}

/// Clean-input references that stay fixed across attack steps.
struct Targets {
    clean: Option<Tensor>,
}

fn targets(obj: &InnerObjective, xs: &Tensor, stats: &mut AttackStats) -> Result<Targets> {
    let clean = match obj.kind {
        InnerKind::TradesKl => Some(obj.student.logits_batch(xs)?),
        InnerKind::RsladKl => {
            stats.teacher_passes += 1;
            Some(obj.teacher.expect("checked at construction").logits_batch(xs)?)
        }
        _ => None,
    };
    Ok(Targets { clean })
}

/// Per-row objective values and the gradient of their sum with respect to the input.
fn value_and_grad(
    obj: &InnerObjective,
    point: &Tensor,
    labels: &[usize],
    tg: &Targets,
    stats: &mut AttackStats,
    want_grad: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let s = obj.student.bind(&mut tape, LeafKind::Constant)?;
    let input = tape.input(point.clone());
    let s_out = s.logits(&mut tape, input)?;
    let rows = match obj.kind {
        InnerKind::PgdCe => ce_rows(&mut tape, s_out, labels)?,
        InnerKind::TradesKl | InnerKind::RsladKl => {
            let t = tape.constant(tg.clean.clone().expect("prepared target"));
            kl_rows(&mut tape, s_out, t, 1.0)?
        }
        InnerKind::AdaadKl => {
            let teacher = obj.teacher.expect("checked at construction");
            let t = teacher.bind(&mut tape, LeafKind::Constant)?;
            let t_out = t.logits(&mut tape, input)?;
            stats.teacher_passes += 1;
            kl_rows(&mut tape, s_out, t_out, 1.0)?
        }
    };
    let values = tape.value(rows).clone();
    if !want_grad {
        return Ok((values, None));
    }
    let total = tape.sum(rows)?;
    let mut g = tape.backprop_scalar(total, &[input])?;
    Ok((values, g.remove(input)))
}

fn check_batch(obj: &InnerObjective, xs: &Tensor, labels: &[usize]) -> Result<()> {
    if xs.rank() != 2 || xs.cols() != obj.student.input_dim() || xs.rows() != labels.len() {
        return Err(Error::Shape {
            expected: vec![labels.len(), obj.student.input_dim()],
            got: xs.shape().to_vec(),
        });
    }
    Ok(())
}

fn signed_step(x: &Tensor, delta: &mut Tensor, grad: &Tensor, step: f64, cfg: &AttackConfig) {
    for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
        *d += step * sign(g);
    }
    project(x, delta, cfg);
}

/// FGSM over a `[b x d]` batch.
pub fn fgsm_batch(
    obj: &InnerObjective,
    xs: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackStats)> {
    cfg.validate()?;
    check_batch(obj, xs, labels)?;
    let mut stats = AttackStats::default();
    let tg = targets(obj, xs, &mut stats)?;
    let (_, g) = value_and_grad(obj, xs, labels, &tg, &mut stats, true)?;
    let mut delta = Tensor::zeros(xs.shape());
    signed_step(xs, &mut delta, &g.expect("gradient requested"), cfg.epsilon, cfg);
    Ok((delta, stats))
}

/// PGD over a `[b x d]` batch; row `i` draws its random start from `seeds[i]`.
pub fn pgd_batch(
    obj: &InnerObjective,
    xs: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<(Tensor, AttackStats)> {
    cfg.validate()?;
    check_batch(obj, xs, labels)?;
    if seeds.len() != xs.rows() {
        return Err(Error::Shape {
            expected: vec![xs.rows()],
            got: vec![seeds.len()],
        });
    }
    let mut stats = AttackStats::default();
    let tg = targets(obj, xs, &mut stats)?;
    let mut delta = Tensor::zeros(xs.shape());
    if cfg.random_start {
        let d = xs.cols();
        let unif = Uniform::new_inclusive(-cfg.epsilon, cfg.epsilon).expect("epsilon > 0");
        for (row, &seed) in delta.data_mut().chunks_mut(d).zip(seeds) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in row {
                *v = unif.sample(&mut rng);
            }
        }
        project(xs, &mut delta, cfg);
    }
    for _ in 0..cfg.steps {
        let point = xs.add(&delta)?;
        let (_, g) = value_and_grad(obj, &point, labels, &tg, &mut stats, true)?;
        signed_step(xs, &mut delta, &g.expect("gradient requested"), cfg.step_size, cfg);
    }
    Ok((delta, stats))
}

fn single(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::Shape {
            expected: vec![x.len()],
            got: x.shape().to_vec(),
        });
    }
    x.clone().reshape(vec![1, x.len()])
}

/// FGSM for a single `d`-vector.
pub fn fgsm(obj: &InnerObjective, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    let (d, _) = fgsm_batch(obj, &single(x)?, &[y], cfg)?;
    d.reshape(vec![x.len()])
}

/// PGD for a single `d`-vector.
pub fn pgd(obj: &InnerObjective, x: &Tensor, y: usize, cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    let (d, _) = pgd_batch(obj, &single(x)?, &[y], cfg, &[seed])?;
    d.reshape(vec![x.len()])
}

/// Objective evaluated at `x + delta`.
pub fn objective_value(obj: &InnerObjective, x: &Tensor, delta: &Tensor, y: usize) -> Result<f64> {
    delta.expect_shape(x.shape())?;
    let xs = single(x)?;
    let mut stats = AttackStats::default();
    let tg = targets(obj, &xs, &mut stats)?;
    let point = xs.add(&single(delta)?)?;
    let (v, _) = value_and_grad(obj, &point, &[y], &tg, &mut stats, false)?;
    Ok(v.data()[0])
}

/// Gradient of the objective with respect to the input at `x + delta`.
pub fn objective_gradient(obj: &InnerObjective, x: &Tensor, delta: &Tensor, y: usize) -> Result<Tensor> {
    delta.expect_shape(x.shape())?;
    let xs = single(x)?;
    let mut stats = AttackStats::default();
    let tg = targets(obj, &xs, &mut stats)?;
    let point = xs.add(&single(delta)?)?;
    let (_, g) = value_and_grad(obj, &point, &[y], &tg, &mut stats, true)?;
    g.expect("gradient requested").reshape(vec![x.len()])
}

/// Per-sample seeds `base ^ index`.
pub fn sample_seeds(base: u64, indices: &[usize]) -> Vec<u64> {
    indices.iter().map(|&i| base ^ i as u64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_mlp, Activation, Architecture, Layer, ParamSet};

    /// Logistic regression as logits `(0, w x)`.
    fn logistic(w: f64) -> Mlp {
        let arch = Architecture::new(1, vec![], 2, Activation::Relu);
        let params = ParamSet {
            layers: vec![Layer {
                weight: Tensor::matrix(2, 1, vec![0.0, w]),
                bias: Tensor::zeros(&[2]),
            }],
        };
        Mlp::new(arch, params).unwrap()
    }

    fn cfg(eps: f64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            step_size: eps,
            steps: 1,
            random_start: false,
            clamp: (0.0, 1.0),
        }
    }

    #[test]
    fn exact_offset_lands_on_target() {
        for (x, t) in [(0.3, 1.0), (0.1, 0.0), (0.7, 0.73), (1e-17, 1.0)] {
            let d = exact_offset(x, t);
            assert_eq!(x + d, t);
        }
    }

    #[test]
    fn projection_stays_inside_unreachable_bounds() {
        let x = Tensor::vector(vec![0.3, 0.7]);
        let mut delta = Tensor::vector(vec![-0.3, 0.3]);
        let mut c = cfg(0.5);
        c.clamp = (1e-20, 1.0 - 1e-17);
        project(&x, &mut delta, &c);
        for (d, xv) in delta.data().iter().zip(x.data()) {
            assert!((c.clamp.0..=c.clamp.1).contains(&(xv + d)));
        }
    }

    #[test]
    fn identical_models_under_adaad_do_not_move() {
        let m = init_mlp(&Architecture::new(3, vec![4], 3, Activation::Relu), 5).unwrap();
        let obj = InnerObjective::new(InnerKind::AdaadKl, &m, Some(&m)).unwrap();
        let x = Tensor::vector(vec![0.5, 0.5, 0.5]);
        let d = fgsm(&obj, &x, 0, &cfg(0.1)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logistic_sign_direction() {
        // d CE / dx = (p - e_y) . (0, w); for y = 0 that is p_1 * w > 0
        let m = logistic(2.0);
        let obj = InnerObjective::new(InnerKind::PgdCe, &m, None).unwrap();
        let x = Tensor::vector(vec![0.5]);
        let p1 = 1.0 / (1.0 + libm::exp(-1.0));
        assert!(objective_gradient(&obj, &x, &Tensor::zeros(&[1]), 0).unwrap().data()[0] > 0.0);
        assert!((objective_gradient(&obj, &x, &Tensor::zeros(&[1]), 0).unwrap().data()[0] - 2.0 * p1).abs() < 1e-15);
        let d = fgsm(&obj, &x, 0, &cfg(0.05)).unwrap();
        assert_eq!(x.data()[0] + d.data()[0], 0.55);
        let d1 = fgsm(&obj, &x, 1, &cfg(0.05)).unwrap();
        assert!(d1.data()[0] < 0.0);
    }

    #[test]
    fn clamp_boundary_is_hit_exactly() {
        let m = logistic(2.0);
        let obj = InnerObjective::new(InnerKind::PgdCe, &m, None).unwrap();
        let x = Tensor::vector(vec![0.99]);
        let d = fgsm(&obj, &x, 0, &cfg(0.05)).unwrap();
        assert_eq!(x.data()[0] + d.data()[0], 1.0);
    }

    #[test]
    fn teacher_kinds_need_a_teacher() {
        let m = logistic(1.0);
        assert!(InnerObjective::new(InnerKind::RsladKl, &m, None).is_err());
        assert!(InnerObjective::new(InnerKind::AdaadKl, &m, None).is_err());
        assert!(InnerObjective::new(InnerKind::TradesKl, &m, None).is_ok());
    }

    #[test]
    fn objective_values_at_trivial_points() {
        let m = init_mlp(&Architecture::new(2, vec![4], 4, Activation::Relu), 9).unwrap();
        let x = Tensor::vector(vec![0.2, 0.8]);
        let zero = Tensor::zeros(&[2]);
        let trades = InnerObjective::new(InnerKind::TradesKl, &m, None).unwrap();
        assert_eq!(objective_value(&trades, &x, &zero, 0).unwrap(), 0.0);

        let flat = Mlp::new(
            Architecture::new(2, vec![], 4, Activation::Relu),
            ParamSet::zeros(&Architecture::new(2, vec![], 4, Activation::Relu)),
        )
        .unwrap();
        let ce = InnerObjective::new(InnerKind::PgdCe, &flat, None).unwrap();
        let v = objective_value(&ce, &x, &zero, 3).unwrap();
        assert!((v - libm::log(4.0)).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(0.1);
        c.steps = 0;
        assert!(c.validate().is_err());
        assert!(cfg(0.0).validate().is_err());
        assert!(AttackConfig::training((0.0, 1.0)).validate().is_ok());
    }
}
