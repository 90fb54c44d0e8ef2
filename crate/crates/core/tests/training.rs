mod common;

use common::*;
use igdm_core::attack::{AttackConfig, InnerKind};
use igdm_core::data::{gen_synthetic, Dataset, SyntheticKind, SyntheticSpec};
use igdm_core::loss::{AdKind, LossSpec};
use igdm_core::model::Layer;
use igdm_core::trainer::*;
use igdm_core::{Error, Mlp, ParamSet, Tensor};

fn task(seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::GaussianMixture,
        num_classes: 3,
        dim: 4,
        samples_per_class: 30,
        noise_scale: 0.3,
        seed,
    })
    .unwrap()
}

fn small_cfg(kind: AdKind, inner: InnerKind, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(LossSpec::new(kind), inner, epochs, 16, 3);
    cfg.inner_attack.steps = 3;
    cfg.eval_attack.steps = 3;
    cfg.lr = 0.05;
    cfg
}

#[test]
fn two_momentum_steps() {
    let mut p = ParamSet {
        layers: vec![Layer {
            weight: Tensor::matrix(1, 1, vec![0.0]),
            bias: Tensor::vector(vec![0.0]),
        }],
    };
    let mut v = Velocity::zeros(&p);
    let g = vec![Tensor::matrix(1, 1, vec![1.0]), Tensor::vector(vec![0.0])];
    sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
    sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
    assert!((p.layers[0].weight.data()[0] + 0.1 * (1.0 + 1.9)).abs() <= 1e-15);
}

#[test]
fn weight_decay_joins_the_gradient() {
    let mut p = ParamSet {
        layers: vec![Layer {
            weight: Tensor::matrix(1, 1, vec![2.0]),
            bias: Tensor::vector(vec![0.0]),
        }],
    };
    let mut v = Velocity::zeros(&p);
    let g = vec![Tensor::matrix(1, 1, vec![0.0]), Tensor::vector(vec![0.0])];
    sgd_step(&mut p, &g, &mut v, 0.5, 0.0, 0.1).unwrap();
    assert_eq!(p.layers[0].weight.data()[0], 2.0 - 0.5 * 0.2);
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let data = task(1);
    let init = mlp(&[4, 8], 3, 2);
    let h = run_training(&init, None, &data, &small_cfg(AdKind::PgdAt, InnerKind::PgdCe, 0), &NoClock).unwrap();
    assert!(h.records.is_empty());
    assert_eq!(h.params.to_bits(), init.params.to_bits());
}

#[test]
fn identical_configs_give_identical_histories() {
    let data = task(1);
    let init = mlp(&[4, 8], 3, 2);
    let cfg = small_cfg(AdKind::Trades, InnerKind::TradesKl, 3);
    let a = run_training(&init, None, &data, &cfg, &NoClock).unwrap();
    let b = run_training(&init, None, &data, &cfg, &NoClock).unwrap();
    assert!(a.same_outcome(&b));
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 4;
    assert!(!a.same_outcome(&run_training(&init, None, &data, &other, &NoClock).unwrap()));
}

#[test]
fn zero_alpha_matches_the_bare_method_bit_for_bit() {
    let data = task(2);
    let teacher = mlp(&[4, 16], 3, 9);
    let before = teacher.params.to_bits();
    let init = mlp(&[4, 8], 3, 2);
    let bare = small_cfg(AdKind::Ard, InnerKind::RsladKl, 3);
    let mut zero = bare.clone();
    zero.loss.igdm_alpha = 0.0;
    let mut forced = zero.clone();
    forced.force_aux = true;
    let a = run_training(&init, Some(&teacher), &data, &bare, &NoClock).unwrap();
    let b = run_training(&init, Some(&teacher), &data, &zero, &NoClock).unwrap();
    let c = run_training(&init, Some(&teacher), &data, &forced, &NoClock).unwrap();
    assert!(a.same_outcome(&b));
    assert_eq!(a.params.to_bits(), c.params.to_bits());
    assert!(a.records.iter().all(|r| r.loss_igdm == 0.0));
    assert!(c.records.iter().any(|r| r.loss_igdm > 0.0));
    assert_eq!(teacher.params.to_bits(), before);
}

#[test]
fn recorded_total_is_ad_plus_weighted_aux() {
    let data = task(3);
    let teacher = mlp(&[4, 16], 3, 9);
    let student = mlp(&[4, 8], 3, 2);
    let mut spec = LossSpec::new(AdKind::Ard);
    spec.igdm_alpha = 7.0;
    let (xs, ys) = data.gather(&[0, 1, 2, 3, 4]);
    let delta = Tensor::new(xs.shape().to_vec(), uniform_vec(&mut rng(1), xs.len(), -0.03, 0.03));
    for w in [0.0, 0.35, 7.0] {
        let (step, _, _) = batch_loss_and_grads(&student, Some(&teacher), &xs, &delta, &ys, &spec, w, true).unwrap();
        assert!((step.total - (step.ad + w * step.aux)).abs() <= 1e-12);
    }
}

#[test]
fn training_reduces_the_natural_loss() {
    let data = task(4);
    let init = mlp(&[4, 16], 3, 2);
    let h = run_training(&init, None, &data, &small_cfg(AdKind::Natural, InnerKind::PgdCe, 20), &NoClock).unwrap();
    assert_eq!(h.records.len(), 20);
    assert!(h.records.last().unwrap().loss_total < h.records[0].loss_total);
    assert!(h.records.iter().enumerate().all(|(i, r)| r.epoch == i));
}

#[test]
fn configuration_errors_surface_before_training() {
    let data = task(1);
    let init = mlp(&[4, 8], 3, 2);
    let err = run_training(&init, None, &data, &small_cfg(AdKind::Ard, InnerKind::PgdCe, 1), &NoClock).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = run_training(&init, None, &data, &small_cfg(AdKind::PgdAt, InnerKind::AdaadKl, 1), &NoClock).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let wrong_k = mlp(&[4, 8], 2, 2);
    let err = run_training(&init, Some(&wrong_k), &data, &small_cfg(AdKind::Ard, InnerKind::PgdCe, 1), &NoClock).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn diagnostics_are_recorded_when_enabled() {
    let data = task(5);
    let teacher = mlp(&[4, 16], 3, 9);
    let init = mlp(&[4, 8], 3, 2);
    let mut cfg = small_cfg(AdKind::Ard, InnerKind::RsladKl, 2);
    cfg.diagnostics = Some(DiagnosticsConfig {
        probe: Default::default(),
        max_samples: 10,
    });
    let h = run_training(&init, Some(&teacher), &data, &cfg, &NoClock).unwrap();
    for r in &h.records {
        assert!(r.gd.is_some() && r.gc.is_some() && r.remainder.is_some());
    }
}

#[test]
fn zero_budget_attack_leaves_accuracy_unchanged() {
    let data = task(6);
    let m = mlp(&[4, 8], 3, 5);
    let mut zero = AttackConfig::evaluation((0.0, 1.0));
    zero.epsilon = 0.0;
    let (clean, robust) = evaluate(&m, &data, Some(&zero), 0).unwrap();
    assert_eq!(clean, robust);
}

#[test]
fn attacks_from_zero_never_raise_accuracy() {
    let data = task(7);
    let mut cfg = AttackConfig::evaluation((0.0, 1.0));
    cfg.random_start = false;
    for seed in 0..20 {
        let m = mlp(&[4, 8], 3, seed);
        let (clean, robust) = evaluate(&m, &data, Some(&cfg), seed).unwrap();
        assert!(robust <= clean);
    }
}

#[test]
fn balanced_constant_model_scores_one_over_k() {
    let arch = igdm_core::Architecture::new(4, vec![], 3, igdm_core::Activation::Relu);
    let m = Mlp::new(arch.clone(), ParamSet::zeros(&arch)).unwrap();
    let (clean, _) = evaluate(&m, &task(1), None, 0).unwrap();
    assert!((clean - 1.0 / 3.0).abs() <= 1e-15);
}

#[test]
fn grid_search_picks_the_best_final_pgd_accuracy() {
    let data = task(8);
    let teacher = mlp(&[4, 16], 3, 9);
    let init = mlp(&[4, 8], 3, 2);
    let cfg = small_cfg(AdKind::Ard, InnerKind::RsladKl, 2);
    let (best, points) = grid_search_alpha(&init, Some(&teacher), &data, &cfg, &[0.0, 1.0, 5.0], &NoClock).unwrap();
    assert_eq!(points.len(), 3);
    let finals: Vec<f64> = points.iter().map(|p| p.history.records.last().unwrap().pgd_acc).collect();
    assert!(finals.iter().all(|&f| f <= finals[best]));
    assert!(finals[..best].iter().all(|&f| f < finals[best]));
    assert!(grid_search_alpha(&init, Some(&teacher), &data, &cfg, &[], &NoClock).is_err());
}
