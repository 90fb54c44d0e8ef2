mod common;

use common::*;
use igdm_core::diagnostics::remainder_proportion;
use igdm_core::{init_mlp, Activation, Architecture, Tensor};

#[test]
fn glorot_bounds_and_zero_biases() {
    let arch = Architecture::new(2, vec![8], 2, Activation::Relu);
    let m = init_mlp(&arch, 7).unwrap();
    for l in &m.params.layers {
        let (out, inp) = (l.weight.rows(), l.weight.cols());
        let bound = (6.0 / (inp + out) as f64).sqrt();
        assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }
    assert_eq!(m.params.to_bits(), init_mlp(&arch, 7).unwrap().params.to_bits());
    assert_ne!(m.params.to_bits(), init_mlp(&arch, 8).unwrap().params.to_bits());
}

#[test]
fn positive_preactivations_give_the_composed_affine_map() {
    let mut m = mlp(&[3, 6, 5], 2, 12);
    // non-negative hidden weights, positive biases and a positive input keep every unit active
    let last = m.params.layers.len() - 1;
    for l in &mut m.params.layers[..last] {
        for w in l.weight.data_mut() {
            *w = w.abs();
        }
        for b in l.bias.data_mut() {
            *b = 0.1;
        }
    }
    let x = [0.2, 0.4, 0.1];
    assert!(pre_activations(&m, &x).iter().flatten().all(|&z| z > 0.0));
    let ls = &m.params.layers;
    let h1 = affine_apply(&ls[0].weight, &ls[0].bias, &x);
    let h2 = affine_apply(&ls[1].weight, &ls[1].bias, &h1);
    let want = affine_apply(&ls[2].weight, &ls[2].bias, &h2);
    let got = m.forward(&Tensor::vector(x.to_vec())).unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn zero_depth_model_is_affine() {
    let m = affine(vec![1.0, 2.0, -1.0, 0.5], vec![0.25, -0.75], 2);
    let y = m.forward(&Tensor::vector(vec![0.5, 0.25])).unwrap();
    assert_eq!(y.data(), &[0.5 + 0.5 + 0.25, -0.5 + 0.125 - 0.75]);
}

#[test]
fn final_bias_shift_moves_every_logit() {
    let m = mlp(&[4, 7], 3, 2);
    let mut shifted = m.clone();
    for b in shifted.params.layers.last_mut().unwrap().bias.data_mut() {
        *b += 1.75;
    }
    let x = Tensor::vector(vec![0.1, 0.9, 0.3, 0.6]);
    let (a, b) = (m.forward(&x).unwrap(), shifted.forward(&x).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((v - u - 1.75).abs() <= 1e-12);
    }
}

#[test]
fn relu_network_is_locally_affine() {
    let mut r = rng(44);
    let m = mlp(&[5, 16, 16], 3, 9);
    let mut checked = 0;
    for _ in 0..20 {
        let x = vector(&mut r, 5);
        let margin = pre_activations(&m, x.data())
            .iter()
            .flatten()
            .fold(f64::INFINITY, |a, &z| a.min(z.abs()));
        if margin < 1e-3 {
            continue;
        }
        let h = 1e-7;
        let eps = Tensor::vector(uniform_vec(&mut r, 5, -h, h));
        let shifted: Vec<f64> = x.data().iter().zip(eps.data()).map(|(a, b)| a + b).collect();
        // region-membership oracle: no pre-activation changes sign
        let before = pre_activations(&m, x.data());
        let after = pre_activations(&m, &shifted);
        assert!(before.iter().flatten().zip(after.iter().flatten()).all(|(a, b)| (a > &0.0) == (b > &0.0)));
        assert!(remainder_proportion(&m, &x, &eps).unwrap() <= 1e-10);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn forward_rejects_wrong_dimension() {
    let m = mlp(&[3, 4], 2, 1);
    assert!(m.forward(&Tensor::vector(vec![0.0; 4])).is_err());
}
