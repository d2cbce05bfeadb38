#![cfg(not(feature = "f32"))]

mod common;

use common::*;
use deepcl::gradcheck::{self, GradcheckConfig};
use deepcl::graph::{loss_and_grad, FullyConnected, Layer, LossFn, Network};
use deepcl::model::{build_cl_net, SensingConfig};
use deepcl::{Error, Tensor};
use rand::Rng;

#[test]
fn identity_fc_passes_input_through() {
    let fc = FullyConnected::new(Tensor::identity(4), Some(Tensor::zeros(&[4]))).unwrap();
    let net = Network::new(&[4], vec![Layer::FullyConnected(fc)]).unwrap();
    let x = Tensor::vector(vec![0.5, -2.0, 3.0, 0.0]);
    assert_eq!(net.infer(&x).unwrap(), x);
}

#[test]
fn relu_backward_gates_on_cached_input() {
    let mut layer = Layer::relu();
    layer.forward(&Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap()).unwrap();
    let g = layer.backward(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0]);

    let mut at_zero = Layer::relu();
    at_zero.forward(&Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
    assert_eq!(at_zero.backward(&Tensor::new(vec![1, 1], vec![5.0]).unwrap()).unwrap().data(), &[0.0]);
}

#[test]
fn fc_weight_gradient_is_outer_product() {
    let mut rng = rng(10);
    let w = random_tensor(&mut rng, &[3, 4], 1.0);
    let mut layer = Layer::FullyConnected(FullyConnected::new(w, Some(Tensor::zeros(&[3]))).unwrap());
    let x = random_tensor(&mut rng, &[1, 4], 1.0);
    let up = random_tensor(&mut rng, &[1, 3], 1.0);
    layer.forward(&x).unwrap();
    layer.backward(&up).unwrap();
    let params = layer.params();
    let gw = params.iter().find(|p| p.name == "weight").unwrap().grad;
    for i in 0..3 {
        for j in 0..4 {
            assert!((gw.at(&[i, j]) - up.data()[i] * x.data()[j]).abs() < 1e-15);
        }
    }
    let gb = params.iter().find(|p| p.name == "bias").unwrap().grad;
    assert_eq!(gb.data(), up.data());
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let mut net = build_cl_net(SensingConfig::mnist(0.05).unwrap(), 0).unwrap();
    assert!(matches!(net.backward(&Tensor::zeros(&[10])), Err(Error::State(_))));
    let mut layer = Layer::maxpool();
    assert!(matches!(layer.backward(&Tensor::zeros(&[1, 1, 1, 1])), Err(Error::State(_))));
}

#[test]
fn chain_backward_equals_manual_composition() {
    let mut rng = rng(11);
    let fc = |rng: &mut _, i, o| {
        Layer::FullyConnected(FullyConnected::new(random_tensor(rng, &[o, i], 1.0), Some(random_tensor(rng, &[o], 1.0))).unwrap())
    };
    let (a, b) = (fc(&mut rng, 5, 4), fc(&mut rng, 4, 3));
    let x = random_tensor(&mut rng, &[2, 5], 1.0);
    let up = random_tensor(&mut rng, &[2, 3], 1.0);

    let mut net = Network::new(&[5], vec![a.clone(), b.clone()]).unwrap();
    net.forward(&x).unwrap();
    let chained = net.backward(&up).unwrap();

    let (mut a, mut b) = (a, b);
    let h = a.forward(&x).unwrap();
    b.forward(&h).unwrap();
    let manual = a.backward(&b.backward(&up).unwrap()).unwrap();
    assert_eq!(chained, manual);
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let cfg = SensingConfig::mnist(0.1).unwrap();
    let mut rng = rng(12);
    let x = Tensor::from_fn(&[4, 784], |_| rng.random_range(0.0..1.0));
    let run = || {
        let mut net = build_cl_net(cfg, 3).unwrap();
        let logits = net.forward(&x).unwrap();
        let (_, g) = loss_and_grad(LossFn::CrossEntropy, &logits, &[1, 2, 3, 4]).unwrap();
        net.backward(&g).unwrap();
        net.params().into_iter().map(|(_, p)| p.grad.clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = rng(13);
    let eps = 1e-5;
    for _ in 0..20 {
        let logits = random_tensor(&mut rng, &[3, 10], 1.0);
        let targets: Vec<u8> = (0..3).map(|_| rng.random_range(0..10)).collect();
        let (_, grad) = LossFn::CrossEntropy.loss_and_grad(&logits, &targets).unwrap();
        for j in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[j] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[j] -= eps;
            let lp = LossFn::CrossEntropy.loss_and_grad(&plus, &targets).unwrap().0;
            let lm = LossFn::CrossEntropy.loss_and_grad(&minus, &targets).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = gradcheck::relative_error(grad.data()[j], numeric, 1e-8);
            assert!(rel < 1e-6, "coordinate {j}: analytic {} numeric {numeric}", grad.data()[j]);
        }
    }
}

#[test]
fn uniform_logits_give_ln_ten() {
    let (loss, _) = LossFn::CrossEntropy.loss_and_grad(&Tensor::zeros(&[2, 10]), &[3, 7]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-15);
}

#[test]
fn every_layer_kind_passes_gradcheck() {
    let cfg = GradcheckConfig::default();
    for (layer, shape) in gradcheck::layer_cases() {
        let report = gradcheck::check_layer(layer, &shape, &cfg).unwrap();
        assert!(report.passed(cfg.tol), "{report:?}");
        assert_eq!(report.skipped(), 0);
    }
}

#[test]
fn gradcheck_flags_a_faulty_backward() {
    let cfg = GradcheckConfig { inject_fault: true, ..GradcheckConfig::default() };
    for (layer, shape) in gradcheck::layer_cases() {
        assert!(!gradcheck::check_layer(layer, &shape, &cfg).unwrap().passed(cfg.tol));
    }
}
