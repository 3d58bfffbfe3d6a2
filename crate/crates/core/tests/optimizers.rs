use groupdistil::mlp::Layer;
use groupdistil::optim::{adam_step, sgd_step, OptConfig, OptState, Optimizer};
use groupdistil::{Activation, Matrix, MlpParams, ParamGrads};
use proptest::prelude::*;

fn scalar_model(theta: f64) -> MlpParams {
    MlpParams::new(
        vec![Layer::new(Matrix::from_vec(1, 1, vec![theta]).unwrap(), Matrix::zeros(1, 1)).unwrap()],
        Activation::Tanh,
    )
    .unwrap()
}

fn scalar_grad(model: &MlpParams, g: f64) -> ParamGrads {
    let mut grads = ParamGrads::zeros_like(model);
    grads.layers_mut()[0].weight.set(0, 0, g);
    grads
}

fn theta(model: &MlpParams) -> f64 {
    model.layers()[0].weight.get(0, 0)
}

#[test]
fn scaled_sgd_by_hand() {
    let p = scalar_model(1.0);
    let next = sgd_step(&p, &scalar_grad(&p, 2.0), 0.5, &OptConfig::sgd(0.1)).unwrap();
    assert!((theta(&next) - 0.9).abs() < 1e-15);
    assert_eq!(sgd_step(&p, &scalar_grad(&p, 2.0), 0.0, &OptConfig::sgd(0.1)).unwrap(), p);
}

#[test]
fn adam_zero_gradient_keeps_params_but_counts_step() {
    let p = scalar_model(0.3);
    let cfg = OptConfig::adam(0.1);
    let (next, state) = adam_step(&p, &ParamGrads::zeros_like(&p), 1.0, &OptState::new(&cfg, &p), &cfg).unwrap();
    assert_eq!(next, p);
    assert_eq!(state.step_count(), 1);
    let (next, state) = adam_step(&p, &scalar_grad(&p, 5.0), 0.0, &state, &cfg).unwrap();
    assert_eq!(next, p);
    assert_eq!(state.step_count(), 2);
}

#[test]
fn adam_minimises_quadratic() {
    let mut p = scalar_model(1.0);
    let mut opt = Optimizer::new(OptConfig::adam(0.1), &p).unwrap();
    let mut reached = None;
    for t in 1..=500 {
        let g = scalar_grad(&p, 2.0 * theta(&p));
        p = opt.step(&p, &g, 1.0).unwrap();
        if theta(&p).abs() < 1e-6 {
            reached = Some(t);
            break;
        }
    }
    assert!(reached.is_some(), "theta still {}", theta(&p));
}

#[test]
fn out_of_range_scale_rejected() {
    let p = scalar_model(1.0);
    let g = scalar_grad(&p, 1.0);
    assert!(sgd_step(&p, &g, 1.5, &OptConfig::sgd(0.1)).is_err());
    assert!(sgd_step(&p, &g, -0.1, &OptConfig::sgd(0.1)).is_err());
}

proptest! {
    #[test]
    fn sgd_displacement_is_linear_in_scale(theta0 in -5.0f64..5.0, g in -5.0f64..5.0, lr in 0.0f64..1.0, a in 0.0f64..=1.0) {
        let p = scalar_model(theta0);
        let grads = scalar_grad(&p, g);
        let cfg = OptConfig::sgd(lr);
        let full = theta(&sgd_step(&p, &grads, 1.0, &cfg).unwrap()) - theta0;
        let part = theta(&sgd_step(&p, &grads, a, &cfg).unwrap()) - theta0;
        // exact up to the rounding of the two subtractions
        prop_assert!((part - a * full).abs() <= 4.0 * f64::EPSILON * theta0.abs().max(full.abs()).max(1.0));
    }

    #[test]
    fn steps_stay_finite(theta0 in -1e3f64..1e3, grads in proptest::collection::vec(-1e6f64..1e6, 1..50), adam in any::<bool>(), scale in 0.0f64..=1.0) {
        let mut p = scalar_model(theta0);
        let cfg = if adam { OptConfig::adam(0.01) } else { OptConfig::sgd(1e-4) };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        for g in grads {
            p = opt.step(&p, &scalar_grad(&p, g), scale).unwrap();
            prop_assert!(theta(&p).is_finite());
        }
    }
}
