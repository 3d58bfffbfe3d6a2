use groupdistil::robust_weights::{EgConfig, GroupWeights};
use groupdistil::Error;
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn hand_evaluated_update() {
    let w = GroupWeights::from_vec(vec![0.5, 0.5]).unwrap();
    let next = w.eg_update(0, std::f64::consts::LN_2, &EgConfig { eta_w: 1.0 }).unwrap();
    assert!(close(next.as_slice(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    assert_eq!(w.as_slice(), &[0.5, 0.5], "update must not touch its input");
}

#[test]
fn uniform_shapes() {
    assert_eq!(GroupWeights::uniform(4).unwrap().as_slice(), &[0.25; 4]);
    assert_eq!(GroupWeights::uniform(1).unwrap().as_slice(), &[1.0]);
    let third = GroupWeights::uniform(3).unwrap();
    assert!((third.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn rejects_bad_inputs() {
    let w = GroupWeights::uniform(3).unwrap();
    let cfg = EgConfig::default();
    assert!(matches!(w.eg_update(0, f64::NAN, &cfg), Err(Error::Numeric(_))));
    assert!(matches!(w.eg_update(0, f64::INFINITY, &cfg), Err(Error::Numeric(_))));
    assert!(w.eg_update(3, 1.0, &cfg).is_err());
}

#[test]
fn overflowing_exponent_is_clamped() {
    let w = GroupWeights::uniform(2).unwrap();
    let next = w.eg_update(1, 1e6, &EgConfig { eta_w: 1.0 }).unwrap();
    assert!(next.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(next.get(1) > 1.0 - 1e-12);
}

#[test]
fn snapshot_is_a_copy() {
    let w = GroupWeights::uniform(4).unwrap();
    let snap = w.snapshot();
    let _ = w.eg_update(2, 5.0, &EgConfig::default()).unwrap();
    assert_eq!(snap, vec![0.25; 4]);
    assert_eq!(w.snapshot(), w.snapshot());
}

#[test]
fn persistent_single_domain_loss_drives_weight_to_one() {
    let cfg = EgConfig::default();
    let mut w = GroupWeights::uniform(4).unwrap();
    let mut prev = w.get(1);
    for _ in 0..5000 {
        w = w.eg_update(1, 0.7, &cfg).unwrap();
        assert!(w.get(1) >= prev);
        prev = w.get(1);
    }
    assert!(w.get(1) > 0.999_999);
}

proptest! {
    #[test]
    fn zero_loss_changes_nothing(raw in proptest::collection::vec(0.01f64..1.0, 1..6), pick in any::<prop::sample::Index>()) {
        let w = GroupWeights::from_vec(raw).unwrap();
        let d = pick.index(w.len());
        prop_assert_eq!(w.eg_update(d, 0.0, &EgConfig { eta_w: 0.3 }).unwrap(), w.clone());
    }

    #[test]
    fn equal_losses_in_any_order_return_to_uniform(loss in 0.0f64..10.0, eta in prop_oneof![Just(0.01), Just(0.1), Just(1.0)], order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let cfg = EgConfig { eta_w: eta };
        let mut w = GroupWeights::uniform(5).unwrap();
        for d in order {
            w = w.eg_update(d, loss, &cfg).unwrap();
        }
        prop_assert!(close(w.as_slice(), &[0.2; 5], 1e-12));
    }

    #[test]
    fn distinct_domain_updates_commute(losses in proptest::collection::vec(0.0f64..10.0, 4), order in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle()) {
        let cfg = EgConfig { eta_w: 0.1 };
        let mut a = GroupWeights::uniform(4).unwrap();
        for d in 0..4 {
            a = a.eg_update(d, losses[d], &cfg).unwrap();
        }
        let mut b = GroupWeights::uniform(4).unwrap();
        for &d in &order {
            b = b.eg_update(d, losses[d], &cfg).unwrap();
        }
        prop_assert!(close(a.as_slice(), b.as_slice(), 1e-12));
    }

    #[test]
    fn updates_stay_on_simplex(steps in proptest::collection::vec((0usize..8, 0.0f64..10.0), 1..200), n in 1usize..8, eta in prop_oneof![Just(0.01), Just(0.1), Just(1.0)]) {
        let cfg = EgConfig { eta_w: eta };
        let mut w = GroupWeights::uniform(n).unwrap();
        for (d, loss) in steps {
            w = w.eg_update(d % n, loss, &cfg).unwrap();
            prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
