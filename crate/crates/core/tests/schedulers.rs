use ifmatch_core::schedulers::{DaState, EmaModel, LrSchedule, ThresholdKind, ThresholdState};
use ifmatch_core::Tensor;
use proptest::prelude::*;

const COS_7PI_16: f64 = 0.195_090_322_016_128_27;

fn probs_batch(raw: &[f64], c: usize) -> Tensor {
    let n = raw.len() / c;
    let mut data = Vec::with_capacity(n * c);
    for row in raw.chunks(c).take(n) {
        let s: f64 = row.iter().sum::<f64>() + 1e-9;
        data.extend(row.iter().map(|v| (v + 1e-9 / c as f64) / s));
    }
    Tensor::new(&[n, c], data).unwrap()
}

#[test]
fn lr_endpoints() {
    let s = LrSchedule {
        eta0: 0.03,
        total: 3000,
    };
    assert_eq!(s.lr_at(0).unwrap(), 0.03);
    assert!((s.lr_at(3000).unwrap() / 0.03 - COS_7PI_16).abs() < 1e-12);
    assert!(s.lr_at(3001).is_err());
    assert_eq!(LrSchedule { eta0: 0.1, total: 0 }.lr_at(0).unwrap(), 0.1);
}

#[test]
fn ema_single_step_is_exact() {
    let live = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
    let mut ema = EmaModel::new(0.999, &[Tensor::new(&[3], vec![0.0, 4.0, 0.5]).unwrap()]).unwrap();
    ema.update(&live).unwrap();
    let want: Vec<f64> = [0.0, 4.0, 0.5]
        .iter()
        .zip(live[0].data())
        .map(|(s, l)| 0.999 * s + (1.0 - 0.999) * l)
        .collect();
    for (a, b) in ema.shadow()[0].data().iter().zip(&want) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(ema.update(&[Tensor::zeros(&[2])]).is_err());
}

#[test]
fn default_threshold_is_tau() {
    let t = ThresholdState::new(ThresholdKind::Constant, 0.95, 10, None).unwrap();
    assert_eq!(t.threshold_value(Some(3)).unwrap(), 0.95);
    assert_eq!(t.gate(0.95, 3).unwrap(), 1.0);
    assert_eq!(t.gate(0.9499, 3).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn lr_is_positive_and_nonincreasing(eta0 in 1e-4f64..1.0, total in 1usize..5000) {
        let s = LrSchedule { eta0, total };
        let mut prev = f64::INFINITY;
        for k in (0..=total).step_by((total / 50).max(1)) {
            let v = s.lr_at(k).unwrap();
            prop_assert!(v > 0.0 && v <= eta0 && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn thresholds_stay_in_unit_interval(
        kind in 0usize..4,
        tau in 0.05f64..1.0,
        raw in prop::collection::vec(0.0f64..1.0, 4..120),
        clamp in prop::option::of((0.0f64..0.5, 0.5f64..1.0)),
    ) {
        let c = 4;
        let kind = ThresholdKind::ALL[kind];
        let mut t = ThresholdState::new(kind, tau, c, clamp).unwrap();
        let batch = probs_batch(&raw, c);
        let n = batch.shape()[0];
        let ids: Vec<u64> = (0..n as u64).collect();
        for _ in 0..3 {
            t.update(&batch, &ids).unwrap();
            for k in 0..c {
                let v = t.threshold_value(Some(k)).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
                if let Some((lo, hi)) = clamp {
                    prop_assert!(v >= lo && v <= hi);
                }
                let g = t.gate(0.5, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&g));
            }
        }
        if kind == ThresholdKind::Constant && clamp.is_none() {
            prop_assert_eq!(t.threshold_value(Some(0)).unwrap(), tau);
        }
    }

    #[test]
    fn soft_weight_is_one_above_mean(conf in 0.0f64..1.0, mu in 0.0f64..1.0, var in 0.0f64..0.1) {
        let mut t = ThresholdState::new(ThresholdKind::Soft, 0.95, 3, None).unwrap();
        t.set_stats(mu, var);
        let w = t.soft_weight(conf);
        prop_assert!(w > 0.0 || var < 1e-3);
        prop_assert!(w <= 1.0);
        if conf >= mu {
            prop_assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn alignment_returns_distributions(raw in prop::collection::vec(0.0f64..1.0, 5..60)) {
        let c = 5;
        let mut da = DaState::uniform(c);
        let batch = probs_batch(&raw, c);
        for _ in 0..3 {
            let out = da.refine(&batch).unwrap();
            for row in out.data().chunks(c) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            let pb: f64 = da.p_bar().iter().sum();
            prop_assert!((pb - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn alignment_with_matching_history_is_identity() {
    let da = DaState::uniform(4);
    let p = [0.1, 0.2, 0.3, 0.4];
    for (a, b) in da.align(&p).iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn flex_with_equal_counts_is_tau() {
    let mut t = ThresholdState::new(ThresholdKind::Flex, 0.95, 3, None).unwrap();
    t.set_sigma(&[40.0, 40.0, 40.0]).unwrap();
    for c in 0..3 {
        assert_eq!(t.threshold_value(Some(c)).unwrap(), 0.95);
    }
    t.set_sigma(&[40.0, 20.0, 0.0]).unwrap();
    assert_eq!(t.threshold_value(Some(1)).unwrap(), 0.475);
    assert_eq!(t.threshold_value(Some(2)).unwrap(), 0.0);
    assert!(t.threshold_value(None).is_err());
    assert!(t.threshold_value(Some(3)).is_err());
}
