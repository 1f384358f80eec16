mod common;

use std::sync::atomic::Ordering;

use common::*;
use dkmgp::dynamics::{
    propagate, rk4_step, ControlInput, DynamicsModel, VehicleParams, VehicleState,
};
use dkmgp::predictor::{
    ach_horizon, classify_condition, multistep_predict, read_trace_csv, steering_wheel_degrees,
    write_trace_csv, AchThresholds, DrivingCondition, HorizonPolicy, ModelSet,
};
use dkmgp::Error;
use proptest::prelude::*;

const VX_GRID: [f64; 7] = [0.0, 39.999, 40.0, 49.999, 50.0, 59.999, 60.0];
const AX_GRID: [f64; 7] = [0.0, 0.499, 0.5, 0.999, 1.0, 2.999, 3.0];
const DW_GRID: [f64; 7] = [0.0, 4.499, 4.5, 7.499, 7.5, 11.499, 11.5];

/// Level of `v` under the printed ranges `[0, b0)`, `[b0, b1)`, `[b1, b2)`, `[b2, inf)`.
fn printed_level(v: f64, b: [f64; 3]) -> usize {
    if v < b[0] {
        0
    } else if v < b[1] {
        1
    } else if v < b[2] {
        2
    } else {
        3
    }
}

#[test]
fn exhaustive_boundary_truth_table() {
    let th = AchThresholds::default();
    let mut checked = 0;
    for &vx in &VX_GRID {
        for &ax in &AX_GRID {
            for &dw in &DW_GRID {
                let want = printed_level(vx, [40.0, 50.0, 60.0])
                    .max(printed_level(ax, [0.5, 1.0, 3.0]))
                    .max(printed_level(dw, [4.5, 7.5, 11.5]));
                let got = classify_condition(vx, ax, dw, &th);
                assert_eq!(got.level(), want, "vx {vx} ax {ax} dw {dw}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 343);
}

#[test]
fn published_examples_and_horizon_map() {
    let th = AchThresholds::default();
    assert_eq!(
        classify_condition(30.0, 0.2, 2.0, &th),
        DrivingCondition::Cruising
    );
    assert_eq!(
        classify_condition(30.0, 0.2, 12.0, &th),
        DrivingCondition::Aggressive
    );
    assert_eq!(
        classify_condition(55.0, 0.7, 5.0, &th),
        DrivingCondition::Pushing
    );
    let map: Vec<usize> = DrivingCondition::ALL
        .iter()
        .map(|&c| ach_horizon(c, &th))
        .collect();
    assert_eq!(map, vec![15, 10, 5, 3]);
    for w in DrivingCondition::ALL.windows(2) {
        assert!(w[0] < w[1]);
        assert!(ach_horizon(w[0], &th) > ach_horizon(w[1], &th));
    }
}

fn cruising_state(vx: f64) -> VehicleState {
    VehicleState {
        vx,
        vy: 0.1,
        psi: 0.2,
        delta: 0.001,
        omega: 0.02,
        ..VehicleState::default()
    }
}

fn counting_set(
    horizons: &[usize],
) -> (
    ModelSet,
    Vec<std::sync::Arc<std::sync::atomic::AtomicUsize>>,
) {
    let mut set = ModelSet::new();
    let mut counters = Vec::new();
    for &h in horizons {
        let (model, calls) = CountingModel::new([0.01, -0.002, 0.0005]);
        set.insert(h, model);
        counters.push(calls);
    }
    (set, counters)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn classification_is_symmetric_in_sign(
        vx in 0.0..80.0f64,
        ax in -6.0..6.0f64,
        dw in -20.0..20.0f64,
    ) {
        let th = AchThresholds::default();
        prop_assert_eq!(classify_condition(vx, ax, dw, &th), classify_condition(vx, -ax, -dw, &th));
    }

    #[test]
    fn fixed_schedule_tiles_and_counts_queries(m in 1usize..120, n in 1usize..20) {
        let (set, counters) = counting_set(&[n]);
        let inputs = vec![ControlInput::new(0.1, 0.0); m];
        let vp = VehicleParams::default();
        let tr = multistep_predict(&set, &cruising_state(30.0), &inputs, &HorizonPolicy::Fixed(n), &vp, 0.04).unwrap();
        let mut k = 0;
        for e in &tr.schedule {
            prop_assert_eq!(e.start, k);
            prop_assert!(e.n >= 1 && e.n <= n);
            k += e.n;
        }
        prop_assert_eq!(k, m);
        prop_assert_eq!(tr.states.len(), m + 1);
        prop_assert_eq!(counters[0].load(Ordering::SeqCst), m.div_ceil(n));
        prop_assert_eq!(tr.queries(), m.div_ceil(n));
        let marked = tr.corrected.iter().filter(|&&c| c).count();
        prop_assert_eq!(marked, m.div_ceil(n));
    }

    #[test]
    fn adaptive_schedule_tiles(
        m in 1usize..120,
        vx in 20.0..70.0f64,
        ax in proptest::collection::vec(-4.0..4.0f64, 120),
    ) {
        let (set, counters) = counting_set(&[3, 5, 10, 15]);
        let inputs: Vec<ControlInput> = ax[..m].iter().map(|&a| ControlInput::new(a, 0.0)).collect();
        let th = AchThresholds::default();
        let vp = VehicleParams::default();
        let tr = multistep_predict(&set, &cruising_state(vx), &inputs, &HorizonPolicy::Adaptive(th), &vp, 0.04).unwrap();
        let mut k = 0;
        for e in &tr.schedule {
            prop_assert_eq!(e.start, k);
            let cond = e.condition.unwrap();
            prop_assert_eq!(e.n, ach_horizon(cond, &th).min(m - k));
            k += e.n;
        }
        prop_assert_eq!(k, m);
        let total: usize = counters.iter().map(|c| c.load(Ordering::SeqCst)).sum();
        prop_assert_eq!(total, tr.schedule.len());
    }

    #[test]
    fn zero_model_reproduces_uncorrected_rollout(m in 1usize..60, n in 1usize..20, vx in 10.0..60.0f64) {
        let set = ModelSet::new().with(n, ZeroModel);
        let inputs: Vec<ControlInput> = (0..m).map(|i| ControlInput::new((i as f64 * 0.3).sin(), 0.01 * (i as f64 * 0.2).cos())).collect();
        let vp = VehicleParams::default();
        let s0 = cruising_state(vx);
        let tr = multistep_predict(&set, &s0, &inputs, &HorizonPolicy::Fixed(n), &vp, 0.04).unwrap();
        let plain = propagate(&DynamicsModel::Ekin { vehicle: vp }, &s0, &inputs, 0.04).unwrap();
        for (a, b) in tr.states.iter().zip(&plain) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn fixed_one_is_per_step_correction() {
    let residual = [0.01, -0.002, 0.0005];
    let (model, calls) = CountingModel::new(residual);
    let set = ModelSet::new().with(1, model);
    let vp = VehicleParams::default();
    let inputs: Vec<ControlInput> = (0..20)
        .map(|i| ControlInput::new(0.5, 0.001 * i as f64))
        .collect();
    let s0 = cruising_state(35.0);
    let tr = multistep_predict(&set, &s0, &inputs, &HorizonPolicy::Fixed(1), &vp, 0.04).unwrap();
    let ekin = DynamicsModel::Ekin { vehicle: vp };
    let mut s = s0;
    for (k, u) in inputs.iter().enumerate() {
        s = rk4_step(&ekin, &s, u, 0.04).unwrap().corrected(residual);
        assert_eq!(tr.states[k + 1], s, "step {}", k + 1);
    }
    assert_eq!(calls.load(Ordering::SeqCst), 20);
    assert!(tr.corrected[1..].iter().all(|&c| c));
}

#[test]
fn terminal_clamp_and_per_cycle_reclassification() {
    let (set, counters) = counting_set(&[3, 5, 10, 15]);
    let vp = VehicleParams {
        steering_ratio: 15.0,
        ..VehicleParams::default()
    };
    // Calm first cycle, then hard acceleration from step 15 on.
    let inputs: Vec<ControlInput> = (0..43)
        .map(|k| ControlInput::new(if k < 15 { 0.0 } else { 4.0 }, 0.0))
        .collect();
    let th = AchThresholds::default();
    let s0 = VehicleState {
        vx: 30.0,
        ..VehicleState::default()
    };
    let tr =
        multistep_predict(&set, &s0, &inputs, &HorizonPolicy::Adaptive(th), &vp, 0.04).unwrap();
    let ns: Vec<usize> = tr.schedule.iter().map(|e| e.n).collect();
    let mut want = vec![15];
    want.extend([3; 9]);
    want.push(1);
    assert_eq!(ns, want);
    assert_eq!(tr.schedule[0].condition, Some(DrivingCondition::Cruising));
    assert!(tr.schedule[1..]
        .iter()
        .all(|e| e.condition == Some(DrivingCondition::Aggressive)));
    // The single clamped step is served by the nearest model, horizon 3.
    let served: Vec<usize> = counters.iter().map(|c| c.load(Ordering::SeqCst)).collect();
    assert_eq!(served, vec![10, 0, 0, 1]);
}

#[test]
fn steering_ratio_scales_wheel_angle() {
    let vp = VehicleParams {
        steering_ratio: 15.0,
        ..VehicleParams::default()
    };
    let dw = steering_wheel_degrees(0.006, &vp);
    assert!((dw - 0.09_f64.to_degrees()).abs() < 1e-12);
    let th = AchThresholds::default();
    assert_eq!(
        classify_condition(30.0, 0.0, dw, &th),
        DrivingCondition::Controlled
    );
}

#[test]
fn adaptive_requires_every_selected_horizon() {
    let set = ModelSet::new().with(3, ZeroModel);
    let inputs = vec![ControlInput::new(0.0, 0.0); 10];
    let err = multistep_predict(
        &set,
        &cruising_state(30.0),
        &inputs,
        &HorizonPolicy::Adaptive(AchThresholds::default()),
        &VehicleParams::default(),
        0.04,
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingHorizonModel(15)));
}

#[test]
fn trace_csv_roundtrip() {
    let (set, _) = counting_set(&[3, 5, 10, 15]);
    let inputs: Vec<ControlInput> = (0..43)
        .map(|k| ControlInput::new((k as f64 * 0.4).sin() * 2.0, 0.0))
        .collect();
    let tr = multistep_predict(
        &set,
        &cruising_state(45.0),
        &inputs,
        &HorizonPolicy::Adaptive(AchThresholds::default()),
        &VehicleParams::default(),
        0.04,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(&tr, &path).unwrap();
    let back = read_trace_csv(&path, 0).unwrap();
    assert_eq!(back, tr);
}
