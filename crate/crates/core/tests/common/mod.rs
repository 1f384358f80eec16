#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dkmgp::config::RunConfig;
use dkmgp::dataset::{NormalizationStats, ResidualSample, FEATURE_DIM, TARGET_DIM};
use dkmgp::deep_kernel::{mlp_init, MlpConfig};
use dkmgp::dynamics::{PacejkaAxleParams, VehicleParams, VehicleState};
use dkmgp::mtgp::{DkmgpModel, LmcStructure, ResidualPrediction, DEFAULT_JITTER};
use dkmgp::predictor::ResidualModel;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OVAL_TOML: &str = include_str!("../../../../configs/oval.toml");

pub fn oval_config() -> RunConfig {
    RunConfig::from_toml_str(OVAL_TOML).expect("scenario config parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// Independent scalar oracles for the model table.

pub fn pacejka_oracle(b: f64, c: f64, d: f64, e: f64, svy: f64, shy: f64, alpha0: f64) -> f64 {
    let alpha = alpha0 + shy;
    let inner = b * alpha - e * (b * alpha - (b * alpha).atan());
    svy + d * (c * inner.atan()).sin()
}

pub fn single_track_oracle(
    s: &VehicleState,
    ax: f64,
    ddelta: f64,
    vp: &VehicleParams,
    f: &PacejkaAxleParams,
    r: &PacejkaAxleParams,
) -> [f64; 7] {
    let alpha_f0 = s.delta - ((s.vy + vp.lf * s.omega) / s.vx).atan();
    let alpha_r0 = -((s.vy - vp.lr * s.omega) / s.vx).atan();
    let fyf = pacejka_oracle(f.b, f.c, f.d, f.e, f.svy, f.shy, alpha_f0);
    let fyr = pacejka_oracle(r.b, r.c, r.d, r.e, r.svy, r.shy, alpha_r0);
    let fby = vp.m * vp.g * vp.bank_theta.sin();
    [
        s.vx * s.psi.cos() - s.vy * s.psi.sin(),
        s.vx * s.psi.sin() + s.vy * s.psi.cos(),
        ax,
        (fyr + fyf * s.delta.cos() - fby) / vp.m - s.vx * s.omega,
        s.omega,
        ddelta,
        (vp.lf * fyf * s.delta.cos() - vp.lr * fyr) / vp.iz,
    ]
}

pub fn ekin_oracle(s: &VehicleState, ax: f64, ddelta: f64, vp: &VehicleParams) -> [f64; 7] {
    let l = vp.lr + vp.lf;
    [
        s.vx * s.psi.cos() - s.vy * s.psi.sin(),
        s.vx * s.psi.sin() + s.vy * s.psi.cos(),
        vp.tw / l * ax,
        1.0 / (vp.tw * l) * (ax * s.psi.sin() + s.vx * s.omega),
        s.omega,
        ddelta,
        vp.h_cog / (vp.tw * l) * (ax * s.psi.cos() + s.vx * s.omega),
    ]
}

pub fn random_state(r: &mut ChaCha8Rng) -> VehicleState {
    VehicleState {
        x: r.random_range(-500.0..500.0),
        y: r.random_range(-500.0..500.0),
        vx: r.random_range(5.0..70.0),
        vy: r.random_range(-3.0..3.0),
        psi: r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        delta: r.random_range(-0.2..0.2),
        omega: r.random_range(-1.0..1.0),
    }
}

pub fn random_tire(r: &mut ChaCha8Rng) -> PacejkaAxleParams {
    PacejkaAxleParams {
        b: r.random_range(4.0..20.0),
        c: r.random_range(1.0..2.0),
        d: r.random_range(1000.0..10000.0),
        e: r.random_range(-1.0..1.0),
        svy: r.random_range(-50.0..50.0),
        shy: r.random_range(-0.01..0.01),
    }
}

pub fn random_vehicle(r: &mut ChaCha8Rng) -> VehicleParams {
    VehicleParams {
        m: r.random_range(500.0..1500.0),
        iz: r.random_range(500.0..2500.0),
        lf: r.random_range(1.0..2.0),
        lr: r.random_range(1.0..2.0),
        tw: r.random_range(1.5..2.1),
        h_cog: r.random_range(0.2..0.6),
        g: 9.81,
        bank_theta: r.random_range(-0.2..0.2),
        steering_ratio: 15.0,
    }
}

/// Untrained model with every parameter block perturbed away from its
/// initial value, so that no gradient vanishes by symmetry.
pub fn random_model(
    layers: &[usize],
    tasks: usize,
    latents: usize,
    inducing: usize,
    seed: u64,
) -> DkmgpModel {
    let mut r = rng(seed ^ 0xabcd);
    let mlp = mlp_init(&MlpConfig::new(layers, seed)).unwrap();
    let f = mlp.output_dim();
    let z = DMatrix::from_fn(inducing, f, |_, _| r.random_range(-1.0..1.0));
    let mixing = DMatrix::from_fn(tasks, latents, |_, _| r.random_range(-1.0..1.0));
    let mut model = DkmgpModel::from_parts(
        mlp,
        z,
        LmcStructure { mixing },
        DEFAULT_JITTER,
        NormalizationStats::identity(FEATURE_DIM),
        NormalizationStats::identity(tasks),
        1,
    )
    .unwrap();
    for k in &mut model.kernels {
        for l in &mut k.log_lengthscales {
            *l = r.random_range(-0.3..0.5);
        }
        k.log_variance = r.random_range(-0.5..0.5);
    }
    for m in &mut model.variational.means {
        m.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    for l in &mut model.variational.chols {
        for c in 0..inducing {
            l[(c, c)] = r.random_range(0.3..1.2);
            for row in c + 1..inducing {
                l[(row, c)] = r.random_range(-0.2..0.2);
            }
        }
    }
    for v in &mut model.noise.log_variance {
        *v = r.random_range(-3.0..-1.0);
    }
    model
}

pub fn random_batch(n: usize, seed: u64) -> Vec<ResidualSample> {
    let mut r = rng(seed ^ 0x77);
    (0..n)
        .map(|_| ResidualSample {
            input: std::array::from_fn(|_| r.random_range(-1.5..1.5)),
            target: std::array::from_fn(|_| r.random_range(-1.0..1.0)),
            horizon: 1,
        })
        .collect()
}

/// Predicts exactly zero residual with no variance.
pub struct ZeroModel;

impl ResidualModel for ZeroModel {
    fn predict_residual(&self, _d: &[f64]) -> dkmgp::Result<ResidualPrediction> {
        Ok(ResidualPrediction {
            mean_normalized: [0.0; TARGET_DIM],
            var_normalized: [f64::NAN; TARGET_DIM],
            mean: [0.0; TARGET_DIM],
            variance: [f64::NAN; TARGET_DIM],
        })
    }
}

/// Constant residual plus a shared query counter.
pub struct CountingModel {
    pub residual: [f64; TARGET_DIM],
    pub calls: Arc<AtomicUsize>,
}

impl CountingModel {
    pub fn new(residual: [f64; TARGET_DIM]) -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (
            CountingModel {
                residual,
                calls: Arc::clone(&calls),
            },
            calls,
        )
    }
}

impl ResidualModel for CountingModel {
    fn predict_residual(&self, _d: &[f64]) -> dkmgp::Result<ResidualPrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(ResidualPrediction {
            mean_normalized: self.residual,
            var_normalized: [1.0; TARGET_DIM],
            mean: self.residual,
            variance: [1.0; TARGET_DIM],
        })
    }
}
