//! Single-track and extended-kinematic (E-kin) vehicle models, the Pacejka
//! lateral tire force, and fixed-step RK4 propagation.
//!
//! State layout everywhere is `[x, y, vx, vy, psi, delta, omega]`, SI units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slip angles divide by `vx`; states slower than this are rejected.
pub const VX_GUARD: f64 = 1.0;

/// Default model timestep in seconds.
pub const DEFAULT_DT: f64 = 0.04;

pub const STATE_DIM: usize = 7;
pub const INPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub psi: f64,
    pub delta: f64,
    pub omega: f64,
}

impl VehicleState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.x, self.y, self.vx, self.vy, self.psi, self.delta, self.omega,
        ]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        VehicleState {
            x: a[0],
            y: a[1],
            vx: a[2],
            vy: a[3],
            psi: a[4],
            delta: a[5],
            omega: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// The base states `(vx, vy, omega)` that residual models correct.
    pub fn base(&self) -> [f64; 3] {
        [self.vx, self.vy, self.omega]
    }

    /// Adds a residual to the base states, leaving the rest untouched.
    pub fn corrected(&self, residual: [f64; 3]) -> Self {
        VehicleState {
            vx: self.vx + residual[0],
            vy: self.vy + residual[1],
            omega: self.omega + residual[2],
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlInput {
    /// Longitudinal acceleration, m/s².
    pub ax: f64,
    /// Steering velocity, rad/s.
    pub delta_dot: f64,
}

impl ControlInput {
    pub fn new(ax: f64, delta_dot: f64) -> Self {
        ControlInput { ax, delta_dot }
    }

    pub fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.delta_dot.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Mass, kg.
    pub m: f64,
    /// Yaw inertia, kg·m².
    pub iz: f64,
    /// CoG to front axle, m.
    pub lf: f64,
    /// CoG to rear axle, m.
    pub lr: f64,
    /// Track width, m.
    pub tw: f64,
    /// CoG height, m.
    pub h_cog: f64,
    #[serde(default = "default_gravity")]
    pub g: f64,
    /// Track bank angle, rad.
    #[serde(default)]
    pub bank_theta: f64,
    /// Steering-wheel angle over road-wheel angle.
    #[serde(default = "default_steering_ratio")]
    pub steering_ratio: f64,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_steering_ratio() -> f64 {
    1.0
}

impl Default for VehicleParams {
    /// Illustrative values loosely resembling a full-scale oval racecar.
    fn default() -> Self {
        VehicleParams {
            m: 750.0,
            iz: 1000.0,
            lf: 1.7,
            lr: 1.2,
            tw: 1.9,
            h_cog: 0.3,
            g: default_gravity(),
            bank_theta: 0.0,
            steering_ratio: default_steering_ratio(),
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("iz", self.iz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("tw", self.tw),
            ("h_cog", self.h_cog),
            ("steering_ratio", self.steering_ratio),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "vehicle.{name} must be positive, got {v}"
                )));
            }
        }
        if !self.g.is_finite() {
            return Err(Error::InvalidArgument("vehicle.g must be finite".into()));
        }
        if !(self.bank_theta.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "vehicle.bank_theta must lie in (-pi/2, pi/2), got {}",
                self.bank_theta
            )));
        }
        Ok(())
    }
}

/// Magic-formula coefficients for one axle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacejkaAxleParams {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    #[serde(default)]
    pub svy: f64,
    #[serde(default)]
    pub shy: f64,
}

impl PacejkaAxleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("b", self.b), ("c", self.c), ("d", self.d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "tire.{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [("e", self.e), ("svy", self.svy), ("shy", self.shy)] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "tire.{name} must be finite"
                )));
            }
        }
        Ok(())
    }
}

/// Time derivatives of each [`VehicleState`] field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub psi: f64,
    pub delta: f64,
    pub omega: f64,
}

impl StateDerivative {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.x, self.y, self.vx, self.vy, self.psi, self.delta, self.omega,
        ]
    }
}

/// Lateral force `Svy + D sin(C atan(Bα − E(Bα − atan(Bα))))` with `α = alpha0 + Shy`.
pub fn pacejka_lateral_force(p: &PacejkaAxleParams, alpha0: f64) -> f64 {
    let alpha = alpha0 + p.shy;
    let ba = p.b * alpha;
    p.svy + p.d * (p.c * (ba - p.e * (ba - ba.atan())).atan()).sin()
}

fn check_guard(s: &VehicleState) -> Result<()> {
    // NaN fails the comparison as well.
    if !(s.vx >= VX_GUARD) {
        return Err(Error::GuardViolation {
            vx: s.vx,
            guard: VX_GUARD,
        });
    }
    Ok(())
}

/// Pre-shift slip angles `(alpha_f0, alpha_r0)`.
pub fn slip_angles(s: &VehicleState, params: &VehicleParams) -> Result<(f64, f64)> {
    check_guard(s)?;
    let front = s.delta - ((s.vy + params.lf * s.omega) / s.vx).atan();
    let rear = -((s.vy - params.lr * s.omega) / s.vx).atan();
    Ok((front, rear))
}

fn kinematic_rows(s: &VehicleState, u: &ControlInput) -> (f64, f64, f64, f64) {
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let x_dot = s.vx * cos_psi - s.vy * sin_psi;
    let y_dot = s.vx * sin_psi + s.vy * cos_psi;
    (x_dot, y_dot, s.omega, u.delta_dot)
}

pub fn single_track_derivative(
    s: &VehicleState,
    u: &ControlInput,
    vp: &VehicleParams,
    pf: &PacejkaAxleParams,
    pr: &PacejkaAxleParams,
) -> Result<StateDerivative> {
    let (alpha_f0, alpha_r0) = slip_angles(s, vp)?;
    let f_front = pacejka_lateral_force(pf, alpha_f0);
    let f_rear = pacejka_lateral_force(pr, alpha_r0);
    let f_bank = vp.m * vp.g * vp.bank_theta.sin();
    let cos_delta = s.delta.cos();

    let (x, y, psi, delta) = kinematic_rows(s, u);
    Ok(StateDerivative {
        x,
        y,
        vx: u.ax,
        vy: (f_rear + f_front * cos_delta - f_bank) / vp.m - s.vx * s.omega,
        psi,
        delta,
        omega: (vp.lf * f_front * cos_delta - vp.lr * f_rear) / vp.iz,
    })
}

/// Extended kinematic model. Rows are taken verbatim from the model table,
/// including the unusual scaling of the `vy` and `omega` rows.
pub fn ekin_derivative(s: &VehicleState, u: &ControlInput, vp: &VehicleParams) -> StateDerivative {
    let wheelbase = vp.wheelbase();
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let (x, y, psi, delta) = kinematic_rows(s, u);
    StateDerivative {
        x,
        y,
        vx: vp.tw / wheelbase * u.ax,
        vy: (u.ax * sin_psi + s.vx * s.omega) / (vp.tw * wheelbase),
        psi,
        delta,
        omega: vp.h_cog / (vp.tw * wheelbase) * (u.ax * cos_psi + s.vx * s.omega),
    }
}

/// Which right-hand side to integrate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicsModel {
    SingleTrack {
        vehicle: VehicleParams,
        front: PacejkaAxleParams,
        rear: PacejkaAxleParams,
    },
    Ekin {
        vehicle: VehicleParams,
    },
}

impl DynamicsModel {
    pub fn derivative(&self, s: &VehicleState, u: &ControlInput) -> Result<StateDerivative> {
        match self {
            DynamicsModel::SingleTrack {
                vehicle,
                front,
                rear,
            } => single_track_derivative(s, u, vehicle, front, rear),
            DynamicsModel::Ekin { vehicle } => Ok(ekin_derivative(s, u, vehicle)),
        }
    }

    pub fn vehicle(&self) -> &VehicleParams {
        match self {
            DynamicsModel::SingleTrack { vehicle, .. } | DynamicsModel::Ekin { vehicle } => vehicle,
        }
    }
}

fn axpy(s: &VehicleState, k: &StateDerivative, h: f64) -> VehicleState {
    let a = s.to_array();
    let d = k.to_array();
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = a[i] + h * d[i];
    }
    VehicleState::from_array(out)
}

/// One classical RK4 step with `u` held constant over `dt`.
pub fn rk4_step(
    model: &DynamicsModel,
    s: &VehicleState,
    u: &ControlInput,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let k1 = model.derivative(s, u)?;
    let k2 = model.derivative(&axpy(s, &k1, 0.5 * dt), u)?;
    let k3 = model.derivative(&axpy(s, &k2, 0.5 * dt), u)?;
    let k4 = model.derivative(&axpy(s, &k3, dt), u)?;

    let (a, d1, d2, d3, d4) = (
        s.to_array(),
        k1.to_array(),
        k2.to_array(),
        k3.to_array(),
        k4.to_array(),
    );
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = a[i] + dt / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
    }
    Ok(VehicleState::from_array(out))
}

/// Open-loop rollout: returns `inputs.len() + 1` states starting with `s0`.
pub fn propagate(
    model: &DynamicsModel,
    s0: &VehicleState,
    inputs: &[ControlInput],
    dt: f64,
) -> Result<Vec<VehicleState>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "propagate needs at least one input".into(),
        ));
    }
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(*s0);
    let mut s = *s0;
    for u in inputs {
        s = rk4_step(model, &s, u, dt)?;
        traj.push(s);
    }
    Ok(traj)
}
