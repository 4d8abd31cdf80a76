//! Control-affine continuous-time dynamics: `x_dot = a(x) + B(x) u`.
//!
//! Systems are pure: given a state they return the drift `a(x)` and the
//! control matrix `B(x)`. Integration is explicit Euler with a fixed step;
//! angle coordinates are wrapped to `(-pi, pi]` after every step.

mod cartpole;
mod furuta;
mod pendulum;

pub use cartpole::{CartPole, CartPoleParams};
pub use furuta::{Furuta, FurutaParams};
pub use pendulum::{Pendulum, PendulumParams};

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type State = Array1<f64>;
pub type Action = Array1<f64>;

/// Drift vector and control matrix of the control-affine dynamics at one state.
#[derive(Debug, Clone)]
pub struct AffineDerivative {
    pub drift: Array1<f64>,
    /// `state_dim x action_dim`.
    pub control_matrix: Array2<f64>,
}

/// Static description of a system: dimensions, bounds and goal state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Per-action actuation bound; the barrier cost diverges at the bound.
    pub u_max: Array1<f64>,
    /// Goal state (all zeros: upright pendulum at rest).
    pub x_des: Array1<f64>,
    /// Simulation step in seconds.
    pub sim_dt: f64,
    pub domain_lo: Array1<f64>,
    pub domain_hi: Array1<f64>,
    /// True for revolute-joint coordinates that wrap to `(-pi, pi]`.
    pub angle_mask: Vec<bool>,
    /// State coordinate checked by the balancing success criterion.
    pub upright_dim: usize,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sim_dt <= 0.0 {
            return Err(Error::config("sim_dt must be positive"));
        }
        if self.u_max.iter().any(|&u| u <= 0.0) {
            return Err(Error::config("u_max must be positive"));
        }
        if self.domain_lo.len() != self.state_dim
            || self.domain_hi.len() != self.state_dim
            || self.angle_mask.len() != self.state_dim
            || self.x_des.len() != self.state_dim
        {
            return Err(Error::config("spec dimensions are inconsistent"));
        }
        if self
            .domain_lo
            .iter()
            .zip(self.domain_hi.iter())
            .any(|(lo, hi)| lo >= hi)
        {
            return Err(Error::config("domain_lo must be below domain_hi"));
        }
        if self.upright_dim >= self.state_dim {
            return Err(Error::config("upright_dim out of range"));
        }
        Ok(())
    }

    /// Number of simulation substeps per control period `dt`.
    pub fn substeps_for(&self, dt: f64) -> Result<usize> {
        let ratio = dt / self.sim_dt;
        let n = ratio.round();
        if dt <= 0.0 || n < 1.0 || (ratio - n).abs() > 1e-9 {
            return Err(Error::config(format!(
                "control period {dt} is not a positive multiple of sim_dt {}",
                self.sim_dt
            )));
        }
        Ok(n as usize)
    }
}

/// A control-affine system. Implementations must be pure and cheap; the
/// hot paths call `derive_into` once per simulation substep.
pub trait System: Send + Sync {
    fn spec(&self) -> &SystemSpec;

    /// Write `a(x)` into `drift` and `B(x)` (row-major `state_dim x
    /// action_dim`) into `control`. `x` has already been validated.
    fn derive_into(&self, x: &[f64], drift: &mut [f64], control: &mut [f64]);

    /// Drift and control matrix at `x` with contract checks.
    fn affine_derivative(&self, x: &State) -> Result<AffineDerivative> {
        let spec = self.spec();
        check_state(spec, x)?;
        let mut drift = Array1::zeros(spec.state_dim);
        let mut control = Array2::zeros((spec.state_dim, spec.action_dim));
        self.derive_into(
            x.as_slice().unwrap(),
            drift.as_slice_mut().unwrap(),
            control.as_slice_mut().unwrap(),
        );
        Ok(AffineDerivative {
            drift,
            control_matrix: control,
        })
    }
}

pub(crate) fn check_state(spec: &SystemSpec, x: &State) -> Result<()> {
    if x.len() != spec.state_dim {
        return Err(Error::contract(format!(
            "state dimension {} does not match system {} ({})",
            x.len(),
            spec.id,
            spec.state_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("state has non-finite entries"));
    }
    Ok(())
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    PI - (PI - a).rem_euclid(2.0 * PI)
}

/// Wrap every angle coordinate of `x` in place.
pub fn wrap_state(spec: &SystemSpec, x: &mut [f64]) {
    for (v, &is_angle) in x.iter_mut().zip(&spec.angle_mask) {
        if is_angle {
            *v = wrap_angle(*v);
        }
    }
}

/// Reusable scratch for allocation-free stepping.
pub struct Stepper {
    drift: Vec<f64>,
    control: Vec<f64>,
}

impl Stepper {
    pub fn new(spec: &SystemSpec) -> Self {
        Stepper {
            drift: vec![0.0; spec.state_dim],
            control: vec![0.0; spec.state_dim * spec.action_dim],
        }
    }

    /// One explicit Euler step `x += dt * (a(x) + B(x) u)` with angle
    /// wrapping. Returns false if the result is non-finite.
    pub fn step_into(&mut self, sys: &dyn System, x: &mut [f64], u: &[f64], dt: f64) -> bool {
        let spec = sys.spec();
        let (n, m) = (spec.state_dim, spec.action_dim);
        sys.derive_into(x, &mut self.drift, &mut self.control);
        let mut ok = true;
        for i in 0..n {
            let mut dx = self.drift[i];
            for j in 0..m {
                dx += self.control[i * m + j] * u[j];
            }
            x[i] += dt * dx;
            ok &= x[i].is_finite();
        }
        if ok {
            wrap_state(spec, x);
        }
        ok
    }

    /// Hold `u` fixed for `substeps` simulation steps of length `sim_dt`.
    pub fn macro_step(&mut self, sys: &dyn System, x: &mut [f64], u: &[f64], substeps: usize) -> bool {
        let sim_dt = sys.spec().sim_dt;
        for _ in 0..substeps {
            if !self.step_into(sys, x, u, sim_dt) {
                return false;
            }
        }
        true
    }
}

/// One explicit Euler step with full contract checks.
pub fn euler_step(sys: &dyn System, x: &State, u: &Action, dt: f64) -> Result<State> {
    let spec = sys.spec();
    check_state(spec, x)?;
    if dt <= 0.0 {
        return Err(Error::contract("dt must be positive"));
    }
    if u.len() != spec.action_dim {
        return Err(Error::contract("action dimension mismatch"));
    }
    for (v, &b) in u.iter().zip(spec.u_max.iter()) {
        if !v.is_finite() || v.abs() > b {
            return Err(Error::contract(format!("action {v} outside [-{b}, {b}]")));
        }
    }
    let mut out = x.clone();
    let mut stepper = Stepper::new(spec);
    if !stepper.step_into(sys, out.as_slice_mut().unwrap(), u.as_slice().unwrap(), dt) {
        return Err(Error::IntegrationBlowup { state: out.to_vec() });
    }
    Ok(out)
}

/// `n` i.i.d. uniform samples from the box `[domain_lo, domain_hi]`,
/// one state per row.
pub fn sample_domain(spec: &SystemSpec, n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::contract("sample count must be positive"));
    }
    let d = spec.state_dim;
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        for i in 0..d {
            row[i] = rng.random_range(spec.domain_lo[i]..=spec.domain_hi[i]);
        }
    }
    Ok(out)
}

/// Feature transform `z = h(x)` feeding the value network: every revolute
/// coordinate expands to its sine and cosine, everything else passes
/// through. The transform makes the value function periodic in the joint
/// angles and keeps its gradient in the manifold tangent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTransform {
    angle_mask: Vec<bool>,
    state_dim: usize,
    z_dim: usize,
    z_des: Array1<f64>,
}

impl FeatureTransform {
    pub fn new(angle_mask: Vec<bool>, x_des: &State) -> Self {
        let state_dim = angle_mask.len();
        assert_eq!(x_des.len(), state_dim);
        let z_dim = state_dim + angle_mask.iter().filter(|&&a| a).count();
        let mut ft = FeatureTransform {
            angle_mask,
            state_dim,
            z_dim,
            z_des: Array1::zeros(z_dim),
        };
        let mut z_des = Array1::zeros(z_dim);
        ft.transform_into(x_des.as_slice().unwrap(), z_des.as_slice_mut().unwrap());
        ft.z_des = z_des;
        ft
    }

    pub fn for_spec(spec: &SystemSpec) -> Self {
        Self::new(spec.angle_mask.clone(), &spec.x_des)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn z_des(&self) -> &Array1<f64> {
        &self.z_des
    }

    pub fn transform_into(&self, x: &[f64], z: &mut [f64]) {
        let mut k = 0;
        for (i, &is_angle) in self.angle_mask.iter().enumerate() {
            if is_angle {
                let (s, c) = x[i].sin_cos();
                z[k] = s;
                z[k + 1] = c;
                k += 2;
            } else {
                z[k] = x[i];
                k += 1;
            }
        }
        debug_assert_eq!(k, self.z_dim);
    }

    pub fn transform(&self, x: &State) -> Result<Array1<f64>> {
        if x.len() != self.state_dim {
            return Err(Error::contract("transform: state dimension mismatch"));
        }
        let mut z = Array1::zeros(self.z_dim);
        self.transform_into(x.as_slice().unwrap(), z.as_slice_mut().unwrap());
        Ok(z)
    }

    /// Transform a batch of states (one per row).
    pub fn transform_batch(&self, xs: &ndarray::ArrayView2<f64>) -> Array2<f64> {
        let mut z = Array2::zeros((xs.nrows(), self.z_dim));
        for (x_row, mut z_row) in xs.rows().into_iter().zip(z.rows_mut()) {
            let mut k = 0;
            for (i, &is_angle) in self.angle_mask.iter().enumerate() {
                if is_angle {
                    let (s, c) = x_row[i].sin_cos();
                    z_row[k] = s;
                    z_row[k + 1] = c;
                    k += 2;
                } else {
                    z_row[k] = x_row[i];
                    k += 1;
                }
            }
        }
        z
    }

    /// Jacobian `dh/dx` at `x`, shape `z_dim x state_dim`.
    pub fn jacobian(&self, x: &State) -> Result<Array2<f64>> {
        if x.len() != self.state_dim {
            return Err(Error::contract("jacobian: state dimension mismatch"));
        }
        let mut j = Array2::zeros((self.z_dim, self.state_dim));
        let mut k = 0;
        for (i, &is_angle) in self.angle_mask.iter().enumerate() {
            if is_angle {
                let (s, c) = x[i].sin_cos();
                j[[k, i]] = c;
                j[[k + 1, i]] = -s;
                k += 2;
            } else {
                j[[k, i]] = 1.0;
                k += 1;
            }
        }
        Ok(j)
    }

    /// Project a gradient from transformed to raw coordinates:
    /// `g_x = (dh/dx)^T g_z`, written without materializing the Jacobian.
    pub fn project_gradient(&self, x: &[f64], g_z: &[f64], g_x: &mut [f64]) {
        let mut k = 0;
        for (i, &is_angle) in self.angle_mask.iter().enumerate() {
            if is_angle {
                let (s, c) = x[i].sin_cos();
                g_x[i] = c * g_z[k] - s * g_z[k + 1];
                k += 2;
            } else {
                g_x[i] = g_z[k];
                k += 1;
            }
        }
    }
}

/// Build a system by its canonical id with default desk-scale parameters.
pub fn system_by_id(id: &str) -> Result<Box<dyn System>> {
    match id {
        "pendulum" => Ok(Box::new(Pendulum::new(PendulumParams::default())?)),
        "cartpole" => Ok(Box::new(CartPole::new(CartPoleParams::default())?)),
        "furuta" => Ok(Box::new(Furuta::new(FurutaParams::default())?)),
        other => Err(Error::config(format!("unknown system id '{other}'"))),
    }
}

/// Typed per-system parameters, as stored in configs and checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "lowercase")]
pub enum SystemConfig {
    Pendulum(PendulumParams),
    Cartpole(CartPoleParams),
    Furuta(FurutaParams),
}

impl SystemConfig {
    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "pendulum" => Ok(SystemConfig::Pendulum(PendulumParams::default())),
            "cartpole" => Ok(SystemConfig::Cartpole(CartPoleParams::default())),
            "furuta" => Ok(SystemConfig::Furuta(FurutaParams::default())),
            other => Err(Error::config(format!("unknown system id '{other}'"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            SystemConfig::Pendulum(_) => "pendulum",
            SystemConfig::Cartpole(_) => "cartpole",
            SystemConfig::Furuta(_) => "furuta",
        }
    }

    /// Set a named physical parameter (config override path).
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match self {
            SystemConfig::Pendulum(p) => p.set(key, value),
            SystemConfig::Cartpole(p) => p.set(key, value),
            SystemConfig::Furuta(p) => p.set(key, value),
        }
    }

    pub fn build(&self) -> Result<Box<dyn System>> {
        match self {
            SystemConfig::Pendulum(p) => Ok(Box::new(Pendulum::new(p.clone())?)),
            SystemConfig::Cartpole(p) => Ok(Box::new(CartPole::new(p.clone())?)),
            SystemConfig::Furuta(p) => Ok(Box::new(Furuta::new(p.clone())?)),
        }
    }

    /// Names and values of the physical parameters, for config snapshots.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        match self {
            SystemConfig::Pendulum(p) => p.entries(),
            SystemConfig::Cartpole(p) => p.entries(),
            SystemConfig::Furuta(p) => p.entries(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    /// Toy system with a = 0 and B = I.
    struct Identity {
        spec: SystemSpec,
    }

    impl Identity {
        fn new(dim: usize) -> Self {
            Identity {
                spec: SystemSpec {
                    id: "identity".into(),
                    state_dim: dim,
                    action_dim: dim,
                    u_max: Array1::from_elem(dim, 10.0),
                    x_des: Array1::zeros(dim),
                    sim_dt: 0.1,
                    domain_lo: Array1::from_elem(dim, -1.0),
                    domain_hi: Array1::from_elem(dim, 1.0),
                    angle_mask: vec![false; dim],
                    upright_dim: 0,
                },
            }
        }
    }

    impl System for Identity {
        fn spec(&self) -> &SystemSpec {
            &self.spec
        }
        fn derive_into(&self, _x: &[f64], drift: &mut [f64], control: &mut [f64]) {
            drift.fill(0.0);
            control.fill(0.0);
            let m = self.spec.action_dim;
            for i in 0..self.spec.state_dim {
                control[i * m + i] = 1.0;
            }
        }
    }

    #[test]
    fn euler_step_pure_linear_update() {
        let sys = Identity::new(2);
        let x = ndarray::array![1.0, 1.0];
        let u = ndarray::array![0.5, -0.5];
        let next = euler_step(&sys, &x, &u, 0.1).unwrap();
        assert_abs_diff_eq!(next[0], 1.05, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.95, epsilon = 1e-15);
    }

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-3.0 * PI), PI, epsilon = 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn sample_domain_contract() {
        let sys = Identity::new(2);
        let mut rng = crate::rng::substream(0, "t", 0, 0);
        assert!(sample_domain(sys.spec(), 0, &mut rng).is_err());

        let mut rng1 = crate::rng::substream(3, "t", 0, 0);
        let mut rng2 = crate::rng::substream(3, "t", 0, 0);
        let a = sample_domain(sys.spec(), 64, &mut rng1).unwrap();
        let b = sample_domain(sys.spec(), 64, &mut rng2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn transform_passthrough_for_translations() {
        let ft = FeatureTransform::new(vec![false, true, false], &ndarray::array![0.0, 0.0, 0.0]);
        assert_eq!(ft.z_dim(), 4);
        let z = ft.transform(&ndarray::array![0.3, PI / 2.0, -2.0]).unwrap();
        assert_abs_diff_eq!(z[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[3], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn substeps_must_divide() {
        let sys = Identity::new(1);
        assert_eq!(sys.spec().substeps_for(0.5).unwrap(), 5);
        assert!(sys.spec().substeps_for(0.25).is_err());
        assert!(sys.spec().substeps_for(-0.1).is_err());
    }
}
