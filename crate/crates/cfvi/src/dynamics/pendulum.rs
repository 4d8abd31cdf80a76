//! Torque-limited pendulum. State `[theta, theta_dot]` with `theta = 0`
//! pointing upright, so the goal state is the origin.
//!
//! Equation of motion for a point mass `m` at distance `l`:
//! `theta_ddot = (m g l sin(theta) - d theta_dot + u) / (m l^2)`.
//! With the default desk-scale parameters the gravity torque
//! `m g l = 9.81 N m` exceeds `u_max = 2.5 N m`, so the swing-up needs
//! energy-pumping pre-swings.

use super::{System, SystemSpec};
use crate::error::{Error, Result};
use ndarray::array;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// Point mass in kg.
    pub mass: f64,
    /// Distance from pivot to the mass in m.
    pub length: f64,
    /// Gravity in m/s^2.
    pub gravity: f64,
    /// Viscous damping in N m s.
    pub damping: f64,
    /// Torque limit in N m.
    pub u_max: f64,
    /// Simulation step in s.
    pub sim_dt: f64,
    /// Velocity sampling bound in rad/s.
    pub velocity_bound: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.1,
            u_max: 2.5,
            sim_dt: 1.0 / 500.0,
            velocity_bound: 8.0,
        }
    }
}

impl PendulumParams {
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "mass" => self.mass = value,
            "length" => self.length = value,
            "gravity" => self.gravity = value,
            "damping" => self.damping = value,
            "u_max" => self.u_max = value,
            "sim_dt" => self.sim_dt = value,
            "velocity_bound" => self.velocity_bound = value,
            other => return Err(Error::config(format!("unknown pendulum parameter '{other}'"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mass", self.mass),
            ("length", self.length),
            ("gravity", self.gravity),
            ("damping", self.damping),
            ("u_max", self.u_max),
            ("sim_dt", self.sim_dt),
            ("velocity_bound", self.velocity_bound),
        ]
    }
}

pub struct Pendulum {
    params: PendulumParams,
    spec: SystemSpec,
    inv_inertia: f64,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        if params.mass <= 0.0 || params.length <= 0.0 {
            return Err(Error::config("pendulum mass and length must be positive"));
        }
        let spec = SystemSpec {
            id: "pendulum".into(),
            state_dim: 2,
            action_dim: 1,
            u_max: array![params.u_max],
            x_des: array![0.0, 0.0],
            sim_dt: params.sim_dt,
            domain_lo: array![-PI, -params.velocity_bound],
            domain_hi: array![PI, params.velocity_bound],
            angle_mask: vec![true, false],
            upright_dim: 0,
        };
        spec.validate()?;
        let inv_inertia = 1.0 / (params.mass * params.length * params.length);
        Ok(Pendulum {
            params,
            spec,
            inv_inertia,
        })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }
}

impl System for Pendulum {
    fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    fn derive_into(&self, x: &[f64], drift: &mut [f64], control: &mut [f64]) {
        let p = &self.params;
        let (theta, theta_dot) = (x[0], x[1]);
        drift[0] = theta_dot;
        drift[1] =
            (p.mass * p.gravity * p.length * theta.sin() - p.damping * theta_dot) * self.inv_inertia;
        control[0] = 0.0;
        control[1] = self.inv_inertia;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn upright_and_hanging_are_equilibria() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        for x in [array![0.0, 0.0], array![PI, 0.0]] {
            let d = sys.affine_derivative(&x).unwrap();
            assert_abs_diff_eq!(d.drift[0], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(d.drift[1], 0.0, epsilon = 1e-12);
            let next = super::super::euler_step(&sys, &x, &array![0.0], 0.01).unwrap();
            assert_eq!(next, x);
        }
    }

    #[test]
    fn control_matrix_is_inverse_inertia() {
        let p = PendulumParams::default();
        let sys = Pendulum::new(p.clone()).unwrap();
        let d = sys.affine_derivative(&array![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            d.control_matrix[[1, 0]],
            1.0 / (p.mass * p.length * p.length),
            epsilon = 1e-15
        );
        assert_eq!(d.control_matrix[[0, 0]], 0.0);
    }

    #[test]
    fn drift_at_right_angle() {
        let p = PendulumParams::default();
        let sys = Pendulum::new(p.clone()).unwrap();
        let d = sys.affine_derivative(&array![PI / 2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(d.drift[0], 1.0, epsilon = 1e-15);
        let expected =
            (p.mass * p.gravity * p.length * 1.0 - p.damping * 1.0) / (p.mass * p.length * p.length);
        assert_abs_diff_eq!(d.drift[1], expected, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let sys = Pendulum::new(PendulumParams::default()).unwrap();
        assert!(sys.affine_derivative(&array![0.0]).is_err());
        assert!(sys.affine_derivative(&array![f64::NAN, 0.0]).is_err());
    }
}
