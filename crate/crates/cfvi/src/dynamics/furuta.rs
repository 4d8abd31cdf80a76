//! Furuta (rotary inverted) pendulum. State `[phi, theta, phi_dot,
//! theta_dot]`: arm angle about the vertical motor axis, pendulum angle
//! with `theta = 0` upright, and their velocities. The motor torque acts
//! on the arm only.
//!
//! Point-mass pendulum (`m_p` at distance `l_p`) on an arm of radius `L_r`
//! with inertia `J_r` about the motor axis. Mass matrix
//!
//! ```text
//! M11 = J_r + m_p L_r^2 + m_p l_p^2 sin^2(th)      M12 = m_p L_r l_p cos(th)
//! M22 = m_p l_p^2
//! ```
//!
//! and Lagrangian right-hand sides
//!
//! ```text
//! rhs1 = tau - d_r phi_dot - 2 m_p l_p^2 s c phi_dot th_dot + m_p L_r l_p s th_dot^2
//! rhs2 = -d_p th_dot + m_p l_p^2 s c phi_dot^2 + m_p g l_p s
//! ```

use super::{System, SystemSpec};
use crate::error::{Error, Result};
use ndarray::array;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FurutaParams {
    pub pole_mass: f64,
    /// Distance from the pendulum pivot to the mass in m.
    pub pole_length: f64,
    /// Arm mass in kg; the arm inertia is `arm_mass arm_length^2 / 3`.
    pub arm_mass: f64,
    /// Arm radius from the motor axis to the pendulum pivot in m.
    pub arm_length: f64,
    pub gravity: f64,
    pub arm_damping: f64,
    pub pole_damping: f64,
    /// Motor torque limit in N m.
    pub u_max: f64,
    pub sim_dt: f64,
    pub arm_velocity_bound: f64,
    pub pole_velocity_bound: f64,
}

impl Default for FurutaParams {
    fn default() -> Self {
        FurutaParams {
            pole_mass: 0.024,
            pole_length: 0.129,
            arm_mass: 0.095,
            arm_length: 0.085,
            gravity: 9.81,
            arm_damping: 5e-4,
            pole_damping: 5e-5,
            u_max: 2.0,
            sim_dt: 1.0 / 500.0,
            arm_velocity_bound: 20.0,
            pole_velocity_bound: 20.0,
        }
    }
}

impl FurutaParams {
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "pole_mass" => self.pole_mass = value,
            "pole_length" => self.pole_length = value,
            "arm_mass" => self.arm_mass = value,
            "arm_length" => self.arm_length = value,
            "gravity" => self.gravity = value,
            "arm_damping" => self.arm_damping = value,
            "pole_damping" => self.pole_damping = value,
            "u_max" => self.u_max = value,
            "sim_dt" => self.sim_dt = value,
            "arm_velocity_bound" => self.arm_velocity_bound = value,
            "pole_velocity_bound" => self.pole_velocity_bound = value,
            other => return Err(Error::config(format!("unknown furuta parameter '{other}'"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("pole_mass", self.pole_mass),
            ("pole_length", self.pole_length),
            ("arm_mass", self.arm_mass),
            ("arm_length", self.arm_length),
            ("gravity", self.gravity),
            ("arm_damping", self.arm_damping),
            ("pole_damping", self.pole_damping),
            ("u_max", self.u_max),
            ("sim_dt", self.sim_dt),
            ("arm_velocity_bound", self.arm_velocity_bound),
            ("pole_velocity_bound", self.pole_velocity_bound),
        ]
    }

    pub fn arm_inertia(&self) -> f64 {
        self.arm_mass * self.arm_length * self.arm_length / 3.0
    }
}

pub struct Furuta {
    params: FurutaParams,
    spec: SystemSpec,
}

impl Furuta {
    pub fn new(params: FurutaParams) -> Result<Self> {
        if params.pole_mass <= 0.0 || params.pole_length <= 0.0 || params.arm_mass <= 0.0 {
            return Err(Error::config("furuta masses and lengths must be positive"));
        }
        let spec = SystemSpec {
            id: "furuta".into(),
            state_dim: 4,
            action_dim: 1,
            u_max: array![params.u_max],
            x_des: array![0.0, 0.0, 0.0, 0.0],
            sim_dt: params.sim_dt,
            domain_lo: array![
                -PI,
                -PI,
                -params.arm_velocity_bound,
                -params.pole_velocity_bound
            ],
            domain_hi: array![
                PI,
                PI,
                params.arm_velocity_bound,
                params.pole_velocity_bound
            ],
            angle_mask: vec![true, true, false, false],
            upright_dim: 1,
        };
        spec.validate()?;
        Ok(Furuta { params, spec })
    }

    pub fn params(&self) -> &FurutaParams {
        &self.params
    }
}

impl System for Furuta {
    fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    fn derive_into(&self, x: &[f64], drift: &mut [f64], control: &mut [f64]) {
        let p = &self.params;
        let (theta, phi_dot, theta_dot) = (x[1], x[2], x[3]);
        let (s, c) = theta.sin_cos();
        let mp = p.pole_mass;
        let lp = p.pole_length;
        let lr = p.arm_length;
        let jr = p.arm_inertia();
        let mpl2 = mp * lp * lp;

        let m11 = jr + mp * lr * lr + mpl2 * s * s;
        let m12 = mp * lr * lp * c;
        let m22 = mpl2;
        let det = m11 * m22 - m12 * m12;

        let rhs1 = -p.arm_damping * phi_dot - 2.0 * mpl2 * s * c * phi_dot * theta_dot
            + mp * lr * lp * s * theta_dot * theta_dot;
        let rhs2 =
            -p.pole_damping * theta_dot + mpl2 * s * c * phi_dot * phi_dot + mp * p.gravity * lp * s;

        drift[0] = phi_dot;
        drift[1] = theta_dot;
        drift[2] = (m22 * rhs1 - m12 * rhs2) / det;
        drift[3] = (-m12 * rhs1 + m11 * rhs2) / det;

        control[0] = 0.0;
        control[1] = 0.0;
        control[2] = m22 / det;
        control[3] = -m12 / det;
    }
}
