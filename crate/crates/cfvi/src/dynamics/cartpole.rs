//! Cartpole. State `[p, theta, p_dot, theta_dot]`: cart position in m,
//! pendulum angle with `theta = 0` upright, and their velocities.
//!
//! The pole is a point mass `m_p` at distance `l` from the pivot. With
//! force `F` on the cart, the Lagrangian equations are
//!
//! ```text
//! (m_c + m_p) p_ddot + m_p l cos(th) th_ddot = F - d_c p_dot + m_p l th_dot^2 sin(th)
//! m_p l cos(th) p_ddot + m_p l^2   th_ddot   = m_p g l sin(th) - d_p th_dot
//! ```
//!
//! which are solved in closed form for `(p_ddot, th_ddot)`.

use super::{System, SystemSpec};
use crate::error::{Error, Result};
use ndarray::array;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from pivot to the pole mass in m.
    pub pole_length: f64,
    pub gravity: f64,
    /// Cart viscous damping in N s/m.
    pub cart_damping: f64,
    /// Pole viscous damping in N m s.
    pub pole_damping: f64,
    /// Force limit in N.
    pub u_max: f64,
    pub sim_dt: f64,
    /// Sampling bounds: cart position, cart velocity, pole velocity.
    pub position_bound: f64,
    pub cart_velocity_bound: f64,
    pub pole_velocity_bound: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 0.57,
            pole_mass: 0.127,
            pole_length: 0.336,
            gravity: 9.81,
            cart_damping: 0.1,
            pole_damping: 0.002,
            u_max: 5.0,
            sim_dt: 1.0 / 500.0,
            position_bound: 0.4,
            cart_velocity_bound: 3.0,
            pole_velocity_bound: 12.0,
        }
    }
}

impl CartPoleParams {
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "cart_mass" => self.cart_mass = value,
            "pole_mass" => self.pole_mass = value,
            "pole_length" => self.pole_length = value,
            "gravity" => self.gravity = value,
            "cart_damping" => self.cart_damping = value,
            "pole_damping" => self.pole_damping = value,
            "u_max" => self.u_max = value,
            "sim_dt" => self.sim_dt = value,
            "position_bound" => self.position_bound = value,
            "cart_velocity_bound" => self.cart_velocity_bound = value,
            "pole_velocity_bound" => self.pole_velocity_bound = value,
            other => return Err(Error::config(format!("unknown cartpole parameter '{other}'"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_length", self.pole_length),
            ("gravity", self.gravity),
            ("cart_damping", self.cart_damping),
            ("pole_damping", self.pole_damping),
            ("u_max", self.u_max),
            ("sim_dt", self.sim_dt),
            ("position_bound", self.position_bound),
            ("cart_velocity_bound", self.cart_velocity_bound),
            ("pole_velocity_bound", self.pole_velocity_bound),
        ]
    }
}

pub struct CartPole {
    params: CartPoleParams,
    spec: SystemSpec,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Result<Self> {
        if params.cart_mass <= 0.0 || params.pole_mass <= 0.0 || params.pole_length <= 0.0 {
            return Err(Error::config("cartpole masses and length must be positive"));
        }
        let spec = SystemSpec {
            id: "cartpole".into(),
            state_dim: 4,
            action_dim: 1,
            u_max: array![params.u_max],
            x_des: array![0.0, 0.0, 0.0, 0.0],
            sim_dt: params.sim_dt,
            domain_lo: array![
                -params.position_bound,
                -PI,
                -params.cart_velocity_bound,
                -params.pole_velocity_bound
            ],
            domain_hi: array![
                params.position_bound,
                PI,
                params.cart_velocity_bound,
                params.pole_velocity_bound
            ],
            angle_mask: vec![false, true, false, false],
            upright_dim: 1,
        };
        spec.validate()?;
        Ok(CartPole { params, spec })
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }
}

impl System for CartPole {
    fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    fn derive_into(&self, x: &[f64], drift: &mut [f64], control: &mut [f64]) {
        let p = &self.params;
        let (theta, p_dot, theta_dot) = (x[1], x[2], x[3]);
        let (s, c) = theta.sin_cos();
        let ml = p.pole_mass * p.pole_length;
        let ml2 = ml * p.pole_length;
        let total = p.cart_mass + p.pole_mass;
        // det = ml^2 (m_c + m_p sin^2 th) > 0
        let det = total * ml2 - ml * c * ml * c;
        let rhs1 = -p.cart_damping * p_dot + ml * theta_dot * theta_dot * s;
        let rhs2 = p.pole_mass * p.gravity * p.pole_length * s - p.pole_damping * theta_dot;

        drift[0] = p_dot;
        drift[1] = theta_dot;
        drift[2] = (ml2 * rhs1 - ml * c * rhs2) / det;
        drift[3] = (-ml * c * rhs1 + total * rhs2) / det;

        control[0] = 0.0;
        control[1] = 0.0;
        control[2] = ml2 / det;
        control[3] = -ml * c / det;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn rest_states_are_equilibria() {
        let sys = CartPole::new(CartPoleParams::default()).unwrap();
        for x in [array![0.0, 0.0, 0.0, 0.0], array![0.2, PI, 0.0, 0.0]] {
            let d = sys.affine_derivative(&x).unwrap();
            for i in 0..4 {
                assert_abs_diff_eq!(d.drift[i], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn force_accelerates_cart_at_upright() {
        let p = CartPoleParams::default();
        let sys = CartPole::new(p.clone()).unwrap();
        let d = sys.affine_derivative(&array![0.0, 0.0, 0.0, 0.0]).unwrap();
        // At theta = 0 the 2x2 system reduces to: p_ddot = F / m_c, coupled
        // th_ddot = -F / (m_c l).
        assert_abs_diff_eq!(d.control_matrix[[2, 0]], 1.0 / p.cart_mass, epsilon = 1e-12);
        assert_abs_diff_eq!(
            d.control_matrix[[3, 0]],
            -1.0 / (p.cart_mass * p.pole_length),
            epsilon = 1e-12
        );
    }
}
