//! Separable reward `r_c(x, u) = q_c(x) - g_c(u)`.
//!
//! The state reward is a negative quadratic over the wrapped state error:
//! revolute coordinates contribute their angle difference wrapped to
//! `(-pi, pi]`, everything else the raw difference to the goal. The action
//! cost is the log-cosine barrier
//!
//! ```text
//! g_c(u) = -2 beta u_max / pi * log(cos(pi u / (2 u_max)))
//! ```
//!
//! summed per action dimension. Its gradient `beta tan(pi u / (2 u_max))`
//! has the closed-form inverse `2 u_max / pi * atan(w / beta)`, which maps
//! the value-gradient signal to an action strictly inside the box.

use crate::dynamics::{wrap_angle, SystemSpec};
use crate::error::{Error, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardSpec {
    /// Diagonal of the positive-definite state-cost matrix over the wrapped
    /// error, one entry per raw state coordinate.
    pub q_diag: Array1<f64>,
    /// Barrier steepness; larger values make actions cheaper.
    pub action_cost_beta: f64,
    pub u_max: Array1<f64>,
    /// Which error coordinates are wrapped angles.
    pub angle_mask: Vec<bool>,
    pub x_des: Array1<f64>,
}

impl RewardSpec {
    pub fn new(
        q_diag: Array1<f64>,
        action_cost_beta: f64,
        u_max: Array1<f64>,
        angle_mask: Vec<bool>,
        x_des: Array1<f64>,
    ) -> Result<Self> {
        if q_diag.iter().any(|&q| q <= 0.0) {
            return Err(Error::config("q_diag entries must be positive"));
        }
        if action_cost_beta <= 0.0 {
            return Err(Error::config("action_cost_beta must be positive"));
        }
        if u_max.iter().any(|&u| u <= 0.0) {
            return Err(Error::config("u_max must be positive"));
        }
        if q_diag.len() != angle_mask.len() || q_diag.len() != x_des.len() {
            return Err(Error::config("reward dimensions are inconsistent"));
        }
        Ok(RewardSpec {
            q_diag,
            action_cost_beta,
            u_max,
            angle_mask,
            x_des,
        })
    }

    /// Reward parameters used in the experiments, keyed by system id.
    pub fn default_for(spec: &SystemSpec) -> Result<Self> {
        let (q, beta) = match spec.id.as_str() {
            "pendulum" => (vec![1.0, 0.1], 0.5),
            "cartpole" => (vec![25.0, 1.0, 0.5, 0.1], 0.1),
            "furuta" => (vec![1.0, 5.0, 0.1, 0.1], 0.1),
            other => {
                return Err(Error::config(format!(
                    "no default reward for system '{other}'"
                )))
            }
        };
        RewardSpec::new(
            Array1::from_vec(q),
            beta,
            spec.u_max.clone(),
            spec.angle_mask.clone(),
            spec.x_des.clone(),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.q_diag.len()
    }

    pub fn action_dim(&self) -> usize {
        self.u_max.len()
    }

    /// Wrapped error `e(x)`: angle coordinates wrap `x_i - x_des_i` to
    /// `(-pi, pi]`, others subtract directly.
    pub fn error_into(&self, x: &[f64], e: &mut [f64]) {
        for i in 0..x.len() {
            let d = x[i] - self.x_des[i];
            e[i] = if self.angle_mask[i] { wrap_angle(d) } else { d };
        }
    }

    /// `q_c = -e^T Q e` over a precomputed error vector.
    pub fn state_reward(&self, e: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..e.len() {
            q += self.q_diag[i] * e[i] * e[i];
        }
        -q
    }

    /// State reward at a raw state.
    pub fn state_reward_at(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..x.len() {
            let d = x[i] - self.x_des[i];
            let e = if self.angle_mask[i] { wrap_angle(d) } else { d };
            q += self.q_diag[i] * e * e;
        }
        -q
    }

    /// Barrier action cost, summed per dimension. Errors if any component
    /// reaches the bound where the barrier is infinite.
    pub fn action_cost(&self, u: &[f64]) -> Result<f64> {
        let mut g = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            let bound = self.u_max[i];
            if !ui.is_finite() || ui.abs() >= bound {
                return Err(Error::BarrierViolated { value: ui, bound });
            }
            g += self.action_cost_component(ui, bound);
        }
        Ok(g)
    }

    #[inline]
    fn action_cost_component(&self, u: f64, bound: f64) -> f64 {
        -2.0 * self.action_cost_beta * bound / PI * (FRAC_PI_2 * u / bound).cos().ln()
    }

    /// Barrier cost without the domain check; returns +inf outside the box.
    /// Used by rollouts, where the conjugate keeps actions strictly inside.
    pub fn action_cost_unchecked(&self, u: &[f64]) -> f64 {
        let mut g = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            g += self.action_cost_component(ui, self.u_max[i]);
        }
        g
    }

    /// Gradient of the barrier cost: `w_i = beta tan(pi u_i / (2 u_max_i))`.
    pub fn cost_gradient(&self, u: &[f64], w: &mut [f64]) {
        for i in 0..u.len() {
            w[i] = self.action_cost_beta * (FRAC_PI_2 * u[i] / self.u_max[i]).tan();
        }
    }

    /// Gradient of the convex conjugate: the inverse of `cost_gradient`,
    /// `u_i = 2 u_max_i / pi * atan(w_i / beta)`. Strictly inside the box
    /// and monotone in `w`.
    pub fn conjugate_gradient_into(&self, w: &[f64], u: &mut [f64]) {
        for i in 0..w.len() {
            u[i] = 2.0 * self.u_max[i] / PI * (w[i] / self.action_cost_beta).atan();
        }
    }

    pub fn conjugate_gradient(&self, w: &Array1<f64>) -> Result<Array1<f64>> {
        if w.len() != self.action_dim() {
            return Err(Error::contract("conjugate_gradient: dimension mismatch"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("conjugate_gradient: non-finite input"));
        }
        let mut u = Array1::zeros(w.len());
        self.conjugate_gradient_into(w.as_slice().unwrap(), u.as_slice_mut().unwrap());
        Ok(u)
    }

    /// Full reward rate `q_c(x) - g_c(u)`.
    pub fn reward(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        let mut e = vec![0.0; x.len()];
        self.error_into(x, &mut e);
        Ok(self.state_reward(&e) - self.action_cost(u)?)
    }
}
