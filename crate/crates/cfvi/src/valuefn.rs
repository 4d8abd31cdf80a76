//! Locally quadratic value-function ensemble.
//!
//! Each member network maps the transformed state `z` to the entries of a
//! lower-triangular matrix `L(z)` with positive diagonal. The ensemble
//! value is built from the mean matrix `Lbar = mean_i L(z; psi_i)`:
//!
//! ```text
//! V(x) = -(z - z_des)^T Lbar(z) Lbar(z)^T (z - z_des),   z = h(x)
//! ```
//!
//! so that `V <= 0`, `V(x_des) = 0` and `grad V(x_des) = 0` hold for every
//! parameter setting. Gradients with respect to the raw state are exact:
//! reverse mode through the quadratic head and the member networks, then a
//! projection through the feature-transform Jacobian.

use crate::dynamics::FeatureTransform;
use crate::error::{Error, Result};
use crate::rng::substream;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU32, Ordering};

/// Smooth activations only: the policy needs `grad V` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    /// Rejected at initialization; listed so configs can name it and get a
    /// clear error instead of a parse failure.
    Relu,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Softplus => softplus(a),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Softplus => 1.0 - (-h).exp(),
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Network and ensemble hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of ensemble members `N`.
    pub ensemble: usize,
    /// Diagonal floor `eps`; the reconstructed diagonal is
    /// `softplus(o) + eps`.
    pub diag_floor: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            ensemble: 4,
            diag_floor: 1e-3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble == 0 {
            return Err(Error::config("ensemble size must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !self.activation.is_smooth() {
            return Err(Error::config(
                "activation must be smooth (tanh or softplus); relu has no gradient at 0",
            ));
        }
        if self.diag_floor <= 0.0 {
            return Err(Error::config("diag_floor must be positive"));
        }
        Ok(())
    }
}

/// Fitting hyper-parameters for one cFVI iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    /// Allowed jitter when checking that the per-epoch loss is
    /// non-increasing.
    pub loss_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            minibatch: 256,
            learning_rate: 1e-3,
            loss_tolerance: 1e-3,
        }
    }
}

/// One feedforward member network; layer `l` stores `W_l` as `out x in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

struct MlpActivations {
    /// Post-activation outputs of the hidden layers.
    hidden: Vec<Array2<f64>>,
    /// Linear output of the last layer, `B x out_dim`.
    out: Array2<f64>,
}

struct MlpGrads {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Mlp {
    fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            let mut weight = Array2::zeros((fan_out, fan_in));
            for v in weight.iter_mut() {
                *v = rng.random_range(-s..=s);
            }
            let mut bias = Array1::zeros(fan_out);
            for v in bias.iter_mut() {
                *v = rng.random_range(-s..=s);
            }
            weights.push(weight);
            biases.push(bias);
        }
        Mlp { weights, biases }
    }

    fn forward(&self, input: &ArrayView2<f64>, act: Activation) -> MlpActivations {
        let n_hidden = self.weights.len() - 1;
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            let src = if l == 0 { input.view() } else { hidden[l - 1].view() };
            let mut a = src.dot(&self.weights[l].t());
            a += &self.biases[l];
            a.mapv_inplace(|v| act.apply(v));
            hidden.push(a);
        }
        let last = if n_hidden == 0 {
            input.view()
        } else {
            hidden[n_hidden - 1].view()
        };
        let mut out = last.dot(&self.weights[n_hidden].t());
        out += &self.biases[n_hidden];
        MlpActivations { hidden, out }
    }

    /// Gradient w.r.t. the network input, given the gradient w.r.t. the
    /// linear output.
    fn backward_input(
        &self,
        acts: &MlpActivations,
        g_out: &Array2<f64>,
        act: Activation,
    ) -> Array2<f64> {
        let n_hidden = self.weights.len() - 1;
        let mut g = g_out.dot(&self.weights[n_hidden]);
        for l in (0..n_hidden).rev() {
            let h = &acts.hidden[l];
            ndarray::Zip::from(&mut g).and(h).for_each(|gv, &hv| {
                *gv *= act.derivative_from_output(hv);
            });
            g = g.dot(&self.weights[l]);
        }
        g
    }

    /// Parameter gradients, written into `grads`.
    fn backward_params(
        &self,
        input: &ArrayView2<f64>,
        acts: &MlpActivations,
        g_out: &Array2<f64>,
        act: Activation,
        grads: &mut MlpGrads,
    ) {
        let n_hidden = self.weights.len() - 1;
        let mut g = g_out.clone();
        for l in (0..=n_hidden).rev() {
            // gradient of the linear layer l: input is hidden[l-1] or the raw input
            if l > 0 {
                grads.weights[l] = g.t().dot(&acts.hidden[l - 1]);
            } else {
                grads.weights[0] = g.t().dot(input);
            }
            grads.biases[l] = g.sum_axis(Axis(0));
            if l > 0 {
                let mut g_prev = g.dot(&self.weights[l]);
                let h = &acts.hidden[l - 1];
                ndarray::Zip::from(&mut g_prev).and(h).for_each(|gv, &hv| {
                    *gv *= act.derivative_from_output(hv);
                });
                g = g_prev;
            }
        }
    }

    fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

struct Adam {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: usize,
    lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(mlp: &Mlp, lr: f64) -> Self {
        Adam {
            m_w: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, mlp: &mut Mlp, grads: &MlpGrads) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let scale = self.lr * bc2.sqrt() / bc1;
        for l in 0..mlp.weights.len() {
            ndarray::Zip::from(&mut mlp.weights[l])
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= scale * *m / (v.sqrt() + ADAM_EPS);
                });
            ndarray::Zip::from(&mut mlp.biases[l])
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= scale * *m / (v.sqrt() + ADAM_EPS);
                });
        }
    }
}

/// Value and exact gradient at one state.
#[derive(Debug, Clone)]
pub struct ValueAndGradient {
    pub value: f64,
    pub grad_x: Array1<f64>,
}

/// Read/write phase flag. Target computation holds read access, fitting
/// holds exclusive write access; an overlap is a caller bug and panics.
#[derive(Debug, Default)]
pub struct PhaseFlag(AtomicU32);

const WRITER_BIT: u32 = 1 << 31;

pub struct ReadPhase<'a>(&'a PhaseFlag);
pub struct WritePhase<'a>(&'a PhaseFlag);

impl PhaseFlag {
    pub fn begin_read(&self) -> ReadPhase<'_> {
        let prev = self.0.fetch_add(1, Ordering::AcqRel);
        assert!(
            prev & WRITER_BIT == 0,
            "value ensemble is being fitted while a target batch reads it"
        );
        ReadPhase(self)
    }

    pub fn begin_write(&self) -> WritePhase<'_> {
        let res = self
            .0
            .compare_exchange(0, WRITER_BIT, Ordering::AcqRel, Ordering::Acquire);
        assert!(
            res.is_ok(),
            "fit started while the ensemble is read by a target batch or another fit"
        );
        WritePhase(self)
    }
}

impl Drop for ReadPhase<'_> {
    fn drop(&mut self) {
        self.0 .0.fetch_sub(1, Ordering::AcqRel);
    }
}

impl Drop for WritePhase<'_> {
    fn drop(&mut self) {
        self.0 .0.fetch_and(!WRITER_BIT, Ordering::AcqRel);
    }
}

/// Ensemble of locally quadratic value networks.
#[derive(Debug, Serialize, Deserialize)]
pub struct ValueEnsemble {
    arch: ArchConfig,
    z_dim: usize,
    /// Number of lower-triangular entries, `z_dim (z_dim + 1) / 2`.
    l_dim: usize,
    /// Row/column of each flattened L entry.
    tri: Vec<(usize, usize)>,
    members: Vec<Mlp>,
    #[serde(skip)]
    phase: PhaseFlag,
}

impl Clone for ValueEnsemble {
    fn clone(&self) -> Self {
        ValueEnsemble {
            arch: self.arch.clone(),
            z_dim: self.z_dim,
            l_dim: self.l_dim,
            tri: self.tri.clone(),
            members: self.members.clone(),
            phase: PhaseFlag::default(),
        }
    }
}

fn tri_indices(d: usize) -> Vec<(usize, usize)> {
    let mut tri = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for k in 0..=j {
            tri.push((j, k));
        }
    }
    tri
}

/// Records per-epoch mean losses of a fitting call.
#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Mean over members, one entry per epoch.
    pub epoch_loss: Vec<f64>,
    /// Per-member per-epoch losses.
    pub member_epoch_loss: Vec<Vec<f64>>,
}

impl FitTrace {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_loss.last().unwrap_or(&f64::NAN)
    }
}

impl ValueEnsemble {
    /// `N` independently seeded members with identical architecture.
    pub fn init(arch: &ArchConfig, z_dim: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if z_dim == 0 {
            return Err(Error::config("z_dim must be positive"));
        }
        let l_dim = z_dim * (z_dim + 1) / 2;
        let mut dims = Vec::with_capacity(arch.hidden.len() + 2);
        dims.push(z_dim);
        dims.extend_from_slice(&arch.hidden);
        dims.push(l_dim);
        let members = (0..arch.ensemble)
            .map(|i| {
                let mut rng = substream(seed, "ensemble-init", i as u64, 0);
                Mlp::init(&dims, &mut rng)
            })
            .collect();
        Ok(ValueEnsemble {
            arch: arch.clone(),
            z_dim,
            l_dim,
            tri: tri_indices(z_dim),
            members,
            phase: PhaseFlag::default(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn phase(&self) -> &PhaseFlag {
        &self.phase
    }

    /// Structural consistency of deserialized parameters.
    pub fn validate_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        if self.l_dim != self.z_dim * (self.z_dim + 1) / 2
            || self.tri != tri_indices(self.z_dim)
            || self.members.len() != self.arch.ensemble
        {
            return Err(Error::CheckpointMismatch(
                "ensemble metadata is inconsistent".into(),
            ));
        }
        let mut dims = vec![self.z_dim];
        dims.extend_from_slice(&self.arch.hidden);
        dims.push(self.l_dim);
        for m in &self.members {
            if m.weights.len() != dims.len() - 1 {
                return Err(Error::CheckpointMismatch("member layer count".into()));
            }
            for (l, w) in m.weights.iter().enumerate() {
                if w.shape() != [dims[l + 1], dims[l]] || m.biases[l].len() != dims[l + 1] {
                    return Err(Error::CheckpointMismatch(format!(
                        "member layer {l} has shape {:?}",
                        w.shape()
                    )));
                }
                if w.iter().any(|v| !v.is_finite()) || m.biases[l].iter().any(|v| !v.is_finite()) {
                    return Err(Error::CheckpointMismatch("non-finite parameters".into()));
                }
            }
        }
        Ok(())
    }

    /// Lower-triangular matrix of one member at `z` (diagonal already
    /// floored through softplus).
    pub fn member_l(&self, member: usize, z: &Array1<f64>) -> Array2<f64> {
        let acts = self.members[member].forward(
            &z.view().insert_axis(Axis(0)),
            self.arch.activation,
        );
        let mut l = Array2::zeros((self.z_dim, self.z_dim));
        for (m, &(j, k)) in self.tri.iter().enumerate() {
            let o = acts.out[[0, m]];
            l[[j, k]] = if j == k {
                softplus(o) + self.arch.diag_floor
            } else {
                o
            };
        }
        l
    }

    /// Ensemble-mean lower-triangular matrix at `z`.
    pub fn mean_l(&self, z: &Array1<f64>) -> Array2<f64> {
        let mut acc = Array2::zeros((self.z_dim, self.z_dim));
        for i in 0..self.members.len() {
            acc += &self.member_l(i, z);
        }
        acc / self.members.len() as f64
    }

    /// Value and exact gradient at a single state.
    pub fn evaluate(&self, ft: &FeatureTransform, x: &Array1<f64>) -> Result<ValueAndGradient> {
        if ft.z_dim() != self.z_dim {
            return Err(Error::contract(
                "feature transform does not match the ensemble input size",
            ));
        }
        if x.len() != ft.state_dim() {
            return Err(Error::contract("evaluate: state dimension mismatch"));
        }
        let xs = x.view().insert_axis(Axis(0));
        let mut values = [0.0];
        let mut grads = Array2::zeros((1, ft.state_dim()));
        self.value_grad_batch(ft, &xs, &mut values, &mut grads.view_mut());
        Ok(ValueAndGradient {
            value: values[0],
            grad_x: grads.row(0).to_owned(),
        })
    }

    /// Batched values only (forward pass, no gradient).
    pub fn value_batch(&self, ft: &FeatureTransform, xs: &ArrayView2<f64>, values: &mut [f64]) {
        let _read = self.phase.begin_read();
        debug_assert_eq!(ft.z_dim(), self.z_dim);
        debug_assert_eq!(values.len(), xs.nrows());
        let z = ft.transform_batch(xs);
        let lbar = self.mean_l_rows(&z.view());
        self.quadratic_head(&z.view(), ft, &lbar, values, None);
    }

    /// Batched values and exact gradients w.r.t. the raw state.
    pub fn value_grad_batch(
        &self,
        ft: &FeatureTransform,
        xs: &ArrayView2<f64>,
        values: &mut [f64],
        grads_x: &mut ArrayViewMut2<f64>,
    ) {
        let _read = self.phase.begin_read();
        debug_assert_eq!(ft.z_dim(), self.z_dim);
        debug_assert_eq!(values.len(), xs.nrows());
        debug_assert_eq!(grads_x.nrows(), xs.nrows());
        let b = xs.nrows();
        let z = ft.transform_batch(xs);
        let act = self.arch.activation;
        let n = self.members.len() as f64;

        // forward all members, keep activations for the backward sweep
        let member_acts: Vec<MlpActivations> =
            self.members.iter().map(|m| m.forward(&z.view(), act)).collect();

        // ensemble-mean L rows
        let mut lbar = Array2::zeros((b, self.l_dim));
        for acts in &member_acts {
            for (m, &(j, k)) in self.tri.iter().enumerate() {
                if j == k {
                    for r in 0..b {
                        lbar[[r, m]] += softplus(acts.out[[r, m]]) + self.arch.diag_floor;
                    }
                } else {
                    for r in 0..b {
                        lbar[[r, m]] += acts.out[[r, m]];
                    }
                }
            }
        }
        lbar /= n;

        // quadratic head: values, dV/dLbar and the explicit dV/dz part
        let mut g_lbar = Array2::zeros((b, self.l_dim));
        let mut g_z = Array2::zeros((b, self.z_dim));
        self.quadratic_head(&z.view(), ft, &lbar, values, Some((&mut g_lbar, &mut g_z)));

        // per member: chain through softplus on the diagonal, mean weight 1/N,
        // then reverse through the network and accumulate dV/dz
        for (member, acts) in self.members.iter().zip(&member_acts) {
            let mut g_o = g_lbar.clone();
            for (m, &(j, k)) in self.tri.iter().enumerate() {
                if j == k {
                    for r in 0..b {
                        g_o[[r, m]] *= sigmoid(acts.out[[r, m]]) / n;
                    }
                } else {
                    for r in 0..b {
                        g_o[[r, m]] /= n;
                    }
                }
            }
            g_z += &member.backward_input(acts, &g_o, act);
        }

        // project to raw coordinates through the transform Jacobian
        for r in 0..b {
            let x_row = xs.row(r);
            let gz_row = g_z.row(r);
            let mut gx_row = grads_x.row_mut(r);
            ft.project_gradient(
                x_row.as_slice().expect("contiguous state row"),
                gz_row.as_slice().expect("contiguous grad row"),
                gx_row.as_slice_mut().expect("contiguous out row"),
            );
        }
    }

    fn mean_l_rows(&self, z: &ArrayView2<f64>) -> Array2<f64> {
        let b = z.nrows();
        let act = self.arch.activation;
        let n = self.members.len() as f64;
        let mut lbar = Array2::zeros((b, self.l_dim));
        for member in &self.members {
            let acts = member.forward(z, act);
            for (m, &(j, k)) in self.tri.iter().enumerate() {
                if j == k {
                    for r in 0..b {
                        lbar[[r, m]] += softplus(acts.out[[r, m]]) + self.arch.diag_floor;
                    }
                } else {
                    for r in 0..b {
                        lbar[[r, m]] += acts.out[[r, m]];
                    }
                }
            }
        }
        lbar / n
    }

    /// `V = -|L^T e|^2` per row; optionally also `dV/dL` and the explicit
    /// `dV/dz` term `-2 L y` (the implicit term flows through the network).
    fn quadratic_head(
        &self,
        z: &ArrayView2<f64>,
        ft: &FeatureTransform,
        l_rows: &Array2<f64>,
        values: &mut [f64],
        mut grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
    ) {
        let d = self.z_dim;
        let z_des = ft.z_des();
        let mut e = vec![0.0; d];
        let mut y = vec![0.0; d];
        for r in 0..z.nrows() {
            for j in 0..d {
                e[j] = z[[r, j]] - z_des[j];
            }
            y.fill(0.0);
            for (m, &(j, k)) in self.tri.iter().enumerate() {
                y[k] += l_rows[[r, m]] * e[j];
            }
            values[r] = -y.iter().map(|v| v * v).sum::<f64>();
            if let Some((ref mut g_l, ref mut g_z)) = grads {
                for (m, &(j, k)) in self.tri.iter().enumerate() {
                    g_l[[r, m]] = -2.0 * e[j] * y[k];
                    g_z[[r, j]] += -2.0 * l_rows[[r, m]] * y[k];
                }
            }
        }
    }

    /// Fit every member independently to the targets with minibatch Adam.
    /// Returns the per-epoch mean losses; errors if any loss turns
    /// non-finite.
    pub fn fit(
        &mut self,
        ft: &FeatureTransform,
        states: &ArrayView2<f64>,
        targets: &[f64],
        cfg: &FitConfig,
        seed: u64,
    ) -> Result<FitTrace> {
        let _write = self.phase.begin_write();
        let b = states.nrows();
        if b == 0 || targets.len() != b {
            return Err(Error::contract(
                "fit: states and targets must be non-empty and of equal length",
            ));
        }
        if cfg.epochs == 0 || cfg.minibatch == 0 || cfg.learning_rate <= 0.0 {
            return Err(Error::config("fit: epochs, minibatch and learning rate must be positive"));
        }
        let z_all = ft.transform_batch(states);
        let act = self.arch.activation;
        let d = self.z_dim;
        let l_dim = self.l_dim;
        let tri = self.tri.clone();
        let diag_floor = self.arch.diag_floor;
        let lr = cfg.learning_rate;
        let z_des = ft.z_des().clone();
        let mb = cfg.minibatch.min(b);

        let member_epoch_loss: Vec<Vec<f64>> = self
            .members
            .par_iter_mut()
            .enumerate()
            .map(|(mi, member)| -> Result<Vec<f64>> {
                let mut adam = Adam::new(member, lr);
                let mut grads = member.zero_grads();
                let mut order: Vec<usize> = (0..b).collect();
                let mut rng = substream(seed, "fit-shuffle", mi as u64, 0);
                let mut losses = Vec::with_capacity(cfg.epochs);
                let mut zb = Array2::zeros((mb, d));
                let mut tb = vec![0.0; mb];
                let mut e = vec![0.0; d];
                let mut y = vec![0.0; d];
                for _epoch in 0..cfg.epochs {
                    // Fisher-Yates with the member substream
                    for i in (1..b).rev() {
                        let j = rng.random_range(0..=i);
                        order.swap(i, j);
                    }
                    let mut epoch_loss = 0.0;
                    let mut seen = 0usize;
                    let mut start = 0usize;
                    let mut batch_idx = 0usize;
                    while start < b {
                        let end = (start + mb).min(b);
                        let rows = end - start;
                        for (rr, &src) in order[start..end].iter().enumerate() {
                            zb.row_mut(rr).assign(&z_all.row(src));
                            tb[rr] = targets[src];
                        }
                        let zb_view = zb.slice(ndarray::s![..rows, ..]);
                        let acts = member.forward(&zb_view, act);
                        let mut g_o = Array2::zeros((rows, l_dim));
                        let mut batch_loss = 0.0;
                        for r in 0..rows {
                            for j in 0..d {
                                e[j] = zb_view[[r, j]] - z_des[j];
                            }
                            y.fill(0.0);
                            let mut l_val = vec![0.0; l_dim];
                            for (m, &(j, k)) in tri.iter().enumerate() {
                                let o = acts.out[[r, m]];
                                l_val[m] = if j == k { softplus(o) + diag_floor } else { o };
                                y[k] += l_val[m] * e[j];
                            }
                            let v = -y.iter().map(|t| t * t).sum::<f64>();
                            let residual = v - tb[r];
                            batch_loss += residual * residual;
                            let g_v = 2.0 * residual / rows as f64;
                            for (m, &(j, k)) in tri.iter().enumerate() {
                                let mut g = g_v * (-2.0 * e[j] * y[k]);
                                if j == k {
                                    g *= sigmoid(acts.out[[r, m]]);
                                }
                                g_o[[r, m]] = g;
                            }
                        }
                        if !batch_loss.is_finite() {
                            return Err(Error::FitDiverged {
                                member: mi,
                                minibatch: batch_idx,
                            });
                        }
                        epoch_loss += batch_loss;
                        seen += rows;
                        member.backward_params(&zb_view, &acts, &g_o, act, &mut grads);
                        adam.update(member, &grads);
                        start = end;
                        batch_idx += 1;
                    }
                    losses.push(epoch_loss / seen as f64);
                }
                Ok(losses)
            })
            .collect::<Result<Vec<_>>>()?;

        let epochs = cfg.epochs;
        let n = member_epoch_loss.len() as f64;
        let epoch_loss = (0..epochs)
            .map(|e| member_epoch_loss.iter().map(|m| m[e]).sum::<f64>() / n)
            .collect();
        Ok(FitTrace {
            epoch_loss,
            member_epoch_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FeatureTransform;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn pendulum_ft() -> FeatureTransform {
        FeatureTransform::new(vec![true, false], &array![0.0, 0.0])
    }

    fn small_arch(n: usize) -> ArchConfig {
        ArchConfig {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            ensemble: n,
            diag_floor: 1e-3,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ValueEnsemble::init(&small_arch(4), 3, 42).unwrap();
        let b = ValueEnsemble::init(&small_arch(4), 3, 42).unwrap();
        let c = ValueEnsemble::init(&small_arch(4), 3, 43).unwrap();
        assert_eq!(a.members[0].weights[0], b.members[0].weights[0]);
        assert_ne!(a.members[0].weights[0], c.members[0].weights[0]);
        // members differ from each other
        assert_ne!(a.members[0].weights[0], a.members[1].weights[0]);
    }

    #[test]
    fn relu_rejected() {
        let arch = ArchConfig {
            activation: Activation::Relu,
            ..small_arch(2)
        };
        assert!(ValueEnsemble::init(&arch, 3, 0).is_err());
    }

    #[test]
    fn structural_properties_at_goal() {
        let ft = pendulum_ft();
        for seed in 0..5 {
            let ve = ValueEnsemble::init(&small_arch(3), ft.z_dim(), seed).unwrap();
            let out = ve.evaluate(&ft, &array![0.0, 0.0]).unwrap();
            assert_eq!(out.value, 0.0);
            assert_eq!(out.grad_x[0], 0.0);
            assert_eq!(out.grad_x[1], 0.0);
        }
    }

    #[test]
    fn value_nonpositive_everywhere() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(2), ft.z_dim(), 7).unwrap();
        let mut rng = crate::rng::substream(1, "vnp", 0, 0);
        for _ in 0..200 {
            let x = array![
                rng.random_range(-3.2..3.2),
                rng.random_range(-8.0..8.0)
            ];
            let out = ve.evaluate(&ft, &x).unwrap();
            assert!(out.value <= 0.0);
        }
    }

    #[test]
    fn single_member_mean_equals_member() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(1), ft.z_dim(), 3).unwrap();
        let z = ft.transform(&array![0.4, -1.0]).unwrap();
        let l_member = ve.member_l(0, &z);
        let l_mean = ve.mean_l(&z);
        assert_eq!(l_member, l_mean);
    }

    #[test]
    fn ensemble_mean_linearity() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(4), ft.z_dim(), 9).unwrap();
        let x = array![1.2, -2.5];
        let z = ft.transform(&x).unwrap();
        let lbar = ve.mean_l(&z);
        let e = &z - ft.z_des();
        let y = lbar.t().dot(&e);
        let manual = -y.dot(&y);
        let out = ve.evaluate(&ft, &x).unwrap();
        assert_abs_diff_eq!(out.value, manual, epsilon = 1e-12);
    }

    #[test]
    fn positive_diagonal_floor() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(3), ft.z_dim(), 21).unwrap();
        let mut rng = crate::rng::substream(2, "diag", 0, 0);
        for _ in 0..50 {
            let z = ft
                .transform(&array![rng.random_range(-3.0..3.0), rng.random_range(-8.0..8.0)])
                .unwrap();
            for i in 0..ve.n_members() {
                let l = ve.member_l(i, &z);
                for j in 0..ft.z_dim() {
                    assert!(l[[j, j]] >= ve.arch().diag_floor);
                }
            }
        }
    }

    #[test]
    fn periodic_in_the_angle() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(2), ft.z_dim(), 5).unwrap();
        for theta in [-2.0, 0.3, 1.9] {
            let a = ve.evaluate(&ft, &array![theta, 1.0]).unwrap();
            let b = ve
                .evaluate(&ft, &array![theta + 2.0 * std::f64::consts::PI, 1.0])
                .unwrap();
            assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(3), ft.z_dim(), 11).unwrap();
        let mut rng = crate::rng::substream(3, "fd", 0, 0);
        let h = 1e-5;
        for _ in 0..100 {
            let x = array![rng.random_range(-3.0..3.0), rng.random_range(-7.0..7.0)];
            let out = ve.evaluate(&ft, &x).unwrap();
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let vp = ve.evaluate(&ft, &xp).unwrap().value;
                let vm = ve.evaluate(&ft, &xm).unwrap().value;
                let fd = (vp - vm) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                assert!(
                    (fd - out.grad_x[i]).abs() / denom <= 1e-4,
                    "fd {fd} vs analytic {} at {x}",
                    out.grad_x[i]
                );
            }
        }
    }

    #[test]
    fn fit_noop_when_targets_equal_predictions() {
        let ft = pendulum_ft();
        let mut ve = ValueEnsemble::init(&small_arch(2), ft.z_dim(), 13).unwrap();
        let mut rng = crate::rng::substream(4, "fitnoop", 0, 0);
        let mut states = Array2::zeros((32, 2));
        for mut row in states.rows_mut() {
            row[0] = rng.random_range(-3.0..3.0);
            row[1] = rng.random_range(-5.0..5.0);
        }
        // targets = member predictions is only a fixed point for N = 1,
        // where the ensemble value equals the member value
        let arch1 = small_arch(1);
        let mut ve1 = ValueEnsemble::init(&arch1, ft.z_dim(), 13).unwrap();
        let mut targets = vec![0.0; 32];
        ve1.value_batch(&ft, &states.view(), &mut targets);
        let before = ve1.members[0].weights[0].clone();
        let cfg = FitConfig {
            epochs: 3,
            minibatch: 8,
            ..FitConfig::default()
        };
        let trace = ve1.fit(&ft, &states.view(), &targets, &cfg, 99).unwrap();
        assert_eq!(ve1.members[0].weights[0], before);
        assert!(trace.epoch_loss.iter().all(|&l| l == 0.0));

        // and for N > 1 the loss still cannot increase
        let mut targets2 = vec![0.0; 32];
        ve.value_batch(&ft, &states.view(), &mut targets2);
        let trace2 = ve.fit(&ft, &states.view(), &targets2, &cfg, 99).unwrap();
        assert!(trace2.epoch_loss.last().unwrap() <= &(trace2.epoch_loss[0] + 1e-12));
    }

    #[test]
    fn fit_zero_loss_at_goal_target() {
        let ft = pendulum_ft();
        let mut ve = ValueEnsemble::init(&small_arch(2), ft.z_dim(), 17).unwrap();
        let states = Array2::zeros((1, 2));
        let cfg = FitConfig {
            epochs: 1,
            minibatch: 1,
            ..FitConfig::default()
        };
        let trace = ve.fit(&ft, &states.view(), &[0.0], &cfg, 1).unwrap();
        assert_eq!(trace.epoch_loss[0], 0.0);
    }

    #[test]
    fn fit_reduces_loss_on_synthetic_data() {
        let ft = pendulum_ft();
        let mut ve = ValueEnsemble::init(&small_arch(3), ft.z_dim(), 19).unwrap();
        let mut rng = crate::rng::substream(5, "fitsyn", 0, 0);
        let n = 512;
        let mut states = Array2::zeros((n, 2));
        let mut targets = vec![0.0; n];
        for (i, mut row) in states.rows_mut().into_iter().enumerate() {
            row[0] = rng.random_range(-3.0..3.0);
            row[1] = rng.random_range(-6.0..6.0);
            let e0 = crate::dynamics::wrap_angle(row[0]);
            targets[i] = -(e0 * e0 + 0.1 * row[1] * row[1]);
        }
        let cfg = FitConfig {
            epochs: 10,
            minibatch: 64,
            learning_rate: 3e-3,
            loss_tolerance: 1e-3,
        };
        let trace = ve.fit(&ft, &states.view(), &targets, &cfg, 2).unwrap();
        assert!(trace.epoch_loss.last().unwrap() < &trace.epoch_loss[0]);
        for member in &trace.member_epoch_loss {
            assert!(member.last().unwrap() <= &(member[0] + cfg.loss_tolerance));
        }
    }

    #[test]
    fn phase_flag_rejects_overlap() {
        let flag = PhaseFlag::default();
        {
            let _r1 = flag.begin_read();
            let _r2 = flag.begin_read(); // concurrent reads allowed
            let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                let _w = flag.begin_write();
            }));
            assert!(res.is_err());
        }
        let _w = flag.begin_write();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _r = flag.begin_read();
        }));
        assert!(res.is_err());
    }

    #[test]
    fn serde_roundtrip_is_bit_exact() {
        let ft = pendulum_ft();
        let ve = ValueEnsemble::init(&small_arch(2), ft.z_dim(), 23).unwrap();
        let json = serde_json::to_string(&ve).unwrap();
        let back: ValueEnsemble = serde_json::from_str(&json).unwrap();
        back.validate_shapes().unwrap();
        let x = array![0.7, -3.3];
        let a = ve.evaluate(&ft, &x).unwrap();
        let b = back.evaluate(&ft, &x).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad_x[0].to_bits(), b.grad_x[0].to_bits());
    }
}
