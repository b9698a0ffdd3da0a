//! Closed-form evaluation of the convergence constants and bounds, for
//! configuration guidance and sanity assertions. Constants are user-supplied;
//! nothing here estimates them from a trained network.

use crate::error::{GlasuError, Result};

/// Smoothness/Lipschitz constants of the loss (G_l, L_l) and of a client's
/// prediction function (G_f, L_f).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothnessConstants {
    pub g_ell: f64,
    pub l_ell: f64,
    pub g_f: f64,
    pub l_f: f64,
}

impl SmoothnessConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("g_ell", self.g_ell),
            ("l_ell", self.l_ell),
            ("g_f", self.g_f),
            ("l_f", self.l_f),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(GlasuError::Config(format!("constant {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Inputs for the gradient-norm bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    pub m_clients: usize,
    pub local_iters: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub dim: usize,
    /// Failure probability, in (0, 1).
    pub delta: f64,
    /// Initial optimality gap, >= 0.
    pub delta_l: f64,
    pub eta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.m_clients < 1 || self.local_iters < 1 || self.rounds < 1 || self.batch_size < 1 {
            return Err(GlasuError::Config("counts must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(GlasuError::Config("dimension must be >= 1".into()));
        }
        if self.delta.is_nan() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(GlasuError::Config(format!("delta {} not in (0,1)", self.delta)));
        }
        if self.delta_l.is_nan() || self.delta_l < 0.0 {
            return Err(GlasuError::Config("initial gap must be >= 0".into()));
        }
        Ok(())
    }
}

/// Uniform Lipschitz constant of the objective gradient:
/// C0 = G_l * L_f + L_l * G_f^2.
pub fn c0(k: &SmoothnessConstants) -> f64 {
    k.g_ell * k.l_f + k.l_ell * k.g_f * k.g_f
}

/// Stochastic-gradient variance bound:
/// sigma = 64 G_l^2 L_f^2 log(2d/delta)
///       + 128 L_l^2 (G_f^4 + 1/S)(log(2d/delta) + 1/4).
pub fn sigma_var(k: &SmoothnessConstants, batch_size: usize, dim: usize, delta: f64) -> f64 {
    let log_term = (2.0 * dim as f64 / delta).ln();
    let g2l2 = k.g_ell * k.g_ell * k.l_f * k.l_f;
    let gf4 = k.g_f.powi(4);
    64.0 * g2l2 * log_term
        + 128.0 * k.l_ell * k.l_ell * (gf4 + 1.0 / batch_size as f64) * (log_term + 0.25)
}

/// Largest constant step size the bound admits: 1/(C0 (1 + 2 Q^2 M)).
pub fn max_step_size(c0: f64, local_iters: usize, m_clients: usize) -> f64 {
    let q = local_iters as f64;
    1.0 / (c0 * (1.0 + 2.0 * q * q * m_clients as f64))
}

/// Averaged squared gradient norm bound:
/// 2 delta_L/(eta T Q) + 28 eta M (C0 + sqrt(M+1) Q) sigma / 3.
/// The step size must satisfy [`max_step_size`] or the bound is invalid.
pub fn grad_norm_bound(inputs: &BoundInputs, c0_val: f64, sigma: f64) -> Result<f64> {
    inputs.validate()?;
    let cap = max_step_size(c0_val, inputs.local_iters, inputs.m_clients);
    if inputs.eta > cap {
        return Err(GlasuError::Config(format!(
            "step size {} exceeds the admissible bound {cap}; the gradient-norm bound does not apply",
            inputs.eta
        )));
    }
    let tq = (inputs.rounds * inputs.local_iters) as f64;
    let m = inputs.m_clients as f64;
    let q = inputs.local_iters as f64;
    let first = 2.0 * inputs.delta_l / (inputs.eta * tq);
    let second = 28.0 * inputs.eta * m * (c0_val + (m + 1.0).sqrt() * q) * sigma / 3.0;
    Ok(first + second)
}

/// The step size sqrt(3 delta_L / (28 M C0 sigma T Q)), valid only when
/// Q <= C0 / sqrt(M+1).
pub fn suggested_step(inputs: &BoundInputs, c0_val: f64, sigma: f64) -> Result<f64> {
    inputs.validate()?;
    let m = inputs.m_clients as f64;
    let q = inputs.local_iters as f64;
    if q > c0_val / (m + 1.0).sqrt() {
        return Err(GlasuError::Config(format!(
            "local iteration count {q} violates the validity condition Q <= C0/sqrt(M+1) = {}",
            c0_val / (m + 1.0).sqrt()
        )));
    }
    let tq = (inputs.rounds * inputs.local_iters) as f64;
    let eta = (3.0 * inputs.delta_l / (28.0 * m * c0_val * sigma * tq)).sqrt();
    if eta == 0.0 {
        log::warn!("suggested step size is 0 (zero initial gap); this is degenerate");
    }
    Ok(eta)
}

/// The closed form the bound collapses to at the suggested step size when the
/// validity condition is tight: 8 sqrt(7 delta_L M C0 sigma / (3 T Q)).
pub fn stationarity_closed_form(inputs: &BoundInputs, c0_val: f64, sigma: f64) -> f64 {
    let tq = (inputs.rounds * inputs.local_iters) as f64;
    8.0 * (7.0 * inputs.delta_l * inputs.m_clients as f64 * c0_val * sigma / (3.0 * tq)).sqrt()
}
