//! Log densities of the finite-partition hierarchy and the entry-index likelihood.
//!
//! Each mode keeps `D_k` active nodes plus one aggregated slot for the mass of
//! every inactive node. The aggregated slot is the last component of every
//! simplex vector here.
//!
//! The `*_grad` variants work on the unconstrained (softmax / softplus)
//! parameters used by the trainer and accumulate gradients into caller
//! buffers.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::math::{log_softmax, logsumexp, sigmoid, softmax, softplus};

/// Lower clamp for simplex components before taking logs.
pub const SIMPLEX_FLOOR: f64 = 1e-300;

/// Unconstrained parameters of one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    /// `D_k + 1` logits of the top-level weights.
    pub beta_tilde: Vec<f64>,
    /// `D_k x R_1` row-major; locations are `alpha * sigmoid(theta_tilde)`.
    pub theta_tilde: Vec<f64>,
    /// `R_2` pre-softplus concentrations.
    pub gamma_tilde: Vec<f64>,
    /// `R_2` logit vectors of length `D_k + 1`.
    pub omega_tilde: Vec<Vec<f64>>,
}

impl ModeParams {
    pub fn active_nodes(&self) -> usize {
        self.beta_tilde.len() - 1
    }

    pub fn r1(&self) -> usize {
        match self.active_nodes() {
            0 => 0,
            d => self.theta_tilde.len() / d,
        }
    }

    pub fn r2(&self) -> usize {
        self.omega_tilde.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        softmax(&self.beta_tilde)
    }

    pub fn omega(&self, r: usize) -> Vec<f64> {
        softmax(&self.omega_tilde[r])
    }

    pub fn gamma(&self, r: usize) -> f64 {
        softplus(self.gamma_tilde[r])
    }

    /// Location of node `j`, inside `(0, alpha)^R_1`.
    pub fn location(&self, j: usize, alpha: f64) -> Vec<f64> {
        let r1 = self.r1();
        self.theta_tilde[j * r1..(j + 1) * r1]
            .iter()
            .map(|&t| alpha * sigmoid(t))
            .collect()
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Domain(format!(
            "{what} has negative or non-finite components"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Reverse stick-breaking map: the fractions `xi_j = beta_j / Lambda_j` for
/// the `D` active components of `beta` (length `D + 1`).
pub fn stick_fractions(beta: &[f64]) -> Vec<f64> {
    let d = beta.len().saturating_sub(1);
    let mut remaining = 1.0;
    (0..d)
        .map(|j| {
            let xi = beta[j] / remaining;
            remaining -= beta[j];
            xi
        })
        .collect()
}

/// `log |d xi / d beta| = -sum_j log Lambda_j` of [`stick_fractions`]. The
/// Jacobian is lower triangular with diagonal `1 / Lambda_j`.
pub fn stick_log_jacobian(beta: &[f64]) -> Result<f64> {
    check_simplex(beta, "beta")?;
    let mut lambda = 0.0;
    let mut total = 0.0;
    // suffix sums give Lambda_j without cancellation
    for j in (0..beta.len()).rev() {
        lambda += beta[j];
        if j + 1 < beta.len() {
            total -= lambda.ln();
        }
    }
    Ok(total)
}

/// Log density of the top-level weights `beta` (length `D_k + 1`) induced by
/// stick breaking with `Beta(1, alpha_tilde)` fractions:
/// `sum_j log Beta(beta_j / Lambda_j | 1, alpha_tilde) - log Lambda_j` with
/// `Lambda_j = 1 - sum_{t<j} beta_t`. The aggregated last slot is implied.
pub fn log_prior_beta(beta: &[f64], alpha_tilde: f64) -> Result<f64> {
    check_simplex(beta, "beta")?;
    if beta.len() < 2 {
        return Err(Error::Domain("beta needs an aggregated slot".into()));
    }
    let d = beta.len() - 1;
    // Lambda_j as suffix sums, which stay accurate when the head dominates.
    let mut lambda = vec![0.0; beta.len() + 1];
    for j in (0..beta.len()).rev() {
        lambda[j] = lambda[j + 1] + beta[j].max(SIMPLEX_FLOOR);
    }
    let mut total = 0.0;
    for j in 0..d {
        if !(lambda[j] > 0.0) {
            return Err(Error::Domain(format!(
                "stick remainder Lambda_{} <= 0",
                j + 1
            )));
        }
        let xi = beta[j] / lambda[j];
        let one_minus_xi = lambda[j + 1] / lambda[j];
        total += alpha_tilde.ln() + (alpha_tilde - 1.0) * one_minus_xi.ln() - lambda[j].ln();
        debug_assert!(xi <= 1.0 + 1e-12);
    }
    Ok(total)
}

/// [`log_prior_beta`] of `softmax(beta_tilde)`, adding its gradient with
/// respect to `beta_tilde` into `grad`.
///
/// Telescoping the stick terms leaves
/// `D log a + (a - 1) log Lambda_{D+1} - sum_{j=2}^{D} log Lambda_j`,
/// with every `log Lambda_j` a log-sum-exp over a logit suffix.
pub(crate) fn log_prior_beta_grad(beta_tilde: &[f64], alpha_tilde: f64, grad: &mut [f64]) -> f64 {
    let n = beta_tilde.len();
    let d = n - 1;
    let lse = logsumexp(beta_tilde);
    let beta: Vec<f64> = beta_tilde.iter().map(|&b| (b - lse).exp()).collect();
    // log_lambda[j] for 0-based j, suffix log-sum-exp
    let mut log_lambda = vec![f64::NEG_INFINITY; n];
    let mut acc = f64::NEG_INFINITY;
    for j in (0..n).rev() {
        let x = beta_tilde[j];
        acc = if acc == f64::NEG_INFINITY {
            x
        } else if x > acc {
            x + (acc - x).exp().ln_1p()
        } else {
            acc + (x - acc).exp().ln_1p()
        };
        log_lambda[j] = acc - lse;
    }
    // coefficient of log Lambda_j in the telescoped form (0-based j)
    let coeff = |j: usize| -> f64 {
        let mut c = 0.0;
        if j == d {
            c += alpha_tilde - 1.0;
        }
        if j >= 1 && j < d {
            c -= 1.0;
        }
        c
    };
    let mut value = d as f64 * alpha_tilde.ln();
    let mut coeff_sum = 0.0;
    for j in 1..n {
        let c = coeff(j);
        value += c * log_lambda[j];
        coeff_sum += c;
    }
    // d log Lambda_j / d beta_tilde_s = [s >= j] beta_s / Lambda_j - beta_s
    let mut prefix = 0.0;
    for s in 0..n {
        if s >= 1 {
            prefix += coeff(s) / log_lambda[s].exp();
        }
        grad[s] += beta[s] * prefix - beta[s] * coeff_sum;
    }
    value
}

/// `log Dir(omega | gamma * beta)` over the `D_k + 1` partition cells.
pub fn log_dirichlet(omega: &[f64], gamma: f64, beta: &[f64]) -> Result<f64> {
    if omega.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            got: omega.len(),
        });
    }
    check_simplex(omega, "omega")?;
    check_simplex(beta, "beta")?;
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be > 0, got {gamma}")));
    }
    let mut total = ln_gamma(gamma);
    for (&w, &b) in omega.iter().zip(beta) {
        let a = gamma * b.max(SIMPLEX_FLOOR);
        if w <= 0.0 && a < 1.0 {
            return Err(Error::Domain(
                "omega component is 0 where the density diverges".into(),
            ));
        }
        total += (a - 1.0) * w.max(SIMPLEX_FLOOR).ln() - ln_gamma(a);
    }
    Ok(total)
}

/// Gradients of a Dirichlet term with respect to its unconstrained inputs.
pub(crate) struct DirichletGrad<'a> {
    pub omega_tilde: &'a mut [f64],
    /// gradient with respect to `beta` itself (the caller chains it through softmax)
    pub beta: &'a mut [f64],
    pub gamma: &'a mut f64,
}

/// `log Dir(softmax(omega_tilde) | gamma * beta)` with gradients.
pub(crate) fn log_dirichlet_grad(
    omega_tilde: &[f64],
    gamma: f64,
    beta: &[f64],
    g: DirichletGrad<'_>,
) -> f64 {
    let log_omega = log_softmax(omega_tilde);
    let mut value = ln_gamma(gamma);
    let mut a_sum = 0.0;
    let mut dgamma = digamma(gamma);
    for j in 0..beta.len() {
        let b = beta[j].max(SIMPLEX_FLOOR);
        let a = gamma * b;
        let lw = log_omega[j].max(SIMPLEX_FLOOR.ln());
        value += (a - 1.0) * lw - ln_gamma(a);
        a_sum += a - 1.0;
        let psi = digamma(a);
        dgamma += b * (lw - psi);
        g.beta[j] += gamma * (lw - psi);
    }
    for j in 0..beta.len() {
        let a = gamma * beta[j].max(SIMPLEX_FLOOR);
        g.omega_tilde[j] += (a - 1.0) - log_omega[j].exp() * a_sum;
    }
    *g.gamma += dgamma;
    value
}

/// `log Gamma(gamma | shape = alpha_tilde, rate = 1)`; the concentration of a
/// second-level process is the total mass of its Gamma-process base measure.
pub fn log_gamma_prior(gamma: f64, alpha_tilde: f64) -> f64 {
    if gamma == 0.0 && alpha_tilde == 1.0 {
        return 0.0;
    }
    (alpha_tilde - 1.0) * gamma.ln() - gamma - ln_gamma(alpha_tilde)
}

pub(crate) fn log_gamma_prior_dgamma(gamma: f64, alpha_tilde: f64) -> f64 {
    (alpha_tilde - 1.0) / gamma - 1.0
}

/// Per-mode `log omega^k_r` tables for fast entry probabilities.
#[derive(Clone, Debug)]
pub struct SociabilityTable {
    /// `log_omega[k][r][slot]`
    pub log_omega: Vec<Vec<Vec<f64>>>,
}

impl SociabilityTable {
    pub fn new(modes: &[ModeParams]) -> Self {
        SociabilityTable {
            log_omega: modes
                .iter()
                .map(|m| m.omega_tilde.iter().map(|w| log_softmax(w)).collect())
                .collect(),
        }
    }

    pub fn r2(&self) -> usize {
        self.log_omega.first().map_or(0, Vec::len)
    }

    /// `log w` for any slot tuple, the aggregated slot (`D_k`) included.
    pub fn slot_log_prob(&self, slots: &[usize]) -> f64 {
        let r2 = self.r2();
        let mut per_r = Vec::with_capacity(r2);
        for r in 0..r2 {
            per_r.push(
                slots
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| self.log_omega[k][r][s])
                    .sum::<f64>(),
            );
        }
        logsumexp(&per_r) - (r2 as f64).ln()
    }

    /// Log-probabilities per community `a_r = sum_k log omega^k_{r, i_k}`,
    /// written to `out`; returns `log w`.
    pub(crate) fn community_terms(&self, slots: &[usize], out: &mut [f64]) -> f64 {
        for (r, a) in out.iter_mut().enumerate() {
            *a = slots
                .iter()
                .enumerate()
                .map(|(k, &s)| self.log_omega[k][r][s])
                .sum();
        }
        logsumexp(out) - (out.len() as f64).ln()
    }
}

/// `log w_i = log (1/R_2) sum_r prod_k omega^k_{r, i_k}` for an observed entry.
/// Indices address active nodes only.
pub fn entry_log_prob(indices: &[usize], modes: &[ModeParams]) -> Result<f64> {
    if indices.len() != modes.len() {
        return Err(Error::DimensionMismatch {
            expected: modes.len(),
            got: indices.len(),
        });
    }
    for (k, (&i, m)) in indices.iter().zip(modes).enumerate() {
        if i >= m.active_nodes() {
            return Err(Error::Domain(format!(
                "index {i} in mode {k} is not an active node (D = {})",
                m.active_nodes()
            )));
        }
    }
    Ok(SociabilityTable::new(modes).slot_log_prob(indices))
}
