//! Random Fourier feature surrogate for the GP value model.
//!
//! `f(x) = phi(x)^T g` with
//! `phi(x) = [cos(z_1^T x), sin(z_1^T x), ..., cos(z_M^T x), sin(z_M^T x)]`,
//! frequencies `z_m ~ N(0, tau I)`, weight prior `g ~ N(0, I / M)` and a
//! Gaussian variational posterior `q(g) = N(mu, L L^T)`. Together these
//! approximate a GP with kernel `exp(-tau |x - x'|^2 / 2)` without ever
//! forming an N x N kernel matrix.
//!
//! The Cholesky factor is stored packed row-major (`(i, j)` with `j <= i` at
//! `i (i + 1) / 2 + j`), with the diagonal kept as its logarithm.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffModel {
    pub num_freqs: usize,
    pub input_dim: usize,
    /// `M x d`, row-major.
    pub frequencies: Vec<f64>,
    pub log_tau: f64,
    pub log_sigma2: f64,
    /// `2M`
    pub weight_mean: Vec<f64>,
    /// Packed lower triangle of `L`, diagonal as `ln L_ii`.
    pub chol_raw: Vec<f64>,
}

#[inline]
pub(crate) fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl RffModel {
    /// Zero mean, `L = scale * I`.
    pub fn new(
        num_freqs: usize,
        input_dim: usize,
        frequencies: Vec<f64>,
        tau: f64,
        sigma2: f64,
        chol_scale: f64,
    ) -> Self {
        assert_eq!(frequencies.len(), num_freqs * input_dim);
        let p = 2 * num_freqs;
        let mut chol_raw = vec![0.0; p * (p + 1) / 2];
        for i in 0..p {
            chol_raw[packed(i, i)] = chol_scale.ln();
        }
        RffModel {
            num_freqs,
            input_dim,
            frequencies,
            log_tau: tau.ln(),
            log_sigma2: sigma2.ln(),
            weight_mean: vec![0.0; p],
            chol_raw,
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.num_freqs
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn frequency(&self, m: usize) -> &[f64] {
        &self.frequencies[m * self.input_dim..(m + 1) * self.input_dim]
    }

    /// `L[i][j]`
    pub fn chol(&self, i: usize, j: usize) -> f64 {
        match j.cmp(&i) {
            std::cmp::Ordering::Greater => 0.0,
            std::cmp::Ordering::Equal => self.chol_raw[packed(i, i)].exp(),
            std::cmp::Ordering::Less => self.chol_raw[packed(i, j)],
        }
    }

    /// Replaces `L` by a dense lower-triangular `p x p` matrix (row-major).
    /// Zero diagonal entries are allowed and stored as `-inf`.
    pub fn set_cholesky(&mut self, dense: &[f64]) {
        let p = self.feature_dim();
        assert_eq!(dense.len(), p * p);
        for i in 0..p {
            for j in 0..=i {
                let v = dense[i * p + j];
                self.chol_raw[packed(i, j)] = if i == j { v.ln() } else { v };
            }
        }
    }

    /// `L^T v`
    pub fn chol_t_times(&self, v: &[f64]) -> Vec<f64> {
        let p = self.feature_dim();
        let mut out = vec![0.0; p];
        for i in 0..p {
            let vi = v[i];
            let row = &self.chol_raw[packed(i, 0)..packed(i, 0) + i];
            for (o, &l) in out[..i].iter_mut().zip(row) {
                *o += l * vi;
            }
            out[i] += self.chol_raw[packed(i, i)].exp() * vi;
        }
        out
    }

    /// `L v`
    pub fn chol_times(&self, v: &[f64]) -> Vec<f64> {
        let p = self.feature_dim();
        (0..p)
            .map(|i| {
                let row = &self.chol_raw[packed(i, 0)..packed(i, 0) + i];
                row.iter().zip(v).map(|(l, x)| l * x).sum::<f64>()
                    + self.chol_raw[packed(i, i)].exp() * v[i]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.feature_dim();
        if self.frequencies.len() != self.num_freqs * self.input_dim
            || self.weight_mean.len() != p
            || self.chol_raw.len() != p * (p + 1) / 2
        {
            return Err(Error::Format("inconsistent RFF parameter shapes".into()));
        }
        Ok(())
    }

    /// `phi(x)` written into `out` (length `2M`).
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        for m in 0..self.num_freqs {
            let u: f64 = self.frequency(m).iter().zip(x).map(|(z, v)| z * v).sum();
            let (s, c) = u.sin_cos();
            out[2 * m] = c;
            out[2 * m + 1] = s;
        }
    }
}

pub fn feature_map(x: &[f64], model: &RffModel) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; model.feature_dim()];
    model.features_into(x, &mut out);
    Ok(out)
}

/// Monte-Carlo kernel estimate `(1/M) phi(x1)^T phi(x2)` (unit kernel amplitude).
pub fn approx_kernel(x1: &[f64], x2: &[f64], model: &RffModel) -> Result<f64> {
    let a = feature_map(x1, model)?;
    let b = feature_map(x2, model)?;
    Ok(a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() / model.num_freqs as f64)
}

/// Exact RBF kernel `exp(-tau |x1 - x2|^2 / 2)`.
pub fn rbf_kernel(x1: &[f64], x2: &[f64], tau: f64) -> f64 {
    let d2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b).powi(2)).sum();
    (-0.5 * tau * d2).exp()
}

/// `E_q[log N(y | phi^T g, sigma^2)]` given the features.
pub fn expected_log_lik_features(y: f64, phi: &[f64], model: &RffModel) -> f64 {
    let mean: f64 = phi.iter().zip(&model.weight_mean).map(|(a, b)| a * b).sum();
    let lt_phi = model.chol_t_times(phi);
    let var: f64 = lt_phi.iter().map(|v| v * v).sum();
    let s2 = model.sigma2();
    -0.5 * (2.0 * PI).ln() - 0.5 * model.log_sigma2 - ((y - mean).powi(2) + var) / (2.0 * s2)
}

pub fn expected_log_lik(y: f64, x: &[f64], model: &RffModel) -> Result<f64> {
    let phi = feature_map(x, model)?;
    Ok(expected_log_lik_features(y, &phi, model))
}

/// `KL(N(mu, L L^T) || N(0, I / M))`.
pub fn kl_weights(model: &RffModel) -> f64 {
    let p = model.feature_dim() as f64;
    let m = model.num_freqs as f64;
    let n = model.feature_dim();
    let mut trace = 0.0;
    let mut log_det = 0.0;
    for i in 0..n {
        for j in 0..i {
            trace += model.chol_raw[packed(i, j)].powi(2);
        }
        let d = model.chol_raw[packed(i, i)];
        trace += (2.0 * d).exp();
        log_det += 2.0 * d;
    }
    let mu2: f64 = model.weight_mean.iter().map(|x| x * x).sum();
    0.5 * (m * trace + m * mu2 - p - p * m.ln() - log_det)
}

/// `sum_m log N(z_m | 0, tau I)`.
pub fn log_prior_frequencies(model: &RffModel) -> f64 {
    let tau = model.tau();
    let d = model.input_dim as f64;
    let sq: f64 = model.frequencies.iter().map(|z| z * z).sum();
    -0.5 * model.num_freqs as f64 * d * (2.0 * PI * tau).ln() - sq / (2.0 * tau)
}

/// Predictive mean `phi^T mu` and variance `phi^T L L^T phi + sigma^2`.
pub fn predict_features(phi: &[f64], model: &RffModel) -> (f64, f64) {
    let mean: f64 = phi.iter().zip(&model.weight_mean).map(|(a, b)| a * b).sum();
    let lt_phi = model.chol_t_times(phi);
    let var: f64 = lt_phi.iter().map(|v| v * v).sum();
    (mean, var + model.sigma2())
}

pub fn predict(x: &[f64], model: &RffModel) -> Result<(f64, f64)> {
    let phi = feature_map(x, model)?;
    Ok(predict_features(&phi, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn random_model(m: usize, d: usize, tau: f64, seed: u64) -> RffModel {
        let mut rng = rng::seeded(seed);
        let n = Normal::new(0.0, tau.sqrt()).unwrap();
        let freqs = (0..m * d).map(|_| n.sample(&mut rng)).collect();
        RffModel::new(m, d, freqs, tau, 1.0, 1.0)
    }

    #[test]
    fn features_at_origin() {
        let model = random_model(7, 3, 1.0, 1);
        let phi = feature_map(&[0.0; 3], &model).unwrap();
        for m in 0..7 {
            assert_eq!(phi[2 * m], 1.0);
            assert_eq!(phi[2 * m + 1], 0.0);
        }
        assert_eq!(phi.iter().map(|x| x * x).sum::<f64>(), 7.0);
        assert!(feature_map(&[0.0; 2], &model).is_err());
    }

    #[test]
    fn feature_pairs_are_unit_circle_points() {
        let model = random_model(11, 4, 2.0, 2);
        let x = [0.3, -1.2, 2.5, 0.01];
        let phi = feature_map(&x, &model).unwrap();
        for m in 0..11 {
            assert!((phi[2 * m].powi(2) + phi[2 * m + 1].powi(2) - 1.0).abs() < 1e-14);
        }
        assert!((approx_kernel(&x, &x, &model).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_frequencies_give_unit_kernel() {
        let model = RffModel::new(5, 3, vec![0.0; 15], 1e-12, 1.0, 1.0);
        let k = approx_kernel(&[1.0, 2.0, 3.0], &[-4.0, 0.5, 9.0], &model).unwrap();
        assert!((k - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_estimate_converges() {
        let d = 6;
        let mut rng = rng::seeded(3);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..1000)
            .map(|_| {
                let a = (0..d)
                    .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let b = (0..d)
                    .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (a, b)
            })
            .collect();
        let model = random_model(2000, d, 1.0, 4);
        let err: f64 = pairs
            .iter()
            .map(|(a, b)| (approx_kernel(a, b, &model).unwrap() - rbf_kernel(a, b, 1.0)).abs())
            .sum::<f64>()
            / pairs.len() as f64;
        assert!(err <= 3.0 / 2000f64.sqrt(), "{err}");
    }

    #[test]
    fn expected_log_lik_examples() {
        let c = -0.5 * (2.0 * PI).ln();
        let mut model = RffModel::new(1, 1, vec![0.0], 1.0, 1.0, 1.0);
        model.set_cholesky(&[0.0, 0.0, 0.0, 0.0]);
        // x = 0 -> phi = [1, 0]
        assert!((expected_log_lik(0.0, &[0.0], &model).unwrap() - c).abs() < 1e-15);
        assert!((c + 0.918939).abs() < 1e-6);
        model.weight_mean = vec![1.0, 0.0];
        assert!((expected_log_lik(1.0, &[0.0], &model).unwrap() - c).abs() < 1e-15);
        // phi^T L L^T phi = 1 with L = I
        model.set_cholesky(&[1.0, 0.0, 0.0, 1.0]);
        let v = expected_log_lik(0.0, &[0.0], &model).unwrap();
        assert!((v - (c - 1.0)).abs() < 1e-15);
        assert!((v + 1.918939).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let mut model = RffModel::new(3, 2, vec![0.0; 6], 1.0, 1.0, (1.0f64 / 3.0).sqrt());
        assert!(kl_weights(&model).abs() < 1e-14);
        model.weight_mean[2] = 0.1;
        assert!(kl_weights(&model) > 0.0);

        let mut model = RffModel::new(1, 1, vec![0.0], 1.0, 1.0, 1.0);
        model.weight_mean = vec![1.0, 0.0];
        assert!((kl_weights(&model) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn frequency_prior_examples() {
        let model = RffModel::new(1, 1, vec![0.0], 1.0, 1.0, 1.0);
        assert!((log_prior_frequencies(&model) + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let model = RffModel::new(1, 1, vec![0.0], 4.0, 1.0, 1.0);
        assert!((log_prior_frequencies(&model) + 0.5 * (8.0 * PI).ln()).abs() < 1e-14);
        let two = RffModel::new(2, 1, vec![0.0; 2], 4.0, 1.0, 1.0);
        assert!((log_prior_frequencies(&two) - 2.0 * log_prior_frequencies(&model)).abs() < 1e-14);
    }

    #[test]
    fn predict_examples() {
        let mut model = RffModel::new(1, 1, vec![0.0], 1.0, 0.1, 1.0);
        model.weight_mean = vec![2.0, 5.0];
        model.set_cholesky(&[0.5, 0.0, 0.0, 1.0]);
        let (m, v) = predict(&[0.0], &model).unwrap();
        assert!((m - 2.0).abs() < 1e-15);
        assert!((v - 0.35).abs() < 1e-15);

        model.set_cholesky(&[0.0; 4]);
        let (_, v) = predict(&[0.7], &model).unwrap();
        assert_eq!(v, model.sigma2());

        model.weight_mean = vec![0.0; 2];
        let (m, _) = predict(&[0.7], &model).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn cholesky_products_agree() {
        let mut model = RffModel::new(2, 1, vec![0.3, -0.2], 1.0, 1.0, 1.0);
        let dense = [
            1.0, 0.0, 0.0, 0.0, //
            0.5, 2.0, 0.0, 0.0, //
            -1.0, 0.3, 0.7, 0.0, //
            0.2, 0.1, -0.4, 1.5,
        ];
        model.set_cholesky(&dense);
        let v = [1.0, -2.0, 0.5, 3.0];
        let lt = model.chol_t_times(&v);
        let l = model.chol_times(&v);
        for j in 0..4 {
            let expect_lt: f64 = (0..4).map(|i| dense[i * 4 + j] * v[i]).sum();
            let expect_l: f64 = (0..4).map(|i| dense[j * 4 + i] * v[i]).sum();
            assert!((lt[j] - expect_lt).abs() < 1e-14);
            assert!((l[j] - expect_l).abs() < 1e-14);
            for i in 0..4 {
                assert!((model.chol(j, i) - dense[j * 4 + i]).abs() < 1e-14);
            }
        }
    }
}
