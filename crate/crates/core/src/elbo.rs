//! Evidence lower bound of the joint model and its analytic gradient.
//!
//! The bound is
//! `prior(beta, theta, gamma, omega, Z) - KL(q(g) || p(g)) + s * sum_n [log w_n + E_q log N(y_n | phi_n^T g, sigma^2)]`
//! with `s = N_total / |batch|`. Everything except `q(g)` is a point estimate.
//!
//! Per-entry work is split into fixed-size chunks that run in parallel and
//! are reduced in chunk order, so results do not depend on the thread count.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{sigmoid, softmax};
use crate::model::Params;
use crate::prior::{
    log_dirichlet_grad, log_gamma_prior, log_gamma_prior_dgamma, log_prior_beta_grad,
    DirichletGrad, SociabilityTable,
};
use crate::rff::{kl_weights, log_prior_frequencies, packed};
use crate::tensor::SparseTensorData;

const CHUNK: usize = 256;

/// The pieces of one ELBO evaluation. `link` and `value` are already scaled
/// by `N_total / |batch|`; `data = link + value`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub prior: f64,
    pub kl: f64,
    pub link: f64,
    pub value: f64,
    pub data: f64,
    pub total: f64,
}

/// ELBO on the entries of `data` listed in `positions`, which index a
/// compact tensor (every slot an active node).
pub fn elbo_minibatch(
    params: &Params,
    data: &SparseTensorData,
    positions: &[usize],
    n_total: usize,
) -> Result<ElboTerms> {
    let (terms, _) = evaluate(params, data, positions, n_total, false)?;
    Ok(terms)
}

/// ELBO together with its gradient with respect to every free parameter.
pub fn gradient(
    params: &Params,
    data: &SparseTensorData,
    positions: &[usize],
    n_total: usize,
) -> Result<(ElboTerms, Params)> {
    let (terms, grad) = evaluate(params, data, positions, n_total, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

/// Full-data ELBO (scale 1).
pub fn elbo_full(params: &Params, data: &SparseTensorData) -> Result<ElboTerms> {
    let all: Vec<usize> = (0..data.len()).collect();
    elbo_minibatch(params, data, &all, data.len())
}

/// Precomputed quantities shared by all entries of one evaluation.
struct Cache {
    table: SociabilityTable,
    /// dense row-major `P x P` lower-triangular `L`
    chol: Vec<f64>,
}

impl Cache {
    fn new(params: &Params) -> Self {
        let p = params.rff.feature_dim();
        let mut chol = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                chol[i * p + j] = params.rff.chol(i, j);
            }
        }
        Cache {
            table: SociabilityTable::new(&params.modes),
            chol,
        }
    }
}

/// Unscaled data-term sums and, optionally, gradients for one chunk.
struct Partial {
    link: f64,
    value: f64,
    grad: Option<DataGrad>,
}

/// Raw per-chunk gradient sums. `g.omega_tilde` holds the link indicator
/// counts plus the value-input gradients; the normalization part of the
/// link gradient is applied once after reduction via `resp`.
/// `g.rff.chol_raw` holds gradients with respect to `L` itself.
struct DataGrad {
    g: Params,
    /// `sum_n rho_{n r}`
    resp: Vec<f64>,
}

impl DataGrad {
    fn add(&mut self, other: &DataGrad) {
        let mut src = other.g.to_flat().into_iter();
        self.g
            .visit_mut(|_, x| *x += src.next().expect("same shape"));
        for (a, b) in self.resp.iter_mut().zip(&other.resp) {
            *a += b;
        }
    }
}

fn check_positions(params: &Params, data: &SparseTensorData, positions: &[usize]) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::InsufficientData("empty mini-batch".into()));
    }
    if data.num_modes() != params.num_modes() {
        return Err(Error::DimensionMismatch {
            expected: params.num_modes(),
            got: data.num_modes(),
        });
    }
    if let Some(&bad) = positions.iter().find(|&&n| n >= data.len()) {
        return Err(Error::Domain(format!(
            "batch position {bad} outside the data ({} entries)",
            data.len()
        )));
    }
    for (k, m) in params.modes.iter().enumerate() {
        if data.dims()[k] > m.active_nodes() {
            return Err(Error::Domain(format!(
                "mode {k} has {} nodes but the model only {}",
                data.dims()[k],
                m.active_nodes()
            )));
        }
    }
    Ok(())
}

fn data_chunk(
    params: &Params,
    cache: &Cache,
    data: &SparseTensorData,
    chunk: &[usize],
    want_grad: bool,
) -> Partial {
    let rff = &params.rff;
    let p = rff.feature_dim();
    let dim = rff.input_dim;
    let r1 = params.r1;
    let r2 = params.r2;
    let sigma2 = rff.sigma2();
    let half_log_2pi_sigma2 = 0.5 * ((2.0 * PI).ln() + rff.log_sigma2);

    let mut a = vec![0.0; r2];
    let mut x = vec![0.0; dim];
    let mut phi = vec![0.0; p];
    let mut t = vec![0.0; p];
    let mut g_phi = vec![0.0; p];
    let mut g_x = vec![0.0; dim];
    let mut grad = want_grad.then(|| DataGrad {
        g: params.zeros_like(),
        resp: vec![0.0; r2],
    });

    let mut link = 0.0;
    let mut value = 0.0;
    for &n in chunk {
        let idx = data.index(n);
        let y = data.value(n);
        let log_w = cache.table.community_terms(idx, &mut a);
        link += log_w;

        params.input_vector_into(idx, &mut x);
        rff.features_into(&x, &mut phi);
        let mean: f64 = phi.iter().zip(&rff.weight_mean).map(|(f, m)| f * m).sum();
        t.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..p {
            let row = &cache.chol[i * p..i * p + i + 1];
            for (tj, &l) in t.iter_mut().zip(row) {
                *tj += l * phi[i];
            }
        }
        let var: f64 = t.iter().map(|v| v * v).sum();
        let res = y - mean;
        value += -half_log_2pi_sigma2 - (res * res + var) / (2.0 * sigma2);

        let Some(dg) = grad.as_mut() else { continue };
        let g = &mut dg.g;

        // link: d log w / d omega_tilde = rho_r (e_{i_k} - omega)
        let lse = log_w + (r2 as f64).ln();
        for r in 0..r2 {
            let rho = (a[r] - lse).exp();
            dg.resp[r] += rho;
            for (k, &i) in idx.iter().enumerate() {
                g.modes[k].omega_tilde[r][i] += rho;
            }
        }

        // value likelihood
        for (gm, f) in g.rff.weight_mean.iter_mut().zip(&phi) {
            *gm += res * f / sigma2;
        }
        for i in 0..p {
            let base = packed(i, 0);
            let c = -phi[i] / sigma2;
            for j in 0..=i {
                g.rff.chol_raw[base + j] += c * t[j];
            }
        }
        g.rff.log_sigma2 += -0.5 + (res * res + var) / (2.0 * sigma2);
        for i in 0..p {
            let row = &cache.chol[i * p..i * p + i + 1];
            let lt: f64 = row.iter().zip(&t).map(|(l, v)| l * v).sum();
            g_phi[i] = (res * rff.weight_mean[i] - lt) / sigma2;
        }
        g_x.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..rff.num_freqs {
            let (c, s) = (phi[2 * m], phi[2 * m + 1]);
            let du = -g_phi[2 * m] * s + g_phi[2 * m + 1] * c;
            let z = rff.frequency(m);
            let gz = &mut g.rff.frequencies[m * dim..(m + 1) * dim];
            for q in 0..dim {
                gz[q] += du * x[q];
                g_x[q] += du * z[q];
            }
        }

        // chain the input vector back to theta_tilde and omega_tilde
        let stride = r1 + r2;
        for (k, &i) in idx.iter().enumerate() {
            let base = k * stride;
            let mode = &params.modes[k];
            for r in 0..r1 {
                let sg = sigmoid(mode.theta_tilde[i * r1 + r]);
                g.modes[k].theta_tilde[i * r1 + r] +=
                    g_x[base + r] * params.alpha * sg * (1.0 - sg);
            }
            for r in 0..r2 {
                g.modes[k].omega_tilde[r][i] += g_x[base + r1 + r];
            }
        }
    }
    Partial { link, value, grad }
}

/// Prior terms and `-KL`, optionally accumulating their gradients into `grad`.
/// Returns `(prior, kl)`.
pub(crate) fn prior_terms(params: &Params, mut grad: Option<&mut Params>) -> (f64, f64) {
    let alpha_tilde = params.alpha_tilde();
    let mut prior = 0.0;
    for (k, mode) in params.modes.iter().enumerate() {
        let d = mode.active_nodes();
        let mut g_beta_tilde = vec![0.0; d + 1];
        prior += log_prior_beta_grad(&mode.beta_tilde, alpha_tilde, &mut g_beta_tilde);
        // uniform location prior on (0, alpha)^R1
        prior -= (d * params.r1) as f64 * params.alpha.ln();

        let beta = mode.beta();
        let mut g_beta = vec![0.0; d + 1];
        let mut scratch = vec![0.0; d + 1];
        for r in 0..params.r2 {
            let gamma = mode.gamma(r);
            let mut g_gamma = 0.0;
            let g_omega = match grad.as_deref_mut() {
                Some(g) => &mut g.modes[k].omega_tilde[r][..],
                None => &mut scratch[..],
            };
            prior += log_dirichlet_grad(
                &mode.omega_tilde[r],
                gamma,
                &beta,
                DirichletGrad {
                    omega_tilde: g_omega,
                    beta: &mut g_beta,
                    gamma: &mut g_gamma,
                },
            );
            prior += log_gamma_prior(gamma, alpha_tilde);
            g_gamma += log_gamma_prior_dgamma(gamma, alpha_tilde);
            if let Some(g) = grad.as_deref_mut() {
                g.modes[k].gamma_tilde[r] += g_gamma * sigmoid(mode.gamma_tilde[r]);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            let inner: f64 = beta.iter().zip(&g_beta).map(|(b, gb)| b * gb).sum();
            for s in 0..=d {
                g.modes[k].beta_tilde[s] += g_beta_tilde[s] + beta[s] * (g_beta[s] - inner);
            }
        }
    }

    let rff = &params.rff;
    prior += log_prior_frequencies(rff);
    let kl = kl_weights(rff);
    if let Some(g) = grad {
        let tau = rff.tau();
        let mut sq = 0.0;
        for (gz, z) in g.rff.frequencies.iter_mut().zip(&rff.frequencies) {
            *gz -= z / tau;
            sq += z * z;
        }
        g.rff.log_tau += -0.5 * (rff.num_freqs * rff.input_dim) as f64 + sq / (2.0 * tau);
        subtract_kl_grad(params, g);
    }
    (prior, kl)
}

/// Adds `-dKL/d(mu, chol_raw)` into `g`.
fn subtract_kl_grad(params: &Params, g: &mut Params) {
    let rff = &params.rff;
    let m = rff.num_freqs as f64;
    for (gm, mu) in g.rff.weight_mean.iter_mut().zip(&rff.weight_mean) {
        *gm -= m * mu;
    }
    for i in 0..rff.feature_dim() {
        for j in 0..i {
            g.rff.chol_raw[packed(i, j)] -= m * rff.chol_raw[packed(i, j)];
        }
        let l = rff.chol_raw[packed(i, i)].exp();
        g.rff.chol_raw[packed(i, i)] -= m * l * l - 1.0;
    }
}

fn evaluate(
    params: &Params,
    data: &SparseTensorData,
    positions: &[usize],
    n_total: usize,
    want_grad: bool,
) -> Result<(ElboTerms, Option<Params>)> {
    check_positions(params, data, positions)?;
    let cache = Cache::new(params);
    let partials: Vec<Partial> = positions
        .par_chunks(CHUNK)
        .map(|c| data_chunk(params, &cache, data, c, want_grad))
        .collect();

    let scale = n_total as f64 / positions.len() as f64;
    let mut link = 0.0;
    let mut value = 0.0;
    let mut reduced: Option<DataGrad> = None;
    for part in partials {
        link += part.link;
        value += part.value;
        if let Some(pg) = part.grad {
            match reduced.as_mut() {
                Some(acc) => acc.add(&pg),
                None => reduced = Some(pg),
            }
        }
    }

    let mut grad = None;
    let (prior, kl) = match reduced {
        Some(DataGrad {
            g: mut data_grad,
            resp,
        }) => {
            // normalization part of the link gradient
            for (k, mode) in params.modes.iter().enumerate() {
                for r in 0..params.r2 {
                    let omega = softmax(&mode.omega_tilde[r]);
                    for (gw, w) in data_grad.modes[k].omega_tilde[r].iter_mut().zip(&omega) {
                        *gw -= resp[r] * w;
                    }
                }
            }
            // gradients with respect to L become gradients of the raw storage
            for i in 0..params.rff.feature_dim() {
                data_grad.rff.chol_raw[packed(i, i)] *= params.rff.chol(i, i);
            }
            data_grad.visit_mut(|_, x| *x *= scale);
            let out = prior_terms(params, Some(&mut data_grad));
            grad = Some(data_grad);
            out
        }
        None => prior_terms(params, None),
    };

    let link = scale * link;
    let value = scale * value;
    let data_term = link + value;
    let terms = ElboTerms {
        prior,
        kl,
        link,
        value,
        data: data_term,
        total: prior - kl + data_term,
    };
    if !terms.total.is_finite() {
        let what = [
            ("prior", prior),
            ("kl", kl),
            ("link", link),
            ("value", value),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map_or("elbo", |(n, _)| n);
        return Err(Error::NonFinite(format!("ELBO term {what}")));
    }
    if let Some(g) = &grad {
        if let Some(pos) = g.to_flat().iter().position(|v| !v.is_finite()) {
            let name = g.coordinate_names().swap_remove(pos);
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((terms, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params_for, TrainConfig};
    use crate::prior::{entry_log_prob, log_dirichlet, log_prior_beta};
    use crate::rff::expected_log_lik;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};

    /// Random parameters and data: every coordinate away from special points.
    fn instance(
        dims: &[usize],
        r1: usize,
        r2: usize,
        m: usize,
        n: usize,
        seed: u64,
    ) -> (Params, SparseTensorData) {
        let mut rng = rng::seeded(seed);
        let cfg = TrainConfig {
            r1,
            r2,
            num_freqs: m,
            alpha: 1.7,
            ..Default::default()
        };
        let mut params = init_params_for(dims, 1.0, &cfg, &mut rng);
        let normal = Normal::new(0.0, 0.5).unwrap();
        params.visit_mut(|_, x| *x += normal.sample(&mut rng));
        let entries = (0..n)
            .map(|e| {
                let idx = dims
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| (e * (k + 1) + e / d) % d)
                    .collect();
                (idx, normal.sample(&mut rng))
            })
            .collect();
        (
            params,
            SparseTensorData::new(dims.to_vec(), entries).unwrap(),
        )
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (params, data) = instance(&[3, 3], 2, 2, 5, 10, 11);
        let positions: Vec<usize> = vec![0, 2, 3, 5, 7, 9];
        let (_, grad) = gradient(&params, &data, &positions, data.len()).unwrap();
        let analytic = grad.to_flat();
        let names = params.coordinate_names();
        let x0 = params.to_flat();
        let h = 1e-5;
        let mut p = params.clone();
        for i in 0..x0.len() {
            let mut x = x0.clone();
            x[i] = x0[i] + h;
            p.set_flat(&x);
            let up = elbo_minibatch(&p, &data, &positions, data.len())
                .unwrap()
                .total;
            x[i] = x0[i] - h;
            p.set_flat(&x);
            let down = elbo_minibatch(&p, &data, &positions, data.len())
                .unwrap()
                .total;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[i];
            let ok = if fd.abs() < 1e-8 && a.abs() < 1e-8 {
                (a - fd).abs() < 1e-8
            } else {
                (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs())
            };
            assert!(ok, "{}: analytic {a} vs numeric {fd}", names[i]);
        }
    }

    #[test]
    fn full_batch_matches_hand_sum() {
        let (params, data) = instance(&[3, 2], 1, 2, 3, 6, 12);
        let terms = elbo_full(&params, &data).unwrap();
        let at = params.alpha_tilde();
        let mut prior = log_prior_frequencies(&params.rff);
        for m in &params.modes {
            prior += log_prior_beta(&m.beta(), at).unwrap();
            prior -= (m.active_nodes() * params.r1) as f64 * params.alpha.ln();
            for r in 0..params.r2 {
                prior += log_dirichlet(&m.omega(r), m.gamma(r), &m.beta()).unwrap();
                prior += log_gamma_prior(m.gamma(r), at);
            }
        }
        let mut link = 0.0;
        let mut value = 0.0;
        for (idx, y) in data.iter() {
            link += entry_log_prob(idx, &params.modes).unwrap();
            value += expected_log_lik(y, &params.input_vector(idx), &params.rff).unwrap();
        }
        let kl = kl_weights(&params.rff);
        assert!(
            (terms.prior - prior).abs() < 1e-9,
            "{} vs {prior}",
            terms.prior
        );
        assert!((terms.link - link).abs() < 1e-9);
        assert!((terms.value - value).abs() < 1e-9);
        assert!((terms.kl - kl).abs() < 1e-12);
        assert!((terms.total - (prior - kl + link + value)).abs() < 1e-9);
    }

    #[test]
    fn minibatch_data_term_is_unbiased() {
        let (params, data) = instance(&[3, 4], 1, 2, 3, 12, 13);
        let full = elbo_full(&params, &data).unwrap().data;
        let mut rng = rng::seeded(14);
        let mut all: Vec<usize> = (0..data.len()).collect();
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                all.shuffle(&mut rng);
                elbo_minibatch(&params, &data, &all[..3], data.len())
                    .unwrap()
                    .data
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(
            (mean - full).abs() < 3.0 * sd / n.sqrt(),
            "{mean} vs {full}"
        );
    }

    #[test]
    fn kl_gradient_vanishes_at_prior() {
        let (mut params, _) = instance(&[2, 2], 1, 1, 4, 4, 15);
        let p = params.rff.feature_dim();
        let m = params.rff.num_freqs as f64;
        params.rff.weight_mean.iter_mut().for_each(|x| *x = 0.0);
        let mut dense = vec![0.0; p * p];
        for i in 0..p {
            dense[i * p + i] = m.powf(-0.5);
        }
        params.rff.set_cholesky(&dense);
        let mut g = params.zeros_like();
        subtract_kl_grad(&params, &mut g);
        assert!(g.rff.weight_mean.iter().all(|&v| v == 0.0));
        assert!(g.rff.chol_raw.iter().all(|&v| v.abs() < 1e-12));
        assert!(kl_weights(&params.rff).abs() < 1e-12);
    }

    #[test]
    fn absent_node_sees_only_normalization() {
        // node 3 of mode 0 never appears in the batch
        let (params, data) = instance(&[4, 3], 1, 2, 3, 8, 16);
        let positions: Vec<usize> = (0..data.len()).filter(|&n| data.index(n)[0] != 3).collect();
        assert!(positions.len() < data.len());
        let (_, full) = gradient(&params, &data, &positions, data.len()).unwrap();
        let mut prior_only = params.zeros_like();
        prior_terms(&params, Some(&mut prior_only));
        for r in 0..params.r2 {
            let omega = params.modes[0].omega(r);
            // the data part for absent slots is -c_r * omega_j with one shared c_r
            let c3 = (full.modes[0].omega_tilde[r][3] - prior_only.modes[0].omega_tilde[r][3])
                / omega[3];
            let c4 = (full.modes[0].omega_tilde[r][4] - prior_only.modes[0].omega_tilde[r][4])
                / omega[4];
            assert!((c3 - c4).abs() < 1e-9 * c3.abs().max(1.0), "{c3} vs {c4}");
        }
        // theta of the absent node gets the prior gradient only, which is zero
        assert!(full.modes[0].theta_tilde[3].abs() == 0.0);
    }

    #[test]
    fn rejects_bad_batches() {
        let (params, data) = instance(&[2, 2], 1, 1, 2, 3, 17);
        assert!(elbo_minibatch(&params, &data, &[], 3).is_err());
        assert!(elbo_minibatch(&params, &data, &[5], 3).is_err());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut params, data) = instance(&[2, 2], 1, 1, 2, 3, 18);
        params.rff.log_sigma2 = -800.0;
        let err = gradient(&params, &data, &[0, 1], 3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
