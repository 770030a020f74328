//! Free parameters of the finite-projection model, training configuration
//! and the trained-model bundle.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus_inv};
use crate::prior::ModeParams;
use crate::rff::{packed, RffModel};
use crate::rng::{self, Rng};
use crate::tensor::{NodeMaps, SparseTensorData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub r1: usize,
    pub r2: usize,
    pub num_freqs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm cap applied before each step.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r1: 2,
            r2: 3,
            num_freqs: 50,
            learning_rate: 1e-3,
            batch_size: 200,
            epochs: 700,
            alpha: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r1 == 0 || self.r2 == 0 {
            return Err(Error::InvalidConfig("r1 and r2 must be >= 1".into()));
        }
        if self.num_freqs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "num_freqs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate and alpha must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig("bad optimizer moments".into()));
        }
        Ok(())
    }

    pub fn alpha_tilde(&self) -> f64 {
        self.alpha.powi(self.r1 as i32)
    }
}

/// Every free parameter, plus the fixed `alpha` that scales the locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub alpha: f64,
    pub r1: usize,
    pub r2: usize,
    pub modes: Vec<ModeParams>,
    pub rff: RffModel,
}

impl Params {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn alpha_tilde(&self) -> f64 {
        self.alpha.powi(self.r1 as i32)
    }

    /// Length of the GP input `x_i`: `K (R_1 + R_2)`.
    pub fn input_dim(&self) -> usize {
        self.num_modes() * (self.r1 + self.r2)
    }

    /// Builds `x_i = [theta^1_{i_1}; omega_tilde^1_{., i_1}; ...]`. A slot equal
    /// to `D_k` addresses the aggregated slot, whose location sits at the box center.
    pub fn input_vector_into(&self, slots: &[usize], out: &mut [f64]) {
        let stride = self.r1 + self.r2;
        for (k, (&j, mode)) in slots.iter().zip(&self.modes).enumerate() {
            let base = k * stride;
            let active = j < mode.active_nodes();
            for r in 0..self.r1 {
                out[base + r] = if active {
                    self.alpha * sigmoid(mode.theta_tilde[j * self.r1 + r])
                } else {
                    0.5 * self.alpha
                };
            }
            for r in 0..self.r2 {
                out[base + self.r1 + r] = mode.omega_tilde[r][j];
            }
        }
    }

    pub fn input_vector(&self, slots: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        self.input_vector_into(slots, &mut out);
        out
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Params {
        let mut out = self.clone();
        out.visit_mut(|_, x| *x = 0.0);
        out
    }

    /// Visits every free coordinate in the fixed flattening order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut n = 0;
        let mut go = |x: &mut f64| {
            f(n, x);
            n += 1;
        };
        for m in &mut self.modes {
            m.beta_tilde.iter_mut().for_each(&mut go);
            m.theta_tilde.iter_mut().for_each(&mut go);
            m.gamma_tilde.iter_mut().for_each(&mut go);
            for w in &mut m.omega_tilde {
                w.iter_mut().for_each(&mut go);
            }
        }
        self.rff.frequencies.iter_mut().for_each(&mut go);
        go(&mut self.rff.log_tau);
        go(&mut self.rff.log_sigma2);
        self.rff.weight_mean.iter_mut().for_each(&mut go);
        self.rff.chol_raw.iter_mut().for_each(&mut go);
    }

    pub fn num_coordinates(&self) -> usize {
        let mut n = 0;
        self.clone().visit_mut(|_, _| n += 1);
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit_mut(|_, x| out.push(*x));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        self.visit_mut(|n, x| *x = flat[n]);
    }

    /// Human-readable names in flattening order, e.g. `omega_tilde[1][0][3]`.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (k, m) in self.modes.iter().enumerate() {
            let d = m.active_nodes();
            names.extend((0..=d).map(|j| format!("beta_tilde[{k}][{j}]")));
            for j in 0..d {
                names.extend((0..self.r1).map(|r| format!("theta_tilde[{k}][{j}][{r}]")));
            }
            names.extend((0..self.r2).map(|r| format!("gamma_tilde[{k}][{r}]")));
            for r in 0..self.r2 {
                names.extend((0..=d).map(|j| format!("omega_tilde[{k}][{r}][{j}]")));
            }
        }
        for m in 0..self.rff.num_freqs {
            names.extend((0..self.rff.input_dim).map(|i| format!("frequencies[{m}][{i}]")));
        }
        names.push("log_tau".into());
        names.push("log_sigma2".into());
        names.extend((0..self.rff.feature_dim()).map(|i| format!("weight_mean[{i}]")));
        for i in 0..self.rff.feature_dim() {
            names.extend((0..=i).map(|j| format!("chol[{i}][{j}]")));
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        self.rff.validate()?;
        if self.rff.input_dim != self.input_dim() {
            return Err(Error::Format(
                "RFF input dimension does not match K (R1 + R2)".into(),
            ));
        }
        for m in &self.modes {
            let d = m.active_nodes();
            if m.theta_tilde.len() != d * self.r1
                || m.gamma_tilde.len() != self.r2
                || m.omega_tilde.len() != self.r2
                || m.omega_tilde.iter().any(|w| w.len() != d + 1)
            {
                return Err(Error::Format("inconsistent mode parameter shapes".into()));
            }
        }
        Ok(())
    }
}

/// A fitted model: parameters on compact node ids plus the maps back to the
/// original ids and the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: Params,
    pub maps: NodeMaps,
}

/// A query entry mapped onto model slots.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedIndex {
    pub slots: Vec<usize>,
    /// True when some mode fell back to the aggregated slot.
    pub unseen: bool,
}

impl TrainedModel {
    /// Maps original node ids to slots; unknown nodes use the aggregated slot.
    pub fn map_index(&self, original: &[usize]) -> Result<MappedIndex> {
        if original.len() != self.params.num_modes() {
            return Err(Error::DimensionMismatch {
                expected: self.params.num_modes(),
                got: original.len(),
            });
        }
        let mut unseen = false;
        let slots = original
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                self.maps.lookup(k, i).unwrap_or_else(|| {
                    unseen = true;
                    self.params.modes[k].active_nodes()
                })
            })
            .collect();
        Ok(MappedIndex { slots, unseen })
    }

    /// Posterior predictive mean and variance of the value at an original index.
    pub fn predict_value(&self, original: &[usize]) -> Result<(f64, f64, bool)> {
        let mapped = self.map_index(original)?;
        let x = self.params.input_vector(&mapped.slots);
        let (mean, var) = crate::rff::predict(&x, &self.params.rff)?;
        Ok((mean, var, mapped.unseen))
    }
}

fn normal_vec(n: usize, sd: f64, rng: &mut Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, sd).expect("sd > 0");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Initial parameters for `dims` active nodes per mode.
///
/// Logits start at `N(0, 0.01)`, locations at the box center, concentrations
/// at 1, `q(g) = N(0, 0.01 I)` and frequencies at `N(0, I)`.
pub fn init_params_for(
    dims: &[usize],
    value_variance: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Params {
    let modes = dims
        .iter()
        .map(|&d| ModeParams {
            beta_tilde: normal_vec(d + 1, 0.1, rng),
            theta_tilde: vec![0.0; d * cfg.r1],
            gamma_tilde: vec![softplus_inv(1.0); cfg.r2],
            omega_tilde: (0..cfg.r2).map(|_| normal_vec(d + 1, 0.1, rng)).collect(),
        })
        .collect();
    let input_dim = dims.len() * (cfg.r1 + cfg.r2);
    let tau0 = 1.0;
    let freqs = normal_vec(cfg.num_freqs * input_dim, tau0, rng);
    let sigma2 = (0.1 * value_variance).max(1e-6);
    let mut rff = RffModel::new(cfg.num_freqs, input_dim, freqs, tau0, sigma2, 0.1);
    debug_assert_eq!(rff.chol_raw.len(), packed(2 * cfg.num_freqs, 0));
    rff.weight_mean.iter_mut().for_each(|x| *x = 0.0);
    Params {
        alpha: cfg.alpha,
        r1: cfg.r1,
        r2: cfg.r2,
        modes,
        rff,
    }
}

fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Reindexes the training tensor onto its active nodes and draws initial parameters.
pub fn init_params(
    train: &SparseTensorData,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, SparseTensorData)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("no training entries".into()));
    }
    let (compact, maps) = crate::tensor::compact(train)?;
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, 0x1417));
    let params = init_params_for(compact.dims(), variance(compact.values()), cfg, &mut rng);
    Ok((
        TrainedModel {
            config: cfg.clone(),
            params,
            maps,
        },
        compact,
    ))
}
