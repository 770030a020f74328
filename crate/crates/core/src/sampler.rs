//! Generative simulator for the sparse tensor-variate process.
//!
//! Sampling follows the standard two-step Poisson random measure recipe:
//! draw the total mass of the rate measure and a Poisson entry count, then
//! draw that many entry indices i.i.d. from the normalized measure, a uniform
//! mixture over `R_2` products of second-level Dirichlet-process weights.

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Gamma, Poisson, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Smallest Gamma shape / Beta parameter handed to the samplers.
pub const SHAPE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StpConfig {
    pub alpha: f64,
    pub r1: usize,
    pub r2: usize,
    pub num_modes: usize,
    pub truncation_tol: f64,
    pub max_atoms: usize,
    pub seed: u64,
}

impl Default for StpConfig {
    fn default() -> Self {
        StpConfig {
            alpha: 1.0,
            r1: 1,
            r2: 1,
            num_modes: 3,
            truncation_tol: 1e-12,
            max_atoms: 5000,
            seed: 0,
        }
    }
}

impl StpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.r1 == 0 || self.r2 == 0 {
            return Err(Error::InvalidConfig("r1 and r2 must be >= 1".into()));
        }
        if self.num_modes < 2 {
            return Err(Error::InvalidConfig("need at least 2 modes".into()));
        }
        if !(self.truncation_tol > 0.0) || self.max_atoms == 0 {
            return Err(Error::InvalidConfig(
                "truncation_tol and max_atoms must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Concentration of the top-level DPs, `alpha^R_1`.
    pub fn alpha_tilde(&self) -> f64 {
        self.alpha.powi(self.r1 as i32)
    }
}

/// A truncated draw of the normalized hierarchy for every mode.
#[derive(Clone, Debug)]
pub struct HdpWeights {
    /// `beta[k][j]`, top-level weights of mode `k`
    pub beta: Vec<Vec<f64>>,
    /// `omega[k][r][j]`, aligned with `beta[k]`
    pub omega: Vec<Vec<Vec<f64>>>,
    /// `gamma[k][r]`
    pub gamma: Vec<Vec<f64>>,
    /// `locations[k][j]`, each of length `R_1`, uniform on `[0, alpha]^R_1`
    pub locations: Vec<Vec<Vec<f64>>>,
    pub alpha_tilde: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledTensor {
    /// Distinct index tuples with their multiplicities.
    pub entries: Vec<(Vec<usize>, usize)>,
    pub active_dims: Vec<usize>,
    pub total_points: usize,
    pub distinct_entries: usize,
}

impl SampledTensor {
    fn from_points(num_modes: usize, points: Vec<Vec<usize>>) -> Self {
        let total_points = points.len();
        let mut counts: std::collections::HashMap<Vec<usize>, usize> = Default::default();
        let mut order = Vec::new();
        for p in points {
            let c = counts.entry(p.clone()).or_insert(0);
            if *c == 0 {
                order.push(p);
            }
            *c += 1;
        }
        let mut active: Vec<std::collections::HashSet<usize>> = vec![Default::default(); num_modes];
        for p in &order {
            for (k, &i) in p.iter().enumerate() {
                active[k].insert(i);
            }
        }
        let entries: Vec<(Vec<usize>, usize)> = order
            .into_iter()
            .map(|p| {
                let c = counts[&p];
                (p, c)
            })
            .collect();
        SampledTensor {
            distinct_entries: entries.len(),
            entries,
            active_dims: active.iter().map(|s| s.len()).collect(),
            total_points,
        }
    }

    /// Size of the tensor spanned by the active nodes.
    pub fn active_size(&self) -> f64 {
        self.active_dims.iter().map(|&d| d as f64).product()
    }
}

fn gamma_draw(shape: f64, rng: &mut Rng) -> f64 {
    let shape = shape.max(SHAPE_FLOOR);
    // rand_distr returns 0 for tiny shapes through underflow; keep it positive.
    let g = Gamma::new(shape, 1.0).expect("valid gamma").sample(rng);
    if g > 0.0 {
        g
    } else {
        f64::MIN_POSITIVE
    }
}

/// Total mass of the rate measure: `sum_r prod_k W_{k,r}([0,alpha]^R_1)`,
/// with `W ~ Gamma(L, 1)` and `L ~ Gamma(alpha^R_1, 1)` for every `(k, r)`.
pub fn sample_total_mass(cfg: &StpConfig, rng: &mut Rng) -> f64 {
    let base = cfg.alpha_tilde();
    (0..cfg.r2)
        .map(|_| {
            (0..cfg.num_modes)
                .map(|_| {
                    let l = gamma_draw(base, rng);
                    gamma_draw(l, rng)
                })
                .product::<f64>()
        })
        .sum()
}

pub fn sample_entry_count(mass: f64, rng: &mut Rng) -> usize {
    if !(mass > 0.0) {
        return 0;
    }
    Poisson::new(mass)
        .expect("positive finite mean")
        .sample(rng) as usize
}

/// Top-level stick breaking with `xi_j ~ Beta(1, alpha_tilde)`, stopped once the
/// remaining stick drops below `truncation_tol` or `max_atoms` weights exist.
pub fn stick_break_top(alpha_tilde: f64, cfg: &StpConfig, rng: &mut Rng) -> Vec<f64> {
    let beta = Beta::new(1.0, alpha_tilde).expect("alpha_tilde > 0");
    let mut weights = Vec::new();
    let mut remaining = 1.0f64;
    while remaining >= cfg.truncation_tol && weights.len() < cfg.max_atoms {
        let xi: f64 = beta.sample(rng);
        weights.push(remaining * xi);
        remaining *= 1.0 - xi;
    }
    weights
}

/// Second-level stick breaking aligned with `beta`:
/// `nu_j ~ Beta(gamma beta_j, gamma (1 - sum_{l<=j} beta_l))`.
///
/// When the top-level stick is exhausted the remaining mass is put on the
/// current atom and the rest stay at zero.
pub fn stick_break_second(gamma: f64, beta: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut omega = vec![0.0; beta.len()];
    let mut remaining = 1.0f64;
    // tail[j] = sum_{l>j} beta_l, summed from the back for accuracy
    let mut tail = vec![0.0; beta.len()];
    let mut acc = 0.0;
    for j in (0..beta.len()).rev() {
        tail[j] = acc;
        acc += beta[j];
    }
    // Treat the truncation deficit as part of the tail.
    let deficit = (1.0 - acc).max(0.0);
    for j in 0..beta.len() {
        let a = (gamma * beta[j]).max(SHAPE_FLOOR);
        let b = gamma * (tail[j] + deficit);
        if b <= SHAPE_FLOOR || j + 1 == beta.len() {
            omega[j] = remaining;
            break;
        }
        let nu: f64 = Beta::new(a, b).expect("positive parameters").sample(rng);
        omega[j] = remaining * nu;
        remaining *= 1.0 - nu;
        if remaining <= 0.0 {
            break;
        }
    }
    omega
}

/// Draws the full truncated hierarchy (top sticks, concentrations,
/// second-level sticks and locations) for every mode.
pub fn sample_hdp_weights(cfg: &StpConfig, rng: &mut Rng) -> HdpWeights {
    let alpha_tilde = cfg.alpha_tilde();
    let unit = Uniform::new(0.0, cfg.alpha).expect("alpha > 0");
    let mut out = HdpWeights {
        beta: Vec::with_capacity(cfg.num_modes),
        omega: Vec::with_capacity(cfg.num_modes),
        gamma: Vec::with_capacity(cfg.num_modes),
        locations: Vec::with_capacity(cfg.num_modes),
        alpha_tilde,
    };
    for _ in 0..cfg.num_modes {
        let beta = stick_break_top(alpha_tilde, cfg, rng);
        let gammas: Vec<f64> = (0..cfg.r2).map(|_| gamma_draw(alpha_tilde, rng)).collect();
        let omega = gammas
            .iter()
            .map(|&g| stick_break_second(g, &beta, rng))
            .collect();
        let locations = (0..beta.len())
            .map(|_| (0..cfg.r1).map(|_| unit.sample(rng)).collect())
            .collect();
        out.beta.push(beta);
        out.gamma.push(gammas);
        out.omega.push(omega);
        out.locations.push(locations);
    }
    out
}

/// Cumulative table for inverse-CDF draws from a (possibly unnormalized) weight vector.
#[derive(Clone, Debug)]
pub struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    pub fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|&w| {
                acc += w.max(0.0);
                acc
            })
            .collect();
        Categorical { cumulative }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty weights");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.cumulative.len() - 1)
    }
}

/// Draws `n` index tuples from the mixture `(1/R_2) sum_r prod_k omega^k_r`.
pub fn sample_entries(weights: &HdpWeights, n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let num_modes = weights.omega.len();
    let r2 = weights.omega.first().map_or(0, Vec::len);
    let tables: Vec<Vec<Categorical>> = weights
        .omega
        .iter()
        .map(|per_r| per_r.iter().map(|w| Categorical::new(w)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let r = rng.random_range(0..r2);
            (0..num_modes).map(|k| tables[k][r].sample(rng)).collect()
        })
        .collect()
}

pub fn sample_stp_tensor(cfg: &StpConfig, rng: &mut Rng) -> SampledTensor {
    let mass = sample_total_mass(cfg, rng);
    let n = sample_entry_count(mass, rng);
    if n == 0 {
        return SampledTensor::from_points(cfg.num_modes, Vec::new());
    }
    let weights = sample_hdp_weights(cfg, rng);
    let points = sample_entries(&weights, n, rng);
    SampledTensor::from_points(cfg.num_modes, points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub alpha: f64,
    pub r2: usize,
    /// Replicates that produced at least one entry.
    pub replicates: usize,
    pub mean_entries: f64,
    pub mean_active_size: f64,
    pub mean_ratio: f64,
}

/// Runs `replicates` independent tensors per `(alpha, R_2)` and averages the
/// sampled-entry count, the active tensor size and their ratio. Replicates
/// run in parallel, each from its own derived seed.
pub fn run_sparsity_simulation(
    alphas: &[f64],
    r2s: &[usize],
    replicates: usize,
    base: &StpConfig,
) -> Result<Vec<SimulationResult>> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be >= 1".into()));
    }
    if alphas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("alpha grid must be ascending".into()));
    }
    let mut results = Vec::with_capacity(alphas.len() * r2s.len());
    for (ri, &r2) in r2s.iter().enumerate() {
        for (ai, &alpha) in alphas.iter().enumerate() {
            let cfg = StpConfig {
                alpha,
                r2,
                ..base.clone()
            };
            cfg.validate()?;
            let cell = (ri * alphas.len() + ai) as u64;
            let samples: Vec<SampledTensor> = (0..replicates)
                .into_par_iter()
                .map(|rep| {
                    let seed = rng::derive_seed(rng::derive_seed(base.seed, cell), rep as u64);
                    sample_stp_tensor(&cfg, &mut rng::seeded(seed))
                })
                .collect();
            let kept: Vec<&SampledTensor> = samples.iter().filter(|s| s.total_points > 0).collect();
            let count = kept.len();
            let mean = |f: &dyn Fn(&SampledTensor) -> f64| {
                if count == 0 {
                    0.0
                } else {
                    kept.iter().map(|s| f(s)).sum::<f64>() / count as f64
                }
            };
            results.push(SimulationResult {
                alpha,
                r2,
                replicates: count,
                mean_entries: mean(&|s| s.distinct_entries as f64),
                mean_active_size: mean(&|s| s.active_size()),
                mean_ratio: mean(&|s| s.distinct_entries as f64 / s.active_size()),
            });
        }
    }
    Ok(results)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn write_simulation_csv(
    results: &[SimulationResult],
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(
        out,
        "alpha,r2,replicates,mean_entries,mean_active_size,mean_ratio"
    )?;
    for r in results {
        writeln!(
            out,
            "{:?},{},{},{:?},{:?},{:?}",
            r.alpha, r.r2, r.replicates, r.mean_entries, r.mean_active_size, r.mean_ratio
        )?;
    }
    Ok(())
}
