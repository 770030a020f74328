//! Synthetic tensors drawn from the full generative model: entry indices from
//! the normalized hierarchy and values from an RFF-approximated GP over the
//! node locations and log sociabilities, plus Gaussian noise.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rff::RffModel;
use crate::rng;
use crate::sampler::{sample_entries, sample_hdp_weights, StpConfig};
use crate::tensor::{compact, NodeMaps, SparseTensorData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub alpha: f64,
    pub r1: usize,
    pub r2: usize,
    pub num_modes: usize,
    /// Number of entries drawn (fixed rather than Poisson).
    pub entries: usize,
    pub noise_var: f64,
    /// Frequencies of the generating GP draw.
    pub gen_freqs: usize,
    /// Inverse squared lengthscale of the generating kernel.
    pub gen_tau: f64,
    /// Log sociabilities are clamped below at this value before entering the GP.
    pub log_omega_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alpha: 8.0,
            r1: 1,
            r2: 2,
            num_modes: 2,
            entries: 2000,
            noise_var: 0.01,
            gen_freqs: 200,
            gen_tau: 0.02,
            log_omega_floor: -8.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    /// Entries on compact (active) node ids.
    pub tensor: SparseTensorData,
    /// Noise-free function values aligned with the tensor entries.
    pub clean: Vec<f64>,
    /// True per-mode link weights on the compact ids: `omega[k][r][j]`.
    pub omega: Vec<Vec<Vec<f64>>>,
    pub maps: NodeMaps,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.entries == 0 || !(cfg.noise_var >= 0.0) || cfg.gen_freqs == 0 || !(cfg.gen_tau > 0.0) {
        return Err(Error::InvalidConfig("bad synthetic configuration".into()));
    }
    let stp = StpConfig {
        alpha: cfg.alpha,
        r1: cfg.r1,
        r2: cfg.r2,
        num_modes: cfg.num_modes,
        seed: cfg.seed,
        ..Default::default()
    };
    stp.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let weights = sample_hdp_weights(&stp, &mut rng);
    let points = sample_entries(&weights, cfg.entries, &mut rng);

    // GP input per entry: [theta^k, clamped log omega^k_r] over modes
    let input_dim = cfg.num_modes * (cfg.r1 + cfg.r2);
    let z = Normal::new(0.0, cfg.gen_tau.sqrt()).expect("tau > 0");
    let freqs: Vec<f64> = (0..cfg.gen_freqs * input_dim)
        .map(|_| z.sample(&mut rng))
        .collect();
    let mut gp = RffModel::new(
        cfg.gen_freqs,
        input_dim,
        freqs,
        cfg.gen_tau,
        cfg.noise_var.max(1e-300),
        1.0,
    );
    let g = Normal::new(0.0, (1.0 / cfg.gen_freqs as f64).sqrt()).expect("M > 0");
    gp.weight_mean
        .iter_mut()
        .for_each(|w| *w = g.sample(&mut rng));

    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).expect("variance >= 0");
    let mut x = vec![0.0; input_dim];
    let mut phi = vec![0.0; gp.feature_dim()];
    let mut clean = Vec::with_capacity(points.len());
    let mut entries = Vec::with_capacity(points.len());
    for p in points {
        for (k, &j) in p.iter().enumerate() {
            let base = k * (cfg.r1 + cfg.r2);
            x[base..base + cfg.r1].copy_from_slice(&weights.locations[k][j]);
            for r in 0..cfg.r2 {
                x[base + cfg.r1 + r] = weights.omega[k][r][j].ln().max(cfg.log_omega_floor);
            }
        }
        gp.features_into(&x, &mut phi);
        let f: f64 = phi.iter().zip(&gp.weight_mean).map(|(a, b)| a * b).sum();
        clean.push(f);
        entries.push((p, f + noise.sample(&mut rng)));
    }
    let dims: Vec<usize> = weights.beta.iter().map(Vec::len).collect();
    let raw = SparseTensorData::new(dims, entries)?;
    let (tensor, maps) = compact(&raw)?;
    let omega = weights
        .omega
        .iter()
        .enumerate()
        .map(|(k, per_r)| {
            per_r
                .iter()
                .map(|w| maps.original_ids[k].iter().map(|&o| w[o]).collect())
                .collect()
        })
        .collect();
    Ok(SynthData {
        tensor,
        clean,
        omega,
        maps,
    })
}
