//! Bernoulli presence samplers for dense factorization priors, used as the
//! contrast to the sparse process: every cell is kept with probability
//! `sigmoid(f(x_i))` where `f` is either the CP sum of products or an
//! RFF-approximated GP draw over standard Gaussian node factors.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenseKind {
    Cp,
    GpRff,
}

impl std::str::FromStr for DenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(DenseKind::Cp),
            "gp-rff" => Ok(DenseKind::GpRff),
            other => Err(Error::InvalidConfig(format!(
                "unknown dense model kind {other:?}"
            ))),
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect()
}

/// Latent function values for every cell, in row-major order.
fn latent_values(
    kind: DenseKind,
    dims: &[usize],
    rank: usize,
    freqs: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let factors: Vec<Vec<f64>> = dims
        .iter()
        .map(|&d| gaussian_matrix(d, rank, rng))
        .collect();
    let cells: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    let mut out = Vec::with_capacity(cells);
    match kind {
        DenseKind::Cp => {
            for _ in 0..cells {
                let mut f = 0.0;
                for r in 0..rank {
                    let mut p = 1.0;
                    for (k, &i) in idx.iter().enumerate() {
                        p *= factors[k][i * rank + r];
                    }
                    f += p;
                }
                out.push(f);
                advance(&mut idx, dims);
            }
        }
        DenseKind::GpRff => {
            // z ~ N(0, I) (unit inverse lengthscale), g ~ N(0, I/M)
            let input_dim = dims.len() * rank;
            let z = gaussian_matrix(freqs, input_dim, rng);
            let scale = (1.0 / freqs as f64).sqrt();
            let g: Vec<f64> = (0..2 * freqs)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            // z_m^T x splits over modes; project each node once.
            let proj: Vec<Vec<f64>> = dims
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    let mut p = vec![0.0; d * freqs];
                    for i in 0..d {
                        for m in 0..freqs {
                            p[i * freqs + m] = (0..rank)
                                .map(|r| z[m * input_dim + k * rank + r] * factors[k][i * rank + r])
                                .sum();
                        }
                    }
                    p
                })
                .collect();
            for _ in 0..cells {
                let mut f = 0.0;
                for m in 0..freqs {
                    let u: f64 = idx
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| proj[k][i * freqs + m])
                        .sum();
                    let (s, c) = u.sin_cos();
                    f += c * g[2 * m] + s * g[2 * m + 1];
                }
                out.push(f);
                advance(&mut idx, dims);
            }
        }
    }
    out
}

fn advance(idx: &mut [usize], dims: &[usize]) {
    for (i, &d) in idx.iter_mut().zip(dims).rev() {
        *i += 1;
        if *i < d {
            return;
        }
        *i = 0;
    }
}

/// One dense tensor draw. Returns `(present_count, size)`.
pub fn sample_dense_baseline(
    kind: DenseKind,
    dims: &[usize],
    rank: usize,
    freqs: usize,
    rng: &mut Rng,
) -> Result<(usize, usize)> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidConfig("all dims must be >= 1".into()));
    }
    if rank == 0 || (kind == DenseKind::GpRff && freqs == 0) {
        return Err(Error::InvalidConfig(
            "rank and frequency count must be >= 1".into(),
        ));
    }
    let f = latent_values(kind, dims, rank, freqs, rng);
    Ok(bernoulli_count(&f, rng))
}

pub(crate) fn bernoulli_count(latent: &[f64], rng: &mut Rng) -> (usize, usize) {
    let present = latent
        .iter()
        .filter(|&&f| rng.random::<f64>() < sigmoid(f))
        .count();
    (present, latent.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseCurvePoint {
    pub kind: DenseKind,
    pub size_per_mode: usize,
    pub tensor_size: usize,
    pub replicates: usize,
    pub mean_present: f64,
    pub mean_fraction: f64,
}

/// Grows every mode through `sizes` and averages the present fraction over replicates.
pub fn run_dense_simulation(
    kind: DenseKind,
    sizes: &[usize],
    num_modes: usize,
    rank: usize,
    freqs: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<DenseCurvePoint>> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be >= 1".into()));
    }
    sizes
        .iter()
        .enumerate()
        .map(|(si, &size)| {
            let dims = vec![size; num_modes];
            let draws: Vec<(usize, usize)> = (0..replicates)
                .into_par_iter()
                .map(|rep| {
                    let s = rng::derive_seed(rng::derive_seed(seed, si as u64), rep as u64);
                    sample_dense_baseline(kind, &dims, rank, freqs, &mut rng::seeded(s))
                })
                .collect::<Result<_>>()?;
            let n = replicates as f64;
            Ok(DenseCurvePoint {
                kind,
                size_per_mode: size,
                tensor_size: draws[0].1,
                replicates,
                mean_present: draws.iter().map(|d| d.0 as f64).sum::<f64>() / n,
                mean_fraction: draws.iter().map(|d| d.0 as f64 / d.1 as f64).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn write_dense_csv(
    points: &[DenseCurvePoint],
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(
        out,
        "kind,size_per_mode,tensor_size,replicates,mean_present,mean_fraction"
    )?;
    for p in points {
        let kind = match p.kind {
            DenseKind::Cp => "cp",
            DenseKind::GpRff => "gp-rff",
        };
        writeln!(
            out,
            "{kind},{},{},{},{:?},{:?}",
            p.size_per_mode, p.tensor_size, p.replicates, p.mean_present, p.mean_fraction
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell() {
        let mut rng = rng::seeded(1);
        for kind in [DenseKind::Cp, DenseKind::GpRff] {
            let (c, size) = sample_dense_baseline(kind, &[1, 1], 2, 4, &mut rng).unwrap();
            assert_eq!(size, 1);
            assert!(c <= 1);
        }
    }

    #[test]
    fn zero_latent_gives_half() {
        let mut rng = rng::seeded(2);
        let n = 200_000;
        let (c, size) = bernoulli_count(&vec![0.0; n], &mut rng);
        let p = c as f64 / size as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * se, "fraction {p}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = rng::seeded(3);
        assert!(sample_dense_baseline(DenseKind::Cp, &[0, 2], 1, 1, &mut rng).is_err());
        assert!(sample_dense_baseline(DenseKind::GpRff, &[2, 2], 1, 0, &mut rng).is_err());
        assert!("tucker".parse::<DenseKind>().is_err());
    }

    #[test]
    fn cp_fraction_is_flat_in_size() {
        let pts = run_dense_simulation(DenseKind::Cp, &[5, 10, 20], 2, 3, 0, 200, 4).unwrap();
        let fr: Vec<f64> = pts.iter().map(|p| p.mean_fraction).collect();
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        for f in &fr {
            assert!((f - mean).abs() / mean < 0.1, "{fr:?}");
        }
    }
}
