//! Mini-batch stochastic optimization of the ELBO with Adam ascent.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::elbo::{elbo_full, gradient};
use crate::error::{Error, Result};
use crate::model::{init_params, Params, TrainConfig, TrainedModel};
use crate::rng;
use crate::tensor::SparseTensorData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub full_elbo: f64,
    pub data_term: f64,
    pub kl_term: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub trace: Vec<EpochRecord>,
}

/// A numerical failure mid-training, carrying the last parameters that
/// produced a finite ELBO.
#[derive(Debug)]
pub struct TrainFailure {
    pub source: Error,
    pub epoch: usize,
    pub snapshot: TrainedModel,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training failed in epoch {}: {}",
            self.epoch, self.source
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Adam state for flat parameter vectors.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    /// One ascent step on `x` along `g`.
    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            x[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

fn clip(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// Fits the model to `data` (original node ids). Runs
/// `epochs * ceil(N / batch)` steps; a batch size above `N` is clamped to `N`
/// and the last short batch of each epoch is kept.
pub fn train(
    data: &SparseTensorData,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutput, Box<TrainFailure>> {
    let (model, compact) = init_params(data, cfg).map_err(|source| {
        Box::new(TrainFailure {
            source,
            epoch: 0,
            snapshot: empty_model(cfg),
        })
    })?;
    train_from(model, &compact)
}

/// Continues optimization of `model` on `compact`, which must already use
/// the model's compact node ids.
pub fn train_from(
    model: TrainedModel,
    compact: &SparseTensorData,
) -> std::result::Result<TrainOutput, Box<TrainFailure>> {
    let cfg = model.config.clone();
    let n = compact.len();
    let batch = cfg.batch_size.min(n);
    let mut params: Params = model.params.clone();
    let mut last_good = params.clone();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), &cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    let fail = |source: Error, epoch: usize, snapshot: &Params| {
        Box::new(TrainFailure {
            source,
            epoch,
            snapshot: TrainedModel {
                params: snapshot.clone(),
                ..model.clone()
            },
        })
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(rng::derive_seed(
            cfg.seed,
            epoch as u64 + 1,
        )));
        for positions in order.chunks(batch) {
            let (_, grad) =
                gradient(&params, compact, positions, n).map_err(|e| fail(e, epoch, &last_good))?;
            let mut g = grad.to_flat();
            clip(&mut g, cfg.grad_clip);
            adam.step(&mut flat, &g);
            params.set_flat(&flat);
        }
        let terms = elbo_full(&params, compact).map_err(|e| fail(e, epoch, &last_good))?;
        last_good.clone_from(&params);
        trace.push(EpochRecord {
            epoch,
            full_elbo: terms.total,
            data_term: terms.data,
            kl_term: terms.kl,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutput {
        model: TrainedModel { params, ..model },
        trace,
    })
}

fn empty_model(cfg: &TrainConfig) -> TrainedModel {
    let mut rng = rng::seeded(0);
    TrainedModel {
        config: cfg.clone(),
        params: crate::model::init_params_for(
            &[],
            1.0,
            &TrainConfig {
                num_freqs: 1,
                ..cfg.clone()
            },
            &mut rng,
        ),
        maps: crate::tensor::NodeMaps::from_original_ids(Vec::new()),
    }
}

pub fn write_training_log(
    trace: &[EpochRecord],
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(out, "epoch,full_elbo,data_term,kl_term,wall_seconds")?;
    for r in trace {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            r.epoch, r.full_elbo, r.data_term, r.kl_term, r.wall_seconds
        )?;
    }
    Ok(())
}

impl From<Box<TrainFailure>> for Error {
    fn from(f: Box<TrainFailure>) -> Self {
        f.source
    }
}

/// Convenience for callers that do not need the snapshot.
pub fn train_or_err(data: &SparseTensorData, cfg: &TrainConfig) -> Result<TrainOutput> {
    train(data, cfg).map_err(Error::from)
}
