//! Completion and link-prediction metrics, the R1/R2 validation sweep and
//! 2-D PCA of learned node factors.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::model::{TrainConfig, TrainedModel};
use crate::prior::SociabilityTable;
use crate::rng;
use crate::tensor::{split_train_test, SparseTensorData, SplitSpec};
use crate::train::train;

pub fn mse_mae(predictions: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InsufficientData("no predictions to score".into()));
    }
    let n = truth.len() as f64;
    let (se, ae) = predictions
        .iter()
        .zip(truth)
        .fold((0.0, 0.0), |(se, ae), (p, t)| {
            (se + (p - t).powi(2), ae + (p - t).abs())
        });
    Ok((se / n, ae / n))
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed by sorting in `O(n log n)`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientData(
            "AUC needs positive and negative scores".into(),
        ));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let mut neg_sorted = neg.to_vec();
    neg_sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = neg_sorted.partition_point(|&x| x < p);
        let tied = neg_sorted[below..].partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * tied as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// A scored query entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    /// Some node was unseen at training and went through the aggregated slot.
    pub unseen: bool,
}

/// Link scores `w_i` for entries given in original node ids.
pub fn link_scores(model: &TrainedModel, indices: &[Vec<usize>]) -> Result<Vec<Scored>> {
    let table = SociabilityTable::new(&model.params.modes);
    indices
        .iter()
        .map(|idx| {
            let mapped = model.map_index(idx)?;
            Ok(Scored {
                value: table.slot_log_prob(&mapped.slots).exp(),
                unseen: mapped.unseen,
            })
        })
        .collect()
}

/// Predictive means for entries given in original node ids.
pub fn predict_values(model: &TrainedModel, indices: &[Vec<usize>]) -> Result<Vec<Scored>> {
    indices
        .iter()
        .map(|idx| {
            let (mean, _, unseen) = model.predict_value(idx)?;
            Ok(Scored {
                value: mean,
                unseen,
            })
        })
        .collect()
}

/// AUC of the link scores of `positives` against `negatives`.
pub fn link_auc(
    model: &TrainedModel,
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
) -> Result<f64> {
    // log scores rank identically and do not underflow for large tensors
    let table = SociabilityTable::new(&model.params.modes);
    let score = |set: &[Vec<usize>]| -> Result<Vec<f64>> {
        set.iter()
            .map(|idx| Ok(table.slot_log_prob(&model.map_index(idx)?.slots)))
            .collect()
    };
    auc(&score(positives)?, &score(negatives)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub auc: Option<f64>,
    /// Test entries that touched a node unseen at training.
    pub unseen_entries: usize,
    pub sweep: Vec<SweepRow>,
}

impl EvalReport {
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "mse,mae,auc,unseen_entries")?;
        let auc = self.auc.map_or(String::new(), |a| format!("{a:?}"));
        writeln!(
            out,
            "{:?},{:?},{auc},{}",
            self.mse, self.mae, self.unseen_entries
        )
    }
}

/// Value MSE/MAE on `test` plus, when negatives are given, link AUC.
pub fn evaluate(
    model: &TrainedModel,
    test: &SparseTensorData,
    negatives: Option<&[Vec<usize>]>,
) -> Result<EvalReport> {
    let indices = test.index_list();
    let preds = predict_values(model, &indices)?;
    let values: Vec<f64> = preds.iter().map(|s| s.value).collect();
    let (mse, mae) = mse_mae(&values, test.values())?;
    let auc = match negatives {
        Some(neg) => Some(link_auc(model, &indices, neg)?),
        None => None,
    };
    Ok(EvalReport {
        mse,
        mae,
        auc,
        unseen_entries: preds.iter().filter(|s| s.unseen).count(),
        sweep: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r1: usize,
    pub r2: usize,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub best: (usize, usize),
}

/// Trains every `(r1, r2)` with `r1 + r2 = r_total` on 90% of `train` and
/// scores value MSE on the held-out 10%. The best pair minimizes validation
/// MSE; ties go to the larger `r2`.
pub fn sweep_r1_r2(
    train_data: &SparseTensorData,
    r_total: usize,
    template: &TrainConfig,
    seed: u64,
) -> Result<SweepResult> {
    if r_total < 2 {
        return Err(Error::InvalidConfig(format!(
            "R_total must be >= 2, got {r_total}"
        )));
    }
    let (fit, val) = split_train_test(
        train_data,
        SplitSpec {
            train_fraction: 0.9,
            seed: rng::derive_seed(seed, 0),
        },
    )?;
    if fit.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData(
            "too few entries for a validation slice".into(),
        ));
    }
    let val_idx = val.index_list();
    let rows: Vec<SweepRow> = (1..r_total)
        .into_par_iter()
        .map(|r1| {
            let r2 = r_total - r1;
            let cfg = TrainConfig {
                r1,
                r2,
                seed: rng::derive_seed(seed, r2 as u64 + 1),
                ..template.clone()
            };
            let out = train(&fit, &cfg).map_err(|f| f.source)?;
            let preds: Vec<f64> = predict_values(&out.model, &val_idx)?
                .iter()
                .map(|s| s.value)
                .collect();
            let (val_mse, val_mae) = mse_mae(&preds, val.values())?;
            Ok(SweepRow {
                r1,
                r2,
                val_mse,
                val_mae,
            })
        })
        .collect::<Result<_>>()?;
    let best = rows
        .iter()
        .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse).then(b.r2.cmp(&a.r2)))
        .map(|r| (r.r1, r.r2))
        .expect("at least one row");
    Ok(SweepResult { rows, best })
}

pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "r1,r2,val_mse,val_mae")?;
    for r in rows {
        writeln!(out, "{},{},{:?},{:?}", r.r1, r.r2, r.val_mse, r.val_mae)?;
    }
    Ok(())
}

/// Per-node factor rows of mode `k`: `[theta (R1), omega (R2), omega_tilde (R2)]`.
pub fn node_factors(model: &TrainedModel, k: usize) -> Vec<Vec<f64>> {
    let p = &model.params;
    let mode = &p.modes[k];
    let omegas: Vec<Vec<f64>> = (0..p.r2).map(|r| mode.omega(r)).collect();
    (0..mode.active_nodes())
        .map(|j| {
            let mut row: Vec<f64> = (0..p.r1)
                .map(|r| p.alpha * sigmoid(mode.theta_tilde[j * p.r1 + r]))
                .collect();
            row.extend(omegas.iter().map(|w| w[j]));
            row.extend((0..p.r2).map(|r| mode.omega_tilde[r][j]));
            row
        })
        .collect()
}

/// Projects the rows of an `n x p` matrix onto the two leading principal
/// axes of its centered covariance. Each axis is signed so that its first
/// non-zero loading is positive.
pub fn pca_project(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n < 2 || p < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs n >= 2 and p >= 2, got {n} x {p}"
        )));
    }
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: 0,
        });
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let scale = cov.diagonal().iter().copied().fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::Domain(
            "PCA input has rank 0 (all rows equal)".into(),
        ));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let tol = 1e-12 * scale.sqrt();
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let flip = v.iter().find(|x| x.abs() > tol).is_some_and(|&x| x < 0.0);
            v.into_iter().map(|x| if flip { -x } else { x }).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let proj = |a: &[f64]| (0..p).map(|j| centered[(i, j)] * a[j]).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse_mae(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), (2.0, 1.0));
        assert_eq!(mse_mae(&[3.0, -1.0], &[3.0, -1.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mse_mae(&[0.5], &[0.0]).unwrap(), (0.25, 0.5));
        assert!(mse_mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse_mae(&[], &[]).is_err());
    }

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for q in neg {
                s += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.8, 0.4], &[0.6, 0.2]), 0.75);
        assert!(auc(&[], &[0.1]).is_err());
        assert!(auc(&[0.1], &[]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            pos in prop::collection::vec(0u8..10, 1..20),
            neg in prop::collection::vec(0u8..10, 1..20),
        ) {
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let a = auc(&pos, &neg).unwrap();
            prop_assert!((a - brute_auc(&pos, &neg)).abs() < 1e-12);
            prop_assert!((a + auc(&neg, &pos).unwrap() - 1.0).abs() < 1e-12);
            let t = |v: &[f64]| v.iter().map(|x| (x * 0.3).exp() + 2.0).collect::<Vec<_>>();
            prop_assert!((auc(&t(&pos), &t(&neg)).unwrap() - a).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn pca_collinear_has_flat_second_axis() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)])
            .collect();
        let out = pca_project(&rows).unwrap();
        assert!(out.iter().all(|c| c[1].abs() < 1e-10));
    }

    #[test]
    fn pca_axis_aligned() {
        // covariance diag(4, 1) up to scale
        let rows = vec![
            vec![2.0, 0.0],
            vec![-2.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let out = pca_project(&rows).unwrap();
        for (r, c) in rows.iter().zip(&out) {
            assert!((c[0].abs() - r[0].abs()).abs() < 1e-12);
            assert!((c[1].abs() - r[1].abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        assert!(pca_project(&[vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
        assert!(pca_project(&[vec![1.0, 2.0]]).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]]).is_err());
    }

    /// Cyclic Jacobi rotations on a small symmetric matrix.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| f64::from(i == j)).collect())
            .collect();
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i][i]).collect(), v)
    }

    #[test]
    fn pca_matches_jacobi_oracle() {
        let rows = vec![
            vec![2.0, 0.5, 1.0],
            vec![-1.0, 1.5, 0.0],
            vec![0.5, -2.0, 3.0],
            vec![1.0, 1.0, -1.5],
        ];
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..3)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let c: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        let cov: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..3)
                    .map(|b| c.iter().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        let (vals, vecs) = jacobi_eigen(cov);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let axis = |col: usize| {
            let v: Vec<f64> = (0..3).map(|i| vecs[i][col]).collect();
            let first = v.iter().find(|x| x.abs() > 1e-12).copied().unwrap();
            v.iter().map(|x| x * first.signum()).collect::<Vec<_>>()
        };
        let a0 = axis(order[0]);
        let a1 = axis(order[1]);
        let out = pca_project(&rows).unwrap();
        for (r, o) in c.iter().zip(&out) {
            let e0: f64 = r.iter().zip(&a0).map(|(x, y)| x * y).sum();
            let e1: f64 = r.iter().zip(&a1).map(|(x, y)| x * y).sum();
            assert!((o[0] - e0).abs() < 1e-8, "{o:?} vs {e0}");
            assert!((o[1] - e1).abs() < 1e-8, "{o:?} vs {e1}");
        }
        // orthogonal and variance ordered
        let dot: f64 = out.iter().map(|o| o[0] * o[1]).sum();
        let v0: f64 = out.iter().map(|o| o[0] * o[0]).sum();
        let v1: f64 = out.iter().map(|o| o[1] * o[1]).sum();
        assert!(dot.abs() < 1e-8 * v0);
        assert!(v0 >= v1);
    }

    #[test]
    fn sweep_rejects_small_total() {
        let data = SparseTensorData::new(vec![2, 2], vec![(vec![0, 0], 1.0)]).unwrap();
        assert!(sweep_r1_r2(&data, 1, &TrainConfig::default(), 0).is_err());
    }
}
