//! Property tests of model invariants through the public API.

use proptest::prelude::*;
use rand::Rng as _;
use stp_tensor::elbo::{elbo_full, elbo_minibatch};
use stp_tensor::model::init_params_for;
use stp_tensor::prior::{stick_fractions, stick_log_jacobian, SociabilityTable};
use stp_tensor::rng;
use stp_tensor::sampler::{sample_entries, sample_hdp_weights, sample_stp_tensor, StpConfig};
use stp_tensor::{SparseTensorData, TrainConfig};

fn stp_config() -> impl Strategy<Value = StpConfig> {
    (0.5f64..6.0, 1usize..3, 1usize..4, 1usize..4, any::<u64>()).prop_map(
        |(alpha, r1, r2, k, seed)| StpConfig {
            alpha,
            r1,
            r2,
            num_modes: k,
            max_atoms: 400,
            seed,
            ..Default::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hierarchy_weights_are_sub_probabilities(cfg in stp_config()) {
        let w = sample_hdp_weights(&cfg, &mut rng::seeded(cfg.seed));
        for k in 0..cfg.num_modes {
            let beta = &w.beta[k];
            let total: f64 = beta.iter().sum();
            prop_assert!(beta.iter().all(|&b| (0.0..=1.0).contains(&b)));
            prop_assert!(total <= 1.0 + 1e-12);
            for omega in &w.omega[k] {
                prop_assert_eq!(omega.len(), beta.len());
                prop_assert!(omega.iter().all(|&x| x >= 0.0));
                prop_assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!(w.gamma[k].iter().all(|&g| g > 0.0));
            for loc in &w.locations[k] {
                prop_assert!(loc.iter().all(|&t| (0.0..=cfg.alpha).contains(&t)));
            }
        }
    }

    #[test]
    fn sampled_entries_stay_on_atoms(cfg in stp_config(), n in 1usize..200) {
        let mut rng = rng::seeded(cfg.seed);
        let w = sample_hdp_weights(&cfg, &mut rng);
        for idx in sample_entries(&w, n, &mut rng) {
            prop_assert_eq!(idx.len(), cfg.num_modes);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert!(w.omega[k].iter().any(|o| o[i] > 0.0));
            }
        }
    }

    #[test]
    fn sampled_tensor_counts_are_consistent(cfg in stp_config()) {
        let t = sample_stp_tensor(&cfg, &mut rng::seeded(cfg.seed));
        let multiplicity: usize = t.entries.iter().map(|e| e.1).sum();
        prop_assert_eq!(multiplicity, t.total_points);
        prop_assert_eq!(t.distinct_entries, t.entries.len());
        prop_assert!(t.distinct_entries as f64 <= t.active_size().max(0.0) || t.total_points == 0);
    }

    #[test]
    fn stick_map_is_a_contraction_into_the_unit_cube(raw in prop::collection::vec(0.01f64..5.0, 2..8)) {
        let s: f64 = raw.iter().sum();
        let beta: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let xi = stick_fractions(&beta);
        prop_assert_eq!(xi.len(), beta.len() - 1);
        prop_assert!(xi.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        // every Lambda_j <= 1, so the log-Jacobian is non-negative
        prop_assert!(stick_log_jacobian(&beta).unwrap() >= -1e-12);
    }

    #[test]
    fn flat_view_round_trips_and_slot_grid_normalizes(
        dims in prop::collection::vec(1usize..4, 2..4),
        r1 in 1usize..3,
        r2 in 1usize..3,
        seed in any::<u64>(),
    ) {
        let cfg = TrainConfig { r1, r2, num_freqs: 2, ..Default::default() };
        let mut rng = rng::seeded(seed);
        let mut params = init_params_for(&dims, 1.0, &cfg, &mut rng);
        params.visit_mut(|_, x| *x += rng.random_range(-1.0..1.0));
        let flat = params.to_flat();
        prop_assert_eq!(flat.len(), params.num_coordinates());
        prop_assert_eq!(params.coordinate_names().len(), flat.len());
        let mut copy = params.zeros_like();
        copy.set_flat(&flat);
        prop_assert_eq!(&copy, &params);

        let table = SociabilityTable::new(&params.modes);
        let mut total = 0.0;
        let cells: usize = dims.iter().map(|d| d + 1).product();
        for mut c in 0..cells {
            let slots: Vec<usize> = dims.iter().map(|d| { let s = c % (d + 1); c /= d + 1; s }).collect();
            total += table.slot_log_prob(&slots).exp();
        }
        prop_assert!((total - 1.0).abs() < 1e-10);
    }
}

#[test]
fn full_batch_minibatch_matches_full_elbo() {
    let mut rng = rng::seeded(5);
    let entries = (0..40)
        .map(|_| {
            (
                vec![rng.random_range(0..6), rng.random_range(0..5)],
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let data = SparseTensorData::new(vec![6, 5], entries).unwrap();
    let (_, compact) = stp_tensor::model::init_params(&data, &TrainConfig::default()).unwrap();
    let cfg = TrainConfig {
        num_freqs: 4,
        ..Default::default()
    };
    let params = init_params_for(compact.dims(), 0.3, &cfg, &mut rng);
    let all: Vec<usize> = (0..compact.len()).collect();
    let a = elbo_minibatch(&params, &compact, &all, compact.len()).unwrap();
    let b = elbo_full(&params, &compact).unwrap();
    assert!(
        (a.total - b.total).abs() < 1e-9 * b.total.abs().max(1.0),
        "{} vs {}",
        a.total,
        b.total
    );
}
