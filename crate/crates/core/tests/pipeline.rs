//! Synthesize, split, train, persist and evaluate through the public API.

use stp_tensor::eval::{evaluate, link_scores, node_factors, pca_project, predict_values};
use stp_tensor::io::{load_model, save_model};
use stp_tensor::synth::{generate, SynthConfig};
use stp_tensor::tensor::{split_train_test, SplitSpec};
use stp_tensor::train::train;
use stp_tensor::TrainConfig;

fn small_run() -> (stp_tensor::train::TrainOutput, stp_tensor::SparseTensorData) {
    let data = generate(&SynthConfig {
        entries: 400,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let (train_set, test_set) = split_train_test(
        &data.tensor,
        SplitSpec {
            train_fraction: 0.8,
            seed: 3,
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        r1: 1,
        r2: 2,
        num_freqs: 10,
        learning_rate: 5e-3,
        batch_size: 64,
        epochs: 30,
        seed: 4,
        ..Default::default()
    };
    (train(&train_set, &cfg).unwrap(), test_set)
}

#[test]
fn training_is_reproducible_and_survives_a_file_round_trip() {
    let (a, test_set) = small_run();
    let (b, _) = small_run();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace.len(), 30);
    assert!(a
        .trace
        .iter()
        .zip(&b.trace)
        .all(|(x, y)| x.full_elbo == y.full_elbo));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&a.model, &serde_json::Value::Null, &path).unwrap();
    let (loaded, _) = load_model(&path).unwrap();
    let idx = test_set.index_list();
    let before = predict_values(&a.model, &idx).unwrap();
    let after = predict_values(&loaded, &idx).unwrap();
    assert_eq!(before, after);
}

#[test]
fn evaluation_outputs_are_well_formed() {
    let (out, test_set) = small_run();
    let report = evaluate(&out.model, &test_set, None).unwrap();
    assert!(report.mse.is_finite() && report.mae.is_finite());
    assert!(report.mae * report.mae <= report.mse + 1e-12);

    let scores = link_scores(&out.model, &test_set.index_list()).unwrap();
    assert!(scores.iter().all(|s| s.value > 0.0 && s.value <= 1.0));

    // an id never seen in training is flagged rather than rejected
    let unseen = predict_values(&out.model, &[vec![10_000, 0]]).unwrap();
    assert!(unseen[0].unseen);

    let rows = node_factors(&out.model, 0);
    assert_eq!(rows.len(), out.model.params.modes[0].active_nodes());
    assert_eq!(rows[0].len(), 1 + 2 + 2);
    assert_eq!(pca_project(&rows).unwrap().len(), rows.len());
}
