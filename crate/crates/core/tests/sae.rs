use std::collections::BTreeMap;

use craftbench::sae::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn planted_hyper() -> SaeHyper {
    SaeHyper { latent: Some(32), lambda: 1e-4, lr: 0.05, batch: 50, epochs: 200, seed: 0, momentum: Some(0.9), shuffle: true }
}

#[test]
fn planted_features_are_reconstructed() {
    let (x, _) = planted_features(1000, 32, 5, 0.3, 0);
    let (_, report) = train_sae(&x, &planted_hyper()).unwrap();
    assert!(report.reconstruction_mse < 0.01, "mse {}", report.reconstruction_mse);
    assert!(report.live_neurons >= 5);
}

#[test]
fn gaussian_autoencoding_without_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f32>> = (0..1000).map(|_| (0..16).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).collect();
    let x = ActivationMatrix::from_rows(&rows).unwrap();
    let hyper = SaeHyper { latent: None, lambda: 0.0, lr: 0.02, batch: 50, epochs: 300, seed: 0, momentum: Some(0.9), shuffle: true };
    let (_, report) = train_sae(&x, &hyper).unwrap();
    assert!(report.reconstruction_mse < 1e-3, "mse {}", report.reconstruction_mse);
}

fn column(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

#[test]
fn decoder_stays_tied_every_step() {
    let (x, _) = planted_features(200, 8, 2, 0.5, 1);
    let hyper = SaeHyper { lr: 0.01, batch: 20, epochs: 3, ..SaeHyper::default() };
    let mut steps = 0;
    let mut check = |_: usize, m: &SaeModel| {
        assert_eq!(m.decoder_weights(), m.w_enc.transpose());
        steps += 1;
    };
    let (_, report) = train_sae_observed(&x, &hyper, &mut check).unwrap();
    assert_eq!(steps, 30);
    assert_eq!(report.steps, 30);
}

#[test]
fn probe_finds_planted_neuron_and_not_noise() {
    let (x, coef) = planted_features(10_000, 32, 5, 0.3, 0);
    let hyper = SaeHyper { batch: 250, epochs: 30, ..planted_hyper() };
    let (model, _) = train_sae(&x, &hyper).unwrap();
    let z = model.encode(&x.to_matrix()).unwrap();
    let probe = neuron_correlation(&z, &column(&coef, 0)).unwrap();
    assert!(probe.best_value.abs() > 0.9, "best |r| {}", probe.best_value);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = DMatrix::from_fn(10_000, 32, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let null = neuron_correlation(&noise, &y).unwrap();
    assert!(null.best_value.abs() < 0.05, "null max |r| {}", null.best_value);
}

#[test]
fn ablating_feature_neuron_hurts_its_rows() {
    let (x, coef) = planted_features(1000, 32, 5, 0.3, 0);
    let (model, _) = train_sae(&x, &planted_hyper()).unwrap();
    let xm = x.to_matrix();
    let z = model.encode(&xm).unwrap();
    let neuron = neuron_correlation(&z, &column(&coef, 0)).unwrap().best_neuron;
    let before = reconstruct_matrix(&model, &x).unwrap().to_matrix();
    let after = intervene(&model, &x, neuron, 0.0).unwrap().to_matrix();
    let err = |r: &DMatrix<f64>| -> f64 {
        (0..1000).filter(|i| coef[(*i, 0)] > 0.0).map(|i| (r.row(i) - xm.row(i)).norm_squared()).sum()
    };
    assert!(err(&after) > err(&before), "{} vs {}", err(&after), err(&before));
}

#[test]
fn sweep_peaks_where_feature_lives() {
    let (l0, _) = planted_features(2000, 32, 5, 0.3, 11);
    let (l1, coef) = planted_features(2000, 32, 5, 0.3, 12);
    let matrices = BTreeMap::from([(0, l0), (1, l1)]);
    let targets = BTreeMap::from([("feature".to_string(), ProbeTarget::Continuous(column(&coef, 0)))]);
    let hyper = SaeHyper { epochs: 60, ..planted_hyper() };
    let rows = layer_sweep(&matrices, &targets, &hyper).unwrap();
    assert_eq!(rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(rows[1].probes["feature"].layer, 1);
    let profile = &sweep_profile(&rows)["feature"];
    let peak = profile.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(peak.0, 1, "{profile:?}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = planted_features(100, 8, 2, 0.5, 2);
    let hyper = SaeHyper { lr: 0.01, batch: 10, epochs: 2, ..SaeHyper::default() };
    let (model, _) = train_sae(&x, &hyper).unwrap();
    model.save(&dir.path().join("m.sae"), Some(hyper)).unwrap();
    let (back, h) = SaeModel::load(&dir.path().join("m.sae")).unwrap();
    assert_eq!(back, model);
    assert_eq!(h, Some(hyper));
    x.save(&dir.path().join("x.saem")).unwrap();
    assert_eq!(ActivationMatrix::load(&dir.path().join("x.saem")).unwrap(), x);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn encoding_is_non_negative(seed in 0u64..1000, d in 1usize..8, m in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = init_model(d, m, 0.0, nalgebra::DVector::zeros(d), seed);
            let x = DMatrix::from_fn(5, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 10.0);
            let z = model.encode(&x).unwrap();
            prop_assert!(z.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn unit_intervention_is_reconstruction(seed in 0u64..1000, neuron in 0usize..6) {
            let (x, _) = planted_features(20, 6, 3, 0.5, seed);
            let model = init_model(6, 6, 0.0, nalgebra::DVector::from_element(6, 0.1), seed);
            prop_assert_eq!(intervene(&model, &x, neuron, 1.0).unwrap(), reconstruct_matrix(&model, &x).unwrap());
        }

        #[test]
        fn correlations_are_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = DMatrix::from_fn(30, 4, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
            let y: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let p = neuron_correlation(&z, &y).unwrap();
            prop_assert_eq!(p.statistic[0], 0.0);
            prop_assert!(p.statistic.iter().all(|r| r.abs() <= 1.0 + 1e-12));
        }
    }
}
