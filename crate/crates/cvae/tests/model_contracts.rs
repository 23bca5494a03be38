use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use tunegram_core::encoding::{MelodyGrid, CATEGORIES, CHANNELS};
use tunegram_cvae::checkpoint;
use tunegram_cvae::fixtures::{toy_condition, toy_dataset};
use tunegram_cvae::model::reproduction_loss;
use tunegram_cvae::{
    loss, CvaeConfig, CvaeError, CvaeModel, DecodedGrid, Example, LatentDistribution, Mat, Trainer,
};
use tunegram_core::tonality::Mode;

fn small() -> CvaeConfig {
    CvaeConfig {
        latent_dim: 4,
        hidden_dim: 6,
        recurrent_layers_per_coder: 2,
        aggregate_dim: 4,
        expand_dim: 6,
        batch_size: 2,
        seed: 3,
        ..CvaeConfig::default()
    }
}

fn randomized(config: CvaeConfig, seed: u64) -> CvaeModel {
    let mut model = CvaeModel::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-0.5, 0.5).unwrap();
    for m in &mut model.params.values {
        m.data.iter_mut().for_each(|v| *v = rng.sample(u));
    }
    model
}

fn random_grid(seed: u64) -> MelodyGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = vec![0.0; 128 * CHANNELS];
    for row in probs.chunks_mut(CHANNELS) {
        row[rng.random_range(0..CATEGORIES)] = 1.0;
        row[CATEGORIES] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    let grid = MelodyGrid::harden(&probs).unwrap();
    assert!(grid.steps().iter().any(|s| !s.is_silent()));
    grid
}

#[test]
fn uniform_decode_has_closed_form_reproduction() {
    let expected = 128.0 * (34f64.ln() + 2f64.ln());
    for seed in 0..20 {
        let r = reproduction_loss(&random_grid(seed), &DecodedGrid::uniform(128));
        assert!((r - expected).abs() < 1e-9, "{r} vs {expected}");
    }
    let model = CvaeModel::new(small()).unwrap();
    let d = model.decode(&[0.1, 0.2, 0.3, 0.4], &toy_condition(Mode::Major)).unwrap();
    let r = reproduction_loss(&random_grid(1), &d);
    assert!((r - expected).abs() < 1e-9);
}

#[test]
fn one_hot_decode_reproduces_with_zero_loss() {
    let grid = random_grid(4);
    let decoded = DecodedGrid { probs: grid.to_dense() };
    let dist = LatentDistribution { mean: vec![0.0; 3], logvar: vec![0.0; 3] };
    let parts = loss(&grid, &decoded, &dist, 0.0);
    assert_eq!(parts.reproduction, 0.0);
    assert_eq!(parts.total, parts.reproduction);
    let dist = LatentDistribution { mean: vec![1.0], logvar: vec![0.0] };
    assert_eq!(loss(&grid, &decoded, &dist, 0.0).total, 0.0);
    assert_eq!(loss(&grid, &decoded, &dist, 0.5).total, 0.25);
}

#[test]
fn decoder_rows_are_normalized_and_pure() {
    let model = randomized(small(), 8);
    let cond = toy_condition(Mode::Dorian);
    let z = [0.5, -1.0, 2.0, 0.0];
    let d = model.decode(&z, &cond).unwrap();
    assert_eq!(d.probs.len(), 128 * CHANNELS);
    for t in 0..d.steps() {
        let row = d.row(t);
        assert!((row[..CATEGORIES].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&row[CATEGORIES]));
    }
    assert_eq!(d, model.decode(&z, &cond).unwrap());
    let data = toy_dataset();
    let a = model.encode(&data[0].grid, &data[0].condition).unwrap();
    assert_eq!(a, model.encode(&data[0].grid, &data[0].condition).unwrap());
    assert_eq!(a.dim(), 4);
    assert!(a.std().iter().all(|s| *s > 0.0));
}

/// The batched training graph agrees with encode, decode and the free loss.
#[test]
fn batch_loss_agrees_with_single_example_path() {
    let model = randomized(small(), 2);
    let data = toy_dataset();
    let beta = 0.3;
    let mut total = 0.0;
    for seg in &data[..2] {
        let dist = model.encode(&seg.grid, &seg.condition).unwrap();
        let decoded = model.decode(&dist.mean, &seg.condition).unwrap();
        total += loss(&seg.grid, &decoded, &dist, beta).total;
    }
    let batch: Vec<Example<'_>> = data[..2].iter().map(|s| Example { grid: &s.grid, condition: &s.condition }).collect();
    let parts = model.batch_loss(&batch, &Mat::zeros(2, 4), beta).unwrap();
    assert!((parts.total - total / 2.0).abs() < 1e-9 * total);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let config = CvaeConfig { learning_rate: 0.0, ..small() };
    let mut t = Trainer::new(CvaeModel::new(config).unwrap());
    let before = t.model.params.clone();
    t.run(&toy_dataset(), 5).unwrap();
    assert_eq!(t.model.params, before);
    assert_eq!(t.history.len(), 5);
    assert_eq!(t.model.step, 5);
}

#[test]
fn training_is_deterministic_and_records_history() {
    let config = CvaeConfig { steps: 6, learning_rate: 0.01, ..small() };
    let data = toy_dataset();
    let (a, ha) = tunegram_cvae::train(&data, &config).unwrap();
    let (b, hb) = tunegram_cvae::train(&data, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), 6);
    let csv = ha.to_csv();
    assert!(csv.starts_with("step,reproduction,kl\n"));
    assert_eq!(csv.lines().count(), 7);
    assert_ne!(a.params, CvaeModel::new(config).unwrap().params);
}

#[test]
fn empty_dataset_and_non_finite_losses_are_reported() {
    assert!(matches!(tunegram_cvae::train(&[], &small()), Err(CvaeError::EmptyDataset)));
    let mut model = CvaeModel::new(small()).unwrap();
    model.params.values[0].data[0] = f64::NAN;
    let mut t = Trainer::new(model.clone());
    match t.step(&toy_dataset()) {
        Err(CvaeError::NonFinite { step, snapshot, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(snapshot.step, 0);
            assert!(snapshot.params.values[0].data[0].is_nan());
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut model = randomized(small(), 6);
    model.step = 123;
    let bytes = checkpoint::to_bytes(&model);
    assert_eq!(&bytes[..8], checkpoint::MAGIC);
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());

    let dir = std::env::temp_dir().join(format!("tunegram-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), model);
    std::fs::remove_dir_all(dir).unwrap();
}
