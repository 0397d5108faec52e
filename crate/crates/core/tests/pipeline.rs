//! Data, training and checkpoint behaviour through the public API.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pse_tae::ad::{AdamConfig, AdamState, Mode, Tape};
use pse_tae::classifier::{predict, Classifier, ModelConfig};
use pse_tae::data::{
    augment, generate_synthetic, read_dataset, write_dataset, BatchBuilder, Dataset,
    NormalizationStats, Sampling, SyntheticConfig, AUGMENT_CLIP, AUGMENT_STD,
};
use pse_tae::harness::{evaluate, train, ModelBundle, TrainConfig};
use pse_tae::pse::PseConfig;
use pse_tae::tae::TaeConfig;

fn small_model(classes: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        pse: PseConfig {
            sample_size: 16,
            mlp1: vec![channels, 16, 16],
            mlp2: vec![32],
            ..PseConfig::default()
        },
        tae: TaeConfig {
            d_model: 32,
            d_k: 8,
            heads: 2,
            mlp3: vec![32, 32],
            ..TaeConfig::default()
        },
        decoder: vec![16],
        classes,
        ..ModelConfig::default()
    }
}

fn small_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        classes: 4,
        parcels: 100,
        dates: 8,
        channels: 4,
        max_pixels: 60,
        spacing: 45,
        jitter: 5,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn normalized_training_fold_is_standardized() {
    let data = generate_synthetic(&SyntheticConfig {
        parcels: 200,
        max_pixels: 50,
        noise: 0.0,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let split = data.split(0).unwrap();
    let train: Vec<_> = split.train.iter().map(|&i| &data.records[i]).collect();
    let stats = NormalizationStats::compute(train.iter().copied()).unwrap();
    let (t, c) = (data.dates, data.channels);
    let mut sum = vec![0.0; t * c];
    let mut sq = vec![0.0; t * c];
    let mut count = 0.0;
    for r in &train {
        let z = stats.apply_f64(r).unwrap();
        let n = r.pixel_count;
        for k in 0..t * c {
            for v in &z[k * n..(k + 1) * n] {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        count += n as f64;
    }
    for k in 0..t * c {
        let mean = sum[k] / count;
        let std = (sq[k] / count - mean * mean).sqrt();
        assert!(mean.abs() <= 1e-3, "({}, {}) mean {mean}", k / c, k % c);
        assert!(
            (0.99..=1.01).contains(&std),
            "({}, {}) std {std}",
            k / c,
            k % c
        );
    }
    // Another fold's statistics keep every value finite.
    for &i in &split.test {
        assert!(stats
            .apply_f64(&data.records[i])
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }
}

#[test]
fn swapped_pair_has_equal_value_multisets() {
    let data = generate_synthetic(&SyntheticConfig {
        parcels: 60,
        max_pixels: 20,
        noise: 0.0,
        offset_noise: 0.0,
        day_groups: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let a = data.records.iter().find(|r| r.label == 0).unwrap();
    let b = data.records.iter().find(|r| r.label == 1).unwrap();
    assert_eq!(a.days, b.days);
    for c in 0..data.channels {
        let mut va: Vec<f32> = (0..data.dates).map(|t| a.value(t, c, 0)).collect();
        let mut vb: Vec<f32> = (0..data.dates).map(|t| b.value(t, c, 0)).collect();
        assert_ne!(va, vb, "channel {c}: sequences should differ in order");
        va.sort_by(f32::total_cmp);
        vb.sort_by(f32::total_cmp);
        assert_eq!(va, vb, "channel {c}");
    }
}

#[test]
fn noise_free_parcels_of_a_class_share_their_profile() {
    let data = generate_synthetic(&SyntheticConfig {
        parcels: 60,
        max_pixels: 20,
        noise: 0.0,
        offset_noise: 0.0,
        day_groups: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let profile = |r: &pse_tae::data::ParcelRecord| -> Vec<f64> {
        (0..r.dates * r.channels)
            .map(|k| {
                let n = r.pixel_count;
                r.pixels[k * n..(k + 1) * n]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    };
    for k in 0..data.classes {
        let of_k: Vec<_> = data.records.iter().filter(|r| r.label == k).collect();
        for r in &of_k[1..] {
            let (p, q) = (profile(of_k[0]), profile(r));
            assert!(
                p.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-6),
                "class {k}"
            );
        }
    }
}

#[test]
fn dataset_round_trip_keeps_every_pixel() {
    let data = small_data(8);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    for (a, b) in back.records.iter().zip(&data.records) {
        assert_eq!(a.pixels.len(), a.dates * a.channels * a.pixel_count);
        assert!(a
            .pixels
            .iter()
            .zip(&b.pixels)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

/// Standard deviation of `clamp(N(0, s²), -c, c)` by quadrature.
fn clamped_normal_std(s: f64, c: f64) -> f64 {
    let steps = 200_000;
    let h = 2.0 * c / steps as f64;
    let pdf = |x: f64| (-(x * x) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    // Simpson over [-c, c] for the interior mass.
    let mut inner = 0.0;
    let mut mass = 0.0;
    for i in 0..=steps {
        let x = -c + i as f64 * h;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        inner += w * x * x * pdf(x);
        mass += w * pdf(x);
    }
    inner *= h / 3.0;
    mass *= h / 3.0;
    (inner + (1.0 - mass) * c * c).sqrt()
}

#[test]
fn augmentation_noise_matches_clamped_normal() {
    let mut v = vec![0.0f64; 1_000_000];
    augment(&mut v, &mut ChaCha8Rng::seed_from_u64(17));
    assert!(v.iter().all(|x| x.abs() <= AUGMENT_CLIP));
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let oracle = clamped_normal_std(AUGMENT_STD, AUGMENT_CLIP);
    // Standard error of a sample std is about s / sqrt(2n).
    let se = oracle / (2.0 * n).sqrt();
    assert!(
        (std - oracle).abs() < 5.0 * se,
        "empirical {std}, oracle {oracle}"
    );
    assert!((std - 0.00995).abs() < 1e-4, "{std}");
}

#[test]
fn single_batch_overfit_reaches_full_training_accuracy() {
    let data = generate_synthetic(&SyntheticConfig {
        parcels: 64,
        dates: 12,
        max_pixels: 100,
        spacing: 30,
        seed: 2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        classes: data.classes,
        ..ModelConfig::default()
    };
    let stats = NormalizationStats::compute(&data.records).unwrap();
    let records: Vec<_> = data.records.iter().collect();
    let builder = BatchBuilder {
        stats: &stats,
        sample_size: cfg.pse.sample_size,
        augment: false,
        spectral: false,
    };
    let mut model = Classifier::<f32>::new(&cfg, 0).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let batch = builder
            .build::<f32>(&records, Sampling::Train(&mut rng))
            .unwrap();
        let mut tape = Tape::new();
        let mut updates = Vec::new();
        let out = model
            .forward(&mut tape, &batch, Mode::Train, &mut updates)
            .unwrap();
        let loss = model.loss(&mut tape, &out, &batch).unwrap();
        let grads = tape.backward(loss).unwrap();
        model.store.zero_grads();
        model.store.accumulate(&grads);
        adam.step(&mut model.store).unwrap();
        updates.iter().for_each(|u| u.apply(&mut model.store));
    }
    let batch = builder.build::<f32>(&records, Sampling::Eval).unwrap();
    let (logits, _) = model.infer(&batch).unwrap();
    let k = cfg.classes;
    let correct = (0..records.len())
        .filter(|&i| predict(&logits.data()[i * k..(i + 1) * k]) == records[i].label)
        .count();
    assert_eq!(correct, 64);
}

#[test]
fn same_seed_gives_identical_training_trajectories() {
    let data = small_data(1);
    let m = small_model(4, 4);
    let a = train(&m, &quick(), &data, None).unwrap();
    let b = train(&m, &quick(), &data, None).unwrap();
    let losses = |o: &pse_tae::harness::TrainOutcome| {
        o.log
            .iter()
            .map(|r| (r.train_loss, r.val_miou))
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(
        a.bundle.to_checkpoint().to_bytes(),
        b.bundle.to_checkpoint().to_bytes()
    );
    let c = train(&m, &TrainConfig { seed: 6, ..quick() }, &data, None).unwrap();
    assert_ne!(losses(&a), losses(&c));
}

#[test]
fn test_block_never_influences_training() {
    let data = small_data(3);
    let m = small_model(4, 4);
    let base = train(&m, &quick(), &data, None).unwrap();

    let mut perturbed = data.clone();
    let test = perturbed.split(0).unwrap().test;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for &i in &test {
        let r = &mut perturbed.records[i];
        r.label = rng.random_range(0..4);
        r.pixels
            .iter_mut()
            .for_each(|v| *v = *v * 3.0 + rng.random_range(-1.0..1.0));
    }
    let other = train(&m, &quick(), &perturbed, None).unwrap();
    let curve = |o: &pse_tae::harness::TrainOutcome| {
        o.log
            .iter()
            .map(|r| (r.train_loss, r.val_oa, r.val_miou))
            .collect::<Vec<_>>()
    };
    assert_eq!(curve(&base), curve(&other));
    assert_eq!(base.best_epoch, other.best_epoch);
    assert_eq!(base.bundle.stats, other.bundle.stats);
    assert_eq!(
        base.bundle.to_checkpoint().to_bytes(),
        other.bundle.to_checkpoint().to_bytes()
    );
    assert_ne!(base.test.predictions, other.test.predictions);
}

#[test]
fn checkpoint_reload_reproduces_evaluation_bit_for_bit() {
    let data = small_data(4);
    let dir = tempfile::tempdir().unwrap();
    let run = train(&small_model(4, 4), &quick(), &data, Some(dir.path())).unwrap();
    let path = dir.path().join("best.psta");
    let loaded = ModelBundle::load(&path).unwrap();
    assert_eq!(
        loaded.meta("checkpoint.epoch"),
        Some(run.best_epoch.to_string().as_str())
    );
    assert_eq!(
        loaded.to_checkpoint().to_bytes(),
        std::fs::read(&path).unwrap()
    );
    let test: Vec<_> = data
        .split(0)
        .unwrap()
        .test
        .iter()
        .map(|&i| &data.records[i])
        .collect();
    let again = evaluate(&loaded.model, &loaded.stats, &test, 16, 1).unwrap();
    assert_eq!(again, run.test);
    let threaded = evaluate(&loaded.model, &loaded.stats, &test, 7, 3).unwrap();
    assert_eq!(threaded, run.test);
}

#[test]
fn evaluation_rejects_foreign_class_counts() {
    let data = small_data(4);
    let model = Classifier::<f32>::new(&small_model(3, 4), 0).unwrap();
    let stats = NormalizationStats::compute(&data.records).unwrap();
    let recs: Vec<_> = data.records.iter().collect();
    assert!(matches!(
        evaluate(&model, &stats, &recs, 16, 1),
        Err(pse_tae::Error::ClassMismatch { .. })
    ));
}

#[test]
fn positional_encoding_off_trains_and_round_trips() {
    let data = small_data(6);
    let mut m = small_model(4, 4);
    m.tae.positional_encoding = false;
    let run = train(
        &m,
        &TrainConfig {
            epochs: 1,
            ..quick()
        },
        &data,
        None,
    )
    .unwrap();
    let ck = run.bundle.to_checkpoint();
    let back =
        ModelBundle::from_checkpoint(&pse_tae::ad::Checkpoint::from_bytes(&ck.to_bytes()).unwrap())
            .unwrap();
    assert!(!back.model.cfg.tae.positional_encoding);
    assert_eq!(back.to_checkpoint().to_bytes(), ck.to_bytes());
}
