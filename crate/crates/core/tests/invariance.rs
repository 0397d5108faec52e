//! Set-function and attention properties over many random trials.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pse_tae::ad::{Mode, ParamStore, Tape};
use pse_tae::pse::{
    sample_pixels, PixelSample, PixelSetEncoder, PixelSetInput, Pooling, PseConfig,
};
use pse_tae::tae::{MasterQuery, SequenceInput, TaeConfig, TemporalAttentionEncoder};

fn encoder(rng: &mut ChaCha8Rng) -> (PixelSetEncoder, ParamStore<f32>) {
    let c = rng.random_range(1..=10);
    let cfg = PseConfig {
        sample_size: rng.random_range(2..=64),
        mlp1: vec![c, rng.random_range(2..=32), rng.random_range(2..=32)],
        pooling: if rng.random_bool(0.5) {
            Pooling::MeanStd
        } else {
            Pooling::Mean
        },
        mlp2: vec![rng.random_range(2..=32)],
        include_geometric: rng.random_bool(0.5),
    };
    let mut store = ParamStore::new();
    let pse = PixelSetEncoder::new(&mut store, &cfg, rng).unwrap();
    // Non-trivial running statistics so eval-mode batchnorm is not the identity.
    for e in store.entries().to_vec() {
        if e.name.ends_with("running_mean") || e.name.ends_with("running_var") {
            let id = store.find(&e.name).unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = if e.name.ends_with("var") {
                    rng.random_range(0.5..2.0)
                } else {
                    rng.random_range(-0.5..0.5)
                };
            }
        }
    }
    (pse, store)
}

/// One parcel of `n` pixels over `t` dates gathered through `sample`.
fn input(
    pse: &PixelSetEncoder,
    t: usize,
    n: usize,
    raw: &[f32],
    sample: &PixelSample,
    mask: Vec<bool>,
    geo: &[f32],
) -> PixelSetInput<f32> {
    let c = pse.cfg.channels();
    let mut pixels = Vec::new();
    for ti in 0..t {
        for &i in &sample.indices {
            for ci in 0..c {
                pixels.push(raw[(ti * c + ci) * n + i]);
            }
        }
    }
    PixelSetInput {
        batch: 1,
        dates: t,
        sample_size: sample.indices.len(),
        channels: c,
        pixels,
        pool_mask: mask,
        geo: geo.to_vec(),
    }
}

fn embed(pse: &PixelSetEncoder, store: &ParamStore<f32>, x: &PixelSetInput<f32>) -> Vec<f32> {
    let mut tape = Tape::new();
    let e = pse
        .forward(&mut tape, store, x, Mode::Eval, &mut Vec::new())
        .unwrap();
    tape.value(e).data().to_vec()
}

fn max_dev(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn raw_parcel(rng: &mut ChaCha8Rng, t: usize, c: usize, n: usize) -> (Vec<f32>, Vec<f32>) {
    let raw = (0..t * c * n)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let geo = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
    (raw, geo)
}

#[test]
fn pse_is_invariant_to_pixel_order() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let (pse, store) = encoder(&mut rng);
        let s = pse.cfg.sample_size;
        let t = rng.random_range(1..=4);
        let n = rng.random_range(1..=2 * s);
        let (raw, geo) = raw_parcel(&mut rng, t, pse.cfg.channels(), n);
        let sample = sample_pixels(n, s, &mut rng).unwrap();
        let mask = sample.pool_mask();
        let base = embed(
            &pse,
            &store,
            &input(&pse, t, n, &raw, &sample, mask.clone(), &geo),
        );

        let mut perm: Vec<usize> = (0..s).collect();
        perm.shuffle(&mut rng);
        let shuffled = PixelSample {
            indices: perm.iter().map(|&j| sample.indices[j]).collect(),
            valid_count: sample.valid_count,
        };
        let shuffled_mask = perm.iter().map(|&j| mask[j]).collect();
        let out = embed(
            &pse,
            &store,
            &input(&pse, t, n, &raw, &shuffled, shuffled_mask, &geo),
        );
        worst = worst.max(max_dev(&base, &out));
    }
    eprintln!(
        "max deviation under permutation: {worst:e} ({:?})",
        start.elapsed()
    );
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn pse_ignores_repeated_pixels() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let (pse, store) = encoder(&mut rng);
        let s = pse.cfg.sample_size;
        let t = rng.random_range(1..=4);
        // Small parcels: every pixel appears at least once, some twice or more.
        let n = rng.random_range(1..s);
        let (raw, geo) = raw_parcel(&mut rng, t, pse.cfg.channels(), n);
        let a = sample_pixels(n, s, &mut rng).unwrap();
        let ea = embed(
            &pse,
            &store,
            &input(&pse, t, n, &raw, &a, a.pool_mask(), &geo),
        );

        // Any other arrangement of repeats, with the mask from first occurrences.
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((n..s).map(|_| rng.random_range(0..n)));
        idx.shuffle(&mut rng);
        let b = PixelSample {
            indices: idx,
            valid_count: n,
        };
        let eb = embed(
            &pse,
            &store,
            &input(&pse, t, n, &raw, &b, b.pool_mask(), &geo),
        );
        worst = worst.max(max_dev(&ea, &eb));

        // Exactly the distinct pixels, no repeats at all.
        let distinct = PixelSample {
            indices: (0..n).collect(),
            valid_count: n,
        };
        let ec = embed(
            &pse,
            &store,
            &input(&pse, t, n, &raw, &distinct, vec![true; n], &geo),
        );
        worst = worst.max(max_dev(&ea, &ec));
    }
    eprintln!(
        "max deviation under repetition: {worst:e} ({:?})",
        start.elapsed()
    );
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn attention_weights_are_distributions() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let d_model = rng.random_range(2..=16);
        let cfg = TaeConfig {
            d_model,
            d_k: rng.random_range(1..=8),
            heads: rng.random_range(1..=4),
            master_query: [MasterQuery::Mean, MasterQuery::Max, MasterQuery::Last][trial % 3],
            positional_encoding: rng.random_bool(0.8),
            mlp3: vec![rng.random_range(2..=8)],
            ..TaeConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let tae = TemporalAttentionEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let (b, t) = (rng.random_range(1..=4), rng.random_range(1..=12));
        let scale = if rng.random_bool(0.2) { 30.0 } else { 2.0 };
        let e: Vec<f32> = (0..b * t * d_model)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let mut days = Vec::with_capacity(b * t);
        for _ in 0..b {
            let mut d = 0u32;
            for ti in 0..t {
                if ti > 0 {
                    d += rng.random_range(0..40);
                }
                days.push(d);
            }
        }
        let mut tape = Tape::new();
        let emb = tape.constant(pse_tae::ad::Tensor::new(vec![b, t, d_model], e).unwrap());
        let seq = SequenceInput {
            embeddings: emb,
            days: &days,
            time_mask: None,
        };
        let (_, a) = tae
            .forward(&mut tape, &store, &seq, Mode::Eval, &mut Vec::new())
            .unwrap();
        let a = tape.value(a);
        assert_eq!(a.shape(), [b, cfg.heads, t]);
        for row in a.data().chunks(t) {
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)), "{row:?}");
            let sum: f64 = row.iter().map(|&w| w as f64).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    eprintln!(
        "max |sum - 1| over heads: {worst:e} ({:?})",
        start.elapsed()
    );
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn eval_output_does_not_depend_on_batch_mates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (pse, store) = encoder(&mut rng);
        let s = pse.cfg.sample_size;
        let c = pse.cfg.channels();
        let t = 3;
        let parcels: Vec<_> = (0..3)
            .map(|_| {
                let n = rng.random_range(1..=2 * s);
                let (raw, geo) = raw_parcel(&mut rng, t, c, n);
                let sample = sample_pixels(n, s, &mut rng).unwrap();
                let mask = sample.pool_mask();
                input(&pse, t, n, &raw, &sample, mask, &geo)
            })
            .collect();
        let joint = PixelSetInput {
            batch: 3,
            dates: t,
            sample_size: s,
            channels: c,
            pixels: parcels.iter().flat_map(|p| p.pixels.clone()).collect(),
            pool_mask: parcels.iter().flat_map(|p| p.pool_mask.clone()).collect(),
            geo: parcels.iter().flat_map(|p| p.geo.clone()).collect(),
        };
        let all = embed(&pse, &store, &joint);
        let per = all.len() / 3;
        for (i, p) in parcels.iter().enumerate() {
            assert_eq!(embed(&pse, &store, p), all[i * per..(i + 1) * per]);
        }
    }
}
