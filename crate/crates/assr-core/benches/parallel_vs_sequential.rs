//! Compares the data-parallel map against the sequential fallback on the two
//! batch hot paths: time-frequency feature extraction and DBN feature
//! extraction. `maybe_par_map` is whatever the build selected (rayon with the
//! default `parallel` feature), `seq_map` is the fallback body, so the pair
//! measures exactly what the feature flag swaps.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use assr_core::dbn::{extract_unsup, train_dbn, TrainConfig};
use assr_core::par::{maybe_par_map, seq_map};
use assr_core::preprocess::SubEpoch;
use assr_core::stage::StageLabel;
use assr_core::tf::{extract_tf, FeatureConfig};

const FS: f64 = 64.0;
const SUB_LEN: usize = 384;

fn synth_sub_epochs(n: usize, seed: u64) -> Vec<SubEpoch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let f = 1.0 + (i % 12) as f64;
            let samples = (0..SUB_LEN)
                .map(|t| {
                    let phase = 2.0 * std::f64::consts::PI * f * t as f64 / FS;
                    30.0 * phase.sin() + rng.gen_range(-5.0..5.0)
                })
                .collect();
            SubEpoch {
                epoch_index: i / 5,
                slot: i % 5,
                samples,
                label: StageLabel::Awake,
            }
        })
        .collect()
}

fn bench_tf_extraction(c: &mut Criterion) {
    let cfg = FeatureConfig::default();
    let mut group = c.benchmark_group("tf_feature_extraction");
    group.sample_size(10);
    for &n in &[200usize, 1000] {
        let subs = synth_sub_epochs(n, 7);
        group.bench_with_input(BenchmarkId::new("parallel", n), &subs, |b, subs| {
            b.iter(|| maybe_par_map(subs.iter().collect(), |s| extract_tf(s, &cfg, FS)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &subs, |b, subs| {
            b.iter(|| seq_map(subs.iter().collect(), |s| extract_tf(s, &cfg, FS)))
        });
    }
    group.finish();
}

fn bench_unsup_extraction(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = Array2::from_shape_fn((240, SUB_LEN), |_| rng.gen_range(0.0..1.0f64));
    let cfg = TrainConfig {
        epochs_per_layer: 2,
        fine_tune_epochs: 0,
        seed: 11,
        ..TrainConfig::default()
    };
    let model = train_dbn(train.view(), &[20, 15], &cfg).unwrap();
    let rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..SUB_LEN).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();

    let mut group = c.benchmark_group("dbn_feature_extraction");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| maybe_par_map(rows.iter().collect(), |r| extract_unsup(&model, r).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| seq_map(rows.iter().collect(), |r| extract_unsup(&model, r).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_tf_extraction, bench_unsup_extraction);
criterion_main!(benches);
