use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use icrl_core::codec::{encode_episode, Vocab};
use icrl_core::datagen::{train_tabular, Episode};
use icrl_core::env::MapSpec;
use icrl_core::model::{infer_q, init, IncrementalState, ModelConfig};
use icrl_core::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f32>::randn(vec![768, 128], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(vec![128, 512], 1.0, &mut rng);
    c.bench_function("matmul 768x128x512 f32", |bench| {
        bench.iter_batched(
            || (a.clone(), b.clone()),
            |(a, b)| {
                let mut tape = Tape::new();
                let ia = tape.constant(a);
                let ib = tape.constant(b);
                black_box(tape.matmul(ia, ib).unwrap());
            },
            BatchSize::SmallInput,
        )
    });
}

fn desk_model() -> (ModelConfig, Vec<u16>) {
    let cfg = ModelConfig {
        max_context: 768,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens: Vec<u16> = (0..768)
        .map(|_| rng.random_range(0..Vocab::SIZE as u16))
        .collect();
    (cfg, tokens)
}

fn bench_forward(c: &mut Criterion) {
    let (cfg, tokens) = desk_model();
    let params = init::<f32>(&cfg, 3).unwrap();
    let positions: Vec<usize> = (8..768).step_by(10).collect();
    c.bench_function("forward 768 tokens desk model", |bench| {
        bench.iter(|| black_box(infer_q(&params, &cfg, &tokens, &positions).unwrap()))
    });
}

fn bench_incremental_step(c: &mut Criterion) {
    let (cfg, tokens) = desk_model();
    let params = init::<f32>(&cfg, 4).unwrap();
    c.bench_function("incremental append 10 tokens at 700 context", |bench| {
        bench.iter_batched(
            || {
                let mut inc = IncrementalState::new(&cfg);
                inc.append(&params, &tokens[..700]).unwrap();
                inc
            },
            |mut inc| {
                inc.append(&params, black_box(&tokens[700..710])).unwrap();
                black_box(inc.q_last(&params).unwrap());
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_codec_and_tabular(c: &mut Criterion) {
    let spec = MapSpec::new(4, 4, 0, 15, [5, 7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, episodes) = train_tabular(&spec, 0, 50, &mut rng);
    let ep: Episode = episodes.into_iter().max_by_key(|e| e.steps.len()).unwrap();
    c.bench_function("encode long episode", |bench| {
        bench.iter(|| black_box(encode_episode(black_box(&ep)).unwrap()))
    });
    c.bench_function("tabular training 100 episodes 4x4", |bench| {
        bench.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            black_box(train_tabular(&spec, 0, 100, &mut rng))
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward,
    bench_incremental_step,
    bench_codec_and_tabular
);
criterion_main!(benches);
