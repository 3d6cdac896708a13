use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfbc_core::annotator::{AnnotatorBackend, PromptKind, ScriptedOracle, MARKOV_PROMPT};
use sfbc_core::env::{render, step, Action, State, DEFAULT_DT};
use sfbc_core::learner::{loss, Batch, Mlp};
use sfbc_core::sfo::{filter_retrospective, FilterConfig};
use sfbc_core::WeightedSample;

fn random_samples(n: usize, seed: u64) -> Vec<WeightedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|t| WeightedSample {
            state: State::new(rng.random_range(-3.1..3.1), rng.random_range(-8.0..8.0)),
            action: Action::new(rng.random_range(-2.0..2.0)),
            weight: rng.random_range(0.0..=1.0),
            traj_id: 0,
            segment: 0,
            t,
        })
        .collect()
}

fn dynamics(c: &mut Criterion) {
    c.bench_function("env_step", |b| {
        let s = State::new(0.7, -1.3);
        b.iter(|| step(black_box(s), black_box(Action::new(1.2)), DEFAULT_DT))
    });
}

fn rendering(c: &mut Criterion) {
    let s = State::new(2.1, 0.0);
    c.bench_function("render_256", |b| b.iter(|| render(black_box(&s), 256, 256)));
    let frame = render(&s, 256, 256).unwrap();
    c.bench_function("encode_png_256", |b| b.iter(|| frame.encode_png()));
}

fn network(c: &mut Criterion) {
    let batch = Batch::from_samples(&random_samples(256, 1));
    for hidden in [[32, 32], [256, 256]] {
        let net = Mlp::init(&hidden, &mut ChaCha8Rng::seed_from_u64(2));
        let name = format!("loss_and_grad_b256_h{}", hidden[0]);
        c.bench_function(&name, |b| b.iter(|| loss(black_box(&net), &batch, 0.1)));
    }
    let net = Mlp::init(&[256, 256], &mut ChaCha8Rng::seed_from_u64(3));
    c.bench_function("act_single_h256", |b| {
        b.iter(|| net.act(black_box(&State::new(0.2, 0.1))))
    });
}

fn annotation(c: &mut Criterion) {
    let states: Vec<State> = (0..5).map(|i| State::new(2.5 + 0.1 * i as f64, 1.0)).collect();
    c.bench_function("oracle_score", |b| {
        b.iter(|| ScriptedOracle.score(black_box(&states), PromptKind::Markov, MARKOV_PROMPT))
    });
    let cfg = FilterConfig::default();
    c.bench_function("filter_retrospective_6", |b| {
        b.iter_batched(
            || vec![0.9, 0.05, 0.5, 0.7, 0.02, 0.4],
            |p| filter_retrospective(&p, &cfg),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, dynamics, rendering, network, annotation);
criterion_main!(benches);
