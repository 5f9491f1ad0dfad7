use std::hint::black_box;

use causalqa::train::Trainer;
use causalqa_bench::Fixture;
use criterion::{criterion_group, criterion_main, Criterion};

fn steps(c: &mut Criterion) {
    let f = Fixture::new(500, 3, 16, 64);
    let env = f.env();
    let questions = f.linked_questions(&env);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("rl_step_b16", |b| {
        let mut trainer = Trainer::new(&env, questions.clone(), &f.config).unwrap();
        b.iter(|| black_box(trainer.rl_step().unwrap()))
    });
    group.bench_function("supervised_step_b16", |b| {
        let mut trainer = Trainer::new(&env, questions.clone(), &f.config).unwrap();
        b.iter(|| black_box(trainer.supervised_step().unwrap()))
    });
    group.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
