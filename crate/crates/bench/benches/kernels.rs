use criterion::{black_box, criterion_group, criterion_main, Criterion};

use dacdm_bench::{denoiser, moons, schedule};
use dacdm_core::diffusion::DenoiserGrads;
use dacdm_core::metrics::{hdh_distance, HypothesisGrid};
use dacdm_core::sampler::{make_plan, Sampler, SolverFormula};
use dacdm_core::Condition;

fn denoiser_forward_backward(c: &mut Criterion) {
    let sched = schedule();
    let model = denoiser(&sched);
    let x = [0.3, -0.2];
    c.bench_function("denoiser_forward", |b| {
        b.iter(|| model.forward(black_box(&x), 50, Condition::class(1)).unwrap())
    });
    c.bench_function("denoiser_forward_backward", |b| {
        b.iter(|| {
            let (out, cache) = model.forward(black_box(&x), 50, Condition::class(1)).unwrap();
            let mut g = DenoiserGrads::zeros_like(&model);
            model.backward_accumulate(&cache, &out, &mut g).unwrap();
            g
        })
    });
}

fn solver(c: &mut Criterion) {
    let sched = schedule();
    let model = denoiser(&sched);
    let sampler = Sampler::new(&model, None, &sched);
    let mut group = c.benchmark_group("solve_one_sample");
    for m in [10, 20, 50] {
        let plan = make_plan(&sched, m).unwrap();
        group.bench_function(format!("M={m}"), |b| {
            b.iter(|| {
                sampler
                    .solve_from(vec![0.5, -1.0], &plan, SolverFormula::Validated, Condition::class(0), 0)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn hdh(c: &mut Criterion) {
    let (s, t) = moons(300, 300);
    let grid = HypothesisGrid::fit(&[&s, &t], 24, 16, 3).unwrap();
    c.bench_function("hdh_distance_384_hypotheses", |b| {
        b.iter(|| hdh_distance(black_box(&s), black_box(&t), &grid).unwrap())
    });
}

criterion_group!(benches, denoiser_forward_backward, solver, hdh);
criterion_main!(benches);
