use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mapcomm::{
    instantiate_operator, path_weights, plan, raw_window_operator, select_abstraction,
    solve_history_qp, synthetic_map, window_at, BeliefState, Codebook, Dims, EncoderParams,
    GridMap, HistoryStack, NoiseModel, PlannerParams, Pos, SensedMap, SyntheticParams,
};
use std::hint::black_box;

fn world(side: usize) -> GridMap {
    synthetic_map(Dims::new(side, side), 3, &SyntheticParams::default()).unwrap()
}

fn kalman(c: &mut Criterion) {
    let map = world(128);
    let dims = map.dims();
    let book = Codebook::builtin_16();
    let mut group = c.benchmark_group("kalman_update");
    for id in [1u32, 2, 3] {
        let op = instantiate_operator(book.get(id).unwrap(), dims, Pos::new(64, 64)).unwrap();
        let obs = op.apply(map.values());
        let noise = NoiseModel::new(1e-4).unwrap();
        group.bench_with_input(BenchmarkId::new("template", id), &op, |b, op| {
            b.iter_batched(
                || BeliefState::new(dims.len(), 0.5, 1.0).unwrap(),
                |mut belief| {
                    belief.kalman_update(op, &obs, &noise).unwrap();
                    belief
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let map = world(64);
    let dims = map.dims();
    let sensor = Pos::new(20, 20);
    let mut sensed = SensedMap::new(dims.len());
    sensed.record(
        &window_at(dims, sensor, 15, 15).unwrap().cells,
        map.values(),
    );
    let mut belief = BeliefState::new(dims.len(), 0.1, 1.0).unwrap();
    let actor = raw_window_operator(&window_at(dims, Pos::new(4, 4), 5, 5).unwrap(), dims);
    belief
        .kalman_update(
            &actor,
            &actor.apply(map.values()),
            &NoiseModel::new(1e-6).unwrap(),
        )
        .unwrap();
    let weights = path_weights(&[Pos::new(4, 4), Pos::new(58, 58)], dims, 20.0, false).unwrap();
    let book = Codebook::builtin_16();
    let params = EncoderParams::default();
    let channel = NoiseModel::new(1e-5).unwrap();
    c.bench_function("select_abstraction_16", |b| {
        b.iter(|| {
            select_abstraction(
                &belief, &sensed, &weights, sensor, dims, &book, &params, &channel,
            )
            .unwrap()
        })
    });
}

fn planner(c: &mut Criterion) {
    let params = PlannerParams::new(0.025, 0.501).unwrap();
    let mut group = c.benchmark_group("plan");
    for side in [64usize, 128, 256] {
        let map = world(side);
        let goal = Pos::new(side - 1, side - 1);
        group.bench_with_input(BenchmarkId::from_parameter(side), &map, |b, map| {
            b.iter(|| {
                plan(
                    black_box(map.values()),
                    map.dims(),
                    Pos::new(0, 0),
                    goal,
                    &params,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn history_qp(c: &mut Criterion) {
    let map = world(48);
    let dims = map.dims();
    let book = Codebook::builtin_16();
    let mut group = c.benchmark_group("history_qp");
    group.sample_size(10);
    for steps in [5usize, 10, 20] {
        let mut stack = HistoryStack::new(vec![0.5; dims.len()]);
        for s in 0..steps {
            let pos = Pos::new(8 + (s * 3) % 32, 8 + (s * 7) % 32);
            let t = &book.templates()[s % book.len()];
            let op = instantiate_operator(t, dims, pos).unwrap();
            stack.push(&op, &op.apply(map.values())).unwrap();
        }
        group.bench_with_input(BenchmarkId::from_parameter(steps), &stack, |b, stack| {
            b.iter(|| solve_history_qp(stack))
        });
    }
    group.finish();
}

criterion_group!(benches, kalman, encoder, planner, history_qp);
criterion_main!(benches);
