use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmspace::gam::{AdditiveProblem, TermSpec};
use pmspace::splines::tps_basis_k;
use pmspace::stm::{fit_model, FitOptions, Panel};
use pmspace::visibility::{run_stochastic_em, EmConfig};
use pmspace::Point;
use pmspace_bench::reference_dataset;

fn scattered(n: usize, seed: u64) -> (Vec<Point>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point> = (0..n)
        .map(|_| [rng.random_range(-500.0..500.0), rng.random_range(-400.0..400.0)])
        .collect();
    let y = pts
        .iter()
        .map(|p| (p[0] / 200.0).sin() + (p[1] / 300.0).cos() + 0.2 * rng.random_range(-1.0..1.0))
        .collect();
    (pts, y)
}

fn gcv_surface(c: &mut Criterion) {
    let (pts, y) = scattered(400, 1);
    let problem = AdditiveProblem::new(
        vec![TermSpec::new("s", tps_basis_k(&pts, 100).unwrap())],
        vec![],
        None,
    )
    .unwrap();
    c.bench_function("gcv_tps_n400_k100", |b| b.iter(|| problem.fit(black_box(&y)).unwrap()));
}

fn two_stage(c: &mut Criterion) {
    let ds = reference_dataset();
    let panel = Panel::from_sites(&ds.sites, ds.observations.clone()).unwrap();
    let tv = vec!["temp".to_string(), "wind".to_string()];
    let ti = vec!["urban".to_string()];
    let mut group = c.benchmark_group("two_stage");
    group.sample_size(10);
    group.bench_function("reference_fit", |b| {
        b.iter(|| fit_model(&panel, &ds.covariates, &tv, &ti, ds.projection, &FitOptions::default()).unwrap())
    });
    group.finish();
}

fn stochastic_em(c: &mut Criterion) {
    let (pts, y) = scattered(60, 2);
    let problem = AdditiveProblem::new(
        vec![TermSpec::new("s", tps_basis_k(&pts, 60).unwrap())],
        vec![],
        None,
    )
    .unwrap();
    let lb: Vec<f64> = y.iter().map(|v| v - 0.3).collect();
    let ub: Vec<f64> = y.iter().map(|v| v + 0.3).collect();
    let config = EmConfig::default();
    let mut group = c.benchmark_group("stochastic_em");
    group.sample_size(10);
    group.bench_function("daily_surface_60_stations", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut rng| run_stochastic_em(&problem, &lb, &ub, &config, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, gcv_surface, two_stage, stochastic_em);
criterion_main!(benches);
