//! Sequential versus rayon execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deepdive::exec::Execution;
use deepdive::rng::substream;
use deepdive::verification::{run_suite, verify_elbo_identity, verify_kl_chain, KlChainSpec, KlMethod, LinearGaussianToy, PriorSpec};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn kl_chain_quadrature(c: &mut Criterion) {
    let q = KlChainSpec { m_b: 0.4, s_b: 0.8, alpha: 0.7, c: -0.2, s_a: 0.6 };
    let mut g = c.benchmark_group("kl_chain_quadrature");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| verify_kl_chain(&q, PriorSpec::Factorized, KlMethod::Quadrature, exec).unwrap())
        });
    }
    g.finish();
}

fn elbo_monte_carlo(c: &mut Criterion) {
    let toy = LinearGaussianToy::random(&mut substream(1, "bench"), 3, 4, 2);
    let mut g = c.benchmark_group("elbo_identity_1e5");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| verify_elbo_identity(&toy, 100_000, 0, exec).unwrap()));
    }
    g.finish();
}

fn suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("verification_suite");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_suite(0, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kl_chain_quadrature, elbo_monte_carlo, suite);
criterion_main!(benches);
