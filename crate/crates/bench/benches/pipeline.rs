//! Benchmarks for the hot paths: chain construction, batched
//! forward/backward, and candidate ranking.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecechain_core::data::augment_reciprocal;
use ecechain_core::ece::{build_ece, Ece, EceConfig, NeighborIndex};
use ecechain_core::eval::{rank_target, TiePolicy};
use ecechain_core::model::{forward_loss, BoundModel, ModelDims, ModelParams};
use ecechain_core::synthetic::PeriodicSpec;
use ecechain_core::tensor::Graph;

fn chain_fixture() -> (Vec<Ece>, ModelParams<f32>) {
    let spec = PeriodicSpec::default_small();
    let dataset = spec.dataset();
    let index = NeighborIndex::build(&dataset.splits.train, &dataset.vocabs);
    let queries = augment_reciprocal(&dataset.splits.train, &dataset.vocabs).unwrap();
    let config = EceConfig { max_neighbors: 8, history_only: true, strict_filtering: false };

    let eces: Vec<Ece> = queries
        .iter()
        .take(32)
        .enumerate()
        .map(|(i, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            build_ece(q, &index, &config, true, &mut rng)
        })
        .collect();

    let dims = ModelDims {
        width: 32,
        heads: 4,
        hidden: 128,
        encoder_units: 2,
        mixer_units: 2,
        max_neighbors: 8,
        entities: dataset.vocabs.entity_count(),
        base_relations: dataset.vocabs.relation_count(),
        times: dataset.vocabs.time_count(),
        ln_eps: 1e-5,
    };
    let params = ModelParams::<f32>::init(dims, 0).unwrap();
    (eces, params)
}

fn bench_chain_build(c: &mut Criterion) {
    let spec = PeriodicSpec::default_small();
    let dataset = spec.dataset();
    let index = NeighborIndex::build(&dataset.splits.train, &dataset.vocabs);
    let queries = augment_reciprocal(&dataset.splits.train, &dataset.vocabs).unwrap();
    let config = EceConfig { max_neighbors: 8, history_only: true, strict_filtering: false };

    c.bench_function("build_ece_800_queries", |b| {
        b.iter(|| {
            let mut count = 0usize;
            for (i, q) in queries.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                count += build_ece(q, &index, &config, true, &mut rng).branch_count();
            }
            count
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let (eces, params) = chain_fixture();

    c.bench_function("forward_loss_chunk32", |b| {
        b.iter(|| {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundModel::bind(&mut g, &params);
            let (_, loss) = forward_loss(&mut g, &bound, &eces, 1.0, eces.len()).unwrap();
            g.value(loss.total).item().unwrap()
        })
    });

    c.bench_function("forward_backward_chunk32", |b| {
        b.iter(|| {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundModel::bind(&mut g, &params);
            let (_, loss) = forward_loss(&mut g, &bound, &eces, 1.0, eces.len()).unwrap();
            g.backward(loss.total).unwrap();
            bound.take_grads(&mut g).coord_count()
        })
    });
}

fn bench_ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..7128).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    c.bench_function("rank_target_1000x7128", |b| {
        b.iter_batched(
            || scores.clone(),
            |scores| {
                let mut acc = 0.0f64;
                for (i, row) in scores.iter().enumerate() {
                    acc += rank_target(row, i % 7128, &[i % 50], TiePolicy::Mean);
                }
                acc
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_chain_build, bench_forward_backward, bench_ranking);
criterion_main!(benches);
