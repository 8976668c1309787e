//! Sequential vs rayon execution of the data-parallel kernels.
//!
//! cargo bench -p ccas-core --bench kernels

use std::collections::BTreeMap;
use std::hint::black_box;

use ccas_core::eval::{
    compare_configurations_with, BBox, DetectionSet, EvalOptions, GroundTruthSet, ScoredBox,
};
use ccas_core::similarity::{build_similarity_matrix_with, LabeledEmbedding};
use ccas_core::{rank_prompts_with, CcasInputs, EmbeddingVector, Execution, ScoreVariant};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 384;
const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn embedding(rng: &mut ChaCha8Rng) -> EmbeddingVector {
    EmbeddingVector::new(
        (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
        "bench",
    )
    .unwrap()
}

fn pool(rng: &mut ChaCha8Rng, prefix: &str, n: usize) -> Vec<LabeledEmbedding> {
    (0..n)
        .map(|i| (format!("{prefix} {i}"), embedding(rng)))
        .collect()
}

fn similarity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("similarity_matrix");
    for n in [25, 100, 400] {
        let targets = pool(&mut rng, "t", n);
        let confounders = vec![pool(&mut rng, "a", n), pool(&mut rng, "b", n)];
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| {
                    build_similarity_matrix_with(exec, black_box(&targets), black_box(&confounders))
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("rank_prompts");
    for n in [25, 100, 400] {
        let inputs = CcasInputs::new(
            embedding(&mut rng),
            pool(&mut rng, "t", n),
            vec![
                pool(&mut rng, "a", n),
                pool(&mut rng, "b", n),
                pool(&mut rng, "c", n),
            ],
        )
        .unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| rank_prompts_with(exec, black_box(&inputs), ScoreVariant::Max).unwrap())
            });
        }
    }
    group.finish();
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..600.0);
    let y = rng.random_range(0.0..400.0);
    BBox::new(
        x,
        y,
        x + rng.random_range(10.0..80.0),
        y + rng.random_range(10.0..80.0),
    )
    .unwrap()
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<String> = (0..300).map(|i| format!("img_{i:04}")).collect();
    let gt = GroundTruthSet {
        class_name: "goggles".into(),
        images: images
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    (0..rng.random_range(0..4))
                        .map(|_| random_box(&mut rng))
                        .collect(),
                )
            })
            .collect::<BTreeMap<_, _>>(),
    };
    let configs: Vec<DetectionSet> = (0..9)
        .map(|k| {
            let mut set = DetectionSet::new(format!("config {k}"));
            for id in &images {
                set.images.insert(id.clone(), vec![]);
                for p in 0..=k % 5 {
                    for _ in 0..rng.random_range(0..6) {
                        let det = ScoredBox::new(
                            random_box(&mut rng),
                            rng.random_range(0.0..1.0),
                            format!("prompt {p}"),
                        );
                        set.push(id.clone(), det.unwrap());
                    }
                }
            }
            set
        })
        .collect();
    let mut group = c.benchmark_group("compare_configurations");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                compare_configurations_with(
                    exec,
                    black_box(&gt),
                    black_box(&configs),
                    EvalOptions::default(),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, similarity, ranking, evaluation);
criterion_main!(benches);
