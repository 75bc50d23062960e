use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mia_bench::{mixture, quick_train};
use mia_core::shadow::{self, ScoreMatrix};
use mia_core::theory::{self, Scan};
use mia_core::{eval, model, AugmentConfig, GibbsConfig, JointUniverse};
use rand::Rng;

fn train(c: &mut Criterion) {
    let data = mixture(10, 100, 1);
    let cfg = quick_train();
    c.bench_function("train_mlp_1000x16_5_epochs", |b| b.iter(|| model::train(&data, &cfg).unwrap()));
}

fn score_matrix(c: &mut Criterion) {
    let data = mixture(10, 50, 2);
    let plan = shadow::make_plan(&data.ids(), 8, 3).unwrap();
    let ens = shadow::train_shadows(&data, &plan, &quick_train()).unwrap();
    let aug = AugmentConfig {
        n_queries: 4,
        noise_scale: 0.1,
    };
    c.bench_function("score_matrix_8x500x4", |b| b.iter(|| shadow::score_matrix(&ens, &data, &aug, 5).unwrap()));
    let m = shadow::score_matrix(&ens, &data, &aug, 5).unwrap();
    c.bench_function("matrix_encode_decode", |b| b.iter(|| ScoreMatrix::from_bytes(&m.to_bytes()).unwrap()));
}

fn roc(c: &mut Criterion) {
    let mut rng = mia_core::seed::rng(4);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = (0..100_000).map(|_| rng.random::<bool>()).collect();
    c.bench_function("roc_1e5", |b| {
        b.iter(|| {
            let curve = eval::roc(&scores, &labels).unwrap();
            (curve.auc(), eval::tpr_at_fpr(&curve, 1e-3).unwrap())
        })
    });
}

fn gibbs(c: &mut Criterion) {
    let u = JointUniverse::random(8, 1.0, 5).unwrap();
    let cfg = GibbsConfig {
        scan: Scan::Systematic,
        sweeps: 20_000,
        burn_in: 1_000,
        seed: 6,
    };
    c.bench_function("gibbs_n8_2e4_sweeps", |b| {
        b.iter_batched(|| cfg.clone(), |cfg| theory::gibbs_sample(&u, &cfg).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = train, score_matrix, roc, gibbs
}
criterion_main!(benches);
