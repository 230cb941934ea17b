use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mmfuse::diffcore::Tape;
use mmfuse::introspect::{mann_whitney_rbc, smoothgrad, SmoothGradConfig};
use mmfuse::model::FusionModel;
use mmfuse::objectives::build_loss;
use mmfuse::probe::{fit_logreg, roc_auc, ProbeConfig};
use mmfuse::rng::stream;
use mmfuse::similarity::{linear_cka, svcca, SVCCA_VAR_KEEP};
use mmfuse::{EncoderConfig, ObjectiveGraph, Tensor, TrainConfig};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn training_step(c: &mut Criterion) {
    let enc = EncoderConfig::default();
    let critic = TrainConfig::default().critic;
    let mut group = c.benchmark_group("loss_and_gradient");
    for preset in ["L", "S", "CL-CS", "S-AE"] {
        let graph = ObjectiveGraph::preset(preset).unwrap();
        let model = FusionModel::init(&enc, &graph, 0).unwrap();
        let batch = [random(&[64, 16, 16], 1), random(&[64, 16, 16], 2)];
        group.bench_function(preset, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let x = [tape.constant(batch[0].clone()), tape.constant(batch[1].clone())];
                let views = model.views(&mut tape, &bound, &graph, x, None).unwrap();
                let report = build_loss(&mut tape, &graph, &views, &critic).unwrap();
                black_box(tape.backward(report.total).unwrap());
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let x = random(&[400, 64], 3);
    let y: Vec<bool> = x.data().chunks(64).map(|r| r[0] + 0.3 * r[1] > 0.0).collect();
    c.bench_function("fit_logreg_400x64", |b| b.iter(|| black_box(fit_logreg(&x, &y, &ProbeConfig::default()).unwrap())));
    let scores: Vec<f64> = x.data().iter().step_by(64).copied().collect();
    c.bench_function("roc_auc_400", |b| b.iter(|| black_box(roc_auc(&scores, &y).unwrap())));
    let z = random(&[400, 64], 4);
    c.bench_function("linear_cka_400x64", |b| b.iter(|| black_box(linear_cka(&x, &z).unwrap())));
    c.bench_function("svcca_400x64", |b| b.iter(|| black_box(svcca(&x, &z, SVCCA_VAR_KEEP).unwrap())));
}

fn introspection(c: &mut Criterion) {
    let enc = EncoderConfig::default();
    let model = FusionModel::init(&enc, &ObjectiveGraph::preset("S").unwrap(), 0).unwrap();
    let image = random(&[16, 16], 5);
    let dims: Vec<usize> = (0..enc.d_z).collect();
    let cfg = SmoothGradConfig::default();
    c.bench_function("smoothgrad_all_dims", |b| b.iter(|| black_box(smoothgrad(&model, 0, &image, &dims, &cfg, 0).unwrap())));
    c.bench_function("mann_whitney_60x60", |b| {
        b.iter_batched(
            || (random(&[60], 6).into_data(), random(&[60], 7).into_data()),
            |(a, b)| black_box(mann_whitney_rbc(&a, &b).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, training_step, evaluation, introspection);
criterion_main!(benches);
