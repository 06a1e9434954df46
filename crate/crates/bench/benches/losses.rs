use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use narx_bench::{data, params};
use narx_core::narxnet::{feasible_anchors, input_sensitivities_batch, AnchorBatch, PreparedLoss};
use narx_core::{Objective, OrderCase, RegConfig};

fn gradients(c: &mut Criterion) {
    let d = data();
    let (u, y) = (d.train.u.samples(), d.train.y.samples());
    for case in [OrderCase::Hmo, OrderCase::Omo] {
        let p = params(case);
        let cfg = *p.config();
        let objectives = [
            ("prediction", Objective::Prediction),
            ("regularized_stride4", Objective::Regularized(RegConfig::new(0.7, 5e-5, 50, 4).unwrap())),
            ("simulation", Objective::Simulation),
        ];
        for (name, objective) in objectives {
            let loss = PreparedLoss::new(&cfg, u, y, objective).unwrap();
            c.bench_function(&format!("value_and_grad/{case}/{name}"), |b| {
                b.iter(|| loss.value_and_grad(black_box(&p)).unwrap())
            });
        }
    }
}

fn sensitivities(c: &mut Criterion) {
    let d = data();
    let (u, y) = (d.train.u.samples(), d.train.y.samples());
    let p = params(OrderCase::Hmo);
    let anchors = feasible_anchors(p.config(), u.len(), 50, 1);
    let batch = AnchorBatch::from_record(p.config(), u, y, 50, anchors).unwrap();
    c.bench_function("input_sensitivities/HMO/all_anchors", |b| {
        b.iter(|| input_sensitivities_batch(black_box(&p), &batch).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = gradients, sensitivities
}
criterion_main!(benches);
