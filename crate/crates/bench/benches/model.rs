use criterion::{criterion_group, criterion_main, Criterion};
use mvcl_bench::xor_batch;
use mvcl_core::model::{batch_inputs, bind, forward, Model};
use mvcl_core::numerics::Graph;
use mvcl_core::objectives::{total_loss, Stage};
use mvcl_core::views::ViewSet;

fn bench_forward(c: &mut Criterion) {
    let (cfg, data) = xor_batch(32);
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let batch: Vec<&ViewSet> = (0..32).map(|i| data.views(i)).collect();
    let labels: Vec<usize> = (0..32).map(|i| data.label(i).unwrap()).collect();
    let mut group = c.benchmark_group("desk_batch32");
    group.sample_size(20);
    group.bench_function("infer", |b| b.iter(|| model.infer(&batch).unwrap()));
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = bind(&mut g, model.params(), |_| true);
            let inputs = batch_inputs(&mut g, model.config(), &batch).unwrap();
            let out = forward(&mut g, model.config(), &p, inputs).unwrap();
            let spec = mvcl_core::objectives::LossSpec { stage: Stage::Finetune, lambda: 0.0, tau: 0.07, symmetric: false };
            let loss = total_loss(&mut g, out.z, [None; 3], Some(out.logits), Some(&labels), spec).unwrap();
            g.backward(loss.total).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
