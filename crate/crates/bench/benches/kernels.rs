use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use shiftedit_core::network::one_hot;
use shiftedit_core::{EditMethod, EditPlan, EditTask, Tape};
use shiftedit_bench::{fixture, CLASSES};

fn forward_backward(c: &mut Criterion) {
    let (ck, val, _) = fixture();
    let net = &ck.network;
    let x = val.images().slice_rows(0, 32);
    let y = one_hot(&val.labels()[..32], CLASSES);

    c.bench_function("reference_forward_32", |b| b.iter(|| net.forward(&x).unwrap()));
    c.bench_function("reference_forward_backward_32", |b| {
        b.iter_batched(
            Tape::new,
            |mut tape| {
                let vars = net.register(&mut tape);
                let input = tape.leaf(x.clone());
                let target = tape.leaf(y.clone());
                let logits = net.record(&mut tape, &vars, input, 0).unwrap();
                let probs = tape.softmax(logits).unwrap();
                let loss = tape.mse(probs, target).unwrap();
                tape.backward(loss).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn edits(c: &mut Criterion) {
    let (ck, val, edit) = fixture();
    let task = EditTask::new(&ck, &edit, &val).unwrap();
    let mut group = c.benchmark_group("edit_10_steps");
    group.sample_size(10);
    for method in EditMethod::ALL {
        let layer = if method == EditMethod::Full { 0 } else { 2 };
        let plan = EditPlan { steps: 10, ..EditPlan::new(method, layer, 0.3, 0) };
        group.bench_function(method.name(), |b| b.iter(|| task.run(&plan).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward_backward, edits);
criterion_main!(benches);
