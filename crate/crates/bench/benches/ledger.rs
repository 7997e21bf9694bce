use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use govsim_core::{Ledger, SimTime};

fn append(c: &mut Criterion) {
    let payload = vec![b'x'; 256];
    c.bench_function("ledger/append_1k", |b| {
        b.iter_batched(
            Ledger::in_memory,
            |mut ledger| {
                for i in 0..1000u64 {
                    black_box(ledger.append(SimTime::new(i, 0), "bench.entry", payload.clone()).unwrap());
                }
                ledger
            },
            BatchSize::SmallInput,
        )
    });
}

fn verify(c: &mut Criterion) {
    let mut ledger = Ledger::in_memory();
    for i in 0..1000u64 {
        ledger.append(SimTime::new(i, 0), "bench.entry", vec![b'x'; 256]).unwrap();
    }
    c.bench_function("ledger/verify_1k", |b| b.iter(|| black_box(ledger.verify())));
}

criterion_group!(benches, append, verify);
criterion_main!(benches);
