use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use govsim_core::{Order, OrderBook, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn orders(n: usize) -> Vec<Order> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|i| {
            let side = if rng.random::<bool>() { Side::Buy } else { Side::Sell };
            let price = 1000 + rng.random_range(-10..=10);
            Order::limit(i as u64 + 1, (i % 20) as u32, side, price, rng.random_range(1..=10))
        })
        .collect()
}

fn submit(c: &mut Criterion) {
    let batch = orders(10_000);
    c.bench_function("book/submit_10k", |b| {
        b.iter_batched(
            || batch.clone(),
            |batch| {
                let mut book = OrderBook::new();
                for o in batch {
                    black_box(book.submit(o).unwrap());
                }
                book
            },
            BatchSize::SmallInput,
        )
    });
}

fn cancel(c: &mut Criterion) {
    // one-sided so everything rests
    let batch: Vec<Order> = orders(10_000)
        .into_iter()
        .map(|mut o| {
            o.side = Side::Buy;
            o
        })
        .collect();
    c.bench_function("book/cancel_10k", |b| {
        b.iter_batched(
            || {
                let mut book = OrderBook::new();
                for o in batch.clone() {
                    book.submit(o).unwrap();
                }
                book
            },
            |mut book| {
                for id in 1..=10_000u64 {
                    black_box(book.cancel(id).unwrap());
                }
                book
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, submit, cancel);
criterion_main!(benches);
