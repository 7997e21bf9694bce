//! Brute-force matcher: one flat list of resting orders, scanned in full on
//! every match. Slow and obvious on purpose.

use govsim_core::{Order, OrderBook, OrderKind, Side};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefTrade {
    pub buy: u64,
    pub sell: u64,
    pub price: i64,
    pub qty: u64,
    pub aggressor: Side,
}

#[derive(Debug, Clone)]
struct Resting {
    id: u64,
    side: Side,
    price: i64,
    remaining: u64,
    arrival: u64,
}

#[derive(Debug, Default)]
pub struct RefBook {
    resting: Vec<Resting>,
    seen: Vec<u64>,
    arrivals: u64,
}

impl RefBook {
    /// `None` when the order is invalid or its id was used before.
    pub fn submit(&mut self, id: u64, side: Side, price: Option<i64>, qty: u64) -> Option<Vec<RefTrade>> {
        if qty == 0 || self.seen.contains(&id) || price.is_some_and(|p| p <= 0) {
            return None;
        }
        self.seen.push(id);
        let mut left = qty;
        let mut trades = Vec::new();
        loop {
            if left == 0 {
                break;
            }
            // best opposite order: best price, then earliest arrival
            let mut best: Option<usize> = None;
            for (i, r) in self.resting.iter().enumerate() {
                if r.side == side {
                    continue;
                }
                let crosses = match (side, price) {
                    (_, None) => true,
                    (Side::Buy, Some(limit)) => r.price <= limit,
                    (Side::Sell, Some(limit)) => r.price >= limit,
                };
                if !crosses {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(j) => {
                        let b = &self.resting[j];
                        let price_better = match side {
                            Side::Buy => r.price < b.price,
                            Side::Sell => r.price > b.price,
                        };
                        price_better || (r.price == b.price && r.arrival < b.arrival)
                    }
                };
                if better {
                    best = Some(i);
                }
            }
            let Some(i) = best else { break };
            let fill = left.min(self.resting[i].remaining);
            left -= fill;
            self.resting[i].remaining -= fill;
            let r = &self.resting[i];
            let (buy, sell) = match side {
                Side::Buy => (id, r.id),
                Side::Sell => (r.id, id),
            };
            trades.push(RefTrade { buy, sell, price: r.price, qty: fill, aggressor: side });
            if self.resting[i].remaining == 0 {
                self.resting.remove(i);
            }
        }
        if let (Some(p), true) = (price, left > 0) {
            self.arrivals += 1;
            self.resting.push(Resting { id, side, price: p, remaining: left, arrival: self.arrivals });
        }
        Some(trades)
    }

    pub fn cancel(&mut self, id: u64) -> Option<u64> {
        let i = self.resting.iter().position(|r| r.id == id)?;
        Some(self.resting.remove(i).remaining)
    }

    /// `(id, side, price, remaining)` with bids best-first, then asks best-first.
    pub fn levels(&self) -> Vec<(u64, Side, i64, u64)> {
        let mut bids: Vec<&Resting> = self.resting.iter().filter(|r| r.side == Side::Buy).collect();
        let mut asks: Vec<&Resting> = self.resting.iter().filter(|r| r.side == Side::Sell).collect();
        bids.sort_by_key(|r| (-r.price, r.arrival));
        asks.sort_by_key(|r| (r.price, r.arrival));
        bids.into_iter().chain(asks).map(|r| (r.id, r.side, r.price, r.remaining)).collect()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Submit { side: Side, price: Option<i64>, qty: u64 },
    /// Cancel the k-th id issued so far (modulo), resting or not.
    Cancel { k: usize },
}

pub fn book_levels(book: &OrderBook) -> Vec<(u64, Side, i64, u64)> {
    book.resting_orders().into_iter().map(|o| (o.id, o.side, o.price.unwrap(), o.remaining)).collect()
}

/// Replay `ops` on both books. Returns a description of the first mismatch.
pub fn compare(ops: &[Op]) -> Result<(), String> {
    let mut book = OrderBook::new();
    let mut reference = RefBook::default();
    let mut next_id = 1u64;
    for (step, op) in ops.iter().enumerate() {
        match *op {
            Op::Submit { side, price, qty } => {
                let id = next_id;
                next_id += 1;
                let order = match price {
                    Some(p) => Order::limit(id, 1, side, p, qty),
                    None => Order::market(id, 1, side, qty),
                };
                debug_assert_eq!(order.kind == OrderKind::Market, price.is_none());
                let got = book.submit(order).ok().map(|o| {
                    o.trades
                        .iter()
                        .map(|t| RefTrade {
                            buy: t.buy_order_id,
                            sell: t.sell_order_id,
                            price: t.price,
                            qty: t.qty,
                            aggressor: t.aggressor_side,
                        })
                        .collect::<Vec<_>>()
                });
                let want = reference.submit(id, side, price, qty);
                if got != want {
                    return Err(format!("op {step} submit {id}: book {got:?} vs reference {want:?}"));
                }
            }
            Op::Cancel { k } => {
                if next_id == 1 {
                    continue;
                }
                let id = (k as u64 % (next_id - 1)) + 1;
                let got = book.cancel(id).ok();
                let want = reference.cancel(id);
                if got != want {
                    return Err(format!("op {step} cancel {id}: book {got:?} vs reference {want:?}"));
                }
            }
        }
        if book.is_crossed() {
            return Err(format!("op {step}: book crossed"));
        }
    }
    let (got, want) = (book_levels(&book), reference.levels());
    if got != want {
        return Err(format!("final book differs: {got:?} vs {want:?}"));
    }
    Ok(())
}

pub fn op_strategy() -> impl proptest::strategy::Strategy<Value = Op> {
    use proptest::prelude::*;
    let side = prop_oneof![Just(Side::Buy), Just(Side::Sell)];
    prop_oneof![
        6 => (side.clone(), 95i64..=105, 1u64..=20).prop_map(|(side, p, qty)| Op::Submit { side, price: Some(p), qty }),
        1 => (side, 1u64..=40).prop_map(|(side, qty)| Op::Submit { side, price: None, qty }),
        3 => any::<usize>().prop_map(|k| Op::Cancel { k }),
    ]
}

pub fn ops_strategy() -> impl proptest::strategy::Strategy<Value = Vec<Op>> {
    proptest::collection::vec(op_strategy(), 0..=1000)
}
