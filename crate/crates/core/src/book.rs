//! Price-time priority limit order book for a single instrument.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

pub type OrderId = u64;
pub type AgentId = u32;
pub type FirmId = u32;
/// Integer price in ticks.
pub type Price = i64;
pub type Qty = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }

    /// +1 for buys, -1 for sells.
    pub fn sign(self) -> i64 {
        match self {
            Side::Buy => 1,
            Side::Sell => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderKind {
    Limit,
    Market,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub agent_id: AgentId,
    pub firm_id: FirmId,
    pub side: Side,
    pub price: Option<Price>,
    pub qty: Qty,
    pub remaining: Qty,
    pub kind: OrderKind,
    pub placed_at: SimTime,
}

impl Order {
    pub fn limit(id: OrderId, agent_id: AgentId, side: Side, price: Price, qty: Qty) -> Self {
        Self {
            id,
            agent_id,
            firm_id: 0,
            side,
            price: Some(price),
            qty,
            remaining: qty,
            kind: OrderKind::Limit,
            placed_at: SimTime::default(),
        }
    }

    pub fn market(id: OrderId, agent_id: AgentId, side: Side, qty: Qty) -> Self {
        Self {
            id,
            agent_id,
            firm_id: 0,
            side,
            price: None,
            qty,
            remaining: qty,
            kind: OrderKind::Market,
            placed_at: SimTime::default(),
        }
    }

    pub fn with_firm(mut self, firm_id: FirmId) -> Self {
        self.firm_id = firm_id;
        self
    }

    pub fn at(mut self, placed_at: SimTime) -> Self {
        self.placed_at = placed_at;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trade {
    pub buy_order_id: OrderId,
    pub sell_order_id: OrderId,
    pub buy_agent_id: AgentId,
    pub sell_agent_id: AgentId,
    pub price: Price,
    pub qty: Qty,
    pub at: SimTime,
    pub aggressor_side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub price: Price,
    pub total_qty: Qty,
    pub order_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookSnapshot {
    pub at: SimTime,
    pub bids: Vec<Level>,
    pub asks: Vec<Level>,
    pub best_bid: Option<Price>,
    pub best_ask: Option<Price>,
    /// Twice the mid price, exact. `None` when either side is empty.
    pub mid_x2: Option<i64>,
}

impl BookSnapshot {
    pub fn mid(&self) -> Option<f64> {
        self.mid_x2.map(|m| m as f64 / 2.0)
    }

    pub fn spread(&self) -> Option<Price> {
        Some(self.best_ask? - self.best_bid?)
    }

    /// Depth imbalance over the visible levels: (bid - ask) / (bid + ask).
    pub fn imbalance(&self) -> f64 {
        let bid: Qty = self.bids.iter().map(|l| l.total_qty).sum();
        let ask: Qty = self.asks.iter().map(|l| l.total_qty).sum();
        if bid + ask == 0 {
            0.0
        } else {
            (bid as f64 - ask as f64) / (bid + ask) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BookError {
    #[error("order id {0} was already submitted")]
    DuplicateOrderId(OrderId),
    #[error("invalid order {id}: {reason}")]
    InvalidOrder { id: OrderId, reason: &'static str },
    #[error("order {0} is not resting")]
    UnknownOrder(OrderId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitOutcome {
    pub trades: Vec<Trade>,
    pub resting: bool,
}

#[derive(Debug, Default, Clone)]
pub struct OrderBook {
    bids: BTreeMap<Price, VecDeque<OrderId>>,
    asks: BTreeMap<Price, VecDeque<OrderId>>,
    resting: HashMap<OrderId, Order>,
    seen: HashSet<OrderId>,
}

impl OrderBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit(&mut self, mut order: Order) -> Result<SubmitOutcome, BookError> {
        if self.seen.contains(&order.id) {
            return Err(BookError::DuplicateOrderId(order.id));
        }
        if order.qty == 0 {
            return Err(BookError::InvalidOrder { id: order.id, reason: "quantity must be positive" });
        }
        match (order.kind, order.price) {
            (OrderKind::Limit, Some(p)) if p > 0 => {}
            (OrderKind::Limit, _) => {
                return Err(BookError::InvalidOrder { id: order.id, reason: "limit order needs a positive price" })
            }
            (OrderKind::Market, None) => {}
            (OrderKind::Market, Some(_)) => {
                return Err(BookError::InvalidOrder { id: order.id, reason: "market order carries no price" })
            }
        }
        self.seen.insert(order.id);
        order.remaining = order.qty;

        let mut trades = Vec::new();
        while order.remaining > 0 {
            let best = match order.side {
                Side::Buy => self.asks.first_key_value().map(|(p, _)| *p),
                Side::Sell => self.bids.last_key_value().map(|(p, _)| *p),
            };
            let Some(level_price) = best else { break };
            let crosses = match (order.side, order.price) {
                (_, None) => true,
                (Side::Buy, Some(limit)) => level_price <= limit,
                (Side::Sell, Some(limit)) => level_price >= limit,
            };
            if !crosses {
                break;
            }
            self.match_level(&mut order, level_price, &mut trades);
        }

        let resting = order.remaining > 0 && order.kind == OrderKind::Limit;
        if resting {
            let price = order.price.expect("validated limit price");
            self.side_mut(order.side).entry(price).or_default().push_back(order.id);
            self.resting.insert(order.id, order);
        }
        Ok(SubmitOutcome { trades, resting })
    }

    fn match_level(&mut self, incoming: &mut Order, level_price: Price, trades: &mut Vec<Trade>) {
        let side = incoming.side.opposite();
        let levels = match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        };
        let queue = levels.get_mut(&level_price).expect("level exists");
        let mut filled_ids = Vec::new();
        let mut fills = Vec::new();
        for &rid in queue.iter() {
            if incoming.remaining == 0 {
                break;
            }
            let resting = self.resting.get_mut(&rid).expect("queued order is resting");
            let qty = resting.remaining.min(incoming.remaining);
            resting.remaining -= qty;
            incoming.remaining -= qty;
            fills.push((resting.id, resting.agent_id, qty));
            if resting.remaining == 0 {
                filled_ids.push(rid);
            }
        }
        let queue = self.side_mut(side).get_mut(&level_price).expect("level exists");
        for _ in 0..filled_ids.len() {
            queue.pop_front();
        }
        if queue.is_empty() {
            self.side_mut(side).remove(&level_price);
        }
        for id in filled_ids {
            self.resting.remove(&id);
        }
        for (rid, ragent, qty) in fills {
            let (buy_order_id, buy_agent_id, sell_order_id, sell_agent_id) = match incoming.side {
                Side::Buy => (incoming.id, incoming.agent_id, rid, ragent),
                Side::Sell => (rid, ragent, incoming.id, incoming.agent_id),
            };
            trades.push(Trade {
                buy_order_id,
                sell_order_id,
                buy_agent_id,
                sell_agent_id,
                price: level_price,
                qty,
                at: incoming.placed_at,
                aggressor_side: incoming.side,
            });
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut BTreeMap<Price, VecDeque<OrderId>> {
        match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        }
    }

    /// Remove a resting order, returning its unfilled quantity.
    pub fn cancel(&mut self, order_id: OrderId) -> Result<Qty, BookError> {
        let order = self.resting.remove(&order_id).ok_or(BookError::UnknownOrder(order_id))?;
        let price = order.price.expect("resting orders are limits");
        let levels = self.side_mut(order.side);
        let queue = levels.get_mut(&price).expect("resting order has a level");
        queue.retain(|&id| id != order_id);
        if queue.is_empty() {
            levels.remove(&price);
        }
        Ok(order.remaining)
    }

    pub fn snapshot(&self, depth: usize, at: SimTime) -> BookSnapshot {
        let depth = depth.max(1);
        let level = |(price, queue): (&Price, &VecDeque<OrderId>)| Level {
            price: *price,
            total_qty: queue.iter().map(|id| self.resting[id].remaining).sum(),
            order_count: queue.len(),
        };
        let bids: Vec<Level> = self.bids.iter().rev().take(depth).map(level).collect();
        let asks: Vec<Level> = self.asks.iter().take(depth).map(level).collect();
        let best_bid = self.best_bid();
        let best_ask = self.best_ask();
        let mid_x2 = match (best_bid, best_ask) {
            (Some(b), Some(a)) => Some(a + b),
            _ => None,
        };
        BookSnapshot { at, bids, asks, best_bid, best_ask, mid_x2 }
    }

    pub fn best_bid(&self) -> Option<Price> {
        self.bids.last_key_value().map(|(p, _)| *p)
    }

    pub fn best_ask(&self) -> Option<Price> {
        self.asks.first_key_value().map(|(p, _)| *p)
    }

    pub fn order(&self, id: OrderId) -> Option<&Order> {
        self.resting.get(&id)
    }

    pub fn is_resting(&self, id: OrderId) -> bool {
        self.resting.contains_key(&id)
    }

    pub fn resting_count(&self) -> usize {
        self.resting.len()
    }

    /// Resting order ids of one agent, ascending.
    pub fn resting_ids_of(&self, agent_id: AgentId) -> Vec<OrderId> {
        let mut ids: Vec<OrderId> =
            self.resting.values().filter(|o| o.agent_id == agent_id).map(|o| o.id).collect();
        ids.sort_unstable();
        ids
    }

    /// All resting orders in priority order: bids best-first, then asks best-first.
    pub fn resting_orders(&self) -> Vec<&Order> {
        let bids = self.bids.iter().rev().flat_map(|(_, q)| q.iter());
        let asks = self.asks.values().flat_map(|q| q.iter());
        bids.chain(asks).map(|id| &self.resting[id]).collect()
    }

    pub fn is_crossed(&self) -> bool {
        matches!((self.best_bid(), self.best_ask()), (Some(b), Some(a)) if b >= a)
    }
}

/// One line of the trade tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeRecord {
    pub at: SimTime,
    pub price: Price,
    pub qty: Qty,
    pub aggressor_side: Side,
    pub buy_agent_id: AgentId,
    pub sell_agent_id: AgentId,
    /// Twice the mid just before the aggressing order arrived.
    pub mid_before_x2: Option<i64>,
}

impl TapeRecord {
    pub fn from_trade(t: &Trade, mid_before_x2: Option<i64>) -> Self {
        Self {
            at: t.at,
            price: t.price,
            qty: t.qty,
            aggressor_side: t.aggressor_side,
            buy_agent_id: t.buy_agent_id,
            sell_agent_id: t.sell_agent_id,
            mid_before_x2,
        }
    }
}
