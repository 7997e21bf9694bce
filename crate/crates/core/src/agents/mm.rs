use serde::{Deserialize, Serialize};

use super::{IntentTag, OrderIntent};
use crate::book::{BookSnapshot, OrderId, Price, Qty, Side};

/// Honest symmetric quoter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketMakerParams {
    /// Half-spread in ticks.
    pub half_spread: i64,
    pub qty: Qty,
}

impl MarketMakerParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.half_spread < 1 {
            return Err("market_maker.half_spread must be at least 1 tick".into());
        }
        if self.qty == 0 {
            return Err("market_maker.qty must be at least 1".into());
        }
        Ok(())
    }
}

/// The market maker's live quotes as `(order id, price)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuoteBook {
    pub bid: Option<(OrderId, Price)>,
    pub ask: Option<(OrderId, Price)>,
}

impl QuoteBook {
    pub fn set(&mut self, side: Side, id: OrderId, price: Price) {
        match side {
            Side::Buy => self.bid = Some((id, price)),
            Side::Sell => self.ask = Some((id, price)),
        }
    }
}

/// Target quotes rounded away from the reference: `floor(m - h)` and `ceil(m + h)`.
pub fn quote_targets(params: &MarketMakerParams, snapshot: &BookSnapshot, fundamental: f64) -> (Price, Price) {
    let h = params.half_spread;
    match snapshot.mid_x2 {
        Some(m2) => ((m2 - 2 * h).div_euclid(2), (m2 + 2 * h + 1).div_euclid(2)),
        None => (((fundamental - h as f64).floor() as Price).max(1), (fundamental + h as f64).ceil() as Price),
    }
}

/// Keep one bid and one ask at the targets, cancelling quotes that went stale.
/// Quotes that are no longer live (filled or cancelled) are forgotten.
pub fn market_maker_act(
    params: &MarketMakerParams,
    snapshot: &BookSnapshot,
    fundamental: f64,
    quotes: &mut QuoteBook,
    is_live: &dyn Fn(OrderId) -> bool,
) -> Vec<OrderIntent> {
    let (bid_target, ask_target) = quote_targets(params, snapshot, fundamental);
    let mut intents = Vec::new();
    for (side, target) in [(Side::Buy, bid_target), (Side::Sell, ask_target)] {
        let slot = match side {
            Side::Buy => &mut quotes.bid,
            Side::Sell => &mut quotes.ask,
        };
        if let Some((id, price)) = *slot {
            if !is_live(id) {
                *slot = None;
            } else if price == target {
                continue;
            } else {
                intents.push(OrderIntent::Cancel { order_id: id });
                *slot = None;
            }
        }
        intents.push(OrderIntent::limit(side, target, params.qty, IntentTag::Quote));
    }
    intents
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::Level;
    use crate::sim::SimTime;

    fn snap(mid_x2: Option<i64>) -> BookSnapshot {
        let lvl = |p| vec![Level { price: p, total_qty: 1, order_count: 1 }];
        let (bb, ba) = match mid_x2 {
            Some(m) => (Some(m / 2), Some(m - m / 2)),
            None => (None, None),
        };
        BookSnapshot {
            at: SimTime::default(),
            bids: bb.map(lvl).unwrap_or_default(),
            asks: ba.map(lvl).unwrap_or_default(),
            best_bid: bb,
            best_ask: ba,
            mid_x2,
        }
    }

    fn mm() -> MarketMakerParams {
        MarketMakerParams { half_spread: 1, qty: 4 }
    }

    #[test]
    fn quotes_round_away_from_mid() {
        let mut q = QuoteBook::default();
        let intents = market_maker_act(&mm(), &snap(Some(201)), 100.0, &mut q, &|_| true);
        assert_eq!(
            intents,
            vec![
                OrderIntent::limit(Side::Buy, 99, 4, IntentTag::Quote),
                OrderIntent::limit(Side::Sell, 102, 4, IntentTag::Quote)
            ]
        );
    }

    #[test]
    fn quotes_at_target_are_left_alone() {
        let mut q = QuoteBook { bid: Some((1, 99)), ask: Some((2, 102)) };
        assert!(market_maker_act(&mm(), &snap(Some(201)), 100.0, &mut q, &|_| true).is_empty());
    }

    #[test]
    fn empty_book_quotes_around_fundamental() {
        let mut q = QuoteBook::default();
        let intents = market_maker_act(&mm(), &snap(None), 100.0, &mut q, &|_| true);
        assert_eq!(
            intents,
            vec![
                OrderIntent::limit(Side::Buy, 99, 4, IntentTag::Quote),
                OrderIntent::limit(Side::Sell, 101, 4, IntentTag::Quote)
            ]
        );
    }

    #[test]
    fn stale_quote_is_replaced_and_filled_quote_renewed() {
        let mut q = QuoteBook { bid: Some((1, 98)), ask: Some((2, 102)) };
        let intents = market_maker_act(&mm(), &snap(Some(201)), 100.0, &mut q, &|id| id != 2);
        assert_eq!(
            intents,
            vec![
                OrderIntent::Cancel { order_id: 1 },
                OrderIntent::limit(Side::Buy, 99, 4, IntentTag::Quote),
                OrderIntent::limit(Side::Sell, 102, 4, IntentTag::Quote)
            ]
        );
    }
}
