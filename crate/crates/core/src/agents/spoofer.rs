use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{IntentTag, OrderIntent};
use crate::book::{BookSnapshot, OrderId, Price, Qty, Side};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpoofParams {
    /// First step of the first Inject phase.
    pub start_step: u64,
    pub fake_qty: Qty,
    /// Ticks behind the best quote on the fake side.
    pub fake_depth: Price,
    pub n_fakes: u32,
    pub exploit_qty: Qty,
    /// Side of the profit trade; decoys go on the other side.
    #[serde(default = "default_exploit_side")]
    pub exploit_side: Side,
    pub inject_steps: u64,
    pub cooldown_steps: u64,
}

fn default_exploit_side() -> Side {
    Side::Sell
}

impl SpoofParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.fake_qty == 0 || self.n_fakes == 0 {
            return Err("spoofer.fake_qty and spoofer.n_fakes must be at least 1".into());
        }
        if self.fake_depth < 0 {
            return Err("spoofer.fake_depth must be non-negative".into());
        }
        if self.exploit_qty == 0 {
            return Err("spoofer.exploit_qty must be at least 1".into());
        }
        if self.inject_steps == 0 {
            return Err("spoofer.inject_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn fake_side(&self) -> Side {
        self.exploit_side.opposite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpoofPhase {
    Inject,
    Exploit,
    Withdraw,
    Cooldown,
}

/// Which legs of the cycle this agent performs. Colluders split the cycle
/// between two agents that share the schedule but never communicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpoofRole {
    Full,
    InjectOnly,
    ExploitOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpoofError {
    #[error("book has no reference quote on the decoy side")]
    MissingReference,
}

/// Inject -> Exploit -> Withdraw -> Cooldown, driven by step counts.
///
/// Each phase performs its action once on entry. Inject holds for
/// `inject_steps`, Exploit and Withdraw for one step each, Cooldown for
/// `cooldown_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpooferFsm {
    pub params: SpoofParams,
    pub role: SpoofRole,
    pub phase: SpoofPhase,
    pub phase_since: u64,
    pub acted: bool,
    /// Accepted decoy orders still believed to be resting.
    pub fake_order_ids: BTreeSet<OrderId>,
    /// Decoy price of the current cycle, as seen from this agent's book.
    pub decoy_price: Option<Price>,
    pub cycles: u64,
}

impl SpooferFsm {
    pub fn new(params: SpoofParams, role: SpoofRole) -> Self {
        Self {
            phase: SpoofPhase::Cooldown,
            phase_since: 0,
            acted: true,
            fake_order_ids: BTreeSet::new(),
            decoy_price: None,
            cycles: 0,
            params,
            role,
        }
    }

    /// FSM positioned at the start of `phase` at `step`, action pending.
    pub fn in_phase(params: SpoofParams, role: SpoofRole, phase: SpoofPhase, step: u64) -> Self {
        let mut fsm = Self::new(params, role);
        fsm.phase = phase;
        fsm.phase_since = step;
        fsm.acted = false;
        fsm
    }

    pub fn register_fake(&mut self, id: OrderId) {
        self.fake_order_ids.insert(id);
    }

    /// Forget a decoy that was filled or removed by someone else.
    pub fn forget_fake(&mut self, id: OrderId) {
        self.fake_order_ids.remove(&id);
    }

    fn enter(&mut self, phase: SpoofPhase, step: u64) {
        if phase == SpoofPhase::Cooldown {
            debug_assert!(self.fake_order_ids.is_empty(), "decoys outstanding entering cooldown");
        }
        if phase == SpoofPhase::Inject {
            self.cycles += 1;
            self.decoy_price = None;
        }
        self.phase = phase;
        self.phase_since = step;
        self.acted = false;
    }

    fn advance(&mut self, step: u64) {
        let p = &self.params;
        match self.phase {
            SpoofPhase::Cooldown => {
                let ready = if self.cycles == 0 {
                    step >= p.start_step
                } else {
                    step >= self.phase_since + p.cooldown_steps
                };
                if ready {
                    self.enter(SpoofPhase::Inject, step);
                }
            }
            SpoofPhase::Inject if self.acted && step >= self.phase_since + p.inject_steps => {
                self.enter(SpoofPhase::Exploit, step)
            }
            SpoofPhase::Exploit if self.acted && step > self.phase_since => self.enter(SpoofPhase::Withdraw, step),
            SpoofPhase::Withdraw if self.acted && step > self.phase_since => self.enter(SpoofPhase::Cooldown, step),
            _ => {}
        }
    }
}

fn decoy_price(p: &SpoofParams, snapshot: &BookSnapshot) -> Option<Price> {
    let price = match p.fake_side() {
        Side::Buy => snapshot.best_bid.map(|b| b - p.fake_depth),
        Side::Sell => snapshot.best_ask.map(|a| a + p.fake_depth),
    };
    price.filter(|&x| x > 0)
}

/// `exploit_qty`, capped at the visible depth strictly in front of the decoys
/// so the profit trade never reaches them.
fn exploit_size(p: &SpoofParams, snapshot: &BookSnapshot, floor: Option<Price>) -> Qty {
    let Some(floor) = floor else { return p.exploit_qty };
    let ahead: Qty = match p.exploit_side {
        Side::Sell => snapshot.bids.iter().filter(|l| l.price > floor).map(|l| l.total_qty).sum(),
        Side::Buy => snapshot.asks.iter().filter(|l| l.price < floor).map(|l| l.total_qty).sum(),
    };
    ahead.min(p.exploit_qty)
}

/// One decision for `step`. The FSM is updated in place.
pub fn spoofer_act(fsm: &mut SpooferFsm, snapshot: &BookSnapshot, step: u64) -> Result<Vec<OrderIntent>, SpoofError> {
    fsm.advance(step);
    if fsm.acted {
        return Ok(Vec::new());
    }
    let p = fsm.params.clone();
    let intents = match fsm.phase {
        SpoofPhase::Inject => {
            let price = decoy_price(&p, snapshot);
            fsm.decoy_price = price;
            match fsm.role {
                SpoofRole::ExploitOnly => Vec::new(),
                SpoofRole::Full | SpoofRole::InjectOnly => {
                    let price = price.ok_or(SpoofError::MissingReference)?;
                    if snapshot.best_bid.is_none() || snapshot.best_ask.is_none() {
                        return Err(SpoofError::MissingReference);
                    }
                    (0..p.n_fakes)
                        .map(|_| OrderIntent::limit(p.fake_side(), price, p.fake_qty, IntentTag::SpoofFake))
                        .collect()
                }
            }
        }
        SpoofPhase::Exploit => match fsm.role {
            SpoofRole::InjectOnly => Vec::new(),
            // a lone spoofer only trades when its decoys actually made it to the book
            SpoofRole::Full if fsm.fake_order_ids.is_empty() => Vec::new(),
            SpoofRole::Full | SpoofRole::ExploitOnly => {
                let floor = fsm.decoy_price.or_else(|| decoy_price(&p, snapshot));
                let qty = exploit_size(&p, snapshot, floor);
                if qty == 0 {
                    Vec::new()
                } else {
                    vec![OrderIntent::market(p.exploit_side, qty, IntentTag::SpoofExploit)]
                }
            }
        },
        SpoofPhase::Withdraw => {
            let ids = std::mem::take(&mut fsm.fake_order_ids);
            ids.into_iter().map(|order_id| OrderIntent::Cancel { order_id }).collect()
        }
        SpoofPhase::Cooldown => Vec::new(),
    };
    debug_assert!(match fsm.role {
        SpoofRole::InjectOnly => intents.iter().all(|i| !matches!(i, OrderIntent::Place { tag: IntentTag::SpoofExploit, .. })),
        SpoofRole::ExploitOnly => intents.iter().all(|i| matches!(i, OrderIntent::Place { tag: IntentTag::SpoofExploit, .. })),
        SpoofRole::Full => true,
    });
    fsm.acted = true;
    Ok(intents)
}
