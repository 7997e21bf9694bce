//! Simulated trading agents: the models the governance layers supervise.
//!
//! Every agent is a decision function over a book snapshot. Agents never touch
//! the book directly; they emit [`OrderIntent`]s that self-regulation may
//! filter before they reach matching.

mod fundamental;
mod mm;
mod qlearn;
mod spoofer;
mod zi;

use serde::{Deserialize, Serialize};

use crate::book::{AgentId, FirmId, OrderId, OrderKind, Price, Qty, Side};

pub use fundamental::{FundamentalParams, FundamentalProcess, Shock};
pub use mm::{market_maker_act, MarketMakerParams, QuoteBook};
pub use qlearn::{
    learner_intents, ql_act, ql_update, LearnerAction, LearnerState, QLearnerParams, QTable, ACTION_COUNT, STATE_COUNT,
};
pub use spoofer::{spoofer_act, SpoofError, SpoofParams, SpoofPhase, SpoofRole, SpooferFsm};
pub use zi::{zi_act, ZiParams};

/// Why an intent was generated. Kept for evaluation and telemetry only;
/// detectors never read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntentTag {
    Background,
    Quote,
    SpoofFake,
    SpoofExploit,
    Learner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OrderIntent {
    Place { side: Side, price: Option<Price>, qty: Qty, kind: OrderKind, tag: IntentTag },
    Cancel { order_id: OrderId },
}

impl OrderIntent {
    pub fn limit(side: Side, price: Price, qty: Qty, tag: IntentTag) -> Self {
        OrderIntent::Place { side, price: Some(price), qty, kind: OrderKind::Limit, tag }
    }

    pub fn market(side: Side, qty: Qty, tag: IntentTag) -> Self {
        OrderIntent::Place { side, price: None, qty, kind: OrderKind::Market, tag }
    }

    pub fn is_place(&self) -> bool {
        matches!(self, OrderIntent::Place { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKindTag {
    Zi,
    MarketMaker,
    ScriptedSpoofer,
    ColluderInjector,
    ColluderExploiter,
    QLearner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Autonomy {
    RuleBased,
    Learning,
}

/// Per-kind parameters. The serialized form is tagged with `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentKind {
    Zi(ZiParams),
    MarketMaker(MarketMakerParams),
    ScriptedSpoofer(SpoofParams),
    ColluderInjector(SpoofParams),
    ColluderExploiter(SpoofParams),
    QLearner(QLearnerParams),
}

impl AgentKind {
    pub fn tag(&self) -> AgentKindTag {
        match self {
            AgentKind::Zi(_) => AgentKindTag::Zi,
            AgentKind::MarketMaker(_) => AgentKindTag::MarketMaker,
            AgentKind::ScriptedSpoofer(_) => AgentKindTag::ScriptedSpoofer,
            AgentKind::ColluderInjector(_) => AgentKindTag::ColluderInjector,
            AgentKind::ColluderExploiter(_) => AgentKindTag::ColluderExploiter,
            AgentKind::QLearner(_) => AgentKindTag::QLearner,
        }
    }

    pub fn autonomy(&self) -> Autonomy {
        match self {
            AgentKind::QLearner(_) => Autonomy::Learning,
            _ => Autonomy::RuleBased,
        }
    }

    /// Parameter range checks; the message names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            AgentKind::Zi(p) => p.validate(),
            AgentKind::MarketMaker(p) => p.validate(),
            AgentKind::ScriptedSpoofer(p) | AgentKind::ColluderInjector(p) | AgentKind::ColluderExploiter(p) => {
                p.validate()
            }
            AgentKind::QLearner(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub agent_id: AgentId,
    pub kind: AgentKind,
}

/// An agent with its firm, as laid out by a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub agent_id: AgentId,
    pub firm_id: FirmId,
    pub kind: AgentKind,
}

/// Round half away from zero to a tick.
pub(crate) fn round_tick(x: f64) -> Price {
    x.round() as Price
}
