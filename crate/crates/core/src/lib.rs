//! Research harness for LLM-driven hierarchical pair trading.
//!
//! The crate is organized around a small number of subsystems:
//!
//! - [`market_data`]: aligned daily price panels and news digests.
//! - [`baselines`]: statistical pair selection (distance, correlation,
//!   Engle-Granger cointegration) and the classic z-score threshold rule.
//! - [`trading_env`]: a replayable market-neutral trading environment with
//!   daily mark-to-market accounting.
//! - [`metrics`]: performance and trading-behavior statistics.
//! - [`llm_gateway`]: chat-completion transports (OpenAI-compatible wire and
//!   a deterministic scripted mock) plus strict JSON decision parsing.
//! - [`prompt_policy`]: versioned prompts with an immutable preamble and a
//!   mutable POLICY block.
//! - [`hier_opt`]: the two-level textual policy optimization loops (trader
//!   intra-episode tuning, selector episodic tuning) and the flat agent.
//! - [`experiment`]: configuration, mode dispatch, scheduling, and report
//!   emission, surfaced through the `moira` CLI.

pub mod baselines;
pub mod experiment;
pub mod hier_opt;
pub mod llm_gateway;
pub mod market_data;
pub mod metrics;
pub mod prompt_policy;
pub mod trading_env;

pub use baselines::{
    adf_test, correlation_select, engle_granger, ggr_select, hedge_ratio, schwert_max_lag,
    threshold_policy, CointegrationResult, RankedPair, RankedPairs, ThresholdRule,
};
pub use experiment::{ExperimentConfig, Mode, RunReport, TransportKind};
pub use hier_opt::{EpisodeSchedule, SelectorExperience, Trajectory, TrajectoryStep};
pub use llm_gateway::{
    parse_pair_decision, parse_trade_decision, CallTag, CompletionRequest, CompletionResult,
    Gateway, MockTransport, PairDecision, TradeDecision, Transport, WireTransport,
};
pub use market_data::{
    load_news, load_prices, normalize_prices, AssetUniverse, NewsDigest, ObservationWindow,
    PriceSeries,
};
pub use metrics::{MetricReport, ReturnSeries};
pub use prompt_policy::{split_policy, Critique, PromptTemplate, VersionedPrompt};
pub use trading_env::{position_sizing, Action, Observation, PairContext, Side, TradingEnv};
