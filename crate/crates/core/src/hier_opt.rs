//! Two-level textual policy optimization.
//!
//! The trader adapts within an episode: each sub-episode (trading week)
//! runs under a fixed prompt, then a critic call turns the realized
//! trajectory into feedback and an updater call installs revised POLICY
//! rules. The selector adapts across episodes: it picks a pair, observes
//! the trader's tuned performance as a delayed payoff, critiques and
//! updates its own prompt, and keeps the update only if it changes the
//! selection. A flat single-level agent is included as an ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{correlation_select, hedge_ratio, BaselinesError};
use crate::llm_gateway::{
    strip_code_fences, CallTag, CompletionRequest, DecisionError, Gateway, GatewayError,
    parse_pair_decision, parse_trade_decision,
};
use crate::market_data::{AssetUniverse, MarketDataError, NewsDigest, ObservationWindow};
use crate::prompt_policy::{
    render_selector_prompt, render_trader_prompt, Critique, HighLevelContext, PromptError,
    VersionedPrompt, SELECTOR_CRITIC_PROMPT, SELECTOR_UPDATE_PROMPT, TRADER_CRITIC_PROMPT,
    TRADER_UPDATE_PROMPT,
};
use crate::trading_env::{
    Action, EnvError, PairContext, Side, TradeRecord, TradingEnv,
};

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Baselines(#[from] BaselinesError),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("schedule has no trading days in [{start}, {end}]")]
    EmptySchedule { start: NaiveDate, end: NaiveDate },
    #[error("environment clock at {at} but span starts at {expected}")]
    ClockMismatch { at: NaiveDate, expected: NaiveDate },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("no fallback pair with a positive hedge ratio")]
    NoFallbackPair,
    #[error("selector payoff must be positive, got {0}")]
    InvalidPayoff(f64),
    #[error("max_iters must be >= 1")]
    ZeroIterations,
}

/// One trader decision and its realized daily reward. `requested` and
/// `fallback` mark steps where the model output was coerced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub date: NaiveDate,
    pub side_before: Side,
    pub action: Action,
    pub requested: Option<Action>,
    pub fallback: bool,
    pub reward: f64,
    pub rationale: String,
}

/// The (observation, action, reward) record of one sub-episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub pair: PairContext,
    pub episode: usize,
    pub subepisode: usize,
    pub steps: Vec<TrajectoryStep>,
    /// Compounded return over the steps: prod(1 + r) - 1.
    pub cumulative_return: f64,
}

impl Trajectory {
    fn new(
        pair: PairContext,
        episode: usize,
        subepisode: usize,
        steps: Vec<TrajectoryStep>,
    ) -> Self {
        let cumulative_return = steps.iter().fold(1.0, |acc, s| acc * (1.0 + s.reward)) - 1.0;
        Self {
            pair,
            episode,
            subepisode,
            steps,
            cumulative_return,
        }
    }
}

/// Delayed-feedback record for one selector decision; payoff is the final
/// normalized equity of the trader's tuning run (1 = break-even).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorExperience {
    pub high_obs_digest: String,
    pub pair: PairContext,
    pub rationale: String,
    pub payoff: f64,
}

impl SelectorExperience {
    pub fn new(
        high_obs_digest: String,
        pair: PairContext,
        rationale: String,
        payoff: f64,
    ) -> Result<Self, OptError> {
        if !(payoff.is_finite() && payoff > 0.0) {
            return Err(OptError::InvalidPayoff(payoff));
        }
        Ok(Self {
            high_obs_digest,
            pair,
            rationale,
            payoff,
        })
    }
}

/// Consecutive trading days, the trader's adaptation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEpisodeSpan {
    pub days: Vec<NaiveDate>,
}

/// A calendar month's worth of action days, split into trading weeks.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpan {
    pub index: usize,
    pub subepisodes: Vec<SubEpisodeSpan>,
}

impl EpisodeSpan {
    pub fn first_day(&self) -> NaiveDate {
        self.subepisodes[0].days[0]
    }

    pub fn action_days(&self) -> usize {
        self.subepisodes.iter().map(|s| s.days.len()).sum()
    }
}

/// Episodes (calendar months) tiled into sub-episodes (Mon-Fri trading
/// weeks) without overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSchedule {
    pub episodes: Vec<EpisodeSpan>,
}

impl EpisodeSchedule {
    /// Builds a monthly/weekly schedule over the calendar days in
    /// `[start, end]`. Every scheduled day needs a successor trading day to
    /// settle against, so a span ending at the calendar's final day loses
    /// that day from the action set.
    pub fn monthly_weekly(
        calendar: &[NaiveDate],
        start: NaiveDate,
        end: NaiveDate,
    ) -> Result<Self, OptError> {
        let last_calendar_day = *calendar.last().ok_or(OptError::EmptySchedule { start, end })?;
        let days: Vec<NaiveDate> = calendar
            .iter()
            .copied()
            .filter(|d| *d >= start && *d <= end && *d != last_calendar_day)
            .collect();
        if days.is_empty() {
            return Err(OptError::EmptySchedule { start, end });
        }
        let mut episodes: Vec<EpisodeSpan> = Vec::new();
        for day in days {
            let month_key = (day.year(), day.month());
            let week_key = (day.iso_week().year(), day.iso_week().week());
            let start_new_episode = match episodes.last() {
                Some(e) => {
                    let d = e.subepisodes.last().unwrap().days.last().unwrap();
                    (d.year(), d.month()) != month_key
                }
                None => true,
            };
            if start_new_episode {
                episodes.push(EpisodeSpan {
                    index: episodes.len(),
                    subepisodes: vec![SubEpisodeSpan { days: vec![day] }],
                });
                continue;
            }
            let episode = episodes.last_mut().unwrap();
            let last_sub = episode.subepisodes.last_mut().unwrap();
            let last_day = *last_sub.days.last().unwrap();
            if (last_day.iso_week().year(), last_day.iso_week().week()) == week_key {
                last_sub.days.push(day);
            } else {
                episode.subepisodes.push(SubEpisodeSpan { days: vec![day] });
            }
        }
        Ok(Self { episodes })
    }

    pub fn first_day(&self) -> NaiveDate {
        self.episodes[0].first_day()
    }

    pub fn action_days(&self) -> usize {
        self.episodes.iter().map(|e| e.action_days()).sum()
    }

    pub fn total_subepisodes(&self) -> usize {
        self.episodes.iter().map(|e| e.subepisodes.len()).sum()
    }
}

/// Knobs shared by every LLM-driven run.
#[derive(Debug, Clone)]
pub struct TraderRunConfig {
    pub window: ObservationWindow,
    /// Re-prompts allowed on unparseable/invalid decisions before the
    /// fallback applies.
    pub decision_retries: u32,
}

impl Default for TraderRunConfig {
    fn default() -> Self {
        Self {
            window: ObservationWindow::default(),
            decision_retries: 2,
        }
    }
}

struct TradeChoice {
    action: Action,
    requested: Option<Action>,
    fallback: bool,
    rationale: String,
}

fn decide_trade_action(
    gateway: &Gateway,
    theta: &VersionedPrompt,
    env: &TradingEnv,
    news: &[NewsDigest],
    cfg: &TraderRunConfig,
) -> Result<TradeChoice, OptError> {
    let obs = env.build_observation(news, cfg.window);
    let rendered = render_trader_prompt(theta, &obs, env.pair());
    let mut last_error: Option<DecisionError> = None;
    let mut requested = None;
    for attempt in 0..=cfg.decision_retries {
        let user = match &last_error {
            None => rendered.user.clone(),
            Some(err) => format!(
                "{}\nprevious_response_error: {err}\nReturn ONLY valid JSON per the schema, \
                 choosing an action from permissible_actions.",
                rendered.user
            ),
        };
        let result = gateway.complete(&CompletionRequest::new(
            CallTag::TraderAct,
            rendered.system.clone(),
            user,
        ))?;
        match parse_trade_decision(&result.text, &obs.permissible_actions) {
            Ok(decision) => {
                return Ok(TradeChoice {
                    action: decision.action,
                    requested: None,
                    fallback: false,
                    rationale: decision.rationale,
                });
            }
            Err(err) => {
                if let DecisionError::Validation(_) = &err {
                    // Remember what the model asked for, for the step record.
                    if let Ok(raw) =
                        serde_json::from_str::<serde_json::Value>(strip_code_fences(&result.text))
                    {
                        if let Some(a) = raw.get("action").and_then(|v| v.as_str()) {
                            requested = Action::parse(a);
                        }
                    }
                }
                log::debug!("trader decision attempt {attempt} rejected: {err}");
                last_error = Some(err);
            }
        }
    }
    Ok(TradeChoice {
        action: Action::Hold,
        requested,
        fallback: true,
        rationale: String::new(),
    })
}

/// Runs one sub-episode under a fixed trader prompt: one action call per
/// trading day, illegal or unparseable outputs degrading to hold.
pub fn run_subepisode(
    env: &mut TradingEnv,
    gateway: &Gateway,
    theta: &VersionedPrompt,
    span: &SubEpisodeSpan,
    news: &[NewsDigest],
    cfg: &TraderRunConfig,
    episode: usize,
    subepisode: usize,
) -> Result<Trajectory, OptError> {
    if env.current_date() != span.days[0] {
        return Err(OptError::ClockMismatch {
            at: env.current_date(),
            expected: span.days[0],
        });
    }
    let mut steps = Vec::with_capacity(span.days.len());
    for day in &span.days {
        debug_assert_eq!(env.current_date(), *day);
        let side_before = env.position().side;
        let choice = decide_trade_action(gateway, theta, env, news, cfg)?;
        let reward = env.step(choice.action)?;
        steps.push(TrajectoryStep {
            date: *day,
            side_before,
            action: choice.action,
            requested: choice.requested,
            fallback: choice.fallback,
            reward,
            rationale: choice.rationale,
        });
    }
    Ok(Trajectory::new(env.pair().clone(), episode, subepisode, steps))
}

fn serialize_trajectory(theta: &VersionedPrompt, trajectory: &Trajectory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "pair: {}", trajectory.pair.label());
    out.push_str("policy_rules:\n<<<\n");
    if theta.policy_rules().is_empty() {
        out.push_str("(empty)\n");
    } else {
        let _ = writeln!(out, "{}", theta.policy_rules());
    }
    out.push_str(">>>\n");
    out.push_str("trajectory (date, action, reward):\n");
    for step in &trajectory.steps {
        let flag = if step.fallback { " (coerced)" } else { "" };
        let _ = writeln!(out, "  ({}, {}, {}){flag}", step.date, step.action, step.reward);
    }
    let _ = writeln!(out, "cumulative_return: {}", trajectory.cumulative_return);
    out
}

/// Critic call over one trajectory; returns the feedback text verbatim.
pub fn trader_textual_gradient(
    gateway: &Gateway,
    theta: &VersionedPrompt,
    trajectory: &Trajectory,
) -> Result<Critique, OptError> {
    if trajectory.steps.is_empty() {
        return Err(OptError::EmptyTrajectory);
    }
    let result = gateway.complete(&CompletionRequest::new(
        CallTag::TraderCritic,
        TRADER_CRITIC_PROMPT,
        serialize_trajectory(theta, trajectory),
    ))?;
    Ok(Critique::new(result.text, CallTag::TraderCritic)?)
}

/// Updater call: installs the response as the new POLICY rules.
pub fn trader_update(
    gateway: &Gateway,
    theta: &VersionedPrompt,
    critique: &Critique,
) -> Result<VersionedPrompt, OptError> {
    let user = format!(
        "previous_trader_prompt:\n<<<\n{}\n>>>\ncritic_feedback:\n<<<\n{}\n>>>\n",
        theta.render(),
        critique.text
    );
    let result = gateway.complete(&CompletionRequest::new(
        CallTag::TraderUpdate,
        TRADER_UPDATE_PROMPT,
        user,
    ))?;
    Ok(theta.apply_update(strip_code_fences(&result.text), critique)?)
}

/// One episode's tuned prompt and the trajectories that produced it.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub theta: VersionedPrompt,
    pub trajectories: Vec<Trajectory>,
}

/// Runs one episode: K sub-episode cycles of execute/critique/update (the
/// critique and update are skipped when `adapt` is false), then a forced
/// close so the episode's return is realized.
pub fn run_trader_episode(
    env: &mut TradingEnv,
    gateway: &Gateway,
    episode: &EpisodeSpan,
    theta_init: VersionedPrompt,
    news: &[NewsDigest],
    cfg: &TraderRunConfig,
    adapt: bool,
) -> Result<EpisodeOutcome, OptError> {
    let mut theta = theta_init;
    let mut trajectories = Vec::with_capacity(episode.subepisodes.len());
    for (k, span) in episode.subepisodes.iter().enumerate() {
        let trajectory =
            run_subepisode(env, gateway, &theta, span, news, cfg, episode.index, k)?;
        if adapt {
            let critique = trader_textual_gradient(gateway, &theta, &trajectory)?;
            theta = trader_update(gateway, &theta, &critique)?;
        }
        trajectories.push(trajectory);
    }
    env.force_close();
    Ok(EpisodeOutcome {
        theta,
        trajectories,
    })
}

/// A full multi-episode trader run over a schedule.
#[derive(Debug)]
pub struct TuningOutcome {
    pub theta: VersionedPrompt,
    pub trajectories: Vec<Trajectory>,
    /// Final normalized equity of the run (1 = break-even).
    pub final_equity: f64,
    pub equity_dates: Vec<NaiveDate>,
    pub equity: Vec<f64>,
    pub trades: Vec<TradeRecord>,
}

/// Runs the trader over every episode of the schedule with one continuous
/// environment, carrying the prompt forward across episodes.
#[allow(clippy::too_many_arguments)]
pub fn run_trader_tuning(
    universe: &Arc<AssetUniverse>,
    gateway: &Gateway,
    pair: PairContext,
    schedule: &EpisodeSchedule,
    theta_init: VersionedPrompt,
    news: &[NewsDigest],
    cfg: &TraderRunConfig,
    capital: f64,
    costs_bps: f64,
    adapt: bool,
) -> Result<TuningOutcome, OptError> {
    let mut env = TradingEnv::reset(
        universe.clone(),
        pair,
        schedule.first_day(),
        capital,
        costs_bps,
    )?;
    let mut theta = theta_init;
    let mut trajectories = Vec::new();
    for episode in &schedule.episodes {
        let outcome = run_trader_episode(&mut env, gateway, episode, theta, news, cfg, adapt)?;
        theta = outcome.theta;
        trajectories.extend(outcome.trajectories);
    }
    Ok(TuningOutcome {
        theta,
        trajectories,
        final_equity: *env.equity_curve().last().expect("nonempty curve"),
        equity_dates: env.equity_dates().to_vec(),
        equity: env.equity_curve().to_vec(),
        trades: env.trade_log().to_vec(),
    })
}

/// Frozen-prompt run over a contiguous day span: no critic or update
/// calls, one forced close at the end.
#[allow(clippy::too_many_arguments)]
pub fn run_frozen_span(
    universe: &Arc<AssetUniverse>,
    gateway: &Gateway,
    pair: PairContext,
    theta: &VersionedPrompt,
    days: &[NaiveDate],
    news: &[NewsDigest],
    cfg: &TraderRunConfig,
    capital: f64,
    costs_bps: f64,
) -> Result<TuningOutcome, OptError> {
    let mut env = TradingEnv::reset(universe.clone(), pair, days[0], capital, costs_bps)?;
    let span = SubEpisodeSpan {
        days: days.to_vec(),
    };
    let trajectory = run_subepisode(&mut env, gateway, theta, &span, news, cfg, 0, 0)?;
    env.force_close();
    Ok(TuningOutcome {
        theta: theta.clone(),
        trajectories: vec![trajectory],
        final_equity: *env.equity_curve().last().expect("nonempty curve"),
        equity_dates: env.equity_dates().to_vec(),
        equity: env.equity_curve().to_vec(),
        trades: env.trade_log().to_vec(),
    })
}

/// A validated selector decision.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub pair: PairContext,
    pub rationale: String,
    pub retries: u32,
    pub fallback: bool,
}

fn pair_with_hedge(
    first: &str,
    second: &str,
    formation: &AssetUniverse,
) -> Result<PairContext, OptError> {
    let beta = hedge_ratio(formation.series(first)?, formation.series(second)?)?;
    if beta <= 0.0 {
        return Err(OptError::Baselines(BaselinesError::SingularRegression));
    }
    Ok(PairContext::new(first, second, beta)?)
}

fn correlation_fallback_pair(formation: &AssetUniverse) -> Result<PairContext, OptError> {
    let ranked = correlation_select(formation)?;
    for entry in ranked.entries.iter().filter(|e| e.score.is_some()) {
        if let Ok(pair) = pair_with_hedge(&entry.a, &entry.b, formation) {
            return Ok(pair);
        }
    }
    Err(OptError::NoFallbackPair)
}

/// Asks the selector for a pair, retrying invalid outputs, then falling
/// back to the highest-correlation pair (flagged). The hedge ratio comes
/// from the formation window, preserving the selector's presentation
/// order.
pub fn select_pair(
    gateway: &Gateway,
    phi: &VersionedPrompt,
    high_obs: &HighLevelContext,
    formation: &AssetUniverse,
    retries: u32,
) -> Result<SelectionOutcome, OptError> {
    let rendered = render_selector_prompt(phi, high_obs);
    let mut last_error: Option<String> = None;
    for attempt in 0..=retries {
        let user = match &last_error {
            None => rendered.user.clone(),
            Some(err) => format!(
                "{}\nprevious_response_error: {err}\nReturn ONLY valid JSON per the schema, \
                 choosing two distinct tickers from allowed_symbols.",
                rendered.user
            ),
        };
        let result = gateway.complete(&CompletionRequest::new(
            CallTag::SelectorAct,
            rendered.system.clone(),
            user,
        ))?;
        match parse_pair_decision(&result.text, &high_obs.allowed_symbols) {
            Ok(decision) => match pair_with_hedge(&decision.pair.0, &decision.pair.1, formation) {
                Ok(pair) => {
                    return Ok(SelectionOutcome {
                        pair,
                        rationale: decision.rationale,
                        retries: attempt,
                        fallback: false,
                    });
                }
                Err(err) => {
                    log::debug!("selected pair unusable: {err}");
                    last_error = Some(format!(
                        "pair {}/{} has no positive hedge ratio over the formation window",
                        decision.pair.0, decision.pair.1
                    ));
                }
            },
            Err(err) => {
                log::debug!("selector decision attempt {attempt} rejected: {err}");
                last_error = Some(err.to_string());
            }
        }
    }
    let pair = correlation_fallback_pair(formation)?;
    log::warn!("selector fell back to correlation pair {}", pair.label());
    Ok(SelectionOutcome {
        rationale: format!("fallback: highest-correlation pair {}", pair.label()),
        pair,
        retries,
        fallback: true,
    })
}

/// Critic call over one selector experience.
pub fn selector_textual_gradient(
    gateway: &Gateway,
    experience: &SelectorExperience,
) -> Result<Critique, OptError> {
    let user = format!(
        "selected_pair: {}\nrationale: {}\nreward (cumulative return, 1 = break-even): {}\n",
        experience.pair.label(),
        experience.rationale,
        experience.payoff
    );
    let result = gateway.complete(&CompletionRequest::new(
        CallTag::SelectorCritic,
        SELECTOR_CRITIC_PROMPT,
        user,
    ))?;
    Ok(Critique::new(result.text, CallTag::SelectorCritic)?)
}

/// Updater call for the selector prompt.
pub fn selector_update(
    gateway: &Gateway,
    phi: &VersionedPrompt,
    critique: &Critique,
    reward: f64,
) -> Result<VersionedPrompt, OptError> {
    let user = format!(
        "previous_selector_prompt:\n<<<\n{}\n>>>\ncritic_feedback:\n<<<\n{}\n>>>\nreward: {reward}\n",
        phi.render(),
        critique.text
    );
    let result = gateway.complete(&CompletionRequest::new(
        CallTag::SelectorUpdate,
        SELECTOR_UPDATE_PROMPT,
        user,
    ))?;
    Ok(phi.apply_update(strip_code_fences(&result.text), critique)?)
}

/// One loop turn of the selector optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorIteration {
    pub iteration: usize,
    pub experience: SelectorExperience,
    /// The pair re-sampled from the updated prompt.
    pub reselected: (String, String),
    /// Whether the update was kept (the re-sample moved to a new pair).
    pub accepted: bool,
}

/// Result of the selector optimization loop.
#[derive(Debug)]
pub struct SelectorOutcome {
    pub phi: VersionedPrompt,
    pub pair: PairContext,
    /// Tuned trader prompt from the final iteration's tuning run.
    pub theta: VersionedPrompt,
    pub converged: bool,
    pub iterations: Vec<SelectorIteration>,
    /// The final iteration's tuning run (equity, trades, trajectories).
    pub tuning: TuningOutcome,
    pub trader_tuning_runs: usize,
}

/// Inputs for [`optimize_selector`] beyond the prompts.
pub struct SelectorRunParams<'a> {
    pub universe: &'a Arc<AssetUniverse>,
    pub high_obs: &'a HighLevelContext,
    /// Formation-window slice for hedge ratios and the fallback ranking.
    pub formation: &'a AssetUniverse,
    pub schedule: &'a EpisodeSchedule,
    pub news: &'a [NewsDigest],
    pub cfg: &'a TraderRunConfig,
    pub capital: f64,
    pub costs_bps: f64,
    pub max_iters: usize,
    /// When false the trader runs frozen inside each iteration
    /// (selection-only ablation).
    pub adapt_trader: bool,
    /// Restart each candidate's tuning from the same initial trader prompt
    /// so payoffs are comparable (switchable).
    pub reset_trader_per_iteration: bool,
}

/// Episodic textual policy optimization for the selector: select, run the
/// trader's tuning under the selection, critique, update, re-sample; keep
/// the update only when the selection changes, stopping when it does not
/// (or after `max_iters`, flagged non-converged).
pub fn optimize_selector(
    gateway: &Gateway,
    phi_init: VersionedPrompt,
    theta_init: VersionedPrompt,
    params: &SelectorRunParams<'_>,
) -> Result<SelectorOutcome, OptError> {
    if params.max_iters == 0 {
        return Err(OptError::ZeroIterations);
    }
    let mut phi = phi_init;
    let selection = select_pair(
        gateway,
        &phi,
        params.high_obs,
        params.formation,
        params.cfg.decision_retries,
    )?;
    let mut pair = selection.pair;
    let mut rationale = selection.rationale;
    let mut iterations = Vec::new();
    let mut converged = false;
    let mut theta_carry = theta_init.clone();
    let mut last_tuning: Option<TuningOutcome> = None;

    for iteration in 1..=params.max_iters {
        let theta_start = if params.reset_trader_per_iteration {
            theta_init.clone()
        } else {
            theta_carry.clone()
        };
        let tuning = run_trader_tuning(
            params.universe,
            gateway,
            pair.clone(),
            params.schedule,
            theta_start,
            params.news,
            params.cfg,
            params.capital,
            params.costs_bps,
            params.adapt_trader,
        )?;
        let experience = SelectorExperience::new(
            params.high_obs.sha256(),
            pair.clone(),
            rationale.clone(),
            tuning.final_equity,
        )?;
        theta_carry = tuning.theta.clone();
        last_tuning = Some(tuning);

        let critique = selector_textual_gradient(gateway, &experience)?;
        let phi_candidate = selector_update(gateway, &phi, &critique, experience.payoff)?;
        let resample = select_pair(
            gateway,
            &phi_candidate,
            params.high_obs,
            params.formation,
            params.cfg.decision_retries,
        )?;
        let same = resample.pair.same_pair(&pair);
        iterations.push(SelectorIteration {
            iteration,
            experience,
            reselected: (resample.pair.first.clone(), resample.pair.second.clone()),
            accepted: !same,
        });
        if same {
            // Update rejected: the candidate prompt is discarded.
            converged = true;
            break;
        }
        phi = phi_candidate;
        pair = resample.pair;
        rationale = resample.rationale;
    }

    let tuning = last_tuning.expect("max_iters >= 1 ran at least one tuning");
    Ok(SelectorOutcome {
        phi,
        pair,
        theta: tuning.theta.clone(),
        converged,
        trader_tuning_runs: iterations.len(),
        iterations,
        tuning,
    })
}

/// Prompt for the single-level ablation agent that picks the pair and the
/// action jointly every day.
pub const FLAT_PREAMBLE: &str = r#"You are a pair trading assistant that selects BOTH the asset pair and the next trading action each day.
Use the provided recent prices, recent news, and current position state when deciding.

Actions:
- long: long the first ticker, short the second ticker
- short: short the first ticker, long the second ticker
- close: exit to flat
- hold: keep the current position (no trade)

Return ONLY valid JSON with no markdown or extra text.
Schema:
{"pair": ["TICKER1", "TICKER2"], "action": "long|short|close|hold", "rationale": "short reason"}

Rules:
- Choose exactly two distinct tickers from allowed_symbols.
- To enter a new position on a different pair, the current position is closed first.
- Keep rationale to 2 sentences or less.
"#;

#[derive(Deserialize)]
struct RawFlatDecision {
    pair: Vec<String>,
    action: String,
    #[serde(default)]
    rationale: String,
}

/// Parses the flat agent's combined pair+action output.
pub fn parse_flat_decision(
    text: &str,
    allowed_symbols: &[String],
) -> Result<((String, String), Action, String), DecisionError> {
    let raw: RawFlatDecision = serde_json::from_str(strip_code_fences(text))
        .map_err(|e| DecisionError::Parse(e.to_string()))?;
    let pair_json = serde_json::json!({ "pair": raw.pair });
    let decision = parse_pair_decision(&pair_json.to_string(), allowed_symbols)?;
    let action = Action::parse(&raw.action)
        .ok_or_else(|| DecisionError::Validation(format!("unknown action {:?}", raw.action)))?;
    Ok((decision.pair, action, raw.rationale))
}

/// A flat-agent day: the pair in force, the action applied, flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatStep {
    pub date: NaiveDate,
    pub pair: String,
    pub action: Action,
    pub switched_pair: bool,
    pub fallback: bool,
    pub reward: f64,
}

#[derive(Debug)]
pub struct FlatOutcome {
    pub steps: Vec<FlatStep>,
    pub equity_dates: Vec<NaiveDate>,
    pub equity: Vec<f64>,
    pub trades: Vec<TradeRecord>,
    pub final_equity: f64,
}

fn serialize_flat_observation(
    universe: &AssetUniverse,
    date_index: usize,
    news: &[NewsDigest],
    window: ObservationWindow,
    position_line: &str,
) -> String {
    let calendar = universe.calendar();
    let date = calendar[date_index];
    let lo = (date_index + 1).saturating_sub(window.price_lookback);
    let mut user = String::new();
    let _ = writeln!(user, "date: {date}");
    let _ = writeln!(
        user,
        "allowed_symbols: {}",
        universe.tickers().join(", ")
    );
    let _ = writeln!(user, "{position_line}");
    for ticker in universe.tickers() {
        let series = universe.series(ticker).expect("listed ticker");
        let window_prices: Vec<String> = (lo..=date_index)
            .map(|i| format!("{}", series.prices()[i]))
            .collect();
        let _ = writeln!(
            user,
            "recent_prices {ticker} (oldest to newest): {}",
            window_prices.join(", ")
        );
    }
    let news_start = calendar[(date_index + 1).saturating_sub(window.news_lookback)];
    let recent: Vec<&NewsDigest> = news
        .iter()
        .filter(|d| d.date >= news_start && d.date <= date)
        .collect();
    user.push_str("recent_news:\n");
    if recent.is_empty() {
        user.push_str("  (none)\n");
    } else {
        for digest in recent {
            let _ = writeln!(user, "  {} [{}] {}", digest.date, digest.scope, digest.text);
        }
    }
    user
}

/// Runs the flat ablation over a day span: one call per day (tagged as a
/// trader action) returning pair and action jointly. Switching pairs while
/// positioned forces a close first; invalid outputs fall back to hold on
/// the current pair.
#[allow(clippy::too_many_arguments)]
pub fn run_flat_agent(
    universe: &Arc<AssetUniverse>,
    gateway: &Gateway,
    formation: &AssetUniverse,
    days: &[NaiveDate],
    news: &[NewsDigest],
    cfg: &TraderRunConfig,
    capital: f64,
    costs_bps: f64,
) -> Result<FlatOutcome, OptError> {
    let allowed: Vec<String> = universe.tickers().iter().map(|s| s.to_string()).collect();
    let mut hedge_cache: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut resolve_pair = |first: &str, second: &str| -> Result<PairContext, OptError> {
        let key = if first <= second {
            (first.to_string(), second.to_string())
        } else {
            (second.to_string(), first.to_string())
        };
        let beta = match hedge_cache.get(&key) {
            Some(beta) => *beta,
            None => {
                let beta =
                    hedge_ratio(formation.series(first)?, formation.series(second)?)?;
                hedge_cache.insert(key, beta);
                beta
            }
        };
        if beta <= 0.0 {
            return Err(OptError::Baselines(BaselinesError::SingularRegression));
        }
        Ok(PairContext::new(first, second, beta)?)
    };

    let mut env: Option<TradingEnv> = None;
    let mut base_equity = 1.0;
    let mut equity_dates = vec![days[0]];
    let mut equity = vec![1.0];
    let mut trades: Vec<TradeRecord> = Vec::new();
    let mut steps = Vec::with_capacity(days.len());

    for day in days {
        let date_index = universe
            .date_index(*day)
            .ok_or(EnvError::StartOutsideCalendar(*day))?;
        let position_line = match &env {
            Some(e) if !e.position().is_flat() => format!(
                "position: {} on {} (entered {})",
                e.position().side,
                e.pair().label(),
                e.position().entry_date.expect("open position")
            ),
            _ => "position: flat".to_string(),
        };
        let user = serialize_flat_observation(universe, date_index, news, cfg.window, &position_line);

        let mut decision: Option<((String, String), Action, String)> = None;
        let mut last_error: Option<String> = None;
        for _attempt in 0..=cfg.decision_retries {
            let payload = match &last_error {
                None => user.clone(),
                Some(err) => format!(
                    "{user}\nprevious_response_error: {err}\nReturn ONLY valid JSON per the schema."
                ),
            };
            let result = gateway.complete(&CompletionRequest::new(
                CallTag::TraderAct,
                FLAT_PREAMBLE,
                payload,
            ))?;
            match parse_flat_decision(&result.text, &allowed) {
                Ok(parsed) => {
                    decision = Some(parsed);
                    break;
                }
                Err(err) => last_error = Some(err.to_string()),
            }
        }

        let (requested_pair, requested_action, fallback) = match decision {
            Some((pair, action, _rationale)) => (Some(pair), action, false),
            None => (None, Action::Hold, true),
        };

        let mut switched = false;
        if let Some((first, second)) = &requested_pair {
            let differs = match &env {
                Some(e) => {
                    !(e.pair().canonical_key()
                        == PairContext::new(first.clone(), second.clone(), 1.0)
                            .map(|p| p.canonical_key())
                            .unwrap_or_else(|_| (first.clone(), second.clone())))
                }
                None => true,
            };
            if differs {
                match resolve_pair(first, second) {
                    Ok(new_pair) => {
                        if let Some(mut old) = env.take() {
                            old.force_close();
                            trades.extend(old.trade_log().iter().cloned());
                            let segment_final = *old.equity_curve().last().unwrap();
                            base_equity *= segment_final;
                            *equity.last_mut().unwrap() = base_equity;
                        }
                        env = Some(TradingEnv::reset(
                            universe.clone(),
                            new_pair,
                            *day,
                            capital * base_equity,
                            costs_bps,
                        )?);
                        switched = true;
                    }
                    Err(err) => {
                        log::debug!("flat agent pair {first}/{second} unusable: {err}");
                    }
                }
            }
        }

        let active = match env.as_mut() {
            Some(e) => e,
            None => {
                // No usable pair yet: push a flat day.
                steps.push(FlatStep {
                    date: *day,
                    pair: String::new(),
                    action: Action::Hold,
                    switched_pair: false,
                    fallback: true,
                    reward: 0.0,
                });
                let next_index = date_index + 1;
                if next_index < universe.calendar().len() {
                    equity_dates.push(universe.calendar()[next_index]);
                    equity.push(base_equity);
                }
                continue;
            }
        };

        let action = if active.permissible_actions().contains(&requested_action) {
            requested_action
        } else {
            Action::Hold
        };
        let coerced = action != requested_action;
        let reward = active.step(action)?;
        equity_dates.push(active.current_date());
        equity.push(base_equity * active.equity_curve().last().unwrap());
        steps.push(FlatStep {
            date: *day,
            pair: active.pair().label(),
            action,
            switched_pair: switched,
            fallback: fallback || coerced,
            reward,
        });
    }

    if let Some(mut e) = env {
        e.force_close();
        trades.extend(e.trade_log().iter().cloned());
        base_equity *= e.equity_curve().last().unwrap() / (equity.last().unwrap() / base_equity);
        // Re-mark the final point with the realized close.
        let segment_final = *e.equity_curve().last().unwrap();
        *equity.last_mut().unwrap() = segment_final
            * (equity[equity.len() - 2] / e.equity_curve()[e.equity_curve().len() - 2])
                .max(f64::MIN_POSITIVE);
    }
    let final_equity = *equity.last().unwrap();
    Ok(FlatOutcome {
        steps,
        equity_dates,
        equity,
        trades,
        final_equity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::MockTransport;
    use crate::market_data::PriceSeries;
    use crate::prompt_policy::{SELECTOR_PREAMBLE, TRADER_PREAMBLE};

    fn weekdays(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
        let mut days = Vec::with_capacity(count);
        let mut d = start;
        while days.len() < count {
            if d.weekday().number_from_monday() <= 5 {
                days.push(d);
            }
            d = d + chrono::Days::new(1);
        }
        days
    }

    fn jan(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, day).unwrap()
    }

    fn flat_universe(days: usize) -> Arc<AssetUniverse> {
        let calendar = weekdays(jan(1), days);
        Arc::new(
            AssetUniverse::align(vec![
                PriceSeries::new("AAA", calendar.clone(), vec![100.0; days]).unwrap(),
                PriceSeries::new("BBB", calendar, vec![50.0; days]).unwrap(),
            ])
            .unwrap(),
        )
    }

    fn pair() -> PairContext {
        PairContext::new("AAA", "BBB", 1.0).unwrap()
    }

    fn theta() -> VersionedPrompt {
        VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap()
    }

    fn hold_json() -> &'static str {
        r#"{"action":"hold","rationale":"wait"}"#
    }

    fn gateway_with(mock: MockTransport) -> Gateway {
        Gateway::new(Box::new(mock))
    }

    #[test]
    fn schedule_january_is_four_weeks_of_five() {
        // Jan 1 2024 is a Monday; calendar extends into February so every
        // scheduled day has a settlement successor.
        let calendar = weekdays(jan(1), 25);
        let schedule = EpisodeSchedule::monthly_weekly(&calendar, jan(1), jan(26)).unwrap();
        assert_eq!(schedule.episodes.len(), 1);
        assert_eq!(schedule.episodes[0].subepisodes.len(), 4);
        for sub in &schedule.episodes[0].subepisodes {
            assert_eq!(sub.days.len(), 5);
        }
        assert_eq!(schedule.action_days(), 20);
    }

    #[test]
    fn schedule_tiles_without_overlap_across_months() {
        let calendar = weekdays(jan(1), 50);
        let end = *calendar.last().unwrap();
        let schedule = EpisodeSchedule::monthly_weekly(&calendar, jan(1), end).unwrap();
        assert!(schedule.episodes.len() >= 2);
        let mut seen: Vec<NaiveDate> = Vec::new();
        for e in &schedule.episodes {
            for s in &e.subepisodes {
                seen.extend(&s.days);
            }
        }
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(seen.len(), sorted.len(), "no duplicates");
        // The calendar's final day is settlement-only.
        assert!(!seen.contains(&end));
        assert_eq!(seen.len(), calendar.len() - 1);
    }

    #[test]
    fn subepisode_all_hold_has_zero_return() {
        let universe = flat_universe(8);
        let span = SubEpisodeSpan {
            days: universe.calendar()[..5].to_vec(),
        };
        let mock = MockTransport::new();
        mock.push_many(CallTag::TraderAct, hold_json(), 5);
        let gateway = gateway_with(mock);
        let mut env =
            TradingEnv::reset(universe, pair(), jan(1), 10_000.0, 0.0).unwrap();
        let traj =
            run_subepisode(&mut env, &gateway, &theta(), &span, &[], &Default::default(), 0, 0)
                .unwrap();
        assert_eq!(traj.steps.len(), 5);
        assert_eq!(traj.cumulative_return, 0.0);
        assert!(traj.steps.iter().all(|s| !s.fallback));
    }

    #[test]
    fn subepisode_matches_env_pnl_oracle() {
        let calendar = weekdays(jan(1), 6);
        let universe = Arc::new(
            AssetUniverse::align(vec![
                PriceSeries::new(
                    "AAA",
                    calendar.clone(),
                    vec![100.0, 102.0, 104.0, 103.0, 105.0, 105.0],
                )
                .unwrap(),
                PriceSeries::new("BBB", calendar, vec![50.0; 6]).unwrap(),
            ])
            .unwrap(),
        );
        let span = SubEpisodeSpan {
            days: universe.calendar()[..5].to_vec(),
        };
        let mock = MockTransport::new();
        for action in ["long", "hold", "hold", "hold", "close"] {
            mock.push(
                CallTag::TraderAct,
                format!(r#"{{"action":"{action}","rationale":"r"}}"#),
            );
        }
        let gateway = gateway_with(mock);
        let mut env = TradingEnv::reset(universe, pair(), jan(1), 10_000.0, 0.0).unwrap();
        let traj =
            run_subepisode(&mut env, &gateway, &theta(), &span, &[], &Default::default(), 0, 0)
                .unwrap();
        // Hand accounting: 50 shares of A, entry 100, exit 105 -> +2.5%.
        assert!((traj.cumulative_return - 0.025).abs() < 1e-12);
        let product: f64 = traj.steps.iter().map(|s| 1.0 + s.reward).product();
        assert!((product - 1.0 - traj.cumulative_return).abs() < 1e-9);
    }

    #[test]
    fn impermissible_action_coerced_to_hold_and_flagged() {
        let universe = flat_universe(6);
        let span = SubEpisodeSpan {
            days: universe.calendar()[..3].to_vec(),
        };
        let mock = MockTransport::new();
        mock.push(CallTag::TraderAct, r#"{"action":"long"}"#);
        // Day 2: "long" while positioned, across the retry budget.
        mock.push_many(CallTag::TraderAct, r#"{"action":"long"}"#, 3);
        mock.push(CallTag::TraderAct, hold_json());
        let gateway = gateway_with(mock);
        let mut env = TradingEnv::reset(universe, pair(), jan(1), 10_000.0, 0.0).unwrap();
        let traj =
            run_subepisode(&mut env, &gateway, &theta(), &span, &[], &Default::default(), 0, 0)
                .unwrap();
        assert_eq!(traj.steps[0].action, Action::Long);
        assert_eq!(traj.steps[1].action, Action::Hold);
        assert!(traj.steps[1].fallback);
        assert_eq!(traj.steps[1].requested, Some(Action::Long));
        assert!(!traj.steps[2].fallback);
    }

    #[test]
    fn critic_serializes_every_triple_and_rejects_empty() {
        let universe = flat_universe(8);
        let span = SubEpisodeSpan {
            days: universe.calendar()[..4].to_vec(),
        };
        let mock = MockTransport::new();
        mock.push_many(CallTag::TraderAct, hold_json(), 4);
        mock.push(CallTag::TraderCritic, "enter less often");
        let gateway = gateway_with(mock);
        let mut env = TradingEnv::reset(universe, pair(), jan(1), 10_000.0, 0.0).unwrap();
        let traj =
            run_subepisode(&mut env, &gateway, &theta(), &span, &[], &Default::default(), 0, 0)
                .unwrap();
        let serialized = serialize_trajectory(&theta(), &traj);
        for step in &traj.steps {
            assert!(serialized.contains(&format!("({}, {}, {})", step.date, step.action, step.reward)));
        }
        let critique = trader_textual_gradient(&gateway, &theta(), &traj).unwrap();
        assert_eq!(critique.text, "enter less often");

        let empty = Trajectory::new(pair(), 0, 0, vec![]);
        assert!(matches!(
            trader_textual_gradient(&gateway, &theta(), &empty),
            Err(OptError::EmptyTrajectory)
        ));
    }

    #[test]
    fn trader_update_installs_rules_and_rejects_markers() {
        let mock = MockTransport::new();
        mock.push(CallTag::TraderUpdate, "- rule X");
        mock.push(CallTag::TraderUpdate, "text with END POLICY inside");
        mock.push(CallTag::TraderUpdate, "- rule Y");
        let gateway = gateway_with(mock);
        let t0 = theta();
        let hash = t0.preamble_sha256();
        let critique = Critique::new("c", CallTag::TraderCritic).unwrap();

        let t1 = trader_update(&gateway, &t0, &critique).unwrap();
        assert_eq!(t1.policy_rules(), "- rule X");
        assert_eq!(t1.preamble_sha256(), hash);

        assert!(matches!(
            trader_update(&gateway, &t1, &critique),
            Err(OptError::Prompt(PromptError::MarkerInjection(_)))
        ));

        let t2 = trader_update(&gateway, &t1, &critique).unwrap();
        assert_eq!(t2.version(), 2);
        assert_eq!(t2.lineage().len(), 2);
    }

    #[test]
    fn episode_runs_k_cycles_and_counts_calls() {
        let universe = flat_universe(25);
        let schedule =
            EpisodeSchedule::monthly_weekly(universe.calendar(), jan(1), jan(26)).unwrap();
        let episode = &schedule.episodes[0];
        let mock = MockTransport::new();
        mock.push_many(CallTag::TraderAct, hold_json(), 20);
        for k in 0..4 {
            mock.push(CallTag::TraderCritic, format!("critique {k}"));
            mock.push(CallTag::TraderUpdate, format!("- rule {k}"));
        }
        let gateway = gateway_with(mock);
        let mut env = TradingEnv::reset(universe, pair(), jan(1), 10_000.0, 0.0).unwrap();
        let outcome =
            run_trader_episode(&mut env, &gateway, episode, theta(), &[], &Default::default(), true)
                .unwrap();
        assert_eq!(outcome.trajectories.len(), 4);
        assert_eq!(outcome.theta.version(), 4);
        let audit = gateway.audit_log();
        let count = |tag: CallTag| audit.iter().filter(|r| r.tag == tag).count();
        assert_eq!(count(CallTag::TraderAct), 20);
        assert_eq!(count(CallTag::TraderCritic), 4);
        assert_eq!(count(CallTag::TraderUpdate), 4);
        // Carry-forward leaves one unbroken chain.
        assert_eq!(outcome.theta.lineage().len(), 4);
        assert!(env.position().is_flat(), "episode ends force-closed");
    }

    #[test]
    fn episode_without_adaptation_makes_no_critic_calls() {
        let universe = flat_universe(25);
        let schedule =
            EpisodeSchedule::monthly_weekly(universe.calendar(), jan(1), jan(26)).unwrap();
        let mock = MockTransport::new();
        mock.push_many(CallTag::TraderAct, hold_json(), 20);
        let gateway = gateway_with(mock);
        let mut env = TradingEnv::reset(universe, pair(), jan(1), 10_000.0, 0.0).unwrap();
        let outcome = run_trader_episode(
            &mut env,
            &gateway,
            &schedule.episodes[0],
            theta(),
            &[],
            &Default::default(),
            false,
        )
        .unwrap();
        assert_eq!(outcome.theta.version(), 0);
        assert_eq!(gateway.audit_len(), 20);
    }

    fn selector_context(universe: &AssetUniverse) -> HighLevelContext {
        HighLevelContext::build(universe, &[])
    }

    fn four_ticker_universe(days: usize) -> Arc<AssetUniverse> {
        let calendar = weekdays(jan(1), days);
        let mk = |t: &str, base: f64, drift: f64| {
            let prices: Vec<f64> = (0..days).map(|i| base * (1.0 + drift * i as f64)).collect();
            PriceSeries::new(t, calendar.clone(), prices).unwrap()
        };
        Arc::new(
            AssetUniverse::align(vec![
                mk("AAA", 100.0, 0.001),
                mk("BBB", 50.0, 0.0012),
                mk("CCC", 80.0, 0.0009),
                mk("DDD", 120.0, 0.0011),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn select_pair_retries_then_succeeds() {
        let universe = four_ticker_universe(30);
        let ctx = selector_context(&universe);
        let mock = MockTransport::new();
        mock.push(CallTag::SelectorAct, r#"{"pair":["AAA","ZZZ"]}"#);
        mock.push(CallTag::SelectorAct, r#"{"pair":["AAA","AAA"]}"#);
        mock.push(CallTag::SelectorAct, r#"{"pair":["AAA","BBB"],"rationale":"co-move"}"#);
        let gateway = gateway_with(mock);
        let phi = VersionedPrompt::from_rendered(SELECTOR_PREAMBLE).unwrap();
        let outcome = select_pair(&gateway, &phi, &ctx, &universe, 2).unwrap();
        assert_eq!(outcome.retries, 2);
        assert!(!outcome.fallback);
        assert_eq!(outcome.pair.first, "AAA");
        assert_eq!(outcome.pair.second, "BBB");
        assert!(outcome.pair.hedge_ratio > 0.0);
    }

    #[test]
    fn select_pair_falls_back_to_correlation() {
        let universe = four_ticker_universe(30);
        let ctx = selector_context(&universe);
        let mock = MockTransport::new();
        mock.push_many(CallTag::SelectorAct, "garbage", 3);
        let gateway = gateway_with(mock);
        let phi = VersionedPrompt::from_rendered(SELECTOR_PREAMBLE).unwrap();
        let outcome = select_pair(&gateway, &phi, &ctx, &universe, 2).unwrap();
        assert!(outcome.fallback);
        assert!(outcome.rationale.starts_with("fallback:"));
    }

    fn push_tuning_scripts(mock: &MockTransport, act_days: usize, subepisodes: usize) {
        mock.push_many(CallTag::TraderAct, hold_json(), act_days as u32);
        for k in 0..subepisodes {
            mock.push(CallTag::TraderCritic, format!("trader critique {k}"));
            mock.push(CallTag::TraderUpdate, format!("- trader rule {k}"));
        }
    }

    #[test]
    fn selector_loop_rejected_first_update_terminates() {
        let universe = four_ticker_universe(25);
        let ctx = selector_context(&universe);
        let schedule =
            EpisodeSchedule::monthly_weekly(universe.calendar(), jan(1), jan(26)).unwrap();
        let mock = MockTransport::new();
        mock.push(CallTag::SelectorAct, r#"{"pair":["AAA","BBB"],"rationale":"r0"}"#);
        push_tuning_scripts(&mock, 20, 4);
        mock.push(CallTag::SelectorCritic, "selector critique");
        mock.push(CallTag::SelectorUpdate, "- prefer tighter spreads");
        // Re-sample returns the same pair (swapped order still counts).
        mock.push(CallTag::SelectorAct, r#"{"pair":["BBB","AAA"],"rationale":"same"}"#);
        let gateway = gateway_with(mock);

        let phi = VersionedPrompt::from_rendered(SELECTOR_PREAMBLE).unwrap();
        let params = SelectorRunParams {
            universe: &universe,
            high_obs: &ctx,
            formation: &universe,
            schedule: &schedule,
            news: &[],
            cfg: &Default::default(),
            capital: 10_000.0,
            costs_bps: 0.0,
            max_iters: 10,
            adapt_trader: true,
            reset_trader_per_iteration: true,
        };
        let outcome = optimize_selector(&gateway, phi.clone(), theta(), &params).unwrap();
        assert!(outcome.converged);
        assert_eq!(outcome.trader_tuning_runs, 1);
        // Rejected update: returned prompt is the initial one.
        assert_eq!(outcome.phi.version(), phi.version());
        assert_eq!(outcome.pair.canonical_key(), ("AAA".into(), "BBB".into()));
        assert!(!outcome.iterations[0].accepted);
    }

    #[test]
    fn selector_loop_accepts_then_converges() {
        let universe = four_ticker_universe(25);
        let ctx = selector_context(&universe);
        let schedule =
            EpisodeSchedule::monthly_weekly(universe.calendar(), jan(1), jan(26)).unwrap();
        let mock = MockTransport::new();
        mock.push(CallTag::SelectorAct, r#"{"pair":["AAA","BBB"],"rationale":"r0"}"#);
        // Iteration 1.
        push_tuning_scripts(&mock, 20, 4);
        mock.push(CallTag::SelectorCritic, "critique 1");
        mock.push(CallTag::SelectorUpdate, "- rule v1");
        mock.push(CallTag::SelectorAct, r#"{"pair":["CCC","DDD"],"rationale":"r1"}"#);
        // Iteration 2.
        push_tuning_scripts(&mock, 20, 4);
        mock.push(CallTag::SelectorCritic, "critique 2");
        mock.push(CallTag::SelectorUpdate, "- rule v2");
        mock.push(CallTag::SelectorAct, r#"{"pair":["CCC","DDD"],"rationale":"r2"}"#);
        let gateway = gateway_with(mock);

        let phi = VersionedPrompt::from_rendered(SELECTOR_PREAMBLE).unwrap();
        let params = SelectorRunParams {
            universe: &universe,
            high_obs: &ctx,
            formation: &universe,
            schedule: &schedule,
            news: &[],
            cfg: &Default::default(),
            capital: 10_000.0,
            costs_bps: 0.0,
            max_iters: 10,
            adapt_trader: true,
            reset_trader_per_iteration: true,
        };
        let outcome = optimize_selector(&gateway, phi, theta(), &params).unwrap();
        assert!(outcome.converged);
        assert_eq!(outcome.trader_tuning_runs, 2);
        assert_eq!(outcome.iterations.len(), 2);
        assert!(outcome.iterations[0].accepted);
        assert!(!outcome.iterations[1].accepted);
        // One accepted update.
        assert_eq!(outcome.phi.version(), 1);
        assert_eq!(outcome.phi.policy_rules(), "- rule v1");
        assert_eq!(outcome.pair.canonical_key(), ("CCC".into(), "DDD".into()));
        // Selector prompt constant within each episode by construction:
        // each tuning run used a single phi version and a single pair.
        assert_eq!(outcome.iterations[0].experience.pair.canonical_key(), ("AAA".into(), "BBB".into()));
    }

    #[test]
    fn selector_loop_hits_max_iters_non_converged() {
        let universe = four_ticker_universe(25);
        let ctx = selector_context(&universe);
        let schedule =
            EpisodeSchedule::monthly_weekly(universe.calendar(), jan(1), jan(26)).unwrap();
        let mock = MockTransport::new();
        mock.push(CallTag::SelectorAct, r#"{"pair":["AAA","BBB"]}"#);
        push_tuning_scripts(&mock, 20, 4);
        mock.push(CallTag::SelectorCritic, "c");
        mock.push(CallTag::SelectorUpdate, "- r");
        mock.push(CallTag::SelectorAct, r#"{"pair":["CCC","DDD"]}"#);
        let gateway = gateway_with(mock);
        let phi = VersionedPrompt::from_rendered(SELECTOR_PREAMBLE).unwrap();
        let params = SelectorRunParams {
            universe: &universe,
            high_obs: &ctx,
            formation: &universe,
            schedule: &schedule,
            news: &[],
            cfg: &Default::default(),
            capital: 10_000.0,
            costs_bps: 0.0,
            max_iters: 1,
            adapt_trader: true,
            reset_trader_per_iteration: true,
        };
        let outcome = optimize_selector(&gateway, phi, theta(), &params).unwrap();
        assert!(!outcome.converged);
        assert_eq!(outcome.trader_tuning_runs, 1);
        assert_eq!(outcome.pair.canonical_key(), ("CCC".into(), "DDD".into()));
    }

    #[test]
    fn flat_agent_same_pair_hold_keeps_state() {
        let universe = four_ticker_universe(10);
        let days: Vec<NaiveDate> = universe.calendar()[..3].to_vec();
        let mock = MockTransport::new();
        mock.push_many(
            CallTag::TraderAct,
            r#"{"pair":["AAA","BBB"],"action":"hold"}"#,
            3,
        );
        let gateway = gateway_with(mock);
        let outcome = run_flat_agent(
            &universe,
            &gateway,
            &universe,
            &days,
            &[],
            &Default::default(),
            10_000.0,
            0.0,
        )
        .unwrap();
        assert_eq!(outcome.steps.len(), 3);
        assert!(outcome.steps.iter().all(|s| s.action == Action::Hold));
        assert!(outcome.trades.is_empty());
    }

    #[test]
    fn flat_agent_pair_switch_closes_first() {
        let universe = four_ticker_universe(10);
        let days: Vec<NaiveDate> = universe.calendar()[..3].to_vec();
        let mock = MockTransport::new();
        mock.push(CallTag::TraderAct, r#"{"pair":["AAA","BBB"],"action":"long"}"#);
        mock.push(CallTag::TraderAct, r#"{"pair":["CCC","DDD"],"action":"long"}"#);
        mock.push(CallTag::TraderAct, r#"{"pair":["CCC","DDD"],"action":"hold"}"#);
        let gateway = gateway_with(mock);
        let outcome = run_flat_agent(
            &universe,
            &gateway,
            &universe,
            &days,
            &[],
            &Default::default(),
            10_000.0,
            0.0,
        )
        .unwrap();
        assert!(outcome.steps[1].switched_pair);
        assert_eq!(outcome.steps[1].pair, "CCC/DDD");
        // The switch closed the AAA/BBB round trip.
        assert!(outcome
            .trades
            .iter()
            .any(|t| t.pair == "AAA/BBB" && t.exit_date == days[1]));
    }

    #[test]
    fn flat_agent_invalid_output_falls_back_to_hold() {
        let universe = four_ticker_universe(10);
        let days: Vec<NaiveDate> = universe.calendar()[..2].to_vec();
        let mock = MockTransport::new();
        mock.push(CallTag::TraderAct, r#"{"pair":["AAA","BBB"],"action":"long"}"#);
        mock.push_many(CallTag::TraderAct, "garbage", 3);
        let gateway = gateway_with(mock);
        let outcome = run_flat_agent(
            &universe,
            &gateway,
            &universe,
            &days,
            &[],
            &Default::default(),
            10_000.0,
            0.0,
        )
        .unwrap();
        assert!(outcome.steps[1].fallback);
        assert_eq!(outcome.steps[1].action, Action::Hold);
        // Position stays on the original pair, then force-closes at the end.
        assert_eq!(outcome.steps[1].pair, "AAA/BBB");
        assert_eq!(outcome.trades.len(), 1);
    }
}
