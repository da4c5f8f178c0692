//! Replayable market-neutral pair-trading environment.
//!
//! The environment executes long/short/close/hold over one fixed pair,
//! fills at the decision day's close, marks to market at the next day's
//! close, and reports the daily portfolio simple return as the reward.
//! Equity is normalized to 1 at reset; replay is bit-deterministic for a
//! fixed (universe, pair, action sequence, config).

use std::fmt;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{AssetUniverse, MarketDataError, NewsDigest, ObservationWindow};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("start date {0} is not a trading day of the universe")]
    StartOutsideCalendar(NaiveDate),
    #[error("illegal transition: {action} while {side}")]
    IllegalTransition { side: Side, action: Action },
    #[error("calendar exhausted: no trading day after {0} to mark against")]
    CalendarExhausted(NaiveDate),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Trading action. `long` buys the first ticker and shorts the second;
/// `short` is the reverse; `close` exits to flat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Long,
    Short,
    Close,
    Hold,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Long => "long",
            Action::Short => "short",
            Action::Close => "close",
            Action::Hold => "hold",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "long" => Some(Action::Long),
            "short" => Some(Action::Short),
            "close" => Some(Action::Close),
            "hold" => Some(Action::Hold),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Flat,
    Long,
    Short,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Flat => "flat",
            Side::Long => "long",
            Side::Short => "short",
        })
    }
}

/// An unordered ticker pair with a presentation order (which leg is
/// "first" for action semantics) and a hedge ratio for sizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairContext {
    pub first: String,
    pub second: String,
    pub hedge_ratio: f64,
}

impl PairContext {
    pub fn new(
        first: impl Into<String>,
        second: impl Into<String>,
        hedge_ratio: f64,
    ) -> Result<Self, EnvError> {
        let first = first.into().to_ascii_uppercase();
        let second = second.into().to_ascii_uppercase();
        if first == second {
            return Err(EnvError::InvalidParameter(format!(
                "pair legs must differ, got {first}/{second}"
            )));
        }
        if !(hedge_ratio.is_finite() && hedge_ratio > 0.0) {
            return Err(EnvError::InvalidParameter(format!(
                "hedge ratio must be positive, got {hedge_ratio}"
            )));
        }
        Ok(Self {
            first,
            second,
            hedge_ratio,
        })
    }

    /// Canonical unordered key (alphabetical), independent of presentation.
    pub fn canonical_key(&self) -> (String, String) {
        if self.first <= self.second {
            (self.first.clone(), self.second.clone())
        } else {
            (self.second.clone(), self.first.clone())
        }
    }

    /// Unordered equality: same ticker set regardless of presentation.
    pub fn same_pair(&self, other: &PairContext) -> bool {
        self.canonical_key() == other.canonical_key()
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.first, self.second)
    }
}

/// One leg of an open position: signed share count and fill price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub shares: f64,
    pub entry_price: f64,
}

impl Leg {
    const FLAT: Leg = Leg {
        shares: 0.0,
        entry_price: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub side: Side,
    pub leg_a: Leg,
    pub leg_b: Leg,
    pub entry_date: Option<NaiveDate>,
}

impl Position {
    fn flat() -> Self {
        Self {
            side: Side::Flat,
            leg_a: Leg::FLAT,
            leg_b: Leg::FLAT,
            entry_date: None,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.side == Side::Flat
    }
}

/// A closed round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub entry_date: NaiveDate,
    pub exit_date: NaiveDate,
    pub side: Side,
    pub pair: String,
    /// Fractional return of normalized equity over the trade.
    pub trade_return: f64,
}

/// What the trader may see on a given day.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub date: NaiveDate,
    /// Per-leg `(ticker, window of (date, close))`, oldest first, truncated
    /// at data start.
    pub recent_prices: Vec<(String, Vec<(NaiveDate, f64)>)>,
    pub recent_news: Vec<NewsDigest>,
    pub position: Position,
    pub permissible_actions: Vec<Action>,
}

/// Splits free capital across the two legs: half the notional to leg A,
/// leg B scaled by the hedge ratio so the log-spread exposure is hedged.
/// Returns unsigned share counts; the caller applies side signs.
pub fn position_sizing(
    capital_free: f64,
    prices: (f64, f64),
    beta: f64,
) -> Result<(f64, f64), EnvError> {
    let (pa, pb) = prices;
    if !(capital_free.is_finite() && capital_free > 0.0) {
        return Err(EnvError::InvalidParameter(format!(
            "capital must be positive, got {capital_free}"
        )));
    }
    if !(pa > 0.0 && pb > 0.0 && beta > 0.0) {
        return Err(EnvError::InvalidParameter(
            "prices and hedge ratio must be positive".to_string(),
        ));
    }
    let shares_a = capital_free / 2.0 / pa;
    let shares_b = beta * shares_a * pa / pb;
    Ok((shares_a, shares_b))
}

/// Environment state for one pair over one calendar span. Fills happen at
/// the close of the decision day; the reward for a step is the next day's
/// portfolio return. Fractional shares are allowed.
#[derive(Debug, Clone)]
pub struct TradingEnv {
    universe: Arc<AssetUniverse>,
    pair: PairContext,
    costs_bps: f64,
    initial_capital: f64,
    cash: f64,
    position: Position,
    clock: usize,
    start_index: usize,
    equity_curve: Vec<f64>,
    trade_log: Vec<TradeRecord>,
    entry_equity: f64,
}

impl TradingEnv {
    /// Starts flat at `start` with normalized equity 1.
    pub fn reset(
        universe: Arc<AssetUniverse>,
        pair: PairContext,
        start: NaiveDate,
        capital: f64,
        costs_bps: f64,
    ) -> Result<Self, EnvError> {
        for leg in [&pair.first, &pair.second] {
            if !universe.contains(leg) {
                return Err(MarketDataError::UnknownTicker(leg.clone()).into());
            }
        }
        let start_index = universe
            .date_index(start)
            .ok_or(EnvError::StartOutsideCalendar(start))?;
        if !(capital.is_finite() && capital > 0.0) {
            return Err(EnvError::InvalidParameter(format!(
                "capital must be positive, got {capital}"
            )));
        }
        if !(costs_bps.is_finite() && costs_bps >= 0.0) {
            return Err(EnvError::InvalidParameter(format!(
                "costs_bps must be nonnegative, got {costs_bps}"
            )));
        }
        Ok(Self {
            universe,
            pair,
            costs_bps,
            initial_capital: capital,
            cash: capital,
            position: Position::flat(),
            clock: start_index,
            start_index,
            equity_curve: vec![1.0],
            trade_log: Vec::new(),
            entry_equity: 1.0,
        })
    }

    pub fn pair(&self) -> &PairContext {
        &self.pair
    }

    pub fn position(&self) -> &Position {
        &self.position
    }

    pub fn current_date(&self) -> NaiveDate {
        self.universe.calendar()[self.clock]
    }

    /// Equity points, one per elapsed day starting at the reset day.
    pub fn equity_curve(&self) -> &[f64] {
        &self.equity_curve
    }

    pub fn equity_dates(&self) -> &[NaiveDate] {
        &self.universe.calendar()[self.start_index..=self.clock]
    }

    pub fn trade_log(&self) -> &[TradeRecord] {
        &self.trade_log
    }

    pub fn permissible_actions(&self) -> Vec<Action> {
        if self.position.is_flat() {
            vec![Action::Long, Action::Short, Action::Hold]
        } else {
            vec![Action::Close, Action::Hold]
        }
    }

    fn price(&self, ticker: &str, index: usize) -> f64 {
        self.universe.price_at(ticker, index).expect("validated pair")
    }

    fn prices_now(&self) -> (f64, f64) {
        (
            self.price(&self.pair.first, self.clock),
            self.price(&self.pair.second, self.clock),
        )
    }

    /// Normalized equity: (cash + marked legs) / initial capital.
    pub fn mark_to_market(&self) -> f64 {
        let (pa, pb) = self.prices_now();
        let legs = self.position.leg_a.shares * pa + self.position.leg_b.shares * pb;
        (self.cash + legs) / self.initial_capital
    }

    fn charge_costs(&mut self, notional: f64) {
        self.cash -= notional.abs() * self.costs_bps / 10_000.0;
    }

    fn open(&mut self, side: Side) -> Result<(), EnvError> {
        let (pa, pb) = self.prices_now();
        let (shares_a, shares_b) = position_sizing(self.cash, (pa, pb), self.pair.hedge_ratio)?;
        let (sa, sb) = match side {
            Side::Long => (shares_a, -shares_b),
            Side::Short => (-shares_a, shares_b),
            Side::Flat => unreachable!("open is called with a direction"),
        };
        self.cash -= sa * pa + sb * pb;
        self.charge_costs(sa * pa);
        self.charge_costs(sb * pb);
        self.position = Position {
            side,
            leg_a: Leg {
                shares: sa,
                entry_price: pa,
            },
            leg_b: Leg {
                shares: sb,
                entry_price: pb,
            },
            entry_date: Some(self.current_date()),
        };
        self.entry_equity = self.mark_to_market();
        Ok(())
    }

    fn close(&mut self) {
        let (pa, pb) = self.prices_now();
        let sa = self.position.leg_a.shares;
        let sb = self.position.leg_b.shares;
        self.cash += sa * pa + sb * pb;
        self.charge_costs(sa * pa);
        self.charge_costs(sb * pb);
        let exit_equity = (self.cash) / self.initial_capital;
        self.trade_log.push(TradeRecord {
            entry_date: self.position.entry_date.expect("open position has entry"),
            exit_date: self.current_date(),
            side: self.position.side,
            pair: self.pair.label(),
            trade_return: exit_equity / self.entry_equity - 1.0,
        });
        self.position = Position::flat();
    }

    /// Applies `action` at today's close, advances one day, and returns the
    /// daily portfolio return realized at the new day's close.
    pub fn step(&mut self, action: Action) -> Result<f64, EnvError> {
        if self.clock + 1 >= self.universe.calendar().len() {
            return Err(EnvError::CalendarExhausted(self.current_date()));
        }
        match (self.position.side, action) {
            (Side::Flat, Action::Long) => self.open(Side::Long)?,
            (Side::Flat, Action::Short) => self.open(Side::Short)?,
            (Side::Flat, Action::Close) => {
                return Err(EnvError::IllegalTransition {
                    side: Side::Flat,
                    action,
                })
            }
            (side @ (Side::Long | Side::Short), Action::Long | Action::Short) => {
                return Err(EnvError::IllegalTransition { side, action })
            }
            (Side::Long | Side::Short, Action::Close) => self.close(),
            (_, Action::Hold) => {}
        }
        let prev_equity = *self.equity_curve.last().expect("nonempty curve");
        self.clock += 1;
        let equity = self.mark_to_market();
        self.equity_curve.push(equity);
        Ok(equity / prev_equity - 1.0)
    }

    /// Closes any open position at the current day's close and re-marks the
    /// final equity point in place, so the curve ends realized.
    pub fn force_close(&mut self) {
        if self.position.is_flat() {
            return;
        }
        self.close();
        let equity = self.mark_to_market();
        *self.equity_curve.last_mut().expect("nonempty curve") = equity;
    }

    /// Assembles the trader's view for the current day: per-leg price
    /// windows (truncated at data start), pair/market news within the news
    /// lookback, position state, and the legal action set.
    pub fn build_observation(
        &self,
        news: &[NewsDigest],
        window: ObservationWindow,
    ) -> Observation {
        let date = self.current_date();
        let lo = (self.clock + 1).saturating_sub(window.price_lookback);
        let calendar = self.universe.calendar();
        let mut recent_prices = Vec::with_capacity(2);
        for ticker in [&self.pair.first, &self.pair.second] {
            let series = self.universe.series(ticker).expect("validated pair");
            let points = (lo..=self.clock)
                .map(|i| (calendar[i], series.prices()[i]))
                .collect();
            recent_prices.push((ticker.clone(), points));
        }
        let news_start = calendar[(self.clock + 1).saturating_sub(window.news_lookback)];
        let recent_news = news
            .iter()
            .filter(|d| {
                d.date >= news_start
                    && d.date <= date
                    && (d.applies_to(&self.pair.first) || d.applies_to(&self.pair.second))
            })
            .cloned()
            .collect();
        Observation {
            date,
            recent_prices,
            recent_news,
            position: self.position.clone(),
            permissible_actions: self.permissible_actions(),
        }
    }
}

/// Writes `date,equity` CSV rows.
pub fn equity_csv(dates: &[NaiveDate], equity: &[f64]) -> String {
    let mut out = String::from("date,equity\n");
    for (d, e) in dates.iter().zip(equity) {
        out.push_str(&format!("{d},{e}\n"));
    }
    out
}

/// Writes `entry_date,exit_date,side,pair,return_pct` CSV rows.
pub fn trades_csv(trades: &[TradeRecord]) -> String {
    let mut out = String::from("entry_date,exit_date,side,pair,return_pct\n");
    for t in trades {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.entry_date,
            t.exit_date,
            t.side,
            t.pair,
            t.trade_return * 100.0
        ));
    }
    out
}
