//! Performance statistics over equity curves, daily returns, and trade logs.
//!
//! Conventions: sample (n-1) standard deviation throughout, annualization
//! base 252 trading days, risk-free rate 0 unless stated, CVaR on raw
//! returns with sign (negative = loss). Ratio metrics that are undefined on
//! the given data (zero volatility, no losing trades, zero drawdown) come
//! back as tagged values rather than infinities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PERIODS_PER_YEAR: u32 = 252;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("equity values must be positive and finite")]
    NonPositiveEquity,
    #[error("returns contain non-finite values")]
    NonFiniteReturns,
    #[error("zero return volatility")]
    DegenerateVolatility,
    #[error("no downside observations")]
    DegenerateDownside,
    #[error("alpha must lie in (0, 1)")]
    BadAlpha,
    #[error("CVaR tail is empty at this alpha and length")]
    EmptyTail,
}

/// Daily simple returns plus the annualization base.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub daily_returns: Vec<f64>,
    pub periods_per_year: u32,
}

impl ReturnSeries {
    pub fn new(daily_returns: Vec<f64>, periods_per_year: u32) -> Result<Self, MetricsError> {
        if daily_returns.is_empty() {
            return Err(MetricsError::TooShort { need: 1, got: 0 });
        }
        if daily_returns.iter().any(|r| !r.is_finite()) {
            return Err(MetricsError::NonFiniteReturns);
        }
        Ok(Self {
            daily_returns,
            periods_per_year,
        })
    }

    /// Simple returns `e[t+1]/e[t] - 1` from an equity curve.
    pub fn from_equity(equity: &[f64], periods_per_year: u32) -> Result<Self, MetricsError> {
        if equity.len() < 2 {
            return Err(MetricsError::TooShort {
                need: 2,
                got: equity.len(),
            });
        }
        check_equity(equity)?;
        let daily_returns = equity.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        Self::new(daily_returns, periods_per_year)
    }

    pub fn len(&self) -> usize {
        self.daily_returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.daily_returns.is_empty()
    }
}

fn check_equity(equity: &[f64]) -> Result<(), MetricsError> {
    if equity.iter().any(|e| !e.is_finite() || *e <= 0.0) {
        return Err(MetricsError::NonPositiveEquity);
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample (n-1) standard deviation.
fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Some(var.sqrt())
}

/// Geometric annualized return as a fraction (1.0 = +100%/yr).
pub fn annualized_return(equity: &[f64], periods_per_year: u32) -> Result<f64, MetricsError> {
    if equity.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: equity.len(),
        });
    }
    check_equity(equity)?;
    let periods = (equity.len() - 1) as f64;
    let growth = equity[equity.len() - 1] / equity[0];
    Ok(growth.powf(periods_per_year as f64 / periods) - 1.0)
}

/// Annualized Sharpe ratio: mean excess daily return over its sample
/// standard deviation, scaled by sqrt(periods per year).
pub fn sharpe(r: &ReturnSeries, rf_daily: f64) -> Result<f64, MetricsError> {
    if r.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: r.len(),
        });
    }
    let excess: Vec<f64> = r.daily_returns.iter().map(|x| x - rf_daily).collect();
    let sd = sample_std(&excess).expect("len >= 2");
    if sd == 0.0 {
        return Err(MetricsError::DegenerateVolatility);
    }
    Ok(mean(&excess) / sd * (r.periods_per_year as f64).sqrt())
}

/// Annualized Sortino ratio. Downside deviation is the root mean square of
/// negative excess returns, averaged over the full series length.
pub fn sortino(r: &ReturnSeries, rf_daily: f64) -> Result<f64, MetricsError> {
    let excess: Vec<f64> = r.daily_returns.iter().map(|x| x - rf_daily).collect();
    let downside_sq: f64 = excess.iter().filter(|x| **x < 0.0).map(|x| x * x).sum();
    if downside_sq == 0.0 {
        return Err(MetricsError::DegenerateDownside);
    }
    let downside_dev = (downside_sq / excess.len() as f64).sqrt();
    Ok(mean(&excess) / downside_dev * (r.periods_per_year as f64).sqrt())
}

/// Maximum peak-to-trough equity decline, as a fraction of the peak.
pub fn max_drawdown(equity: &[f64]) -> Result<f64, MetricsError> {
    if equity.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    check_equity(equity)?;
    let mut peak = equity[0];
    let mut mdd = 0.0_f64;
    for &v in equity {
        if v > peak {
            peak = v;
        }
        mdd = mdd.max((peak - v) / peak);
    }
    Ok(mdd)
}

/// Sample standard deviation of daily returns scaled by sqrt(periods/yr).
pub fn annualized_vol(r: &ReturnSeries) -> Result<f64, MetricsError> {
    let sd = sample_std(&r.daily_returns).ok_or(MetricsError::TooShort {
        need: 2,
        got: r.len(),
    })?;
    Ok(sd * (r.periods_per_year as f64).sqrt())
}

/// Calmar ratio AR/MDD on same-unit inputs; `None` when the drawdown is
/// zero (undefined, never reported as infinity).
pub fn calmar(ar: f64, mdd: f64) -> Option<f64> {
    if mdd == 0.0 {
        None
    } else {
        Some(ar / mdd)
    }
}

/// Conditional value at risk: mean of the worst `floor((1-alpha)*n)`
/// returns, signed (negative = loss).
pub fn cvar(r: &ReturnSeries, alpha: f64) -> Result<f64, MetricsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::BadAlpha);
    }
    let tail = ((1.0 - alpha) * r.len() as f64).floor() as usize;
    if tail == 0 {
        return Err(MetricsError::EmptyTail);
    }
    let mut sorted = r.daily_returns.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    Ok(mean(&sorted[..tail]))
}

/// `Σ wins / |Σ losses|`; `Infinite` when there are no losing trades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProfitFactor {
    Finite(f64),
    Infinite,
}

/// Win/loss structure of a closed-trade log (fractional returns in, percent
/// figures out). All fields are `None` on an empty log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TradeStats {
    pub trades: usize,
    pub win_rate_pct: Option<f64>,
    pub mean_win_pct: Option<f64>,
    pub mean_win_std_pct: Option<f64>,
    pub mean_loss_pct: Option<f64>,
    pub mean_loss_std_pct: Option<f64>,
    pub profit_factor: Option<ProfitFactor>,
}

pub fn trade_stats(trade_returns: &[f64]) -> TradeStats {
    if trade_returns.is_empty() {
        return TradeStats::default();
    }
    let wins: Vec<f64> = trade_returns.iter().copied().filter(|r| *r > 0.0).collect();
    let losses: Vec<f64> = trade_returns.iter().copied().filter(|r| *r < 0.0).collect();
    let gross_win: f64 = wins.iter().sum();
    let gross_loss: f64 = losses.iter().sum::<f64>().abs();
    let profit_factor = if gross_loss == 0.0 {
        ProfitFactor::Infinite
    } else {
        ProfitFactor::Finite(gross_win / gross_loss)
    };
    let pct = |xs: &[f64]| {
        if xs.is_empty() {
            (None, None)
        } else {
            (
                Some(mean(xs) * 100.0),
                sample_std(xs).map(|s| s * 100.0),
            )
        }
    };
    let (mean_win_pct, mean_win_std_pct) = pct(&wins);
    let (mean_loss_pct, mean_loss_std_pct) = pct(&losses);
    TradeStats {
        trades: trade_returns.len(),
        win_rate_pct: Some(wins.len() as f64 / trade_returns.len() as f64 * 100.0),
        mean_win_pct,
        mean_win_std_pct,
        mean_loss_pct,
        mean_loss_std_pct,
        profit_factor: Some(profit_factor),
    }
}

/// Full report over one run: percent units where customary (AR, MDD, AV,
/// CVaR, win/loss means), raw ratios elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ar_pct: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub calmar: Option<f64>,
    pub mdd_pct: f64,
    pub av_pct: f64,
    pub cvar_pct: Option<f64>,
    #[serde(flatten)]
    pub trade_stats: TradeStats,
}

/// Inputs that parameterize a [`MetricReport`].
#[derive(Debug, Clone, Copy)]
pub struct MetricParams {
    pub periods_per_year: u32,
    pub rf_daily: f64,
    pub cvar_alpha: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            periods_per_year: PERIODS_PER_YEAR,
            rf_daily: 0.0,
            cvar_alpha: 0.95,
        }
    }
}

impl MetricReport {
    /// Computes every metric from an equity curve and closed-trade returns.
    /// Metrics undefined on the data come back as `None`.
    pub fn compute(
        equity: &[f64],
        trade_returns: &[f64],
        params: MetricParams,
    ) -> Result<Self, MetricsError> {
        if equity.len() < 3 {
            return Err(MetricsError::TooShort {
                need: 3,
                got: equity.len(),
            });
        }
        let returns = ReturnSeries::from_equity(equity, params.periods_per_year)?;
        let ar = annualized_return(equity, params.periods_per_year)?;
        let mdd = max_drawdown(equity)?;
        Ok(Self {
            ar_pct: ar * 100.0,
            sharpe: sharpe(&returns, params.rf_daily).ok(),
            sortino: sortino(&returns, params.rf_daily).ok(),
            calmar: calmar(ar, mdd),
            mdd_pct: mdd * 100.0,
            av_pct: annualized_vol(&returns)? * 100.0,
            cvar_pct: cvar(&returns, params.cvar_alpha).ok().map(|c| c * 100.0),
            trade_stats: trade_stats(trade_returns),
        })
    }

    pub const CSV_HEADER: &'static str = "model,ar_pct,sr,sortino,calmar,mdd_pct,av_pct,cvar_pct,\
                                          trades,win_rate_pct,mean_win_pct,mean_win_std_pct,\
                                          mean_loss_pct,mean_loss_std_pct,profit_factor";

    /// One CSV row in the reporting column order (AR% SR Sortino CR MDD%
    /// AV% CVaR%, then trade statistics). Undefined cells are empty.
    pub fn to_csv_row(&self, model: &str) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let pf = match &self.trade_stats.profit_factor {
            None => String::new(),
            Some(ProfitFactor::Infinite) => "inf".to_string(),
            Some(ProfitFactor::Finite(x)) => x.to_string(),
        };
        format!(
            "{model},{},{},{},{},{},{},{},{},{},{},{},{},{},{pf}",
            self.ar_pct,
            opt(&self.sharpe),
            opt(&self.sortino),
            opt(&self.calmar),
            self.mdd_pct,
            self.av_pct,
            opt(&self.cvar_pct),
            self.trade_stats.trades,
            opt(&self.trade_stats.win_rate_pct),
            opt(&self.trade_stats.mean_win_pct),
            opt(&self.trade_stats.mean_win_std_pct),
            opt(&self.trade_stats.mean_loss_pct),
            opt(&self.trade_stats.mean_loss_std_pct),
        )
    }

    /// Parses a row produced by [`Self::to_csv_row`]; returns (model, report).
    pub fn from_csv_row(row: &str) -> Option<(String, Self)> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 15 {
            return None;
        }
        let req = |s: &str| s.parse::<f64>().ok();
        let opt = |s: &str| {
            if s.is_empty() {
                None
            } else {
                s.parse::<f64>().ok()
            }
        };
        let profit_factor = match fields[14] {
            "" => None,
            "inf" => Some(ProfitFactor::Infinite),
            s => Some(ProfitFactor::Finite(s.parse().ok()?)),
        };
        Some((
            fields[0].to_string(),
            Self {
                ar_pct: req(fields[1])?,
                sharpe: opt(fields[2]),
                sortino: opt(fields[3]),
                calmar: opt(fields[4]),
                mdd_pct: req(fields[5])?,
                av_pct: req(fields[6])?,
                cvar_pct: opt(fields[7]),
                trade_stats: TradeStats {
                    trades: fields[8].parse().ok()?,
                    win_rate_pct: opt(fields[9]),
                    mean_win_pct: opt(fields[10]),
                    mean_win_std_pct: opt(fields[11]),
                    mean_loss_pct: opt(fields[12]),
                    mean_loss_std_pct: opt(fields[13]),
                    profit_factor,
                },
            },
        ))
    }

    /// Plain-text table for terminal output.
    pub fn to_table(&self, model: &str) -> String {
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "—".to_string());
        let pf = match &self.trade_stats.profit_factor {
            None => "—".to_string(),
            Some(ProfitFactor::Infinite) => "inf".to_string(),
            Some(ProfitFactor::Finite(x)) => format!("{x:.3}"),
        };
        format!(
            "model: {model}\n\
             AR%      {:>10.3}\nSR       {:>10}\nSortino  {:>10}\nCalmar   {:>10}\n\
             MDD%     {:>10.3}\nAV%      {:>10.3}\nCVaR%    {:>10}\n\
             trades   {:>10}\nwin%     {:>10}\nPF       {:>10}\n",
            self.ar_pct,
            fmt(&self.sharpe),
            fmt(&self.sortino),
            fmt(&self.calmar),
            self.mdd_pct,
            self.av_pct,
            fmt(&self.cvar_pct),
            self.trade_stats.trades,
            fmt(&self.trade_stats.win_rate_pct),
            pf,
        )
    }
}
