//! Daily price panels and news digests: ingestion, alignment, windowing.
//!
//! Prices arrive as CSV rows `date,ticker,adj_close` and are aligned to the
//! strict intersection of trading days across all tickers. News arrives as
//! JSON-lines records and is kept date-sorted. Both structures are read-only
//! after construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("no common trading days across tickers")]
    EmptyCalendar,
    #[error("universe needs at least one ticker")]
    NoTickers,
    #[error("ticker {0} not in universe")]
    UnknownTicker(String),
    #[error("invalid slice: start {start} is after end {end}")]
    InvalidSlice { start: NaiveDate, end: NaiveDate },
    #[error("empty slice: no trading days in [{start}, {end}]")]
    EmptySlice { start: NaiveDate, end: NaiveDate },
    #[error("price series is empty")]
    EmptySeries,
    #[error("price series invariant violated: {0}")]
    InvalidSeries(String),
    #[error("observation window lengths must be >= 1")]
    InvalidWindow,
}

/// One ticker's daily adjusted-close history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    ticker: String,
    dates: Vec<NaiveDate>,
    adj_close: Vec<f64>,
}

impl PriceSeries {
    /// Validates strictly increasing dates, positive prices, equal lengths.
    pub fn new(
        ticker: impl Into<String>,
        dates: Vec<NaiveDate>,
        adj_close: Vec<f64>,
    ) -> Result<Self, MarketDataError> {
        let ticker = ticker.into().to_ascii_uppercase();
        if dates.is_empty() {
            return Err(MarketDataError::EmptySeries);
        }
        if dates.len() != adj_close.len() {
            return Err(MarketDataError::InvalidSeries(format!(
                "{ticker}: {} dates vs {} prices",
                dates.len(),
                adj_close.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MarketDataError::InvalidSeries(format!(
                "{ticker}: dates not strictly increasing"
            )));
        }
        if let Some(p) = adj_close.iter().find(|p| !p.is_finite() || **p <= 0.0) {
            return Err(MarketDataError::InvalidSeries(format!(
                "{ticker}: non-positive price {p}"
            )));
        }
        Ok(Self {
            ticker,
            dates,
            adj_close,
        })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &[f64] {
        &self.adj_close
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Aligned panel of price series over a common trading-day calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetUniverse {
    series: BTreeMap<String, PriceSeries>,
    calendar: Vec<NaiveDate>,
}

impl AssetUniverse {
    /// Aligns raw per-ticker histories to their intersection calendar.
    /// Days missing for any single ticker are dropped universe-wide.
    pub fn align(raw: Vec<PriceSeries>) -> Result<Self, MarketDataError> {
        if raw.is_empty() {
            return Err(MarketDataError::NoTickers);
        }
        let mut calendar: Option<BTreeSet<NaiveDate>> = None;
        for s in &raw {
            let days: BTreeSet<NaiveDate> = s.dates.iter().copied().collect();
            calendar = Some(match calendar {
                None => days,
                Some(acc) => acc.intersection(&days).copied().collect(),
            });
        }
        let calendar: Vec<NaiveDate> = calendar.unwrap_or_default().into_iter().collect();
        if calendar.is_empty() {
            return Err(MarketDataError::EmptyCalendar);
        }
        let mut series = BTreeMap::new();
        for s in raw {
            let by_date: BTreeMap<NaiveDate, f64> =
                s.dates.iter().copied().zip(s.adj_close.iter().copied()).collect();
            let prices: Vec<f64> = calendar.iter().map(|d| by_date[d]).collect();
            let aligned = PriceSeries::new(s.ticker.clone(), calendar.clone(), prices)?;
            series.insert(aligned.ticker.clone(), aligned);
        }
        Ok(Self { series, calendar })
    }

    pub fn calendar(&self) -> &[NaiveDate] {
        &self.calendar
    }

    /// Tickers in sorted order.
    pub fn tickers(&self) -> Vec<&str> {
        self.series.keys().map(String::as_str).collect()
    }

    pub fn num_tickers(&self) -> usize {
        self.series.len()
    }

    pub fn num_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn series(&self, ticker: &str) -> Result<&PriceSeries, MarketDataError> {
        self.series
            .get(&ticker.to_ascii_uppercase())
            .ok_or_else(|| MarketDataError::UnknownTicker(ticker.to_string()))
    }

    pub fn contains(&self, ticker: &str) -> bool {
        self.series.contains_key(&ticker.to_ascii_uppercase())
    }

    /// Index of `date` in the calendar, if it is a trading day.
    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.calendar.binary_search(&date).ok()
    }

    /// Price of `ticker` at calendar position `index`.
    pub fn price_at(&self, ticker: &str, index: usize) -> Result<f64, MarketDataError> {
        Ok(self.series(ticker)?.adj_close[index])
    }

    /// Sub-universe over the trading days in `[start, end]` (inclusive).
    pub fn slice(&self, start: NaiveDate, end: NaiveDate) -> Result<Self, MarketDataError> {
        if start > end {
            return Err(MarketDataError::InvalidSlice { start, end });
        }
        let lo = self.calendar.partition_point(|d| *d < start);
        let hi = self.calendar.partition_point(|d| *d <= end);
        if lo == hi {
            return Err(MarketDataError::EmptySlice { start, end });
        }
        let calendar = self.calendar[lo..hi].to_vec();
        let mut series = BTreeMap::new();
        for (ticker, s) in &self.series {
            let sliced =
                PriceSeries::new(ticker.clone(), calendar.clone(), s.adj_close[lo..hi].to_vec())?;
            series.insert(ticker.clone(), sliced);
        }
        Ok(Self { series, calendar })
    }

    /// Restrict to the given tickers (errors on any unknown ticker).
    pub fn restrict(&self, tickers: &[String]) -> Result<Self, MarketDataError> {
        if tickers.is_empty() {
            return Err(MarketDataError::NoTickers);
        }
        let mut series = BTreeMap::new();
        for t in tickers {
            let key = t.to_ascii_uppercase();
            let s = self
                .series
                .get(&key)
                .ok_or_else(|| MarketDataError::UnknownTicker(t.clone()))?;
            series.insert(key, s.clone());
        }
        Ok(Self {
            series,
            calendar: self.calendar.clone(),
        })
    }
}

/// One day's summarized news for a ticker or the whole market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsDigest {
    pub date: NaiveDate,
    /// Ticker symbol, or `"MARKET"` for universe-wide items.
    pub scope: String,
    pub text: String,
    #[serde(rename = "source")]
    pub source_tag: String,
}

impl NewsDigest {
    pub fn applies_to(&self, ticker: &str) -> bool {
        self.scope == "MARKET" || self.scope.eq_ignore_ascii_case(ticker)
    }
}

/// Lookback lengths (in trading days) for the trader's observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub price_lookback: usize,
    pub news_lookback: usize,
}

impl ObservationWindow {
    pub fn new(price_lookback: usize, news_lookback: usize) -> Result<Self, MarketDataError> {
        if price_lookback == 0 || news_lookback == 0 {
            return Err(MarketDataError::InvalidWindow);
        }
        Ok(Self {
            price_lookback,
            news_lookback,
        })
    }
}

impl Default for ObservationWindow {
    fn default() -> Self {
        Self {
            price_lookback: 20,
            news_lookback: 5,
        }
    }
}

/// Loads `date,ticker,adj_close` CSV and aligns to the intersection calendar.
pub fn load_prices(path: impl AsRef<Path>) -> Result<AssetUniverse, MarketDataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| MarketDataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| MarketDataError::Parse {
            path: path_str.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["date", "ticker", "adj_close"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(MarketDataError::Parse {
            path: path_str,
            line: 1,
            message: format!("expected header {expected:?}, got {got:?}"),
        });
    }

    let mut by_ticker: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| MarketDataError::Parse {
            path: path_str.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| MarketDataError::Parse {
            path: path_str.clone(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", record.len())));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| parse_err(format!("bad date {:?}: {e}", &record[0])))?;
        let ticker = record[1].trim().to_ascii_uppercase();
        if ticker.is_empty() {
            return Err(parse_err("empty ticker".to_string()));
        }
        let price: f64 = record[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad price {:?}: {e}", &record[2])))?;
        if !price.is_finite() || price <= 0.0 {
            return Err(parse_err(format!(
                "non-positive price {price} for {ticker} on {date}"
            )));
        }
        by_ticker.entry(ticker).or_default().push((date, price));
    }
    if by_ticker.is_empty() {
        return Err(MarketDataError::NoTickers);
    }

    let mut raw = Vec::with_capacity(by_ticker.len());
    for (ticker, mut rows) in by_ticker {
        rows.sort_by_key(|(d, _)| *d);
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MarketDataError::InvalidSeries(format!(
                "{ticker}: duplicate date rows"
            )));
        }
        let (dates, prices): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        raw.push(PriceSeries::new(ticker, dates, prices)?);
    }
    AssetUniverse::align(raw)
}

/// Writes a universe back to `date,ticker,adj_close` CSV (sorted by ticker,
/// then date). `load_prices(save_prices(u)) == u`.
pub fn save_prices(
    universe: &AssetUniverse,
    path: impl AsRef<Path>,
) -> Result<(), MarketDataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut out = File::create(path).map_err(|source| MarketDataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let io_err = |source| MarketDataError::Io {
        path: path_str.clone(),
        source,
    };
    writeln!(out, "date,ticker,adj_close").map_err(io_err)?;
    for ticker in universe.tickers() {
        let series = universe.series(ticker).expect("listed ticker");
        for (date, price) in series.dates().iter().zip(series.prices()) {
            writeln!(out, "{date},{ticker},{price}").map_err(|source| MarketDataError::Io {
                path: path_str.clone(),
                source,
            })?;
        }
    }
    Ok(())
}

/// Loads JSON-lines news digests, sorted by date (stable within a date).
pub fn load_news(path: impl AsRef<Path>) -> Result<Vec<NewsDigest>, MarketDataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| MarketDataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut digests = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|source| MarketDataError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let digest: NewsDigest =
            serde_json::from_str(&line).map_err(|e| MarketDataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: e.to_string(),
            })?;
        if digest.text.trim().is_empty() {
            return Err(MarketDataError::Parse {
                path: path_str.clone(),
                line: line_no,
                message: "digest text must be nonempty".to_string(),
            });
        }
        digests.push(digest);
    }
    digests.sort_by_key(|d| d.date);
    Ok(digests)
}

/// Cumulative total-return index: `out[t] = price[t] / price[0]`.
pub fn normalize_prices(series: &PriceSeries) -> Vec<f64> {
    let first = series.adj_close[0];
    series.adj_close.iter().map(|p| p / first).collect()
}
