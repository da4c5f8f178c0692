//! Statistical pair selection and the classical threshold execution rule.
//!
//! Selection ranks all C(N,2) pairs by distance between normalized price
//! paths, by Pearson correlation of daily log-returns, or by Engle-Granger
//! cointegration. Regressions run on log prices so hedge ratios are
//! scale-free. ADF p-values come from a built-in MacKinnon interpolation
//! (constant, no trend) rather than an external statistics package.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::market_data::{normalize_prices, AssetUniverse, PriceSeries};
use crate::trading_env::Action;

#[derive(Debug, Error, PartialEq)]
pub enum BaselinesError {
    #[error("need at least {need} tickers, got {got}")]
    TooFewTickers { need: usize, got: usize },
    #[error("need at least {need} observations, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("singular regression: regressor has no variance")]
    SingularRegression,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("threshold rule requires open_k > close_k >= 0")]
    InvalidRule,
}

/// Pair ranking; `score: None` marks pairs whose statistic is undefined
/// (e.g. a zero-variance return series), ranked after all defined scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPair {
    /// Alphabetically first ticker of the unordered pair.
    pub a: String,
    pub b: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPairs {
    pub entries: Vec<RankedPair>,
    /// Sort direction the entries are already in.
    pub lower_is_better: bool,
}

impl RankedPairs {
    pub fn best(&self) -> Option<&RankedPair> {
        self.entries.first()
    }
}

/// Two-step cointegration evidence: OLS of log a on log b, then a unit-root
/// test on the residual spread.
#[derive(Debug, Clone, PartialEq)]
pub struct CointegrationResult {
    pub beta: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub adf_stat: f64,
    pub p_value: f64,
}

fn sorted_pair<'a>(x: &'a str, y: &'a str) -> (&'a str, &'a str) {
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

fn rank(mut entries: Vec<RankedPair>, lower_is_better: bool) -> RankedPairs {
    entries.sort_by(|p, q| {
        match (&p.score, &q.score) {
            (Some(a), Some(b)) => {
                let ord = a.partial_cmp(b).expect("finite scores");
                if lower_is_better {
                    ord
                } else {
                    ord.reverse()
                }
            }
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| (&p.a, &p.b).cmp(&(&q.a, &q.b)))
    });
    RankedPairs {
        entries,
        lower_is_better,
    }
}

fn all_pairs(universe: &AssetUniverse) -> Result<Vec<(String, String)>, BaselinesError> {
    let tickers = universe.tickers();
    if tickers.len() < 2 {
        return Err(BaselinesError::TooFewTickers {
            need: 2,
            got: tickers.len(),
        });
    }
    let mut pairs = Vec::new();
    for i in 0..tickers.len() {
        for j in (i + 1)..tickers.len() {
            let (a, b) = sorted_pair(tickers[i], tickers[j]);
            pairs.push((a.to_string(), b.to_string()));
        }
    }
    Ok(pairs)
}

/// Distance ranking: mean squared gap between normalized price paths,
/// ascending (closest pair first).
pub fn ggr_select(universe: &AssetUniverse) -> Result<RankedPairs, BaselinesError> {
    let pairs = all_pairs(universe)?;
    if universe.num_days() < 2 {
        return Err(BaselinesError::TooShort {
            need: 2,
            got: universe.num_days(),
        });
    }
    let entries = pairs
        .into_iter()
        .map(|(a, b)| {
            let na = normalize_prices(universe.series(&a).expect("aligned"));
            let nb = normalize_prices(universe.series(&b).expect("aligned"));
            let score = na
                .iter()
                .zip(&nb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / na.len() as f64;
            RankedPair {
                a,
                b,
                score: Some(score),
            }
        })
        .collect();
    Ok(rank(entries, true))
}

fn log_returns(series: &PriceSeries) -> Vec<f64> {
    series
        .prices()
        .windows(2)
        .map(|w| (w[1] / w[0]).ln())
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Correlation ranking: Pearson correlation of daily log-returns,
/// descending (most correlated pair first).
pub fn correlation_select(universe: &AssetUniverse) -> Result<RankedPairs, BaselinesError> {
    if universe.num_days() < 3 {
        return Err(BaselinesError::TooShort {
            need: 3,
            got: universe.num_days(),
        });
    }
    let pairs = all_pairs(universe)?;
    let entries = pairs
        .into_iter()
        .map(|(a, b)| {
            let ra = log_returns(universe.series(&a).expect("aligned"));
            let rb = log_returns(universe.series(&b).expect("aligned"));
            let score = pearson(&ra, &rb);
            if score.is_none() {
                log::warn!("correlation undefined for {a}/{b} (zero-variance returns)");
            }
            RankedPair { a, b, score }
        })
        .collect();
    Ok(rank(entries, false))
}

/// Bivariate OLS `y = intercept + slope * x` with residuals.
fn simple_ols(y: &[f64], x: &[f64]) -> Result<(f64, f64, Vec<f64>), BaselinesError> {
    if y.len() != x.len() {
        return Err(BaselinesError::LengthMismatch(y.len(), x.len()));
    }
    let n = y.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        var += (a - mx) * (a - mx);
    }
    if var <= 0.0 || !var.is_finite() {
        return Err(BaselinesError::SingularRegression);
    }
    let slope = cov / var;
    let intercept = my - slope * mx;
    let residuals = y
        .iter()
        .zip(x)
        .map(|(yi, xi)| yi - intercept - slope * xi)
        .collect();
    Ok((slope, intercept, residuals))
}

/// OLS slope of log(a) on log(b) over the formation window.
pub fn hedge_ratio(a: &PriceSeries, b: &PriceSeries) -> Result<f64, BaselinesError> {
    if a.len() != b.len() {
        return Err(BaselinesError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(BaselinesError::TooShort {
            need: 2,
            got: a.len(),
        });
    }
    let la: Vec<f64> = a.prices().iter().map(|p| p.ln()).collect();
    let lb: Vec<f64> = b.prices().iter().map(|p| p.ln()).collect();
    let (slope, _, _) = simple_ols(&la, &lb)?;
    Ok(slope)
}

/// Schwert's lag rule: floor(12 * (T/100)^(1/4)).
pub fn schwert_max_lag(n: usize) -> usize {
    (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

/// Augmented Dickey-Fuller regression with a constant and no trend:
///
/// ```text
/// Δx[t] = α + γ·x[t-1] + Σ_{i=1..L} β_i·Δx[t-i] + ε[t]
/// ```
///
/// Returns the t-ratio of γ and its MacKinnon p-value (single series).
pub fn adf_test(x: &[f64], max_lag: usize) -> Result<(f64, f64), BaselinesError> {
    let stat = adf_stat(x, max_lag)?;
    Ok((stat, mackinnon_p(stat, 1)))
}

fn adf_stat(x: &[f64], max_lag: usize) -> Result<f64, BaselinesError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BaselinesError::NonFinite);
    }
    let n = x.len();
    // m regression rows, k = 2 + max_lag coefficients; need residual dof.
    let k = 2 + max_lag;
    let need = max_lag + k + 2;
    if n < need + 1 {
        return Err(BaselinesError::TooShort { need: need + 1, got: n });
    }
    let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let m = diffs.len() - max_lag;

    let mut design = DMatrix::zeros(m, k);
    let mut y = DMatrix::zeros(m, 1);
    for row in 0..m {
        let t = row + max_lag; // index into diffs
        y[(row, 0)] = diffs[t];
        design[(row, 0)] = 1.0;
        design[(row, 1)] = x[t]; // x[t-1] relative to diffs[t] = x[t+1]-x[t]
        for lag in 1..=max_lag {
            design[(row, 1 + lag)] = diffs[t - lag];
        }
    }

    let xtx = design.transpose() * &design;
    let xty = design.transpose() * &y;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or(BaselinesError::SingularRegression)?;
    let coeffs = chol.solve(&xty);
    let fitted = &design * &coeffs;
    let rss: f64 = (0..m).map(|i| (y[(i, 0)] - fitted[(i, 0)]).powi(2)).sum();
    let dof = m as isize - k as isize;
    if dof <= 0 {
        return Err(BaselinesError::TooShort { need: k + 1, got: m });
    }
    let sigma2 = rss / dof as f64;
    let xtx_inv = chol.inverse();
    let se_gamma = (sigma2 * xtx_inv[(1, 1)]).sqrt();
    if se_gamma == 0.0 || !se_gamma.is_finite() {
        return Err(BaselinesError::SingularRegression);
    }
    Ok(coeffs[(1, 0)] / se_gamma)
}

/// Two-step cointegration test: OLS of log(a) on log(b), then ADF on the
/// residual spread. The p-value uses the two-variable MacKinnon surface
/// (the residual series embeds an estimated coefficient).
pub fn engle_granger(
    a: &PriceSeries,
    b: &PriceSeries,
    max_lag: usize,
) -> Result<CointegrationResult, BaselinesError> {
    if a.len() != b.len() {
        return Err(BaselinesError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 30 {
        return Err(BaselinesError::TooShort {
            need: 30,
            got: a.len(),
        });
    }
    let la: Vec<f64> = a.prices().iter().map(|p| p.ln()).collect();
    let lb: Vec<f64> = b.prices().iter().map(|p| p.ln()).collect();
    let (beta, intercept, residuals) = simple_ols(&la, &lb)?;
    let adf_stat = adf_stat(&residuals, max_lag)?;
    Ok(CointegrationResult {
        beta,
        intercept,
        residuals,
        adf_stat,
        p_value: mackinnon_p(adf_stat, 2),
    })
}

// MacKinnon (1994) approximate asymptotic p-values for the Dickey-Fuller
// tau distribution, constant/no-trend case, for regressions with N = 1
// (plain unit-root test) or N = 2 (residuals of a two-asset cointegrating
// regression) integrated series. p = Phi(poly(tau)) on the probit scale,
// with a quadratic fit in the small-p region (tau <= TAU_STAR) and a cubic
// fit in the large-p region. Constants from J.G. MacKinnon, "Approximate
// asymptotic distribution functions for unit-root and cointegration
// tests", Journal of Business & Economic Statistics 12(2), 1994.
const TAU_STAR_C: [f64; 2] = [-1.61, -2.62];
const TAU_MIN_C: [f64; 2] = [-18.83, -18.86];
const TAU_MAX_C: [f64; 2] = [2.74, 0.92];
const TAU_SMALL_P_C: [[f64; 3]; 2] = [
    [2.1659, 1.4412, 0.038269],
    [2.92, 1.5012, 0.039796],
];
const TAU_LARGE_P_C: [[f64; 4]; 2] = [
    [1.7339, 0.93202, -0.12745, -0.010368],
    [2.1945, 0.8632, -0.10023, -0.0030478],
];

/// P-value of an ADF tau statistic; `n_series` is 1 for a plain unit-root
/// test, 2 for Engle-Granger residuals of a two-asset regression.
pub fn mackinnon_p(stat: f64, n_series: usize) -> f64 {
    assert!(
        (1..=2).contains(&n_series),
        "tables included for 1 or 2 integrated series"
    );
    let i = n_series - 1;
    if stat <= TAU_MIN_C[i] {
        return 0.0;
    }
    if stat >= TAU_MAX_C[i] {
        return 1.0;
    }
    let z = if stat <= TAU_STAR_C[i] {
        let c = TAU_SMALL_P_C[i];
        c[0] + c[1] * stat + c[2] * stat * stat
    } else {
        let c = TAU_LARGE_P_C[i];
        c[0] + c[1] * stat + c[2] * stat * stat + c[3] * stat * stat * stat
    };
    std_normal_cdf(z).clamp(0.0, 1.0)
}

/// Standard normal CDF via the Abramowitz & Stegun 7.1.26 erf
/// approximation (|error| < 1.5e-7), enough for test p-values.
fn std_normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let sign = if z < 0.0 { -1.0 } else { 1.0 };
    let z = z.abs();
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = sign * (1.0 - poly * (-z * z).exp());
    0.5 * (1.0 + erf)
}

/// Entry/exit bands for the z-scored spread, in standard deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRule {
    pub open_k: f64,
    pub close_k: f64,
}

impl ThresholdRule {
    pub fn new(open_k: f64, close_k: f64) -> Result<Self, BaselinesError> {
        if !(open_k.is_finite() && close_k.is_finite()) || close_k < 0.0 || open_k <= close_k {
            return Err(BaselinesError::InvalidRule);
        }
        Ok(Self { open_k, close_k })
    }
}

impl Default for ThresholdRule {
    /// Classic 2.0-sigma open / 0.5-sigma close bands.
    fn default() -> Self {
        Self {
            open_k: 2.0,
            close_k: 0.5,
        }
    }
}

/// Threshold execution over a z-scored spread: short the spread when
/// z > open_k, long when z < -open_k, close when |z| <= close_k, hold
/// otherwise. Never opens while a position is open.
pub fn threshold_policy(
    spread_z: &[f64],
    rule: &ThresholdRule,
) -> Result<Vec<Action>, BaselinesError> {
    if spread_z.iter().any(|z| !z.is_finite()) {
        return Err(BaselinesError::NonFinite);
    }
    let mut actions = Vec::with_capacity(spread_z.len());
    let mut open = false;
    for &z in spread_z {
        let action = if open {
            if z.abs() <= rule.close_k {
                open = false;
                Action::Close
            } else {
                Action::Hold
            }
        } else if z > rule.open_k {
            open = true;
            Action::Short
        } else if z < -rule.open_k {
            open = true;
            Action::Long
        } else {
            Action::Hold
        };
        actions.push(action);
    }
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::AssetUniverse;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    fn series(ticker: &str, prices: &[f64]) -> PriceSeries {
        PriceSeries::new(ticker, dates(prices.len()), prices.to_vec()).unwrap()
    }

    fn universe(data: &[(&str, Vec<f64>)]) -> AssetUniverse {
        AssetUniverse::align(
            data.iter()
                .map(|(t, p)| series(t, p))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn ggr_identical_series_rank_first_with_zero_score() {
        let u = universe(&[
            ("AAA", vec![10.0, 11.0, 12.0, 11.5]),
            ("BBB", vec![10.0, 11.0, 12.0, 11.5]),
            ("CCC", vec![10.0, 9.0, 8.0, 7.0]),
        ]);
        let ranked = ggr_select(&u).unwrap();
        let best = ranked.best().unwrap();
        assert_eq!((best.a.as_str(), best.b.as_str()), ("AAA", "BBB"));
        assert_eq!(best.score, Some(0.0));
        assert_eq!(ranked.entries.len(), 3);
    }

    #[test]
    fn ggr_scaled_series_score_zero() {
        let u = universe(&[
            ("AAA", vec![10.0, 11.0, 12.0, 11.5]),
            ("BBB", vec![20.0, 22.0, 24.0, 23.0]),
        ]);
        let ranked = ggr_select(&u).unwrap();
        assert!(ranked.best().unwrap().score.unwrap() < 1e-24);
    }

    #[test]
    fn ggr_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<(&str, Vec<f64>)> = ["AAA", "BBB", "CCC", "DDD"]
            .iter()
            .map(|t| {
                let mut p = vec![100.0 * rng.gen_range(0.5..2.0)];
                for _ in 0..29 {
                    let last = *p.last().unwrap();
                    p.push(last * (1.0 + 0.02 * gauss(&mut rng)));
                }
                (*t, p)
            })
            .collect();
        let u = universe(&data);
        let ranked = ggr_select(&u).unwrap();

        // Oracle: recompute every pairwise score from scratch and sort.
        let mut oracle = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let na = normalize_prices(u.series(data[i].0).unwrap());
                let nb = normalize_prices(u.series(data[j].0).unwrap());
                let score: f64 = na
                    .iter()
                    .zip(&nb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / na.len() as f64;
                oracle.push(((data[i].0, data[j].0), score));
            }
        }
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        for (entry, ((a, b), score)) in ranked.entries.iter().zip(&oracle) {
            assert_eq!((entry.a.as_str(), entry.b.as_str()), (*a, *b));
            assert!((entry.score.unwrap() - score).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_shifted_returns_rank_first() {
        // B's log-returns equal A's plus a constant: correlation 1.
        let pa = vec![100.0, 101.0, 99.5, 102.0, 103.0];
        let mut pb = vec![50.0];
        for w in pa.windows(2) {
            let r = (w[1] / w[0]).ln() + 0.001;
            let last = *pb.last().unwrap();
            pb.push(last * r.exp());
        }
        let mut pc = vec![80.0];
        for w in pa.windows(2) {
            let r = -(w[1] / w[0]).ln();
            let last = *pc.last().unwrap();
            pc.push(last * r.exp());
        }
        let u = universe(&[("AAA", pa), ("BBB", pb), ("CCC", pc)]);
        let ranked = correlation_select(&u).unwrap();
        let best = ranked.best().unwrap();
        assert_eq!((best.a.as_str(), best.b.as_str()), ("AAA", "BBB"));
        assert!((best.score.unwrap() - 1.0).abs() < 1e-9);
        // The anti-correlated pair ranks last.
        let worst = ranked.entries.last().unwrap();
        assert!((worst.score.unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn correlation_zero_variance_flagged_and_last() {
        let u = universe(&[
            ("AAA", vec![100.0, 101.0, 99.5, 102.0]),
            ("BBB", vec![50.0, 50.5, 49.75, 51.0]),
            ("FLT", vec![10.0, 10.0, 10.0, 10.0]),
        ]);
        let ranked = correlation_select(&u).unwrap();
        let undefined: Vec<&RankedPair> =
            ranked.entries.iter().filter(|e| e.score.is_none()).collect();
        assert_eq!(undefined.len(), 2);
        assert!(ranked.entries[ranked.entries.len() - 2..]
            .iter()
            .all(|e| e.score.is_none()));
    }

    #[test]
    fn correlation_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<(&str, Vec<f64>)> = ["AAA", "BBB", "CCC", "DDD"]
            .iter()
            .map(|t| {
                let mut p = vec![100.0];
                for _ in 0..49 {
                    let last = *p.last().unwrap();
                    p.push(last * (1.0 + 0.015 * gauss(&mut rng)));
                }
                (*t, p)
            })
            .collect();
        let u = universe(&data);
        let ranked = correlation_select(&u).unwrap();
        for entry in &ranked.entries {
            let ra = log_returns(u.series(&entry.a).unwrap());
            let rb = log_returns(u.series(&entry.b).unwrap());
            // Naive covariance-formula oracle.
            let n = ra.len() as f64;
            let sa: f64 = ra.iter().sum();
            let sb: f64 = rb.iter().sum();
            let sab: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
            let saa: f64 = ra.iter().map(|x| x * x).sum();
            let sbb: f64 = rb.iter().map(|x| x * x).sum();
            let oracle =
                (sab - sa * sb / n) / ((saa - sa * sa / n).sqrt() * (sbb - sb * sb / n).sqrt());
            assert!((entry.score.unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn hedge_ratio_identity_and_exact_fit() {
        let pa = vec![100.0, 101.0, 99.5, 102.0, 103.0];
        let a = series("AAA", &pa);
        assert!((hedge_ratio(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        // log a = 2 log b exactly.
        let pb: Vec<f64> = pa.iter().map(|p| p.sqrt()).collect();
        let b = series("BBB", &pb);
        assert!((hedge_ratio(&a, &b).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn hedge_ratio_constant_regressor_errors() {
        let a = series("AAA", &[100.0, 101.0, 99.5]);
        let b = series("BBB", &[50.0, 50.0, 50.0]);
        assert_eq!(hedge_ratio(&a, &b), Err(BaselinesError::SingularRegression));
    }

    #[test]
    fn hedge_ratio_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = vec![50.0];
        for _ in 0..99 {
            let last = *pb.last().unwrap();
            pb.push(last * (1.0 + 0.01 * gauss(&mut rng)));
        }
        let pa: Vec<f64> = pb
            .iter()
            .map(|p| (1.5 * p.ln() + 0.05 * gauss(&mut rng)).exp())
            .collect();
        let a = series("AAA", &pa);
        let b = series("BBB", &pb);
        let beta = hedge_ratio(&a, &b).unwrap();

        // Closed-form normal equations on log prices.
        let x: Vec<f64> = pb.iter().map(|p| p.ln()).collect();
        let y: Vec<f64> = pa.iter().map(|p| p.ln()).collect();
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let oracle = (sxy - sx * sy / n) / (sxx - sx * sx / n);
        assert!((beta - oracle).abs() < 1e-10);
    }

    #[test]
    fn adf_deterministic_ramp_smoke() {
        let x: Vec<f64> = (0..100).map(|t| t as f64).collect();
        let (stat, p) = adf_test(&x, 2).unwrap();
        assert!(stat.is_finite());
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn adf_white_noise_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..500).map(|_| gauss(&mut rng)).collect();
        let (stat, p) = adf_test(&x, 4).unwrap();
        assert!(stat < -5.0, "stat {stat}");
        assert!(p < 0.01, "p {p}");
    }

    #[test]
    fn adf_random_walk_fails_to_reject() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = vec![0.0];
        for _ in 0..499 {
            let last = *x.last().unwrap();
            x.push(last + gauss(&mut rng));
        }
        let (_, p) = adf_test(&x, 4).unwrap();
        assert!(p > 0.05, "p {p}");
    }

    #[test]
    fn adf_too_short_errors() {
        let x = [1.0, 2.0, 1.5];
        assert!(matches!(
            adf_test(&x, 2),
            Err(BaselinesError::TooShort { .. })
        ));
    }

    #[test]
    fn mackinnon_reference_points() {
        // Asymptotic 5% critical values: -2.86 (one series), -3.34 (two).
        assert!((mackinnon_p(-2.86, 1) - 0.05).abs() < 0.003);
        assert!((mackinnon_p(-3.34, 2) - 0.05).abs() < 0.003);
        assert_eq!(mackinnon_p(-50.0, 1), 0.0);
        assert_eq!(mackinnon_p(5.0, 1), 1.0);
    }

    #[test]
    fn engle_granger_beta_equals_hedge_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pb = vec![50.0];
        for _ in 0..59 {
            let last = *pb.last().unwrap();
            pb.push(last * (1.0 + 0.01 * gauss(&mut rng)));
        }
        let pa: Vec<f64> = pb.iter().map(|p| (1.2 * p.ln() + 0.02 * gauss(&mut rng)).exp()).collect();
        let a = series("AAA", &pa);
        let b = series("BBB", &pb);
        let coint = engle_granger(&a, &b, 1).unwrap();
        let beta = hedge_ratio(&a, &b).unwrap();
        assert_eq!(coint.beta, beta);
        assert_eq!(coint.residuals.len(), pa.len());
    }

    #[test]
    fn engle_granger_cointegrated_pair_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut log_b = vec![4.0];
        for _ in 0..499 {
            let last = *log_b.last().unwrap();
            log_b.push(last + 0.02 * gauss(&mut rng));
        }
        let mut u = 0.0;
        let log_a: Vec<f64> = log_b
            .iter()
            .map(|lb| {
                u = 0.5 * u + 0.01 * gauss(&mut rng);
                2.0 * lb + u
            })
            .collect();
        let a = series("AAA", &log_a.iter().map(|v| v.exp()).collect::<Vec<_>>());
        let b = series("BBB", &log_b.iter().map(|v| v.exp()).collect::<Vec<_>>());
        let coint = engle_granger(&a, &b, 2).unwrap();
        assert!((coint.beta - 2.0).abs() < 0.05, "beta {}", coint.beta);
        assert!(coint.p_value < 0.05, "p {}", coint.p_value);
    }

    #[test]
    fn engle_granger_constant_leg_errors() {
        let a = series("AAA", &(0..40).map(|i| 100.0 + i as f64).collect::<Vec<_>>());
        let b = series("BBB", &vec![50.0; 40]);
        assert!(matches!(
            engle_granger(&a, &b, 1),
            Err(BaselinesError::SingularRegression)
        ));
    }

    #[test]
    fn threshold_all_zero_is_all_hold() {
        let rule = ThresholdRule::default();
        let actions = threshold_policy(&[0.0, 0.0, 0.0], &rule).unwrap();
        assert_eq!(actions, vec![Action::Hold, Action::Hold, Action::Hold]);
    }

    #[test]
    fn threshold_open_then_close_trace() {
        let rule = ThresholdRule::new(2.0, 0.5).unwrap();
        let actions = threshold_policy(&[0.0, 2.5, 0.0], &rule).unwrap();
        assert_eq!(actions, vec![Action::Hold, Action::Short, Action::Close]);
    }

    #[test]
    fn threshold_no_reentry_while_open() {
        let rule = ThresholdRule::new(2.0, 0.5).unwrap();
        let actions = threshold_policy(&[3.0, 3.0, 3.0], &rule).unwrap();
        assert_eq!(actions, vec![Action::Short, Action::Hold, Action::Hold]);
    }

    #[test]
    fn threshold_long_side_and_automaton() {
        let rule = ThresholdRule::new(2.0, 0.5).unwrap();
        let z = [-2.5, -1.0, -0.2, -2.5, 0.1];
        let actions = threshold_policy(&z, &rule).unwrap();
        assert_eq!(
            actions,
            vec![
                Action::Long,
                Action::Hold,
                Action::Close,
                Action::Long,
                Action::Close
            ]
        );
        // Every close is preceded by an open; no open while positioned.
        let mut open = false;
        for a in &actions {
            match a {
                Action::Long | Action::Short => {
                    assert!(!open);
                    open = true;
                }
                Action::Close => {
                    assert!(open);
                    open = false;
                }
                Action::Hold => {}
            }
        }
    }

    #[test]
    fn threshold_nan_errors() {
        let rule = ThresholdRule::default();
        assert_eq!(
            threshold_policy(&[0.0, f64::NAN], &rule),
            Err(BaselinesError::NonFinite)
        );
    }

    #[test]
    fn threshold_rule_validation() {
        assert!(ThresholdRule::new(2.0, 2.0).is_err());
        assert!(ThresholdRule::new(2.0, -0.1).is_err());
        assert!(ThresholdRule::new(1.5, 0.0).is_ok());
    }

    #[test]
    fn schwert_rule_values() {
        assert_eq!(schwert_max_lag(100), 12);
        assert_eq!(schwert_max_lag(500), 17);
    }
}
