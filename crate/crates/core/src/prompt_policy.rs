//! Versioned policy prompts: an immutable preamble plus a mutable POLICY
//! block delimited by literal `POLICY:` / `END POLICY` markers.
//!
//! Updating a prompt replaces only the block contents and bumps the
//! version; the preamble is byte-identical across an entire lineage, and
//! every intermediate version can be reconstructed exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm_gateway::CallTag;
use crate::market_data::{AssetUniverse, NewsDigest};
use crate::trading_env::{Observation, PairContext};

pub const POLICY_OPEN: &str = "POLICY:";
pub const POLICY_CLOSE: &str = "END POLICY";

/// Default trader prompt: action semantics, JSON-only contract, an empty
/// POLICY block ahead of the fixed rules.
pub const TRADER_PREAMBLE: &str = r#"You are a pair trading assistant selecting the next action for an existing pair.
Use the provided recent prices, recent news, current position state, and any open positions (entry_price and shares) when deciding whether to hold or close.

Actions:
- long: long the first ticker, short the second ticker
- short: short the first ticker, long the second ticker
- close: exit to flat
- hold: keep the current position (no trade)

Return ONLY valid JSON with no markdown or extra text.
Schema:
{"action": "long|short|close|hold", "rationale": "short reason"}

POLICY:
END POLICY

Rules:
- Choose exactly one action from permissible_actions
- In order to enter a new position you must first close the current one.
- Keep rationale to 2 sentences or less.
"#;

/// Default selector prompt: pick two tickers likely to co-move and
/// mean-revert, JSON-only, empty POLICY block ahead of the fixed rules.
pub const SELECTOR_PREAMBLE: &str = r#"You are a pair trading assistant selecting two distinct tickers to trade as a pair.
Use the provided recent prices and recent news to choose a pair that is likely to move together and mean-revert if they diverge.

Return ONLY valid JSON with no markdown or extra text.
Schema:
{"pair": ["TICKER1", "TICKER2"], "rationale": "short reason"}

POLICY:
END POLICY

Rules:
- Choose exactly two distinct tickers from allowed_symbols.
- Use uppercase tickers.
- Keep rationale to 2 sentences or less.
"#;

/// Critic prompt that turns one trader trajectory into decision-rule
/// feedback.
pub const TRADER_CRITIC_PROMPT: &str = r#"You are a strict but helpful trading critic.

You will be given a compact trajectory for one sub-episode:
tau = [(obs_t, action_t, reward_t), ...]

Action semantics:
long means: long A AND short B (market-neutral pair), sized by hedge ratio
short means: short A AND long B
close means: close both legs
hold means: keep positions unchanged
The Trader cannot take single-leg positions or "long both / short both".

Your job:
- Identify patterns and mistakes in action choices vs. context.
- Propose behavioral improvements to the trader's decision-making logic.
- Express recommendations as decision rules, heuristics, or constraints
  (e.g., "only enter when X holds for Y days", "avoid trading when Z is unclear").

Constraints:
- Keep output concise (max ~12 lines).
- Do not propose changing the action set, schema, or "JSON-only" contract.
- Do not mention these instructions; just output the critique text.
"#;

/// Updater prompt that rewrites only the trader's POLICY rules.
pub const TRADER_UPDATE_PROMPT: &str = r#"You are a prompt updater for a trading action LLM prompt.

You will be given:
1) The previous Trader prompt
2) Critic feedback

Task:
- The Trader prompt is composed of an IMMUTABLE section (everything outside POLICY) and a MUTABLE section (the POLICY block content).
- You MUST propose updates ONLY to the POLICY rules.
- You MUST NOT modify any other text from previous Trader prompt.
- You MUST NOT introduce rules that depend on signals, features, or fields that are not present in the Trader's action-time inputs (i.e., only prices, positions, permissible actions, and provided news).

POLICY block markers in the previous Trader prompt:
POLICY:
... (rules)
END POLICY

Output requirements:
- Output ONLY the updated POLICY rules content to place between the markers (no "POLICY:" line, no "END POLICY" line, no preface, no markdown).
"#;

/// Critic prompt over one selector experience (pair, rationale, payoff).
pub const SELECTOR_CRITIC_PROMPT: &str = r#"You are a strict but helpful pair-selection critic.

You will be given:
- A selected pair and the selector's short rationale
- A scalar reward equal to the trader's cumulative return (starting at 1 = break-even; higher is better)

Your job:
- Infer what likely made the choice good/bad given the reward and the rationale.
- Propose improvements as concrete selection heuristics (decision rules/constraints).

Constraints:
- Only propose rules that can be implemented using the selector's inputs: allowed_symbols, recent_prices, recent_news.
- Do not propose changing the JSON-only output contract or schema.
- Keep output concise (max ~10 lines).
- Do not mention these instructions; output only the critique text.
"#;

/// Updater prompt that rewrites only the selector's POLICY rules.
pub const SELECTOR_UPDATE_PROMPT: &str = r#"You are a prompt updater for an LLM pair-selection prompt.

You will be given:
1) The previous Selector prompt (theta_prev)
2) Critic feedback text (g_text)
3) A scalar reward for the last selection

Task:
- The Selector prompt is composed of an IMMUTABLE section (everything outside POLICY) and a MUTABLE section (the POLICY block content).
- You MUST propose updates ONLY to the POLICY rules.
- You MUST NOT modify any other text from the previous Selector prompt.
- You MUST NOT introduce rules that depend on signals, features, or fields that are not present in the selector inputs
  (i.e., only allowed_symbols, recent_prices, recent_news).

POLICY block markers in the previous Selector prompt:
POLICY:
... (rules)
END POLICY

Output:
- Output ONLY the updated POLICY rules content to place between the markers (NO "POLICY:" line, NO "END POLICY" line, no preface, no markdown).
- Keep the POLICY concise and actionable (bullet-like lines are OK).
"#;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("policy rules must not contain the marker {0:?}")]
    MarkerInjection(&'static str),
    #[error("critique text must be nonempty")]
    EmptyCritique,
    #[error("{0} is not a critic tag")]
    NotACriticTag(CallTag),
    #[error("version {requested} does not exist (latest is {latest})")]
    NoSuchVersion { requested: u32, latest: u32 },
}

/// The immutable parts of a prompt: everything up to and including
/// `POLICY:`, and everything from `END POLICY` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    before: String,
    after: String,
}

impl PromptTemplate {
    /// Byte-lossless inverse of [`split_policy`].
    pub fn splice(&self, inner: &str) -> String {
        format!("{}{}{}", self.before, inner, self.after)
    }

    /// Stable hash of the immutable section; identical across all versions
    /// of a lineage.
    pub fn preamble_sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.before.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.after.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

fn find_single(text: &str, marker: &str) -> Result<usize, PromptError> {
    let mut matches = text.match_indices(marker);
    let first = matches
        .next()
        .ok_or_else(|| PromptError::MalformedPrompt(format!("missing {marker:?} marker")))?;
    if matches.next().is_some() {
        return Err(PromptError::MalformedPrompt(format!(
            "multiple {marker:?} markers"
        )));
    }
    Ok(first.0)
}

/// Splits a rendered prompt into its immutable template and the raw text
/// between the POLICY markers. `template.splice(inner)` reproduces the
/// input byte-for-byte.
pub fn split_policy(rendered: &str) -> Result<(PromptTemplate, String), PromptError> {
    let open = find_single(rendered, POLICY_OPEN)?;
    let close = find_single(rendered, POLICY_CLOSE)?;
    let inner_start = open + POLICY_OPEN.len();
    if close < inner_start {
        return Err(PromptError::MalformedPrompt(
            "END POLICY precedes POLICY:".to_string(),
        ));
    }
    Ok((
        PromptTemplate {
            before: rendered[..inner_start].to_string(),
            after: rendered[close..].to_string(),
        },
        rendered[inner_start..close].to_string(),
    ))
}

/// Natural-language feedback from a critic call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub text: String,
    pub source_tag: CallTag,
}

impl Critique {
    pub fn new(text: impl Into<String>, source_tag: CallTag) -> Result<Self, PromptError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PromptError::EmptyCritique);
        }
        if !matches!(source_tag, CallTag::TraderCritic | CallTag::SelectorCritic) {
            return Err(PromptError::NotACriticTag(source_tag));
        }
        Ok(Self { text, source_tag })
    }

    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.text.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// One entry in a prompt's version history. Version 0 is the initial
/// policy; later versions carry the critique that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub version: u32,
    pub rules: String,
    pub critique_sha256: Option<String>,
    pub critique_text: Option<String>,
}

/// A prompt with an immutable preamble and a versioned POLICY block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedPrompt {
    template: PromptTemplate,
    history: Vec<PromptVersion>,
}

impl VersionedPrompt {
    pub fn new(template: PromptTemplate, initial_rules: impl Into<String>) -> Self {
        Self {
            template,
            history: vec![PromptVersion {
                version: 0,
                rules: initial_rules.into().trim().to_string(),
                critique_sha256: None,
                critique_text: None,
            }],
        }
    }

    /// Adopts a fully rendered prompt (markers included) as version 0.
    pub fn from_rendered(rendered: &str) -> Result<Self, PromptError> {
        let (template, inner) = split_policy(rendered)?;
        Ok(Self::new(template, inner))
    }

    pub fn version(&self) -> u32 {
        self.history.last().expect("nonempty history").version
    }

    pub fn policy_rules(&self) -> &str {
        &self.history.last().expect("nonempty history").rules
    }

    pub fn history(&self) -> &[PromptVersion] {
        &self.history
    }

    /// Lineage view: (version, critique digest) for every update.
    pub fn lineage(&self) -> Vec<(u32, String)> {
        self.history
            .iter()
            .filter_map(|v| v.critique_sha256.clone().map(|d| (v.version, d)))
            .collect()
    }

    pub fn preamble_sha256(&self) -> String {
        self.template.preamble_sha256()
    }

    fn render_rules(&self, rules: &str) -> String {
        let block = if rules.is_empty() {
            String::from("\n")
        } else {
            format!("\n{rules}\n")
        };
        self.template.splice(&block)
    }

    /// The full prompt text at the current version.
    pub fn render(&self) -> String {
        self.render_rules(self.policy_rules())
    }

    /// The full prompt text as it stood at version `k`.
    pub fn render_at(&self, k: u32) -> Result<String, PromptError> {
        let entry = self
            .history
            .iter()
            .find(|v| v.version == k)
            .ok_or(PromptError::NoSuchVersion {
                requested: k,
                latest: self.version(),
            })?;
        Ok(self.render_rules(&entry.rules))
    }

    /// A copy of this prompt rolled back to version `k` (history truncated).
    pub fn at_version(&self, k: u32) -> Result<Self, PromptError> {
        if k > self.version() {
            return Err(PromptError::NoSuchVersion {
                requested: k,
                latest: self.version(),
            });
        }
        Ok(Self {
            template: self.template.clone(),
            history: self.history[..=(k as usize)].to_vec(),
        })
    }

    /// Installs new POLICY rules, extending the lineage. Rules containing
    /// either marker are rejected; identical rules still bump the version
    /// (a no-op update is legal).
    pub fn apply_update(
        &self,
        new_rules: &str,
        critique: &Critique,
    ) -> Result<Self, PromptError> {
        if new_rules.contains(POLICY_CLOSE) {
            return Err(PromptError::MarkerInjection(POLICY_CLOSE));
        }
        if new_rules.contains(POLICY_OPEN) {
            return Err(PromptError::MarkerInjection(POLICY_OPEN));
        }
        let mut next = self.clone();
        next.history.push(PromptVersion {
            version: self.version() + 1,
            rules: new_rules.trim().to_string(),
            critique_sha256: Some(critique.sha256()),
            critique_text: Some(critique.text.clone()),
        });
        Ok(next)
    }
}

/// System + user halves of a fully rendered request.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

fn write_news_lines(out: &mut String, news: &[NewsDigest]) {
    if news.is_empty() {
        out.push_str("  (none)\n");
        return;
    }
    for digest in news {
        let _ = writeln!(out, "  {} [{}] {}", digest.date, digest.scope, digest.text);
    }
}

/// Serializes the trader's observation and pair context under the current
/// trader prompt. Deterministic: identical inputs give identical bytes.
pub fn render_trader_prompt(
    theta: &VersionedPrompt,
    obs: &Observation,
    pair: &PairContext,
) -> RenderedPrompt {
    let mut user = String::new();
    let _ = writeln!(user, "date: {}", obs.date);
    let _ = writeln!(user, "pair: {}", pair.label());
    let _ = writeln!(user, "hedge_ratio: {}", pair.hedge_ratio);
    match obs.position.entry_date {
        Some(entry) => {
            let _ = writeln!(user, "position: {} (entered {entry})", obs.position.side);
            let _ = writeln!(user, "open_positions:");
            let _ = writeln!(
                user,
                "  {}: {} shares, entry_price {}",
                pair.first, obs.position.leg_a.shares, obs.position.leg_a.entry_price
            );
            let _ = writeln!(
                user,
                "  {}: {} shares, entry_price {}",
                pair.second, obs.position.leg_b.shares, obs.position.leg_b.entry_price
            );
        }
        None => {
            let _ = writeln!(user, "position: {}", obs.position.side);
        }
    }
    let _ = writeln!(
        user,
        "permissible_actions: {}",
        obs.permissible_actions
            .iter()
            .map(|a| a.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    for (ticker, window) in &obs.recent_prices {
        let _ = writeln!(user, "recent_prices {ticker} (oldest to newest):");
        for (date, price) in window {
            let _ = writeln!(user, "  {date}: {price}");
        }
    }
    user.push_str("recent_news:\n");
    write_news_lines(&mut user, &obs.recent_news);
    RenderedPrompt {
        system: theta.render(),
        user,
    }
}

/// Per-ticker aggregate over the selector's context window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TickerStats {
    pub ticker: String,
    /// Cumulative simple return over the window, as a fraction.
    pub window_return: f64,
    /// Annualized volatility of daily log-returns, as a fraction.
    pub annualized_vol: f64,
    pub last_close: f64,
}

/// The selector's high-level context: per-ticker statistics plus the
/// date-ordered news digests over the tuning-context window.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelContext {
    pub allowed_symbols: Vec<String>,
    pub start: chrono::NaiveDate,
    pub end: chrono::NaiveDate,
    pub trading_days: usize,
    pub stats: Vec<TickerStats>,
    pub news: Vec<NewsDigest>,
}

impl HighLevelContext {
    /// Builds the context from a universe already sliced to the window and
    /// news filtered to the same span.
    pub fn build(universe: &AssetUniverse, news: &[NewsDigest]) -> Self {
        let calendar = universe.calendar();
        let start = calendar[0];
        let end = calendar[calendar.len() - 1];
        let stats = universe
            .tickers()
            .iter()
            .map(|ticker| {
                let prices = universe.series(ticker).expect("listed ticker").prices();
                let window_return = prices[prices.len() - 1] / prices[0] - 1.0;
                let log_returns: Vec<f64> =
                    prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
                let annualized_vol = if log_returns.len() < 2 {
                    0.0
                } else {
                    let m = log_returns.iter().sum::<f64>() / log_returns.len() as f64;
                    let var = log_returns.iter().map(|r| (r - m).powi(2)).sum::<f64>()
                        / (log_returns.len() - 1) as f64;
                    var.sqrt() * 252.0_f64.sqrt()
                };
                TickerStats {
                    ticker: ticker.to_string(),
                    window_return,
                    annualized_vol,
                    last_close: prices[prices.len() - 1],
                }
            })
            .collect();
        let news = news
            .iter()
            .filter(|d| d.date >= start && d.date <= end)
            .cloned()
            .collect();
        Self {
            allowed_symbols: universe.tickers().iter().map(|s| s.to_string()).collect(),
            start,
            end,
            trading_days: calendar.len(),
            stats,
            news,
        }
    }

    /// Deterministic serialization used as the selector's user payload.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "allowed_symbols: {}", self.allowed_symbols.join(", "));
        let _ = writeln!(
            out,
            "context_window: {} to {} ({} trading days)",
            self.start, self.end, self.trading_days
        );
        out.push_str("recent_prices (per-ticker statistics over the window):\n");
        for s in &self.stats {
            let _ = writeln!(
                out,
                "  {}: window_return {:.4}%, annualized_vol {:.4}%, last_close {}",
                s.ticker,
                s.window_return * 100.0,
                s.annualized_vol * 100.0,
                s.last_close
            );
        }
        out.push_str("recent_news:\n");
        write_news_lines(&mut out, &self.news);
        out
    }

    /// Hex digest identifying this context in experience records.
    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize().as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Renders the selector request for a high-level context.
pub fn render_selector_prompt(
    phi: &VersionedPrompt,
    high_obs: &HighLevelContext,
) -> RenderedPrompt {
    RenderedPrompt {
        system: phi.render(),
        user: high_obs.serialize(),
    }
}

#[derive(Serialize, Deserialize)]
struct LineageFileEntry {
    version: u32,
    critique_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct LineageFileRole {
    preamble_sha256: String,
    entries: Vec<LineageFileEntry>,
}

/// Writes a prompt store: `{role}.v{n}.txt` per version, `lineage.json`,
/// and the full critique texts under `critiques/`.
pub fn write_prompt_store(
    dir: impl AsRef<Path>,
    prompts: &[(&str, &VersionedPrompt)],
) -> std::io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut lineage: BTreeMap<String, LineageFileRole> = BTreeMap::new();
    for (role, prompt) in prompts {
        for entry in prompt.history() {
            let rendered = prompt.render_at(entry.version).expect("own history");
            fs::write(dir.join(format!("{role}.v{}.txt", entry.version)), rendered)?;
            if let Some(text) = &entry.critique_text {
                let critiques = dir.join("critiques");
                fs::create_dir_all(&critiques)?;
                fs::write(critiques.join(format!("{role}.v{}.txt", entry.version)), text)?;
            }
        }
        lineage.insert(
            role.to_string(),
            LineageFileRole {
                preamble_sha256: prompt.preamble_sha256(),
                entries: prompt
                    .history()
                    .iter()
                    .map(|v| LineageFileEntry {
                        version: v.version,
                        critique_sha256: v.critique_sha256.clone(),
                    })
                    .collect(),
            },
        );
    }
    fs::write(
        dir.join("lineage.json"),
        serde_json::to_string_pretty(&lineage).expect("serializable"),
    )?;
    Ok(())
}

fn rule_lines(rules: &str) -> Vec<String> {
    rules
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn escape_cell(lines: &[String]) -> String {
    if lines.is_empty() {
        return "(none)".to_string();
    }
    lines
        .iter()
        .map(|l| l.replace('|', "\\|"))
        .collect::<Vec<_>>()
        .join("<br>")
}

/// Markdown diff table of the policy rules across update steps: one row
/// per update `k`, with the lines added and removed at that step.
pub fn evolution_table_markdown(role: &str, prompt: &VersionedPrompt) -> String {
    let mut out = format!(
        "# Policy evolution: {role}\n\n| update | rules added (+) | rules removed (-) |\n|---|---|---|\n"
    );
    let history = prompt.history();
    for (i, pair) in history.windows(2).enumerate() {
        let prev = rule_lines(&pair[0].rules);
        let next = rule_lines(&pair[1].rules);
        let added: Vec<String> = next.iter().filter(|l| !prev.contains(l)).cloned().collect();
        let removed: Vec<String> = prev.iter().filter(|l| !next.contains(l)).cloned().collect();
        let _ = writeln!(
            out,
            "| k={} | {} | {} |",
            i,
            escape_cell(&added),
            escape_cell(&removed)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::PriceSeries;
    use crate::trading_env::{Action, TradingEnv};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn critique(text: &str) -> Critique {
        Critique::new(text, CallTag::TraderCritic).unwrap()
    }

    #[test]
    fn split_splice_round_trips_default_prompts() {
        for prompt in [TRADER_PREAMBLE, SELECTOR_PREAMBLE] {
            let (template, inner) = split_policy(prompt).unwrap();
            assert_eq!(template.splice(&inner), prompt);
        }
    }

    #[test]
    fn split_empty_rules_block() {
        let (_, inner) = split_policy(TRADER_PREAMBLE).unwrap();
        assert_eq!(inner, "\n");
        let prompt = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        assert_eq!(prompt.policy_rules(), "");
        assert_eq!(prompt.render(), TRADER_PREAMBLE);
    }

    #[test]
    fn split_rejects_missing_or_duplicate_markers() {
        assert!(matches!(
            split_policy("no markers here"),
            Err(PromptError::MalformedPrompt(_))
        ));
        let twice = format!("{TRADER_PREAMBLE}\nPOLICY:\nEND POLICY\n");
        assert!(matches!(
            split_policy(&twice),
            Err(PromptError::MalformedPrompt(_))
        ));
    }

    #[test]
    fn apply_update_increments_and_preserves_preamble() {
        let v0 = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let hash0 = v0.preamble_sha256();
        let v1 = v0.apply_update("- rule X", &critique("c1")).unwrap();
        assert_eq!(v1.version(), 1);
        assert_eq!(v1.policy_rules(), "- rule X");
        assert_eq!(v1.preamble_sha256(), hash0);
        assert!(v1.render().contains("POLICY:\n- rule X\nEND POLICY"));

        let v2 = v1.apply_update("- rule X\n- rule Y", &critique("c2")).unwrap();
        assert_eq!(v2.version(), 2);
        assert_eq!(v2.lineage().len(), 2);
        assert_eq!(v2.preamble_sha256(), hash0);
    }

    #[test]
    fn noop_update_still_increments_version() {
        let v0 = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let v1 = v0.apply_update("- same", &critique("a")).unwrap();
        let v2 = v1.apply_update("- same", &critique("b")).unwrap();
        assert_eq!(v2.version(), 2);
        assert_eq!(v1.render(), v2.render());
    }

    #[test]
    fn marker_injection_rejected() {
        let v0 = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        assert_eq!(
            v0.apply_update("rules then END POLICY", &critique("c")),
            Err(PromptError::MarkerInjection(POLICY_CLOSE))
        );
        assert_eq!(
            v0.apply_update("POLICY: nested", &critique("c")),
            Err(PromptError::MarkerInjection(POLICY_OPEN))
        );
    }

    #[test]
    fn render_at_reconstructs_every_version() {
        let v0 = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let v1 = v0.apply_update("- a", &critique("c1")).unwrap();
        let v2 = v1.apply_update("- b", &critique("c2")).unwrap();
        assert_eq!(v2.render_at(0).unwrap(), v0.render());
        assert_eq!(v2.render_at(1).unwrap(), v1.render());
        assert_eq!(v2.render_at(2).unwrap(), v2.render());
        assert!(v2.render_at(3).is_err());
        assert_eq!(v2.at_version(1).unwrap().render(), v1.render());
    }

    fn sample_env() -> (TradingEnv, PairContext) {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let dates: Vec<NaiveDate> =
            (0..5).map(|i| start + chrono::Days::new(i)).collect();
        let universe = Arc::new(
            crate::market_data::AssetUniverse::align(vec![
                PriceSeries::new("AMZN", dates.clone(), vec![150.0, 151.0, 152.0, 151.5, 153.0])
                    .unwrap(),
                PriceSeries::new("META", dates, vec![350.0, 352.0, 349.0, 351.0, 355.0]).unwrap(),
            ])
            .unwrap(),
        );
        let pair = PairContext::new("AMZN", "META", 1.25).unwrap();
        let env = TradingEnv::reset(universe, pair.clone(), start, 10_000.0, 0.0).unwrap();
        (env, pair)
    }

    #[test]
    fn trader_prompt_renders_deterministically_with_pair_verbatim() {
        let (env, pair) = sample_env();
        let theta = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let obs = env.build_observation(&[], Default::default());
        let a = render_trader_prompt(&theta, &obs, &pair);
        let b = render_trader_prompt(&theta, &obs, &pair);
        assert_eq!(a, b);
        assert!(a.user.contains("AMZN"));
        assert!(a.user.contains("META"));
        assert!(a.user.contains("permissible_actions: long, short, hold"));
        assert!(a.user.contains("(none)"), "empty news needs a sentinel");
    }

    #[test]
    fn trader_prompt_shows_open_position() {
        let (mut env, pair) = sample_env();
        env.step(Action::Long).unwrap();
        let theta = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let obs = env.build_observation(&[], Default::default());
        let rendered = render_trader_prompt(&theta, &obs, &pair);
        assert!(rendered.user.contains("position: long (entered 2024-01-01)"));
        assert!(rendered.user.contains("open_positions:"));
        assert!(rendered.user.contains("entry_price 150"));
    }

    #[test]
    fn selector_prompt_contains_symbols_and_one_block_per_ticker() {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let dates: Vec<NaiveDate> = (0..10).map(|i| start + chrono::Days::new(i)).collect();
        let tickers = ["AAPL", "ADBE", "AMZN", "BMRN", "CRM", "GOOGL", "META", "MSFT", "NVDA", "TSLA"];
        let universe = crate::market_data::AssetUniverse::align(
            tickers
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let prices: Vec<f64> =
                        (0..10).map(|d| 100.0 + i as f64 + d as f64 * 0.5).collect();
                    PriceSeries::new(*t, dates.clone(), prices).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let ctx = HighLevelContext::build(&universe, &[]);
        assert_eq!(ctx.stats.len(), 10);
        let phi = VersionedPrompt::from_rendered(SELECTOR_PREAMBLE).unwrap();
        let rendered = render_selector_prompt(&phi, &ctx);
        assert!(rendered.user.contains("allowed_symbols: AAPL, ADBE, AMZN"));
        for t in tickers {
            assert!(rendered.user.contains(&format!("  {t}: window_return")));
        }
        assert_eq!(rendered, render_selector_prompt(&phi, &ctx));
    }

    #[test]
    fn prompt_store_written_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let v0 = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let v2 = v0
            .apply_update("- a", &critique("first"))
            .unwrap()
            .apply_update("- a\n- b", &critique("second"))
            .unwrap();
        write_prompt_store(dir.path(), &[("trader", &v2)]).unwrap();
        for k in 0..=2 {
            let path = dir.path().join(format!("trader.v{k}.txt"));
            let stored = std::fs::read_to_string(path).unwrap();
            assert_eq!(stored, v2.render_at(k).unwrap());
        }
        let lineage = std::fs::read_to_string(dir.path().join("lineage.json")).unwrap();
        assert!(lineage.contains("preamble_sha256"));
        let critique_text =
            std::fs::read_to_string(dir.path().join("critiques/trader.v1.txt")).unwrap();
        assert_eq!(critique_text, "first");
    }

    #[test]
    fn evolution_table_diffs_lines() {
        let v0 = VersionedPrompt::from_rendered(TRADER_PREAMBLE).unwrap();
        let v2 = v0
            .apply_update("- enter on divergence\n- exit on thesis break", &critique("c1"))
            .unwrap()
            .apply_update("- enter on divergence\n- use trailing stop", &critique("c2"))
            .unwrap();
        let table = evolution_table_markdown("trader", &v2);
        assert!(table.contains("| k=0 | - enter on divergence<br>- exit on thesis break | (none) |"));
        assert!(table.contains("| k=1 | - use trailing stop | - exit on thesis break |"));
        // Regeneration is exact.
        assert_eq!(table, evolution_table_markdown("trader", &v2));
    }

    proptest! {
        #[test]
        fn split_splice_round_trip_on_generated_prompts(
            head in "[a-zA-Z0-9 \n.,-]{0,80}",
            rules in "[a-zA-Z0-9 \n.,-]{0,60}",
            tail in "[a-zA-Z0-9 \n.,-]{0,80}",
        ) {
            let prompt = format!("{head}POLICY:{rules}END POLICY{tail}");
            // Generated segments must not smuggle in extra markers.
            prop_assume!(!head.contains(POLICY_OPEN) && !head.contains(POLICY_CLOSE));
            prop_assume!(!rules.contains(POLICY_OPEN) && !rules.contains(POLICY_CLOSE));
            prop_assume!(!tail.contains(POLICY_OPEN) && !tail.contains(POLICY_CLOSE));
            let (template, inner) = split_policy(&prompt).unwrap();
            prop_assert_eq!(template.splice(&inner), prompt);
        }
    }
}
