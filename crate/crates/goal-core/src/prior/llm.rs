//! Chat-completions client and response parser for acquiring the pairwise
//! distance/confidence matrices from a language model.
//!
//! One hierarchical prompt is issued per central object (placement → room
//! proximity → functional relationship → distance inference → structured
//! answer). The parser scans the free-form reply for labeled
//! `queried object / distance / confidence` fields and tolerates surrounding
//! prose. Pairs answered in both directions are averaged by the usual
//! matrix symmetrization on construction.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use ndarray::Array2;
use regex::Regex;
use serde_json::json;

use super::{PriorError, PriorMatrices, MISSING_DISTANCE_M};

/// System prompt conditioning the model's role.
pub const SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/system.txt");
/// Per-central-object hierarchical query template.
pub const PAIR_QUERY_TEMPLATE: &str = include_str!("../../assets/prompts/pair_query.txt");

/// Environment variable naming the chat-completions endpoint URL.
pub const ENDPOINT_ENV: &str = "GOAL_LLM_ENDPOINT";
/// Environment variable holding the bearer token, if the endpoint needs one.
pub const API_KEY_ENV: &str = "GOAL_LLM_API_KEY";

#[derive(Clone, Debug)]
pub struct LlmConfig {
    /// Chat-completions URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Bounded number of in-flight requests.
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub timeout: Duration,
    /// Directory for raw-response caching; `None` disables the cache.
    pub cache_dir: Option<PathBuf>,
}

impl LlmConfig {
    /// Reads endpoint and key from the environment.
    pub fn from_env(model: &str) -> Result<Self, PriorError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| PriorError::Network(format!("{ENDPOINT_ENV} not set")))?;
        Ok(LlmConfig {
            endpoint,
            api_key: std::env::var(API_KEY_ENV).ok(),
            model: model.to_string(),
            max_in_flight: 2,
            max_retries: 3,
            timeout: Duration::from_secs(120),
            cache_dir: None,
        })
    }
}

/// One raw model reply for a central object.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RawResponse {
    pub central: String,
    pub text: String,
}

/// A pair the parser could not extract; filled with the missing-distance
/// sentinel and zero confidence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissingPair {
    pub central: String,
    pub queried: String,
}

/// Renders the user prompt for one central object.
pub fn render_prompt(central: &str, categories: &[String]) -> String {
    PAIR_QUERY_TEMPLATE
        .replace("{CATEGORIES}", &categories.join(", "))
        .replace("{CENTRAL}", central)
}

fn cache_path(cfg: &LlmConfig, central: &str) -> Option<PathBuf> {
    cfg.cache_dir
        .as_ref()
        .map(|d| d.join(format!("{}__{}.json", cfg.model.replace('/', "_"), central)))
}

/// Issues one prompt per central object against a JSON chat-completions
/// endpoint. Responses are cached on disk when a cache directory is set;
/// requests retry with exponential backoff and run with at most
/// `max_in_flight` in flight.
pub fn query_llm(categories: &[String], cfg: &LlmConfig) -> Result<Vec<RawResponse>, PriorError> {
    if let Some(dir) = &cfg.cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()
        .map_err(|e| PriorError::Network(e.to_string()))?;

    let next = AtomicUsize::new(0);
    let workers = cfg.max_in_flight.max(1).min(categories.len().max(1));
    let mut slots: Vec<Option<Result<RawResponse, PriorError>>> =
        (0..categories.len()).map(|_| None).collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers {
            let next = &next;
            let client = &client;
            handles.push(scope.spawn(move || {
                let mut results = Vec::new();
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= categories.len() {
                        break;
                    }
                    results.push((i, fetch_one(client, &categories[i], categories, cfg)));
                }
                results
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("llm worker panicked") {
                slots[i] = Some(r);
            }
        }
    });

    slots
        .into_iter()
        .map(|s| s.expect("request slot unfilled"))
        .collect()
}

fn fetch_one(
    client: &reqwest::blocking::Client,
    central: &str,
    categories: &[String],
    cfg: &LlmConfig,
) -> Result<RawResponse, PriorError> {
    if let Some(path) = cache_path(cfg, central) {
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(cached) = serde_json::from_slice::<RawResponse>(&bytes) {
                log::debug!("llm cache hit for `{central}`");
                return Ok(cached);
            }
        }
    }

    let body = json!({
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": render_prompt(central, categories)},
        ],
    });

    let mut last_err = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(500 * (1 << (attempt - 1))));
        }
        let mut req = client.post(&cfg.endpoint).json(&body);
        if let Some(key) = &cfg.api_key {
            req = req.bearer_auth(key);
        }
        match req.send().and_then(|r| r.error_for_status()) {
            Ok(resp) => {
                let value: serde_json::Value = resp
                    .json()
                    .map_err(|e| PriorError::Network(format!("bad response body: {e}")))?;
                let text = value["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        PriorError::Network("response missing choices[0].message.content".into())
                    })?
                    .to_string();
                let raw = RawResponse {
                    central: central.to_string(),
                    text,
                };
                if let Some(path) = cache_path(cfg, central) {
                    let _ = std::fs::write(&path, serde_json::to_vec_pretty(&raw).unwrap());
                }
                return Ok(raw);
            }
            Err(e) => {
                last_err = e.to_string();
                log::warn!("llm request for `{central}` failed (attempt {attempt}): {last_err}");
            }
        }
    }
    Err(PriorError::Network(last_err))
}

/// Extracts `(queried object, distance, confidence)` triples from raw
/// responses and assembles symmetrized matrices. Missing pairs fall back to
/// the far-distance sentinel with zero confidence and are reported.
pub fn parse_llm_responses(
    responses: &[RawResponse],
    categories: &[String],
) -> Result<(PriorMatrices, Vec<MissingPair>), PriorError> {
    let n = categories.len();
    let index_of = |name: &str| categories.iter().position(|c| c.eq_ignore_ascii_case(name));

    let mut distance = Array2::from_elem((n, n), MISSING_DISTANCE_M);
    let mut confidence = Array2::zeros((n, n));
    for i in 0..n {
        distance[[i, i]] = 0.0;
        confidence[[i, i]] = 1.0;
    }
    let mut missing = Vec::new();

    for resp in responses {
        let Some(i) = index_of(&resp.central) else {
            return Err(PriorError::Parse(format!(
                "response for unknown category `{}`",
                resp.central
            )));
        };
        let pairs = extract_pairs(&resp.text, categories);
        for (j, cat) in categories.iter().enumerate() {
            if j == i {
                continue;
            }
            match pairs.iter().find(|p| p.0 == j) {
                Some(&(_, d, c)) => {
                    distance[[i, j]] = d.max(0.0);
                    confidence[[i, j]] = c.clamp(0.0, 1.0);
                }
                None => {
                    log::warn!(
                        "no parseable (distance, confidence) for ({}, {cat}); using sentinel",
                        resp.central
                    );
                    missing.push(MissingPair {
                        central: resp.central.clone(),
                        queried: cat.clone(),
                    });
                }
            }
        }
    }

    // Sentinel entries stay where neither direction parsed; symmetrization
    // averages directions that both parsed.
    let matrices = PriorMatrices::from_raw(categories.to_vec(), distance, confidence)?;
    Ok((matrices, missing))
}

/// Scans one reply for labeled fields. A category mention opens a block;
/// the first `distance:` and `confidence:` numbers inside the block bind to
/// it. Extra prose (reasoning lines, step headers) is ignored.
fn extract_pairs(text: &str, categories: &[String]) -> Vec<(usize, f32, f32)> {
    let number = Regex::new(r"(?i)\b(distance|confidence)\s*[:=]\s*([0-9]*\.?[0-9]+)").unwrap();

    // Category mention positions; prefer explicit "queried object:" labels
    // but fall back to bare mentions at line starts.
    let mut mentions: Vec<(usize, usize)> = Vec::new(); // (byte offset, category)
    for (idx, cat) in categories.iter().enumerate() {
        let pat = Regex::new(&format!(
            r"(?im)^\s*[-*\u{{2022}}]?\s*(?:quer[a-z]*\s+object\s*[:=]\s*)?({})\s*$|(?i)quer[a-z]*\s+object\s*[:=]\s*({})",
            regex::escape(cat),
            regex::escape(cat)
        ))
        .unwrap();
        for m in pat.find_iter(text) {
            mentions.push((m.start(), idx));
        }
    }
    mentions.sort();

    let mut out = Vec::new();
    for (k, &(start, cat)) in mentions.iter().enumerate() {
        let end = mentions
            .get(k + 1)
            .map(|&(s, _)| s)
            .unwrap_or_else(|| text.len());
        let block = &text[start..end];
        let mut d = None;
        let mut c = None;
        for caps in number.captures_iter(block) {
            let value: f32 = caps[2].parse().unwrap_or(f32::NAN);
            if !value.is_finite() {
                continue;
            }
            match caps[1].to_ascii_lowercase().as_str() {
                "distance" if d.is_none() => d = Some(value),
                "confidence" if c.is_none() => c = Some(value),
                _ => {}
            }
        }
        if let (Some(d), Some(c)) = (d, c) {
            if !out.iter().any(|&(existing, _, _)| existing == cat) {
                out.push((cat, d, c));
            }
        }
    }
    out
}
