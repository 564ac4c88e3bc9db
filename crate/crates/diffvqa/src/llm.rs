//! Keyword extraction through a JSON-over-HTTP completion endpoint, with
//! the lexicon extractor as a total fallback.

use std::time::Duration;

use diffvqa_core::error::Result;
use diffvqa_core::keyword::{extract_keyword, normalize_llm_reply, KeywordLexicon, LlmClientConfig};
use serde::Deserialize;

/// Overrides [`LlmClientConfig::endpoint`] when set.
pub const ENDPOINT_ENV: &str = "DIFFVQA_LLM_ENDPOINT";

#[derive(Deserialize)]
struct Reply {
    response: String,
}

/// `cfg` with the endpoint taken from [`ENDPOINT_ENV`] if that is set.
pub fn with_env_override(cfg: &LlmClientConfig) -> LlmClientConfig {
    let mut cfg = cfg.clone();
    if let Ok(url) = std::env::var(ENDPOINT_ENV) {
        if !url.trim().is_empty() {
            cfg.endpoint = url.trim().to_string();
        }
    }
    cfg
}

/// One POST; the raw `response` field on success.
pub fn request(cfg: &LlmClientConfig, answer: &str) -> Result<String, String> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs_f64(cfg.timeout_secs))
        .build();
    let body = serde_json::json!({
        "model": cfg.model,
        "prompt": cfg.prompt(answer),
        "stream": false,
    });
    let resp = agent.post(&cfg.url()).send_json(body).map_err(|e| e.to_string())?;
    let reply: Reply = resp.into_json().map_err(|e| e.to_string())?;
    Ok(reply.response)
}

/// Asks the endpoint for a keyword, retrying `cfg.retries` times. Any
/// failure or unusable reply falls back to [`extract_keyword`]; the only
/// error is an empty answer.
pub fn llm_extract_keyword(answer: &str, cfg: &LlmClientConfig, lex: &KeywordLexicon) -> Result<String> {
    let fallback = extract_keyword(answer, lex)?;
    if let Err(e) = cfg.validate() {
        log::warn!("llm keyword: {e}; using the lexicon");
        return Ok(fallback);
    }
    for attempt in 0..=cfg.retries {
        match request(cfg, answer) {
            Ok(reply) => match normalize_llm_reply(&reply) {
                Some(k) => return Ok(k),
                None => {
                    log::warn!("llm keyword: unusable reply {reply:?}; using the lexicon");
                    return Ok(fallback);
                }
            },
            Err(e) => log::warn!("llm keyword: attempt {} failed: {e}", attempt + 1),
        }
    }
    Ok(fallback)
}
