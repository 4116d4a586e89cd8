//! Text-triplet generation: `(caption, modification, modified caption)`.
//!
//! Two sources: a deterministic template grammar, and a remote completion
//! endpoint reached through a [`Transport`].

use std::fmt;
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::store::TextTriplet;
use crate::tensor::Rng;

/// Longest accepted text, in characters.
pub const MAX_TEXT_CHARS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    EmptyCaption,
    EmptyModification,
    EmptyModifiedCaption,
    Unchanged,
    TooLong { field: &'static str, chars: usize },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyCaption => write!(f, "empty caption"),
            Self::EmptyModification => write!(f, "empty modification"),
            Self::EmptyModifiedCaption => write!(f, "empty modified caption"),
            Self::Unchanged => write!(f, "modified caption equals caption"),
            Self::TooLong { field, chars } => {
                write!(f, "length: {field} has {chars} characters (max {MAX_TEXT_CHARS})")
            }
        }
    }
}

pub fn validate_triplet(t: &TextTriplet) -> std::result::Result<(), Rejection> {
    let fields = [
        ("caption", &t.caption, Rejection::EmptyCaption),
        ("modification", &t.modification, Rejection::EmptyModification),
        ("modified_caption", &t.modified_caption, Rejection::EmptyModifiedCaption),
    ];
    for (name, text, empty) in fields {
        if text.trim().is_empty() {
            return Err(empty);
        }
        let chars = text.chars().count();
        if chars > MAX_TEXT_CHARS {
            return Err(Rejection::TooLong { field: name, chars });
        }
    }
    if t.modified_caption == t.caption {
        return Err(Rejection::Unchanged);
    }
    Ok(())
}

/// How a rule edits the matched token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleAction {
    /// Replace the matched token with a pool entry.
    Replace,
    /// Insert a pool entry before the matched token.
    InsertBefore,
    /// Delete the matched token.
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarRule {
    pub name: String,
    /// Tokens (lower-case) the rule can act on.
    pub matches: Vec<String>,
    pub pool: Vec<String>,
    /// Modification text with `{old}` and/or `{new}` slots.
    pub template: String,
    pub action: RuleAction,
}

impl GrammarRule {
    pub fn new(
        name: &str,
        matches: &[&str],
        pool: &[&str],
        template: &str,
        action: RuleAction,
    ) -> Result<Self> {
        let rule = Self {
            name: name.into(),
            matches: matches.iter().map(|s| s.to_lowercase()).collect(),
            pool: pool.iter().map(|s| s.to_string()).collect(),
            template: template.into(),
            action,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        let needs_new = self.action != RuleAction::Delete;
        let needs_old = self.action != RuleAction::InsertBefore;
        if needs_new && self.pool.is_empty() {
            return Err(Error::Config(format!("rule {}: empty substitution pool", self.name)));
        }
        if needs_new && !self.template.contains("{new}") {
            return Err(Error::Config(format!("rule {}: template lacks {{new}}", self.name)));
        }
        if needs_old && !self.template.contains("{old}") {
            return Err(Error::Config(format!("rule {}: template lacks {{old}}", self.name)));
        }
        Ok(())
    }

    fn candidates(&self, old: &str) -> Vec<&str> {
        match self.action {
            RuleAction::Replace => self
                .pool
                .iter()
                .map(String::as_str)
                .filter(|p| !p.eq_ignore_ascii_case(old))
                .collect(),
            RuleAction::InsertBefore => self.pool.iter().map(String::as_str).collect(),
            RuleAction::Delete => vec![""],
        }
    }

    fn applies_at(&self, tokens: &[&str], pos: usize) -> bool {
        let tok = tokens[pos].to_lowercase();
        if !self.matches.contains(&tok) {
            return false;
        }
        match self.action {
            // the caption must keep at least one token
            RuleAction::Delete => tokens.len() > 1,
            RuleAction::InsertBefore => true,
            RuleAction::Replace => !self.candidates(tokens[pos]).is_empty(),
        }
    }

    /// Caption with the edit applied at token `pos`.
    pub fn rewrite(&self, caption: &str, pos: usize, new: &str) -> String {
        let tokens: Vec<&str> = caption.split_whitespace().collect();
        let mut out: Vec<&str> = Vec::with_capacity(tokens.len() + 1);
        for (i, t) in tokens.iter().enumerate() {
            if i == pos {
                match self.action {
                    RuleAction::Replace => out.push(new),
                    RuleAction::InsertBefore => {
                        out.push(new);
                        out.push(t);
                    }
                    RuleAction::Delete => {}
                }
            } else {
                out.push(t);
            }
        }
        out.join(" ")
    }

    pub fn describe(&self, old: &str, new: &str) -> String {
        self.template.replace("{old}", old).replace("{new}", new)
    }
}

/// Color swap, object swap, attribute addition and attribute removal.
pub fn default_grammar() -> Vec<GrammarRule> {
    const COLORS: &[&str] = &[
        "red", "blue", "green", "black", "white", "yellow", "pink", "purple", "orange", "brown", "gray", "navy",
    ];
    const OBJECTS: &[&str] = &[
        "dress", "shirt", "skirt", "jacket", "coat", "hat", "shoes", "bag", "car", "dog", "cat", "chair", "table",
        "bicycle", "vase",
    ];
    const ATTRIBUTES: &[&str] = &[
        "striped", "floral", "sleeveless", "vintage", "wooden", "leather", "shiny", "polka-dot", "small", "large",
    ];
    vec![
        GrammarRule::new(
            "color-swap",
            COLORS,
            COLORS,
            "change the color from {old} to {new}",
            RuleAction::Replace,
        ),
        GrammarRule::new(
            "object-swap",
            OBJECTS,
            OBJECTS,
            "replace the {old} with a {new}",
            RuleAction::Replace,
        ),
        GrammarRule::new("attribute-add", OBJECTS, ATTRIBUTES, "make it {new}", RuleAction::InsertBefore),
        GrammarRule::new(
            "attribute-remove",
            ATTRIBUTES,
            &[],
            "make it not {old}",
            RuleAction::Delete,
        ),
    ]
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .expect("built-in grammar is valid")
}

/// Where and how a template edit was applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateEdit {
    pub rule: usize,
    pub position: usize,
    pub old: String,
    pub new: String,
}

/// Applies one randomly chosen applicable rule to `caption`.
pub fn gen_template_edit(
    id: &str,
    caption: &str,
    rules: &[GrammarRule],
    rng: &mut Rng,
) -> Result<(TextTriplet, TemplateEdit)> {
    if caption.trim().is_empty() {
        return Err(Error::InvariantViolation("empty caption".into()));
    }
    let tokens: Vec<&str> = caption.split_whitespace().collect();
    let options: Vec<(usize, usize)> = rules
        .iter()
        .enumerate()
        .flat_map(|(r, rule)| {
            let tokens = &tokens;
            (0..tokens.len()).filter(move |&p| rule.applies_at(tokens, p)).map(move |p| (r, p))
        })
        .collect();
    if options.is_empty() {
        return Err(Error::NoRuleApplies(caption.into()));
    }
    // pick the rule first so frequent tokens do not dominate
    let mut rule_ids: Vec<usize> = options.iter().map(|(r, _)| *r).collect();
    rule_ids.dedup();
    let r = rule_ids[rng.below(rule_ids.len())];
    let positions: Vec<usize> = options.iter().filter(|(x, _)| *x == r).map(|(_, p)| *p).collect();
    let pos = positions[rng.below(positions.len())];
    let rule = &rules[r];
    let old = tokens[pos];
    let candidates = rule.candidates(old);
    let new = candidates[rng.below(candidates.len())];

    let normalized: String = tokens.join(" ");
    let triplet = TextTriplet {
        id: id.into(),
        caption: normalized.clone(),
        modification: rule.describe(old, new),
        modified_caption: rule.rewrite(&normalized, pos, new),
    };
    let edit = TemplateEdit {
        rule: r,
        position: pos,
        old: old.into(),
        new: new.into(),
    };
    Ok((triplet, edit))
}

pub fn gen_template_triplet(id: &str, caption: &str, rules: &[GrammarRule], rng: &mut Rng) -> Result<TextTriplet> {
    gen_template_edit(id, caption, rules, rng).map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Prompt with a `{caption}` slot.
    pub prompt_template: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub temperature: f64,
    /// First retry delay; doubles on each further retry.
    pub initial_backoff: Duration,
    /// Concurrent requests for [`llm_generate_many`].
    pub max_in_flight: usize,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8080/v1/generate".into(),
            model_name: "default".into(),
            prompt_template: "Caption: {caption}\nReturn a JSON object with fields \"modification\" \
                              (a short edit instruction) and \"modified_caption\" (the caption after the edit)."
                .into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            temperature: 0.7,
            initial_backoff: Duration::from_secs(1),
            max_in_flight: 4,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if !self.prompt_template.contains("{caption}") {
            return Err(Error::Config("prompt template lacks {caption}".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
}

/// Sends one request body and returns the raw response body.
pub trait Transport: Sync {
    fn send(&self, url: &str, request: &LlmRequest, timeout: Duration) -> std::result::Result<String, String>;
}

/// Finds the `{modification, modified_caption}` object in a response body.
/// Accepts the bare object, or common completion wrappers whose text field
/// holds that object as JSON.
pub fn parse_llm_response(body: &str) -> Result<(String, String)> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| Error::MalformedResponse(format!("not JSON: {e}")))?;
    extract(&value, 0)
}

fn extract(value: &Value, depth: usize) -> Result<(String, String)> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::MalformedResponse(format!("expected an object, got {}", kind(value))))?;
    if let (Some(m), Some(u)) = (obj.get("modification"), obj.get("modified_caption")) {
        return match (m.as_str(), u.as_str()) {
            (Some(m), Some(u)) => Ok((m.trim().to_string(), u.trim().to_string())),
            _ => Err(Error::MalformedResponse("fields must be strings".into())),
        };
    }
    if depth < 2 {
        let inner = obj
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("text").or_else(|| c.get("message").and_then(|m| m.get("content"))))
            .or_else(|| obj.get("response"))
            .or_else(|| obj.get("output"))
            .and_then(Value::as_str);
        if let Some(text) = inner {
            let nested: Value = serde_json::from_str(text.trim())
                .map_err(|e| Error::MalformedResponse(format!("completion text is not JSON: {e}")))?;
            return extract(&nested, depth + 1);
        }
    }
    Err(Error::MalformedResponse(
        "missing `modification` / `modified_caption`".into(),
    ))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// One caption through the endpoint, retrying transport failures with
/// exponential backoff. Malformed or invalid responses are not retried.
pub fn llm_generate(id: &str, caption: &str, cfg: &LlmEndpointConfig, transport: &dyn Transport) -> Result<TextTriplet> {
    cfg.validate()?;
    if caption.trim().is_empty() {
        return Err(Error::InvariantViolation("empty caption".into()));
    }
    let request = LlmRequest {
        model: cfg.model_name.clone(),
        prompt: cfg.prompt_template.replace("{caption}", caption),
        temperature: cfg.temperature,
    };
    let mut delay = cfg.initial_backoff;
    let mut attempt = 0;
    let body = loop {
        match transport.send(&cfg.base_url, &request, cfg.timeout) {
            Ok(body) => break body,
            Err(e) if attempt >= cfg.max_retries => {
                return Err(Error::Transport(format!("{e} (after {} attempts)", attempt + 1)));
            }
            Err(e) => {
                log::debug!("request for {id} failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
        }
    };
    let (modification, modified_caption) = parse_llm_response(&body)?;
    let triplet = TextTriplet {
        id: id.into(),
        caption: caption.into(),
        modification,
        modified_caption,
    };
    validate_triplet(&triplet).map_err(|r| Error::InvariantViolation(r.to_string()))?;
    Ok(triplet)
}

/// Runs [`llm_generate`] over `(id, caption)` pairs with at most
/// `cfg.max_in_flight` concurrent requests. Results keep input order.
pub fn llm_generate_many(
    captions: &[(String, String)],
    cfg: &LlmEndpointConfig,
    transport: &dyn Transport,
) -> Result<Vec<Result<TextTriplet>>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        captions
            .par_iter()
            .map(|(id, c)| llm_generate(id, c, cfg, transport))
            .collect()
    }))
}
