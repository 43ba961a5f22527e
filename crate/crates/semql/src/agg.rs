//! Hierarchical aggregation for AI_AGG / AI_SUMMARIZE_AGG.
//!
//! Rows accumulate in a text buffer R; when R would exceed the token batch
//! limit it is folded into an intermediate state via Extract, and states
//! themselves fold via Combine once they outgrow the limit. Finalization
//! summarizes the last state — or, when everything fit in one batch and no
//! fold ever happened, issues a single FastAggregate call instead.
//!
//! Both the R and S overflow checks measure tokens (the state-buffer limit
//! could also be read as an element count; we use tokens for both).

use crate::data::estimate_tokens;
use crate::models::{ModelRequest, Provider, ProviderError, TaskKind};

pub const DEFAULT_BATCH_SIZE_TOKENS: u64 = 3072;

#[derive(Debug, Clone)]
pub struct AggState {
    /// Row buffer and its token size.
    r: Vec<String>,
    r_tokens: u64,
    /// Intermediate-state buffer and its token size.
    s: Vec<String>,
    s_tokens: u64,
    batch_size_tokens: u64,
    instruction: Option<String>,
    pub truncations: u64,
    pub calls: u64,
    pushed_any: bool,
}

impl AggState {
    pub fn new(batch_size_tokens: u64, instruction: Option<String>) -> AggState {
        AggState {
            r: Vec::new(),
            r_tokens: 0,
            s: Vec::new(),
            s_tokens: 0,
            batch_size_tokens: batch_size_tokens.max(1),
            instruction,
            truncations: 0,
            calls: 0,
            pushed_any: false,
        }
    }

    fn request(&self, task: TaskKind, model: &str, payload: &str) -> ModelRequest {
        let prompt = match &self.instruction {
            Some(instr) => format!("{instr}\n{payload}"),
            None => payload.to_string(),
        };
        ModelRequest::new(task, model, &prompt)
    }

    fn call(
        &mut self,
        task: TaskKind,
        payload: &str,
        provider: &dyn Provider,
        model: &str,
    ) -> Result<String, ProviderError> {
        let req = self.request(task, model, payload);
        let resp = provider.invoke(&req)?;
        self.calls += 1;
        Ok(resp.text)
    }

    fn flush_r(&mut self, provider: &dyn Provider, model: &str) -> Result<(), ProviderError> {
        if self.r.is_empty() {
            return Ok(());
        }
        let payload = self.r.join("\n");
        let state = self.call(TaskKind::Extract, &payload, provider, model)?;
        self.s_tokens += estimate_tokens(&state);
        self.s.push(state);
        self.r.clear();
        self.r_tokens = 0;
        Ok(())
    }

    /// Folds the maximal prefix of S fitting the batch into one state.
    fn combine_prefix(
        &mut self,
        provider: &dyn Provider,
        model: &str,
    ) -> Result<(), ProviderError> {
        let mut prefix_len = 0;
        let mut prefix_tokens = 0u64;
        for state in &self.s {
            let t = estimate_tokens(state);
            if prefix_len >= 1 && prefix_tokens + t > self.batch_size_tokens {
                break;
            }
            prefix_tokens += t;
            prefix_len += 1;
        }
        // Folding one state into itself makes no progress.
        prefix_len = prefix_len.max(2).min(self.s.len());
        let payload = self.s[..prefix_len].join("\n");
        let combined = self.call(TaskKind::Combine, &payload, provider, model)?;
        let combined_tokens = estimate_tokens(&combined);
        self.s_tokens = self.s_tokens + combined_tokens - prefix_tokens;
        self.s.splice(..prefix_len, [combined]);
        Ok(())
    }

    pub fn push(
        &mut self,
        text: &str,
        provider: &dyn Provider,
        model: &str,
    ) -> Result<(), ProviderError> {
        self.pushed_any = true;
        let mut text = text.to_string();
        let mut tokens = estimate_tokens(&text);
        if tokens > self.batch_size_tokens {
            text = truncate_to_tokens(&text, self.batch_size_tokens);
            tokens = estimate_tokens(&text);
            self.truncations += 1;
        }
        if self.r_tokens + tokens > self.batch_size_tokens {
            self.flush_r(provider, model)?;
        }
        self.r_tokens += tokens;
        self.r.push(text);
        while self.s_tokens > self.batch_size_tokens && self.s.len() > 1 {
            self.combine_prefix(provider, model)?;
        }
        Ok(())
    }

    pub fn finalize(
        &mut self,
        provider: &dyn Provider,
        model: &str,
    ) -> Result<String, ProviderError> {
        if !self.pushed_any {
            return Ok(String::new());
        }
        // Everything fit in one batch: skip the fold entirely.
        if self.s.is_empty() && !self.r.is_empty() {
            let payload = self.r.join("\n");
            let out = self.call(TaskKind::FastAggregate, &payload, provider, model)?;
            self.r.clear();
            self.r_tokens = 0;
            self.s.push(out.clone());
            return Ok(out);
        }
        self.flush_r(provider, model)?;
        while self.s.len() > 1 {
            self.combine_prefix(provider, model)?;
        }
        let payload = self.s[0].clone();
        let out = self.call(TaskKind::Summarize, &payload, provider, model)?;
        self.s = vec![out.clone()];
        self.s_tokens = estimate_tokens(&out);
        Ok(out)
    }
}

/// Cuts text to at most `tokens` estimated tokens on a char boundary.
fn truncate_to_tokens(text: &str, tokens: u64) -> String {
    let max_bytes = (tokens * 4) as usize;
    if text.len() <= max_bytes {
        return text.to_string();
    }
    let mut end = max_bytes;
    while end > 0 && !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_string()
}

#[derive(Debug, Clone)]
pub struct AggSpec {
    pub instruction: Option<String>,
    pub batch_size_tokens: u64,
    pub model: String,
    pub output_name: String,
}

/// One independent AggState per group, rows fed in input order; groups
/// emitted in order of first appearance. NULL inputs are skipped.
pub fn group_aggregate(
    rows: &[(Vec<crate::data::Value>, Option<String>)],
    spec: &AggSpec,
    provider: &dyn Provider,
) -> Result<Vec<(Vec<crate::data::Value>, String, u64)>, ProviderError> {
    use std::collections::BTreeMap;
    let mut order: Vec<Vec<crate::data::Value>> = Vec::new();
    let mut states: BTreeMap<String, AggState> = BTreeMap::new();
    let group_key = |key: &[crate::data::Value]| -> String {
        key.iter()
            .map(crate::data::Value::group_key)
            .collect::<Vec<_>>()
            .join("\u{1f}")
    };
    for (key, text) in rows {
        let k = group_key(key);
        if !states.contains_key(&k) {
            order.push(key.clone());
            states.insert(
                k.clone(),
                AggState::new(spec.batch_size_tokens, spec.instruction.clone()),
            );
        }
        if let Some(text) = text {
            states
                .get_mut(&k)
                .unwrap()
                .push(text, provider, &spec.model)?;
        }
    }
    let mut out = Vec::new();
    for key in order {
        let k = group_key(&key);
        let state = states.get_mut(&k).unwrap();
        let text = state.finalize(provider, &spec.model)?;
        out.push((key, text, state.truncations));
    }
    Ok(out)
}
