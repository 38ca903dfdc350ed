//! Decode loops: the autoregressive baseline and the speculative
//! draft → tree-evaluate → verify → append loop, with run metrics.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{linearize, retrieve_draft, DraftParams};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenId};
use crate::trie::{drop_overlay, SessionOverlay, TriePool};
use crate::verify::{verify_branches, VerificationPolicy};

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_new_tokens: usize,
    pub eos: TokenId,
}

/// Raw counters collected during one or more decode runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub tokens_generated: u64,
    /// Decode steps; each step is one model call.
    pub model_calls: u64,
    /// Steps that verified a retrieved draft.
    pub draft_steps: u64,
    /// Steps that fell back to a plain autoregressive call after a retrieval miss.
    pub fallback_steps: u64,
    pub accepted_draft_tokens: u64,
    pub retrieval_seconds: f64,
    pub wall_seconds: f64,
    pub knowledge_texts: u64,
}

impl RunCounters {
    pub fn accumulate(&mut self, other: &RunCounters) {
        self.tokens_generated += other.tokens_generated;
        self.model_calls += other.model_calls;
        self.draft_steps += other.draft_steps;
        self.fallback_steps += other.fallback_steps;
        self.accepted_draft_tokens += other.accepted_draft_tokens;
        self.retrieval_seconds += other.retrieval_seconds;
        self.wall_seconds += other.wall_seconds;
        self.knowledge_texts += other.knowledge_texts;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub tokens_generated: u64,
    pub model_calls: u64,
    pub accepted_draft_tokens: u64,
    /// Accepted draft tokens per decode step; the correction token is not counted.
    pub aal: f64,
    /// Emitted tokens per decode step, correction included.
    pub tokens_per_step: f64,
    /// Mean retrieval wall time per generated knowledge text.
    pub art_seconds: f64,
    /// Share of wall time spent in retrieval.
    pub retrieval_time_ratio: f64,
    pub gen_speed_tokens_per_second: f64,
    pub speedup_vs_autoregressive: Option<f64>,
    pub wall_seconds: f64,
    /// Set when the run made no decode steps; every rate is then zero.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn compute_metrics(counters: &RunCounters, baseline_gen_speed: Option<f64>) -> DecodeReport {
    let degenerate = counters.model_calls == 0;
    let steps = counters.model_calls as f64;
    let gen_speed = ratio(counters.tokens_generated as f64, counters.wall_seconds);
    DecodeReport {
        tokens_generated: counters.tokens_generated,
        model_calls: counters.model_calls,
        accepted_draft_tokens: counters.accepted_draft_tokens,
        aal: ratio(counters.accepted_draft_tokens as f64, steps),
        tokens_per_step: ratio(counters.tokens_generated as f64, steps),
        art_seconds: ratio(counters.retrieval_seconds, counters.knowledge_texts as f64),
        retrieval_time_ratio: ratio(counters.retrieval_seconds, counters.wall_seconds),
        gen_speed_tokens_per_second: gen_speed,
        speedup_vs_autoregressive: baseline_gen_speed
            .filter(|&b| b > 0.0 && !degenerate)
            .map(|b| gen_speed / b),
        wall_seconds: counters.wall_seconds,
        degenerate,
    }
}

fn check_prompt(prompt: &[TokenId], vocab_size: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::input("prompt must be non-empty"));
    }
    if let Some(t) = prompt.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::input(format!("prompt token {t} outside vocabulary")));
    }
    Ok(())
}

/// Greedy decoding, one token per model call.
pub fn decode_autoregressive_raw<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    limits: DecodeLimits,
) -> Result<(Vec<TokenId>, RunCounters)> {
    check_prompt(prompt, model.vocab_size())?;
    let start = Instant::now();
    let mut context = prompt.to_vec();
    let mut counters = RunCounters {
        knowledge_texts: 1,
        ..RunCounters::default()
    };
    while context.len() - prompt.len() < limits.max_new_tokens {
        let next = model.next_distribution(&context)?.argmax();
        counters.model_calls += 1;
        context.push(next);
        if next == limits.eos {
            break;
        }
    }
    counters.tokens_generated = (context.len() - prompt.len()) as u64;
    counters.wall_seconds = start.elapsed().as_secs_f64();
    Ok((context.split_off(prompt.len()), counters))
}

pub fn decode_autoregressive<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    limits: DecodeLimits,
) -> Result<(Vec<TokenId>, DecodeReport)> {
    let (tokens, counters) = decode_autoregressive_raw(model, prompt, limits)?;
    Ok((tokens, compute_metrics(&counters, None)))
}

/// What one speculative step did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub emitted: Vec<TokenId>,
    pub accepted_drafts: usize,
    pub drafted: usize,
    pub finished: bool,
}

/// One knowledge generation: the growing context and its temporary branches.
pub struct DecodeSession<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    pool: &'a TriePool,
    overlay: SessionOverlay,
    context: Vec<TokenId>,
    prompt_len: usize,
    policy: VerificationPolicy,
    params: DraftParams,
    limits: DecodeLimits,
    counters: RunCounters,
    finished: bool,
}

impl<'a, M: LanguageModel + ?Sized> DecodeSession<'a, M> {
    pub fn new(
        model: &'a M,
        pool: &'a TriePool,
        prompt: &[TokenId],
        policy: VerificationPolicy,
        params: DraftParams,
        limits: DecodeLimits,
    ) -> Result<Self> {
        check_prompt(prompt, model.vocab_size())?;
        policy.validate()?;
        params.validate()?;
        let owner = NEXT_SESSION.fetch_add(1, Ordering::Relaxed);
        let mut overlay = SessionOverlay::new(owner, pool.trie().max_depth());
        overlay.index_session_text(prompt);
        Ok(Self {
            model,
            pool,
            overlay,
            context: prompt.to_vec(),
            prompt_len: prompt.len(),
            policy,
            params,
            limits,
            counters: RunCounters {
                knowledge_texts: 1,
                ..RunCounters::default()
            },
            finished: limits.max_new_tokens == 0,
        })
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.context[self.prompt_len..]
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn overlay(&self) -> &SessionOverlay {
        &self.overlay
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.finished {
            return Ok(StepOutcome {
                emitted: Vec::new(),
                accepted_drafts: 0,
                drafted: 0,
                finished: true,
            });
        }
        let step_start = Instant::now();
        let draft = retrieve_draft(self.pool, &self.overlay, &self.context, &self.params);
        self.counters.retrieval_seconds += step_start.elapsed().as_secs_f64();

        let (mut emitted, accepted, drafted) = match draft {
            None => {
                let next = self.model.next_distribution(&self.context)?.argmax();
                self.counters.fallback_steps += 1;
                (vec![next], 0, 0)
            }
            Some(tree) => {
                let lin = linearize(&tree);
                let dists = self.model.evaluate_tree(&self.context, &lin)?;
                let outcome = verify_branches(&lin, &dists, &self.policy)?;
                self.counters.draft_steps += 1;
                (outcome.emitted(), outcome.accepted_count, lin.len())
            }
        };
        self.counters.model_calls += 1;

        if let Some(pos) = emitted.iter().position(|&t| t == self.limits.eos) {
            emitted.truncate(pos + 1);
        }
        let remaining = self.limits.max_new_tokens - self.generated().len();
        emitted.truncate(remaining);
        let accepted_kept = accepted.min(emitted.len());
        self.counters.accepted_draft_tokens += accepted_kept as u64;

        self.context.extend_from_slice(&emitted);
        self.overlay.index_session_text(&self.context);
        self.finished = emitted.last() == Some(&self.limits.eos)
            || self.generated().len() >= self.limits.max_new_tokens;
        self.counters.wall_seconds += step_start.elapsed().as_secs_f64();
        Ok(StepOutcome {
            emitted,
            accepted_drafts: accepted_kept,
            drafted,
            finished: self.finished,
        })
    }

    /// Ends the session, releasing its temporary branches.
    pub fn finish(mut self) -> (Vec<TokenId>, RunCounters) {
        self.counters.tokens_generated = self.generated().len() as u64;
        drop_overlay(self.overlay);
        (self.context.split_off(self.prompt_len), self.counters)
    }
}

pub fn decode_speculative_raw<M: LanguageModel + ?Sized>(
    model: &M,
    pool: &TriePool,
    prompt: &[TokenId],
    policy: VerificationPolicy,
    params: DraftParams,
    limits: DecodeLimits,
) -> Result<(Vec<TokenId>, RunCounters)> {
    let mut session = DecodeSession::new(model, pool, prompt, policy, params, limits)?;
    while !session.is_finished() {
        session.step()?;
    }
    Ok(session.finish())
}

pub fn decode_speculative<M: LanguageModel + ?Sized>(
    model: &M,
    pool: &TriePool,
    prompt: &[TokenId],
    policy: VerificationPolicy,
    params: DraftParams,
    limits: DecodeLimits,
) -> Result<(Vec<TokenId>, DecodeReport)> {
    let (tokens, counters) = decode_speculative_raw(model, pool, prompt, policy, params, limits)?;
    Ok((tokens, compute_metrics(&counters, None)))
}
