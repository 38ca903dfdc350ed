//! Synthetic knowledge corpora with controlled old/new similarity.
//!
//! Vocabulary layout: token 0 is EOS, then a behavior-history region, then the
//! shared connector phrases (one per slot), then a disjoint content region per
//! group, and finally a fresh region used for non-overlapping new text.
//!
//! A knowledge text is `slots` units of `connector[s] ++ template`, followed by
//! EOS. Templates are drawn per (group, slot) with a skewed choice, so each
//! group has a dominant phrasing. New knowledge reuses each old unit with
//! probability `overlap_rate` and otherwise substitutes fresh tokens.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{simulate_streaming_split, KnowledgeRecord};
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::pool::EntityKind;

pub const SYNTH_EOS: TokenId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub num_groups: usize,
    pub records_per_group: usize,
    pub slots: usize,
    pub templates_per_slot: usize,
    pub segment_len: usize,
    pub connector_len: usize,
    pub history_vocab: usize,
    pub group_vocab: usize,
    /// Behavior history length `n`.
    pub history_len: usize,
    /// Old-history length `m`, with `n/2 < m < n`.
    pub history_split: usize,
    pub overlap_rate: f64,
    /// Knowledge texts per entity; texts after the first are perturbed variants.
    pub old_texts_per_record: usize,
    /// Per-token substitution rate applied to the variant texts.
    pub mutation_rate: f64,
    pub embedding_dim: usize,
    pub embedding_spread: f64,
    pub embedding_noise: f64,
    /// Share of entities with fewer interactions than the router threshold.
    pub cold_start_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            num_groups: 4,
            records_per_group: 25,
            slots: 4,
            templates_per_slot: 4,
            segment_len: 8,
            connector_len: 4,
            history_vocab: 200,
            group_vocab: 64,
            history_len: 12,
            history_split: 8,
            overlap_rate: 0.9,
            old_texts_per_record: 1,
            mutation_rate: 0.02,
            embedding_dim: 8,
            embedding_spread: 4.0,
            embedding_noise: 0.5,
            cold_start_fraction: 0.2,
            seed: 0,
        }
    }
}

struct Layout {
    history_start: TokenId,
    connector_start: TokenId,
    group_start: TokenId,
    fresh_start: TokenId,
    vocab: TokenId,
}

impl SynthSpec {
    pub fn text_len(&self) -> usize {
        self.slots * (self.connector_len + self.segment_len) + 1
    }

    fn layout(&self) -> Result<Layout> {
        let history_start = 1;
        let connector_start = history_start + self.history_vocab;
        let group_start = connector_start + self.slots * self.connector_len;
        let fresh_start = group_start + self.num_groups * self.group_vocab;
        let fresh = self.vocab_size.saturating_sub(fresh_start);
        if fresh < self.text_len() {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "vocabulary of {} leaves {fresh} fresh tokens; need at least {}",
                    self.vocab_size,
                    fresh_start + self.text_len()
                ),
            ));
        }
        Ok(Layout {
            history_start: history_start as TokenId,
            connector_start: connector_start as TokenId,
            group_start: group_start as TokenId,
            fresh_start: fresh_start as TokenId,
            vocab: self.vocab_size as TokenId,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(Error::config("overlap_rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::config("mutation_rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return Err(Error::config("cold_start_fraction", "must lie in [0, 1]"));
        }
        for (field, v) in [
            ("num_groups", self.num_groups),
            ("slots", self.slots),
            ("templates_per_slot", self.templates_per_slot),
            ("segment_len", self.segment_len),
            ("group_vocab", self.group_vocab),
            ("history_vocab", self.history_vocab),
            ("old_texts_per_record", self.old_texts_per_record),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(2 * self.history_split > self.history_len && self.history_split < self.history_len) {
            return Err(Error::config(
                "history_split",
                format!(
                    "need history_len/2 < history_split < history_len, got {} and {}",
                    self.history_split, self.history_len
                ),
            ));
        }
        Ok(())
    }
}

/// Generates a deterministic corpus under `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<KnowledgeRecord>> {
    spec.validate()?;
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // templates[g][slot][choice]
    let templates: Vec<Vec<Vec<Vec<TokenId>>>> = (0..spec.num_groups)
        .map(|g| {
            let lo = layout.group_start + (g * spec.group_vocab) as TokenId;
            let hi = lo + spec.group_vocab as TokenId;
            (0..spec.slots)
                .map(|_| {
                    (0..spec.templates_per_slot)
                        .map(|_| (0..spec.segment_len).map(|_| rng.random_range(lo..hi)).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let connectors: Vec<Vec<TokenId>> = (0..spec.slots)
        .map(|s| {
            let lo = layout.connector_start + (s * spec.connector_len) as TokenId;
            (lo..lo + spec.connector_len as TokenId).collect()
        })
        .collect();
    // skewed template choice: weight 1/(rank+1)
    let weights: Vec<f64> = (0..spec.templates_per_slot).map(|i| 1.0 / (i + 1) as f64).collect();
    let choice = WeightedIndex::new(&weights).expect("positive weights");

    let spread = Normal::new(0.0, spec.embedding_spread).map_err(|e| Error::config("embedding_spread", e.to_string()))?;
    let noise = Normal::new(0.0, spec.embedding_noise).map_err(|e| Error::config("embedding_noise", e.to_string()))?;
    let centroids: Vec<Vec<f64>> = (0..spec.num_groups)
        .map(|_| (0..spec.embedding_dim).map(|_| spread.sample(&mut rng)).collect())
        .collect();

    let unit = |g: usize, s: usize, c: usize| -> Vec<TokenId> {
        connectors[s].iter().chain(&templates[g][s][c]).copied().collect()
    };

    let mut records = Vec::with_capacity(spec.num_groups * spec.records_per_group);
    for i in 0..spec.num_groups * spec.records_per_group {
        let g = i % spec.num_groups;
        let kind = if (i / spec.num_groups).is_multiple_of(2) {
            EntityKind::User
        } else {
            EntityKind::Item
        };

        let history: Vec<TokenId> = (0..spec.history_len)
            .map(|_| rng.random_range(layout.history_start..layout.connector_start))
            .collect();
        let (old_prompt, prompt) = simulate_streaming_split(&history, spec.history_split)?;

        let choices: Vec<usize> = (0..spec.slots).map(|_| choice.sample(&mut rng)).collect();
        let mut old_text: Vec<TokenId> = choices.iter().enumerate().flat_map(|(s, &c)| unit(g, s, c)).collect();
        old_text.push(SYNTH_EOS);

        let group_lo = layout.group_start + (g * spec.group_vocab) as TokenId;
        let group_hi = group_lo + spec.group_vocab as TokenId;
        let mut old_knowledge = vec![old_text.clone()];
        for _ in 1..spec.old_texts_per_record {
            let variant_choices: Vec<usize> = (0..spec.slots).map(|_| choice.sample(&mut rng)).collect();
            let mut text: Vec<TokenId> = variant_choices
                .iter()
                .enumerate()
                .flat_map(|(s, &c)| unit(g, s, c))
                .collect();
            for t in text.iter_mut() {
                if rng.random_bool(spec.mutation_rate) {
                    *t = rng.random_range(group_lo..group_hi);
                }
            }
            text.push(SYNTH_EOS);
            old_knowledge.push(text);
        }

        // fresh tokens are distinct within a record so a non-overlapping text
        // never repeats itself
        let fresh_count = (layout.vocab - layout.fresh_start) as usize;
        let mut fresh = sample(&mut rng, fresh_count, spec.text_len())
            .into_iter()
            .map(|k| layout.fresh_start + k as TokenId);
        let unit_len = spec.connector_len + spec.segment_len;
        let mut new_text = Vec::with_capacity(spec.text_len());
        for (s, &c) in choices.iter().enumerate() {
            if rng.random_bool(spec.overlap_rate) {
                new_text.extend(unit(g, s, c));
            } else {
                new_text.extend(fresh.by_ref().take(unit_len));
            }
        }
        new_text.push(SYNTH_EOS);

        let embedding: Vec<f64> = centroids[g].iter().map(|c| c + noise.sample(&mut rng)).collect();
        let interaction_count = if rng.random_bool(spec.cold_start_fraction) {
            rng.random_range(0..5)
        } else {
            rng.random_range(20..500)
        };
        records.push(KnowledgeRecord {
            entity_id: format!("{}-{g}-{i}", if kind == EntityKind::User { "user" } else { "item" }),
            kind,
            attributes: vec![
                ("category".to_string(), format!("c{g}")),
                ("subcategory".to_string(), format!("c{g}-{}", i % 2)),
            ],
            interaction_count,
            embedding: Some(embedding),
            old_prompt,
            prompt,
            old_knowledge,
            new_knowledge: Some(new_text),
        });
    }
    Ok(records)
}
