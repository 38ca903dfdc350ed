//! Target-model interface and the deterministic n-gram reference model.
//!
//! The decoder only talks to a [`LanguageModel`]: sequential next-token
//! distributions for autoregressive steps and one batched tree evaluation per
//! speculative step. [`NGramModel`] implements both over the same arithmetic,
//! so tree evaluation is bit-identical to the sequential path.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::draft::LinearDraft;
use crate::error::{Error, Result};

/// Index into the fixed vocabulary.
pub type TokenId = u32;

/// Normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validates non-negativity and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::input("distribution over an empty vocabulary"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::input(format!(
                "probability for token {i} is {}",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::input(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Probability of `token`; zero for ids outside the vocabulary.
    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token as usize).copied().unwrap_or(0.0)
    }

    /// Most probable token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Zero-based rank of `token` under (probability desc, id asc).
    /// Out-of-vocabulary tokens rank last.
    pub fn rank(&self, token: TokenId) -> usize {
        let t = token as usize;
        let Some(&pt) = self.probs.get(t) else {
            return self.probs.len();
        };
        self.probs
            .iter()
            .enumerate()
            .filter(|&(i, &p)| p > pt || (p == pt && i < t))
            .count()
    }
}

/// The target model `M`: next-token distributions over a fixed vocabulary.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution>;

    /// Evaluates every node of a linearized draft tree in one call.
    ///
    /// Output index 0 is the distribution after `context`; index `i + 1` is
    /// conditioned on `context` followed by node `i`'s ancestor path
    /// (inclusive), reconstructed from the attention mask.
    fn evaluate_tree(&self, context: &[TokenId], draft: &LinearDraft) -> Result<Vec<Distribution>> {
        let paths = draft.ancestor_paths()?;
        let mut out = Vec::with_capacity(paths.len() + 1);
        out.push(self.next_distribution(context)?);
        let mut buf = context.to_vec();
        for path in &paths {
            buf.truncate(context.len());
            buf.extend_from_slice(path);
            out.push(self.next_distribution(&buf)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

/// Add-alpha smoothed n-gram model.
///
/// `P(t | ctx) = (count(ctx, t) + alpha) / (count(ctx) + alpha * V)` where
/// `ctx` is the last `min(order - 1, len)` tokens of the context.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab_size: usize,
    alpha: f64,
    // tables[l] holds counts for contexts of exactly l tokens
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

const MODEL_MAGIC: &[u8; 4] = b"RSNG";
const MODEL_VERSION: u32 = 1;

/// Fits an add-alpha smoothed n-gram model on `corpus`.
pub fn fit_ngram(
    corpus: &[Vec<TokenId>],
    order: usize,
    alpha: f64,
    vocab_size: usize,
) -> Result<NGramModel> {
    if order == 0 {
        return Err(Error::input("n-gram order must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::input(format!("smoothing alpha must be positive, got {alpha}")));
    }
    if vocab_size == 0 || vocab_size > TokenId::MAX as usize {
        return Err(Error::input(format!("invalid vocabulary size {vocab_size}")));
    }
    let mut tables: Vec<HashMap<Vec<TokenId>, ContextCounts>> = vec![HashMap::new(); order];
    for (idx, seq) in corpus.iter().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::input(format!(
                "sequence {idx} contains token {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        for pos in 0..seq.len() {
            let next = seq[pos];
            for ctx_len in 0..order.min(pos + 1) {
                let ctx = &seq[pos - ctx_len..pos];
                let entry = match tables[ctx_len].get_mut(ctx) {
                    Some(e) => e,
                    None => tables[ctx_len].entry(ctx.to_vec()).or_default(),
                };
                entry.total += 1;
                *entry.next.entry(next).or_insert(0) += 1;
            }
        }
    }
    Ok(NGramModel {
        order,
        vocab_size,
        alpha,
        tables,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of distinct contexts stored across all tables.
    pub fn context_count(&self) -> usize {
        self.tables.iter().map(HashMap::len).sum()
    }

    fn window<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        let w = (self.order - 1).min(context.len());
        &context[context.len() - w..]
    }

    fn distribution_for_window(&self, window: &[TokenId]) -> Distribution {
        let v = self.vocab_size;
        match self.tables[window.len()].get(window) {
            None => Distribution::uniform(v),
            Some(counts) => {
                let denom = counts.total as f64 + self.alpha * v as f64;
                let mut probs = vec![self.alpha / denom; v];
                for (&t, &c) in &counts.next {
                    probs[t as usize] = (c as f64 + self.alpha) / denom;
                }
                Distribution { probs }
            }
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(bad) => Err(Error::input(format!(
                "token {bad} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.order as u32);
        w.u32(self.vocab_size as u32);
        w.f64(self.alpha);
        for table in &self.tables {
            let mut contexts: Vec<_> = table.iter().collect();
            contexts.sort_unstable_by(|a, b| a.0.cmp(b.0));
            w.u64(contexts.len() as u64);
            for (ctx, counts) in contexts {
                for &t in ctx {
                    w.u32(t);
                }
                w.u64(counts.total);
                let mut next: Vec<_> = counts.next.iter().collect();
                next.sort_unstable();
                w.u32(next.len() as u32);
                for (&t, &c) in next {
                    w.u32(t);
                    w.u64(c);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let order = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let alpha = r.f64()?;
        if order == 0 || vocab_size == 0 || alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::Format("invalid model header".into()));
        }
        let mut tables = Vec::with_capacity(order);
        for ctx_len in 0..order {
            let n = r.u64()? as usize;
            let mut table = HashMap::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let ctx = (0..ctx_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let total = r.u64()?;
                let m = r.u32()? as usize;
                let mut next = HashMap::with_capacity(m);
                for _ in 0..m {
                    let t = r.u32()?;
                    if t as usize >= vocab_size {
                        return Err(Error::Format(format!("token {t} out of range")));
                    }
                    next.insert(t, r.u64()?);
                }
                table.insert(ctx, ContextCounts { total, next });
            }
            tables.push(table);
        }
        r.finish()?;
        Ok(Self {
            order,
            vocab_size,
            alpha,
            tables,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(path, e.to_string()))
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        let window = self.window(context);
        self.check_tokens(window)?;
        Ok(self.distribution_for_window(window))
    }

    // Only the last order-1 tokens matter, so each node is evaluated on the
    // context tail plus its ancestor path, through the same code path as
    // `next_distribution`.
    fn evaluate_tree(&self, context: &[TokenId], draft: &LinearDraft) -> Result<Vec<Distribution>> {
        let paths = draft.ancestor_paths()?;
        self.check_tokens(&draft.pseudo_sequence)?;
        let tail = self.window(context);
        let mut out = Vec::with_capacity(paths.len() + 1);
        out.push(self.next_distribution(context)?);
        let mut buf = tail.to_vec();
        for path in &paths {
            buf.truncate(tail.len());
            buf.extend_from_slice(path);
            out.push(self.distribution_for_window(self.window(&buf)));
        }
        Ok(out)
    }
}

/// Reads token sequences from JSON Lines, one integer array per line.
/// Blank lines are skipped.
pub fn read_sequences_jsonl(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<TokenId> = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_model() -> NGramModel {
        fit_ngram(&[vec![1, 2, 3], vec![1, 2, 4]], 2, 1.0, 5).unwrap()
    }

    #[test]
    fn bigram_smoothing_hand_count() {
        let m = example_model();
        let d = m.next_distribution(&[1, 2]).unwrap();
        assert_eq!(d.prob(3), 2.0 / 7.0);
        assert_eq!(d.prob(4), 2.0 / 7.0);
        assert_eq!(d.prob(0), 1.0 / 7.0);
    }

    #[test]
    fn empty_corpus_is_uniform() {
        let m = fit_ngram(&[], 3, 1.0, 6).unwrap();
        for ctx in [&[][..], &[1], &[2, 3, 4]] {
            let d = m.next_distribution(ctx).unwrap();
            assert!(d.probs().iter().all(|&p| p == 1.0 / 6.0));
        }
    }

    #[test]
    fn vanishing_alpha_approaches_mle() {
        let m = fit_ngram(&[vec![1, 1, 1, 1]], 2, 1e-9, 5).unwrap();
        let d = m.next_distribution(&[1]).unwrap();
        assert!((d.prob(1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn only_markov_window_conditions() {
        let m = fit_ngram(&[vec![1, 2, 3], vec![1, 2, 4], vec![3, 4]], 2, 1.0, 10).unwrap();
        assert_eq!(
            m.next_distribution(&[9, 1, 2]).unwrap(),
            m.next_distribution(&[1, 2]).unwrap()
        );
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = example_model();
        let d = m.next_distribution(&[0]).unwrap();
        assert!(d.probs().iter().all(|&p| p == 0.2));
    }

    #[test]
    fn short_context_uses_shorter_table() {
        let m = fit_ngram(&[vec![1, 2, 3]], 3, 1.0, 4).unwrap();
        // empty context: unigram counts 1,1,1 over 3 tokens
        let d = m.next_distribution(&[]).unwrap();
        assert_eq!(d.prob(0), 1.0 / 7.0);
        assert_eq!(d.prob(1), 2.0 / 7.0);
        // one-token context [2] -> bigram table
        let d = m.next_distribution(&[2]).unwrap();
        assert_eq!(d.prob(3), 2.0 / 5.0);
    }

    #[test]
    fn out_of_range_token_names_sequence() {
        let err = fit_ngram(&[vec![1], vec![2, 9]], 2, 1.0, 5).unwrap_err();
        assert!(err.to_string().contains("sequence 1"), "{err}");
        let m = example_model();
        assert!(m.next_distribution(&[7]).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(fit_ngram(&[], 0, 1.0, 5).is_err());
        assert!(fit_ngram(&[], 2, 0.0, 5).is_err());
        assert!(fit_ngram(&[], 2, -1.0, 5).is_err());
    }

    #[test]
    fn argmax_and_rank_tie_to_lowest_id() {
        let d = Distribution::new(vec![0.3, 0.3, 0.4]).unwrap();
        assert_eq!(d.argmax(), 2);
        assert_eq!(d.rank(2), 0);
        assert_eq!(d.rank(0), 1);
        assert_eq!(d.rank(1), 2);
        let u = Distribution::uniform(4);
        assert_eq!(u.argmax(), 0);
        assert_eq!(u.rank(3), 3);
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.4]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let m = fit_ngram(&[vec![1, 2, 3, 1, 2], vec![4, 2, 3]], 3, 0.5, 6).unwrap();
        let bytes = m.to_bytes();
        let back = NGramModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(NGramModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NGramModel::from_bytes(&bad).is_err());
    }
}
