#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retrispec::{decode_autoregressive, fit_ngram, DecodeLimits, DraftTree, NGramModel, TokenId, TriePool};

pub const EOS: TokenId = 0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sequences drawn from a sparse random Markov chain so that n-gram
/// statistics and retrieval hits are both non-trivial.
pub fn markov_corpus(rng: &mut ChaCha8Rng, vocab: usize, sequences: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let fanout = 3.min(vocab - 1);
    let successors: Vec<Vec<TokenId>> = (0..vocab)
        .map(|_| (0..fanout).map(|_| rng.random_range(1..vocab as TokenId)).collect())
        .collect();
    (0..sequences)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            let mut seq = vec![rng.random_range(1..vocab as TokenId)];
            while seq.len() < len {
                let last = *seq.last().unwrap() as usize;
                let next = if rng.random_bool(0.05) {
                    EOS
                } else {
                    *successors[last].choose(rng).unwrap()
                };
                seq.push(next);
                if next == EOS {
                    break;
                }
            }
            seq
        })
        .collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, order: usize, vocab: usize) -> (NGramModel, Vec<Vec<TokenId>>) {
    let count = rng.random_range(10..60);
    let corpus = markov_corpus(rng, vocab, count, 24);
    let alpha = *[0.01, 0.1, 1.0].choose(rng).unwrap();
    (fit_ngram(&corpus, order, alpha, vocab).unwrap(), corpus)
}

/// A pool mixing the model's own greedy continuations, training sequences
/// and noise, so drafts are sometimes right and sometimes wrong.
pub fn random_pool(
    rng: &mut ChaCha8Rng,
    model: &NGramModel,
    corpus: &[Vec<TokenId>],
    vocab: usize,
    entries: usize,
) -> TriePool {
    let mut pool = TriePool::new("test", vocab, 64);
    for _ in 0..entries {
        let text: Vec<TokenId> = match rng.random_range(0..3) {
            0 => {
                let prompt = random_prompt(rng, vocab, 4);
                let limits = DecodeLimits {
                    max_new_tokens: rng.random_range(1..40),
                    eos: EOS,
                };
                decode_autoregressive(model, &prompt, limits).unwrap().0
            }
            1 => corpus.choose(rng).unwrap().clone(),
            _ => (0..rng.random_range(1..20)).map(|_| rng.random_range(0..vocab as TokenId)).collect(),
        };
        if !text.is_empty() {
            pool.insert_text(&text).unwrap();
        }
    }
    pool
}

pub fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<TokenId> {
    (0..rng.random_range(1..=max_len))
        .map(|_| rng.random_range(1..vocab as TokenId))
        .collect()
}

/// A random draft tree with between 1 and `max_nodes` nodes.
pub fn random_tree(rng: &mut ChaCha8Rng, vocab: usize, max_nodes: usize) -> DraftTree {
    let target = rng.random_range(1..=max_nodes);
    let mut paths: Vec<Vec<TokenId>> = Vec::new();
    let mut tree = DraftTree::from_paths(Vec::<Vec<TokenId>>::new());
    for _ in 0..200 {
        let mut path = if !paths.is_empty() && rng.random_bool(0.7) {
            let base = paths.choose(rng).unwrap();
            base[..rng.random_range(0..=base.len())].to_vec()
        } else {
            Vec::new()
        };
        path.push(rng.random_range(0..vocab as TokenId));
        let mut candidate = paths.clone();
        candidate.push(path.clone());
        let next = DraftTree::from_paths(&candidate);
        if next.len() > target {
            continue;
        }
        paths = candidate;
        tree = next;
        if tree.len() == target {
            break;
        }
    }
    tree
}

/// Brute-force retrieval: every stored sequence that begins with `prefix`
/// contributes each prefix of its continuation once.
pub fn oracle_subtree(sequences: &[Vec<TokenId>], prefix: &[TokenId]) -> BTreeMap<Vec<TokenId>, u64> {
    let mut out = BTreeMap::new();
    for s in sequences {
        if s.len() > prefix.len() && s.starts_with(prefix) {
            let cont = &s[prefix.len()..];
            for j in 1..=cont.len() {
                *out.entry(cont[..j].to_vec()).or_insert(0) += 1;
            }
        }
    }
    out
}
