//! Knowledge records and their JSON Lines format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::pool::{EntityKind, EntityProfile};

/// One user or item with its behavior-derived prompts and knowledge texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub entity_id: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub attributes: Vec<(String, String)>,
    #[serde(default)]
    pub interaction_count: u64,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    /// Prompt that produced the old knowledge (old behavior history).
    #[serde(default)]
    pub old_prompt: Vec<TokenId>,
    /// Prompt for the knowledge to generate now (new behavior history).
    pub prompt: Vec<TokenId>,
    /// Previously generated knowledge texts; the first is the one produced from `old_prompt`.
    #[serde(default)]
    pub old_knowledge: Vec<Vec<TokenId>>,
    #[serde(default)]
    pub new_knowledge: Option<Vec<TokenId>>,
}

const KNOWN_FIELDS: &[&str] = &[
    "entity_id",
    "kind",
    "attributes",
    "interaction_count",
    "embedding",
    "old_prompt",
    "prompt",
    "old_knowledge",
    "new_knowledge",
];

impl KnowledgeRecord {
    pub fn profile(&self) -> EntityProfile {
        EntityProfile {
            entity_id: self.entity_id.clone(),
            kind: self.kind,
            embedding: self.embedding.clone(),
            attributes: self.attributes.clone(),
            interaction_count: self.interaction_count,
            old_knowledge: self.old_knowledge.clone(),
        }
    }

    fn token_fields(&self) -> impl Iterator<Item = (&'static str, &[TokenId])> {
        [("old_prompt", self.old_prompt.as_slice()), ("prompt", self.prompt.as_slice())]
            .into_iter()
            .chain(self.old_knowledge.iter().map(|k| ("old_knowledge", k.as_slice())))
            .chain(self.new_knowledge.iter().map(|k| ("new_knowledge", k.as_slice())))
    }

    /// Checks every token field against the vocabulary.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (field, tokens) in self.token_fields() {
            if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::input(format!(
                    "record {}: token {t} in `{field}` outside vocabulary of size {vocab_size}",
                    self.entity_id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a corpus, validating token ranges. Unknown fields are ignored with a warning.
pub fn read_corpus(path: &Path, vocab_size: usize) -> Result<Vec<KnowledgeRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {lineno}: {e}")))?;
        if let Some(obj) = value.as_object() {
            for key in obj.keys().filter(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
                warn!("{}:{lineno}: ignoring unknown field `{key}`", path.display());
            }
        }
        let record: KnowledgeRecord = serde_json::from_value(value)
            .map_err(|e| Error::data(path, format!("line {lineno}: {e}")))?;
        record
            .validate(vocab_size)
            .map_err(|e| Error::data(path, format!("line {lineno}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[KnowledgeRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Training sequences for the reference model: each old prompt followed by
/// its first old knowledge text, and each new prompt followed by its new knowledge.
pub fn model_corpus(records: &[KnowledgeRecord]) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for r in records {
        if let Some(old) = r.old_knowledge.first() {
            out.push(r.old_prompt.iter().chain(old).copied().collect());
        }
        if let Some(new) = &r.new_knowledge {
            out.push(r.prompt.iter().chain(new).copied().collect());
        }
    }
    out
}

/// Splits a behavior history `x_1..x_n` into the old history `x_1..x_m` and
/// the new history `x_{n-m}..x_n` (1-based, inclusive), for `n/2 < m < n`.
pub fn simulate_streaming_split<T: Clone>(history: &[T], m: usize) -> Result<(Vec<T>, Vec<T>)> {
    let n = history.len();
    if !(2 * m > n && m < n) {
        return Err(Error::input(format!(
            "split point m={m} must satisfy n/2 < m < n for n={n}"
        )));
    }
    let old = history[..m].to_vec();
    let new = history[n - m - 1..].to_vec();
    Ok((old, new))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_example() {
        let x: Vec<u32> = (1..=10).collect();
        let (old, new) = simulate_streaming_split(&x, 7).unwrap();
        assert_eq!(old, (1..=7).collect::<Vec<_>>());
        assert_eq!(new, (3..=10).collect::<Vec<_>>());
    }

    #[test]
    fn split_maximal_overlap() {
        let x: Vec<u32> = (1..=10).collect();
        let (_, new) = simulate_streaming_split(&x, 9).unwrap();
        assert_eq!(new, x);
    }

    #[test]
    fn split_rejects_small_m() {
        let x: Vec<u32> = (1..=10).collect();
        assert!(simulate_streaming_split(&x, 5).is_err());
        assert!(simulate_streaming_split(&x, 10).is_err());
        assert!(simulate_streaming_split(&x, 6).is_ok());
    }

    #[test]
    fn corpus_round_trip_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let rec = KnowledgeRecord {
            entity_id: "u1".into(),
            kind: EntityKind::User,
            attributes: vec![("category".into(), "A".into())],
            interaction_count: 3,
            embedding: Some(vec![0.5, -1.0]),
            old_prompt: vec![1, 2],
            prompt: vec![2, 3],
            old_knowledge: vec![vec![4, 5, 0]],
            new_knowledge: None,
        };
        write_corpus(&path, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_corpus(&path, 10).unwrap(), vec![rec]);

        std::fs::write(
            &path,
            r#"{"entity_id":"i","kind":"item","prompt":[1],"mood":"happy"}"#,
        )
        .unwrap();
        let got = read_corpus(&path, 10).unwrap();
        assert_eq!(got[0].entity_id, "i");

        std::fs::write(&path, r#"{"entity_id":"i","kind":"item","prompt":[99]}"#).unwrap();
        assert!(matches!(read_corpus(&path, 10), Err(Error::Data { .. })));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(read_corpus(&path, 10), Err(Error::Data { .. })));
    }
}
