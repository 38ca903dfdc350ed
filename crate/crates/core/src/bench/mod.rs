//! End-to-end experiment harness: corpus ingestion or synthesis, pool
//! construction per scheme, baseline and speculative decoding over an
//! evaluation set, and JSON report emission.

pub mod corpus;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::{compute_metrics, decode_autoregressive_raw, decode_speculative_raw, DecodeLimits, DecodeReport, RunCounters};
use crate::draft::DraftParams;
use crate::error::{Error, Result};
use crate::lm::{fit_ngram, NGramModel, TokenId};
use crate::pool::{
    assign_customized, assign_global, assign_random, build_pools, EntityProfile, GroupAssignment, GroupKey,
    GroupingParams, PoolBuildParams,
};
use crate::trie::{TriePool, DEFAULT_MAX_BRANCH_DEPTH};
use crate::verify::{PolicyMode, VerificationPolicy};

pub use corpus::{model_corpus, read_corpus, simulate_streaming_split, write_corpus, KnowledgeRecord};
pub use synth::{generate_synthetic_corpus, SynthSpec, SYNTH_EOS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolScheme {
    /// One pool holding all knowledge.
    Global,
    /// Routed collaborative and attribute groups.
    Customized,
    /// Uniform random groups, as many as the customized scheme forms.
    Random,
}

impl PoolScheme {
    pub fn short_label(&self) -> &'static str {
        match self {
            PoolScheme::Global => "GRP",
            PoolScheme::Customized => "CRP",
            PoolScheme::Random => "RRP",
        }
    }
}

impl fmt::Display for PoolScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolScheme::Global => "global",
            PoolScheme::Customized => "customized",
            PoolScheme::Random => "random",
        })
    }
}

impl FromStr for PoolScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PoolScheme::Global),
            "customized" => Ok(PoolScheme::Customized),
            "random" | "random-grouped" => Ok(PoolScheme::Random),
            other => Err(Error::config(
                "pool_scheme",
                format!("unknown pool scheme `{other}` (expected global|customized|random)"),
            )),
        }
    }
}

/// Row label in the style of the variant table: `GRP`, `RV+CRP`, `topk+RRP`.
pub fn variant_label(scheme: PoolScheme, policy: &VerificationPolicy) -> String {
    let pool = scheme.short_label();
    match policy.mode {
        PolicyMode::Greedy => pool.to_string(),
        PolicyMode::Relaxed => format!("RV+{pool}"),
        PolicyMode::TopK => format!("topk+{pool}"),
        PolicyMode::TopP => format!("topp+{pool}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON Lines corpus of knowledge records. Mutually exclusive with `synthetic`.
    pub corpus: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    /// Required with `corpus`; taken from the synthetic spec otherwise.
    pub vocab_size: Option<usize>,
    pub ngram_order: usize,
    pub ngram_alpha: f64,
    pub eos: TokenId,
    pub pool_schemes: Vec<PoolScheme>,
    pub grouping: GroupingParams,
    /// Per-pool entry caps; `null` leaves a pool uncapped.
    pub pool_sizes: Vec<Option<usize>>,
    pub max_branch_depth: usize,
    pub draft: DraftParams,
    pub policies: Vec<VerificationPolicy>,
    pub max_new_tokens: usize,
    pub seeds: Vec<u64>,
    /// Evaluate only the first N records with a prompt.
    pub eval_records: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic: None,
            vocab_size: None,
            ngram_order: 3,
            ngram_alpha: 1.0,
            eos: 0,
            pool_schemes: vec![PoolScheme::Customized],
            grouping: GroupingParams::default(),
            pool_sizes: vec![None],
            max_branch_depth: DEFAULT_MAX_BRANCH_DEPTH,
            draft: DraftParams::default(),
            policies: vec![VerificationPolicy::greedy()],
            max_new_tokens: 128,
            seeds: vec![0],
            eval_records: None,
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML or JSON config, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|message| Error::config(path.display().to_string(), message))
    }

    pub fn resolved_vocab_size(&self) -> Result<usize> {
        match (&self.synthetic, self.vocab_size) {
            (Some(s), None) => Ok(s.vocab_size),
            (Some(s), Some(v)) if v == s.vocab_size => Ok(v),
            (Some(s), Some(v)) => Err(Error::config(
                "vocab_size",
                format!("{v} disagrees with synthetic.vocab_size {}", s.vocab_size),
            )),
            (None, Some(v)) => Ok(v),
            (None, None) => Err(Error::config("vocab_size", "required when reading a corpus file")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.corpus, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("corpus", "set either `corpus` or `synthetic`, not both")),
            (None, None) => return Err(Error::config("corpus", "one of `corpus` or `synthetic` is required")),
            _ => {}
        }
        let vocab = self.resolved_vocab_size()?;
        if self.eos as usize >= vocab {
            return Err(Error::config("eos", format!("{} outside vocabulary of size {vocab}", self.eos)));
        }
        if self.ngram_order == 0 {
            return Err(Error::config("ngram_order", "must be at least 1"));
        }
        if self.ngram_alpha.is_nan() || self.ngram_alpha <= 0.0 {
            return Err(Error::config("ngram_alpha", "must be positive"));
        }
        for (field, empty) in [
            ("pool_schemes", self.pool_schemes.is_empty()),
            ("pool_sizes", self.pool_sizes.is_empty()),
            ("policies", self.policies.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::config(field, "grid must be non-empty"));
            }
        }
        if self.pool_sizes.contains(&Some(0)) {
            return Err(Error::config("pool_sizes", "caps must be at least 1"));
        }
        if self.max_branch_depth == 0 {
            return Err(Error::config("max_branch_depth", "must be at least 1"));
        }
        self.draft.validate()?;
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }

    fn limits(&self) -> DecodeLimits {
        DecodeLimits {
            max_new_tokens: self.max_new_tokens,
            eos: self.eos,
        }
    }
}

/// Loads or generates the records an experiment runs over.
pub fn load_records(config: &ExperimentConfig) -> Result<Vec<KnowledgeRecord>> {
    let vocab = config.resolved_vocab_size()?;
    match (&config.corpus, &config.synthetic) {
        (Some(path), _) => read_corpus(path, vocab),
        (None, Some(spec)) => generate_synthetic_corpus(spec),
        (None, None) => Err(Error::config("corpus", "one of `corpus` or `synthetic` is required")),
    }
}

/// Fits the reference model on the records' prompts and knowledge.
pub fn fit_reference_model(config: &ExperimentConfig, records: &[KnowledgeRecord]) -> Result<NGramModel> {
    fit_ngram(
        &model_corpus(records),
        config.ngram_order,
        config.ngram_alpha,
        config.resolved_vocab_size()?,
    )
}

/// Assigns entities to pools under `scheme`.
pub fn assign_scheme(
    scheme: PoolScheme,
    entities: &[EntityProfile],
    grouping: &GroupingParams,
    seed: u64,
) -> Result<GroupAssignment> {
    match scheme {
        PoolScheme::Global => Ok(assign_global(entities)),
        PoolScheme::Customized => assign_customized(entities, grouping, seed),
        PoolScheme::Random => {
            let customized = assign_customized(entities, grouping, seed)?;
            let mut groups: Vec<&GroupKey> = customized.values().collect();
            groups.sort();
            groups.dedup();
            Ok(assign_random(entities, groups.len(), seed))
        }
    }
}

/// Metric summary. Each seed's value is the mean over evaluation records;
/// rows then carry the mean and standard deviation over seeds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub aal: f64,
    pub tokens_per_step: f64,
    /// Model calls per generated token.
    pub call_ratio: f64,
    pub art_seconds: f64,
    pub retrieval_time_ratio: f64,
    pub gen_speed_tokens_per_second: f64,
    pub speedup: f64,
    /// Autoregressive calls divided by speculative calls.
    pub step_speedup: f64,
}

impl RowMetrics {
    fn fields(&self) -> [f64; 8] {
        [
            self.aal,
            self.tokens_per_step,
            self.call_ratio,
            self.art_seconds,
            self.retrieval_time_ratio,
            self.gen_speed_tokens_per_second,
            self.speedup,
            self.step_speedup,
        ]
    }

    fn from_fields(f: [f64; 8]) -> Self {
        Self {
            aal: f[0],
            tokens_per_step: f[1],
            call_ratio: f[2],
            art_seconds: f[3],
            retrieval_time_ratio: f[4],
            gen_speed_tokens_per_second: f[5],
            speedup: f[6],
            step_speedup: f[7],
        }
    }

    fn mean_std(samples: &[RowMetrics]) -> (RowMetrics, RowMetrics) {
        let n = samples.len() as f64;
        let mut mean = [0.0; 8];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.fields()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 8];
        if samples.len() > 1 {
            for s in samples {
                for ((acc, v), m) in var.iter_mut().zip(s.fields()).zip(mean) {
                    *acc += (v - m) * (v - m) / (n - 1.0);
                }
            }
        }
        (Self::from_fields(mean), Self::from_fields(var.map(f64::sqrt)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub tokens_generated: u64,
    pub model_calls: u64,
    pub accepted_draft_tokens: u64,
    pub draft_steps: u64,
    pub fallback_steps: u64,
    /// SHA-256 over the emitted token streams of the evaluation set.
    pub token_digest: String,
    /// True when every emitted stream equals the autoregressive baseline.
    pub matches_autoregressive: bool,
    pub pool_count: usize,
    pub mean_pool_entries: f64,
    pub report: DecodeReport,
}

/// Resolved settings of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowConfig {
    pub vocab_size: usize,
    pub ngram_order: usize,
    pub ngram_alpha: f64,
    pub eos: TokenId,
    pub pool_scheme: PoolScheme,
    pub grouping: GroupingParams,
    pub pool_size_cap: Option<usize>,
    pub max_branch_depth: usize,
    pub draft: DraftParams,
    pub policy: VerificationPolicy,
    pub max_new_tokens: usize,
    pub seeds: Vec<u64>,
    pub eval_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub config: RowConfig,
    pub mean: RowMetrics,
    pub std: RowMetrics,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub tokens_generated: u64,
    pub model_calls: u64,
    pub token_digest: String,
    pub report: DecodeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub baseline: BaselineSummary,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str, cap: Option<usize>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.config.pool_size_cap == cap)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Metrics of one evaluation record against its own autoregressive run.
fn record_metrics(spec: &RunCounters, base: &RunCounters) -> RowMetrics {
    let report = compute_metrics(spec, Some(ratio(base.tokens_generated as f64, base.wall_seconds)));
    RowMetrics {
        aal: report.aal,
        tokens_per_step: report.tokens_per_step,
        call_ratio: ratio(spec.model_calls as f64, spec.tokens_generated as f64),
        art_seconds: report.art_seconds,
        retrieval_time_ratio: report.retrieval_time_ratio,
        gen_speed_tokens_per_second: report.gen_speed_tokens_per_second,
        speedup: report.speedup_vs_autoregressive.unwrap_or(0.0),
        step_speedup: ratio(base.model_calls as f64, spec.model_calls as f64),
    }
}

fn digest_streams(streams: &[Vec<TokenId>]) -> String {
    let mut h = Sha256::new();
    for s in streams {
        h.update((s.len() as u64).to_le_bytes());
        for t in s {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// (scheme, pool cap, policy index)
type GridPoint = (PoolScheme, Option<usize>, usize);

struct PoolSet {
    assignment: GroupAssignment,
    pools: BTreeMap<GroupKey, TriePool>,
}

impl PoolSet {
    fn pool_for(&self, entity_id: &str) -> Result<&TriePool> {
        let key = self
            .assignment
            .get(entity_id)
            .ok_or_else(|| Error::input(format!("entity {entity_id} has no pool")))?;
        self.pools
            .get(key)
            .ok_or_else(|| Error::input(format!("pool {key} missing")))
    }
}

/// Builds the pools of one scheme.
pub fn build_scheme_pools(
    config: &ExperimentConfig,
    entities: &[EntityProfile],
    scheme: PoolScheme,
    cap: Option<usize>,
    seed: u64,
) -> Result<(GroupAssignment, BTreeMap<GroupKey, TriePool>)> {
    let assignment = assign_scheme(scheme, entities, &config.grouping, seed)?;
    let params = PoolBuildParams {
        vocab_size: config.resolved_vocab_size()?,
        max_branch_depth: config.max_branch_depth,
        max_pool_entries: cap,
    };
    let pools = build_pools(entities, &assignment, &params, seed)?;
    Ok((assignment, pools))
}

/// Runs the full grid and writes the report to `config.output` when set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let vocab_size = config.resolved_vocab_size()?;
    let records = load_records(config)?;
    let model = fit_reference_model(config, &records)?;
    info!(
        "fitted order-{} model with {} contexts on {} records",
        config.ngram_order,
        model.context_count(),
        records.len()
    );
    let entities: Vec<EntityProfile> = records.iter().map(KnowledgeRecord::profile).collect();
    let eval: Vec<&KnowledgeRecord> = records
        .iter()
        .filter(|r| !r.prompt.is_empty())
        .take(config.eval_records.unwrap_or(usize::MAX))
        .collect();
    if eval.is_empty() {
        return Err(Error::config("eval_records", "no records with a prompt to evaluate"));
    }
    let limits = config.limits();

    let mut baseline_counters = RunCounters::default();
    let mut baseline_streams = Vec::with_capacity(eval.len());
    let mut baseline_per_record = Vec::with_capacity(eval.len());
    for r in &eval {
        let (tokens, c) = decode_autoregressive_raw(&model, &r.prompt, limits)?;
        baseline_counters.accumulate(&c);
        baseline_per_record.push(c);
        baseline_streams.push(tokens);
    }
    let baseline_report = compute_metrics(&baseline_counters, None);
    let baseline_speed = baseline_report.gen_speed_tokens_per_second;

    let mut results: BTreeMap<GridPoint, Vec<(SeedResult, RowMetrics)>> = BTreeMap::new();
    for &scheme in &config.pool_schemes {
        for &cap in &config.pool_sizes {
            for &seed in &config.seeds {
                let (assignment, pools) = build_scheme_pools(config, &entities, scheme, cap, seed)?;
                let set = PoolSet { assignment, pools };
                let pool_count = set.pools.len();
                let mean_pool_entries =
                    set.pools.values().map(|p| p.size_entries() as f64).sum::<f64>() / pool_count.max(1) as f64;
                for (pi, policy) in config.policies.iter().enumerate() {
                    let mut counters = RunCounters::default();
                    let mut streams = Vec::with_capacity(eval.len());
                    let mut per_record = Vec::with_capacity(eval.len());
                    for (r, base) in eval.iter().zip(&baseline_per_record) {
                        let pool = set.pool_for(&r.entity_id)?;
                        let (tokens, c) =
                            decode_speculative_raw(&model, pool, &r.prompt, *policy, config.draft, limits)?;
                        counters.accumulate(&c);
                        per_record.push(record_metrics(&c, base));
                        streams.push(tokens);
                    }
                    let report = compute_metrics(&counters, Some(baseline_speed));
                    let (metrics, _) = RowMetrics::mean_std(&per_record);
                    let seed_result = SeedResult {
                        seed,
                        tokens_generated: counters.tokens_generated,
                        model_calls: counters.model_calls,
                        accepted_draft_tokens: counters.accepted_draft_tokens,
                        draft_steps: counters.draft_steps,
                        fallback_steps: counters.fallback_steps,
                        token_digest: digest_streams(&streams),
                        matches_autoregressive: streams == baseline_streams,
                        pool_count,
                        mean_pool_entries,
                        report,
                    };
                    info!(
                        "{} cap={cap:?} seed={seed}: aal={:.3} calls/token={:.3}",
                        variant_label(scheme, policy),
                        metrics.aal,
                        metrics.call_ratio
                    );
                    results
                        .entry((scheme, cap, pi))
                        .or_default()
                        .push((seed_result, metrics));
                }
            }
        }
    }

    let mut rows = Vec::new();
    for &scheme in &config.pool_schemes {
        for &cap in &config.pool_sizes {
            for (pi, policy) in config.policies.iter().enumerate() {
                let per_seed = results.remove(&(scheme, cap, pi)).unwrap_or_default();
                let metrics: Vec<RowMetrics> = per_seed.iter().map(|(_, m)| *m).collect();
                let (mean, std) = RowMetrics::mean_std(&metrics);
                rows.push(ReportRow {
                    label: variant_label(scheme, policy),
                    config: RowConfig {
                        vocab_size,
                        ngram_order: config.ngram_order,
                        ngram_alpha: config.ngram_alpha,
                        eos: config.eos,
                        pool_scheme: scheme,
                        grouping: config.grouping,
                        pool_size_cap: cap,
                        max_branch_depth: config.max_branch_depth,
                        draft: config.draft,
                        policy: *policy,
                        max_new_tokens: config.max_new_tokens,
                        seeds: config.seeds.clone(),
                        eval_records: eval.len(),
                    },
                    mean,
                    std,
                    seeds: per_seed.into_iter().map(|(s, _)| s).collect(),
                });
            }
        }
    }

    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        baseline: BaselineSummary {
            tokens_generated: baseline_counters.tokens_generated,
            model_calls: baseline_counters.model_calls,
            token_digest: digest_streams(&baseline_streams),
            report: baseline_report,
        },
        rows,
    };
    if let Some(path) = &config.output {
        write_report(path, &report)?;
    }
    Ok(report)
}

pub fn write_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            synthetic: Some(SynthSpec {
                records_per_group: 6,
                ..SynthSpec::default()
            }),
            ngram_order: 6,
            ngram_alpha: 0.001,
            pool_schemes: vec![PoolScheme::Global, PoolScheme::Customized, PoolScheme::Random],
            policies: vec![VerificationPolicy::greedy(), VerificationPolicy::relaxed(2, 0.1)],
            max_new_tokens: 64,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn labels_cover_variant_table() {
        let g = VerificationPolicy::greedy();
        let rv = VerificationPolicy::relaxed(2, 0.1);
        let labels: Vec<String> = [
            (PoolScheme::Global, g),
            (PoolScheme::Random, g),
            (PoolScheme::Customized, g),
            (PoolScheme::Global, rv),
            (PoolScheme::Random, rv),
            (PoolScheme::Customized, rv),
        ]
        .iter()
        .map(|(s, p)| variant_label(*s, p))
        .collect();
        assert_eq!(labels, ["GRP", "RRP", "CRP", "RV+GRP", "RV+RRP", "RV+CRP"]);
    }

    #[test]
    fn six_row_grid() {
        let report = run_experiment(&small_config()).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
        for row in &report.rows {
            assert_eq!(row.seeds.len(), 1);
            if row.config.policy.mode == PolicyMode::Greedy {
                assert!(row.seeds[0].matches_autoregressive, "{}", row.label);
            }
        }
    }

    #[test]
    fn single_point_single_row() {
        let cfg = ExperimentConfig {
            pool_schemes: vec![PoolScheme::Customized],
            policies: vec![VerificationPolicy::greedy()],
            ..small_config()
        };
        assert_eq!(run_experiment(&cfg).unwrap().rows.len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            corpus: Some("x.jsonl".into()),
            ..small_config()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_parses_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("exp.toml");
        fs::write(
            &toml_path,
            r#"
ngram_order = 5
pool_schemes = ["global", "customized"]
seeds = [1, 2]
pool_sizes = [10, 100]

[synthetic]
records_per_group = 3

[[policies]]
mode = "relaxed"
k = 2
p = 0.1
"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.ngram_order, 5);
        assert_eq!(cfg.pool_sizes, vec![Some(10), Some(100)]);
        assert_eq!(cfg.policies, vec![VerificationPolicy::relaxed(2, 0.1)]);
        cfg.validate().unwrap();

        let json_path = dir.path().join("exp.json");
        fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&json_path).unwrap(), cfg);

        fs::write(&toml_path, "bogus_field = 1").unwrap();
        assert!(matches!(ExperimentConfig::load(&toml_path), Err(Error::Config { .. })));
    }
}
