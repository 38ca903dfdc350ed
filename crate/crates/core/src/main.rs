use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use retrispec::bench::{
    build_scheme_pools, fit_reference_model, load_records, run_experiment, write_corpus, ExperimentConfig, PoolScheme,
    SynthSpec,
};
use retrispec::decode::decode_autoregressive_raw;
use retrispec::pool::GroupKey;
use retrispec::{
    compute_metrics, decode_speculative, DecodeLimits, DecodeReport, Error, Result, TokenId, TriePool,
    VerificationPolicy,
};

#[derive(Parser)]
#[command(name = "retrispec", version, about = "Retrieval-based speculative decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge corpus as JSON Lines.
    Synth(SynthArgs),
    /// Build retrieval pools for one scheme and save them to a directory.
    BuildPools(CommonArgs),
    /// Decode the evaluation prompts and print one JSON line per record.
    Decode(DecodeArgs),
    /// Run the experiment grid and write a JSON report.
    Bench(CommonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Greedy,
    Topk,
    Topp,
    Relaxed,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file; replaces any synthetic section of the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    draft_max: Option<usize>,
    #[arg(long)]
    pool_scheme: Option<PoolScheme>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory written by `build-pools`; pools are built in memory when absent.
    #[arg(long)]
    pools: Option<PathBuf>,
    /// Decode only this entity.
    #[arg(long)]
    entity: Option<String>,
    /// Plain greedy decoding without drafts.
    #[arg(long)]
    autoregressive: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment config whose `synthetic` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    records_per_group: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(corpus) = &self.corpus {
            cfg.corpus = Some(corpus.clone());
            cfg.synthetic = None;
        }
        if self.vocab_size.is_some() {
            cfg.vocab_size = self.vocab_size;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        if let Some(policy) = self.policy {
            let k = self.k.unwrap_or(VerificationPolicy::DEFAULT_K);
            let p = self.p.unwrap_or(VerificationPolicy::DEFAULT_P);
            cfg.policies = vec![match policy {
                PolicyArg::Greedy => VerificationPolicy::greedy(),
                PolicyArg::Topk => VerificationPolicy::top_k(k),
                PolicyArg::Topp => VerificationPolicy::top_p(p),
                PolicyArg::Relaxed => VerificationPolicy::relaxed(k, p),
            }];
        } else if self.k.is_some() || self.p.is_some() {
            return Err(Error::config("policy", "--k and --p need --policy"));
        }
        if let Some(k) = self.draft_max {
            cfg.draft.max_draft_tokens = k;
        }
        if let Some(scheme) = self.pool_scheme {
            cfg.pool_schemes = vec![scheme];
        }
        if let Some(n) = self.max_new_tokens {
            cfg.max_new_tokens = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    scheme: PoolScheme,
    seed: u64,
    assignment: BTreeMap<String, GroupKey>,
    files: BTreeMap<GroupKey, String>,
}

const MANIFEST: &str = "pools.json";

fn pool_file_name(key: &GroupKey) -> String {
    let stem: String = key
        .as_str()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{stem}.pool")
}

fn single<T: Copy>(items: &[T], field: &str) -> Result<T> {
    match items {
        [one] => Ok(*one),
        _ => Err(Error::config(field, "this command takes a single value; pass it on the command line")),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => ExperimentConfig::load(path)?.synthetic.unwrap_or_default(),
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.records_per_group {
        spec.records_per_group = n;
    }
    if let Some(rate) = args.overlap {
        spec.overlap_rate = rate;
    }
    let records = retrispec::bench::generate_synthetic_corpus(&spec)?;
    write_corpus(&args.output, &records)?;
    info!("wrote {} records to {}", records.len(), args.output.display());
    Ok(())
}

fn cmd_build_pools(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = cfg
        .output
        .clone()
        .ok_or_else(|| Error::config("output", "build-pools needs --output <dir>"))?;
    let scheme = single(&cfg.pool_schemes, "pool_schemes")?;
    let seed = single(&cfg.seeds, "seeds")?;
    let cap = single(&cfg.pool_sizes, "pool_sizes")?;
    let records = load_records(&cfg)?;
    let entities: Vec<_> = records.iter().map(|r| r.profile()).collect();
    let (assignment, pools) = build_scheme_pools(&cfg, &entities, scheme, cap, seed)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = BTreeMap::new();
    for (key, pool) in &pools {
        let name = pool_file_name(key);
        pool.save(&dir.join(&name))?;
        info!("{key}: {} entries -> {name}", pool.size_entries());
        files.insert(key.clone(), name);
    }
    let manifest = PoolManifest {
        scheme,
        seed,
        assignment,
        files,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn load_pool_dir(dir: &Path) -> Result<(BTreeMap<String, GroupKey>, BTreeMap<GroupKey, TriePool>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PoolManifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    let mut pools = BTreeMap::new();
    for (key, name) in manifest.files {
        pools.insert(key, TriePool::load(&dir.join(name))?);
    }
    Ok((manifest.assignment, pools))
}

#[derive(Serialize)]
struct DecodeLine<'a> {
    entity_id: &'a str,
    tokens: Vec<TokenId>,
    report: DecodeReport,
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let records = load_records(&cfg)?;
    let model = fit_reference_model(&cfg, &records)?;
    let policy = if args.autoregressive {
        VerificationPolicy::greedy()
    } else {
        single(&cfg.policies, "policies")?
    };
    let (assignment, pools) = match &args.pools {
        _ if args.autoregressive => Default::default(),
        Some(dir) => load_pool_dir(dir)?,
        None => {
            let entities: Vec<_> = records.iter().map(|r| r.profile()).collect();
            build_scheme_pools(
                &cfg,
                &entities,
                single(&cfg.pool_schemes, "pool_schemes")?,
                single(&cfg.pool_sizes, "pool_sizes")?,
                single(&cfg.seeds, "seeds")?,
            )?
        }
    };
    let limits = DecodeLimits {
        max_new_tokens: cfg.max_new_tokens,
        eos: cfg.eos,
    };
    let selected: Vec<_> = match &args.entity {
        Some(id) => {
            let found: Vec<_> = records.iter().filter(|r| &r.entity_id == id).collect();
            if found.is_empty() {
                return Err(Error::input(format!("entity {id} not in corpus")));
            }
            found
        }
        None => records
            .iter()
            .filter(|r| !r.prompt.is_empty())
            .take(cfg.eval_records.unwrap_or(usize::MAX))
            .collect(),
    };

    let mut out: Box<dyn Write> = match &cfg.output {
        Some(path) => Box::new(io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?)),
        None => Box::new(io::stdout().lock()),
    };
    for r in selected {
        let (tokens, report) = if args.autoregressive {
            let (tokens, c) = decode_autoregressive_raw(&model, &r.prompt, limits)?;
            (tokens, compute_metrics(&c, None))
        } else {
            let pool = assignment
                .get(&r.entity_id)
                .and_then(|key| pools.get(key))
                .ok_or_else(|| Error::input(format!("entity {} has no pool", r.entity_id)))?;
            decode_speculative(&model, pool, &r.prompt, policy, cfg.draft, limits)?
        };
        let line = serde_json::to_string(&DecodeLine {
            entity_id: &r.entity_id,
            tokens,
            report,
        })
        .expect("decode line serializes");
        writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
    }
    out.flush().map_err(|e| Error::io("<output>", e))
}

fn cmd_bench(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let report = run_experiment(&cfg)?;
    if cfg.output.is_none() {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    for row in &report.rows {
        info!(
            "{:<10} cap={:<8} aal={:.3}±{:.3} calls/token={:.3} speedup={:.2}",
            row.label,
            row.config.pool_size_cap.map_or("none".to_string(), |c| c.to_string()),
            row.mean.aal,
            row.std.aal,
            row.mean.call_ratio,
            row.mean.speedup
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::BuildPools(a) => cmd_build_pools(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
