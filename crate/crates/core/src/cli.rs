//! Command-line entry point.
//!
//! Parameters resolve as flags > config file > defaults. The config file is a
//! single versioned JSON document with one optional section per subcommand.
//! Every data file starts with the tool version, root seed and the SHA-256 of
//! the resolved parameters; wall-clock metadata goes to a separate
//! `run_meta.json`, so data files are byte-identical across reruns.
//!
//! Exit codes: 0 success, 1 invariant violation (repro bundle written), 2 usage
//! or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bounds::{bound_table, dominance_sweep, replay, validate_sweep, SweepCell, SweepConfig};
use crate::counterexamples::{build_concentrated_pair, concentrated_sweep, ConcentratedPairSpec};
use crate::document::PairBundle;
use crate::error::{LabError, Result};
use crate::perturbation::{default_delta_grid, mismatch_profile, perturb, PerturbationKind, PerturbationSpec};
use crate::tabular_mdp::{random_softmax_policy, trajectory_budget, ContextTree, ProblemShape, RewardTable};
use crate::tolerance::{HOT_KL, INEQUALITY_SLACK};
use crate::trm::{estimator_values, trm_training_loop, TrmConfig, TrmMode, ESTIMATOR_TABLE_RATIOS};

pub const CONFIG_VERSION: u32 = 1;
const TOOL: &str = "trm-lab";
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "trm-lab", version, about = "Exact checks of trust-region error bounds and Trust Region Masking")]
struct Cli {
    /// Versioned JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Data goes to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    format: Option<Format>,
    /// Worker threads for parallel sweeps. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Jsonl,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classical, Pinsker-Marginal and Mixed bounds for given T and KLs.
    BoundsTable(BoundsTableArgs),
    /// Exhaustive bound-dominance sweep over random pairs, or replay of a bundle.
    Verify(VerifyArgs),
    /// Concentrated-divergence pairs over a list of visit probabilities.
    Counterexample(CounterexampleArgs),
    /// Masked-surrogate training with exact per-step diagnostics.
    TrmRun(TrmRunArgs),
    /// k1, k3 and |log rho| at a list of ratios.
    Estimators(EstimatorsArgs),
    /// Per-context KL histogram and mask-rate curve of a pair.
    Profile(ProfileArgs),
}

#[derive(Debug, clap::Args)]
struct BoundsTableArgs {
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    kl_tok_max: Option<f64>,
    #[arg(long)]
    kl_seq: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct VerifyArgs {
    /// Pairs per grid cell.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    vocab: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    horizon: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    scale: Option<Vec<f64>>,
    #[arg(long)]
    prompts: Option<usize>,
    /// Generate theta by perturbing roll instead of drawing it independently.
    #[arg(long, value_parser = parse_serde::<PerturbationKind>)]
    perturbation: Option<PerturbationKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    slack: Option<f64>,
    /// Re-audit a pair bundle instead of sweeping.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct CounterexampleArgs {
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    hot_kl: Option<f64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct TrmRunArgs {
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    roll_scale: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    delta_avg: Option<f64>,
    /// exact | sample-abslog-max | sample-k3-avg
    #[arg(long, value_parser = parse_serde::<TrmMode>)]
    mode: Option<TrmMode>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial rollout/training mismatch.
    #[arg(long, value_parser = parse_serde::<PerturbationKind>)]
    mismatch: Option<PerturbationKind>,
    #[arg(long)]
    sync_every: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct EstimatorsArgs {
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
}

#[derive(Debug, clap::Args)]
struct ProfileArgs {
    /// Profile a stored pair bundle instead of generating one.
    #[arg(long)]
    pair: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_parser = parse_serde::<PerturbationKind>)]
    perturbation: Option<PerturbationKind>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    let normalized = s.replace('-', "_");
    serde_json::from_value(Value::String(s.to_string()))
        .or_else(|_| serde_json::from_value(Value::String(normalized)))
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsTableParams {
    pub horizon: usize,
    pub kl_tok_max: f64,
    pub kl_seq: f64,
}

impl Default for BoundsTableParams {
    fn default() -> Self {
        Self {
            horizon: 4096,
            kl_tok_max: 1e-4,
            kl_seq: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub seed: u64,
    pub slack: f64,
    pub cells: Vec<SweepCell>,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            seed: 0,
            slack: INEQUALITY_SLACK,
            cells: vec![SweepCell {
                vocab: 2,
                horizon: 4,
                prompts: 1,
                scale: 1.0,
                pairs: 1000,
                perturbation: None,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleParams {
    pub epsilons: Vec<f64>,
    pub hot_kl: f64,
    pub vocab: usize,
    pub horizon: usize,
}

impl Default for CounterexampleParams {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.01, 0.001],
            hot_kl: 1.0,
            vocab: 2,
            horizon: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorsParams {
    pub ratios: Vec<f64>,
}

impl Default for EstimatorsParams {
    fn default() -> Self {
        Self {
            ratios: ESTIMATOR_TABLE_RATIOS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileParams {
    pub pair: Option<PathBuf>,
    pub vocab: usize,
    pub horizon: usize,
    pub prompts: usize,
    pub scale: f64,
    pub seed: u64,
    pub perturbation: PerturbationSpec,
    pub deltas: Vec<f64>,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            pair: None,
            vocab: 3,
            horizon: 3,
            prompts: 1,
            scale: 1.0,
            seed: 0,
            perturbation: PerturbationSpec::new(PerturbationKind::RoutingFlip),
            deltas: default_delta_grid(),
        }
    }
}

/// The experiment config document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    #[serde(default)]
    pub bounds_table: Option<BoundsTableParams>,
    #[serde(default)]
    pub verify: Option<VerifyParams>,
    #[serde(default)]
    pub counterexample: Option<CounterexampleParams>,
    #[serde(default)]
    pub trm_run: Option<TrmConfig>,
    #[serde(default)]
    pub estimators: Option<EstimatorsParams>,
    #[serde(default)]
    pub profile: Option<ProfileParams>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ConfigFile = serde_json::from_str(&text)?;
        if file.version != CONFIG_VERSION {
            return Err(LabError::DocumentFormat {
                expected: format!("config v{CONFIG_VERSION}"),
                found: format!("config v{}", file.version),
            });
        }
        Ok(file)
    }
}

/// SHA-256 of `{"command": .., "params": ..}` in serialization order.
pub fn config_hash(command: &str, params: &impl Serialize) -> String {
    let canonical = serde_json::to_string(&json!({ "command": command, "params": params }))
        .expect("parameters serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// 17 significant digits; non-finite values as `inf`, `-inf`, `nan`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Clone, Serialize)]
struct Meta {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_sha256: String,
    seed: u64,
}

impl Meta {
    fn csv_header(&self) -> String {
        format!(
            "# {} {} {} config_sha256={} seed={}\n",
            self.tool, self.version, self.command, self.config_sha256, self.seed
        )
    }
}

struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        match &self.dir {
            Some(dir) => std::fs::write(dir.join(name), contents)?,
            None => {
                let mut out = std::io::stdout().lock();
                match out.write_all(contents.as_bytes()).and_then(|()| out.flush()) {
                    // A closed reader (`| head`) is not a failure of the run.
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                    r => r?,
                }
            }
        }
        Ok(())
    }

    /// Repro bundles go under `<out>/repro`, or `./repro` without `--out`.
    fn repro_dir(&self) -> Result<PathBuf> {
        let dir = self.dir.clone().unwrap_or_else(|| PathBuf::from(".")).join("repro");
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

enum Outcome {
    Passed,
    Violated,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(Outcome::Passed) => 0,
        Ok(Outcome::Violated) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli) -> Result<Outcome> {
    trajectory_budget()?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(|e| match e {
            LabError::Json(j) => LabError::InvalidParameter(format!("config {}: {j}", path.display())),
            other => other,
        })?,
        None => ConfigFile {
            version: CONFIG_VERSION,
            ..Default::default()
        },
    };
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
    }
    let sink = Sink { dir: cli.out.clone() };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| LabError::InvalidParameter(format!("thread pool: {e}")))?;

    let (name, hash, seed, outcome) = pool.install(|| -> Result<(&'static str, String, u64, Outcome)> {
        match cli.command {
            Command::BoundsTable(a) => {
                let mut p = file.bounds_table.unwrap_or_default();
                set(&mut p.horizon, a.horizon);
                set(&mut p.kl_tok_max, a.kl_tok_max);
                set(&mut p.kl_seq, a.kl_seq);
                let (hash, outcome) = bounds_table_cmd(&p, &sink, cli.format)?;
                Ok(("bounds-table", hash, 0, outcome))
            }
            Command::Verify(a) => {
                let mut p = file.verify.unwrap_or_default();
                set(&mut p.seed, a.seed);
                set(&mut p.slack, a.slack);
                let grid_given = a.pairs.is_some()
                    || a.vocab.is_some()
                    || a.horizon.is_some()
                    || a.scale.is_some()
                    || a.prompts.is_some()
                    || a.perturbation.is_some();
                if grid_given {
                    p.cells = grid_cells(&a);
                }
                let seed = p.seed;
                let (hash, outcome) = match &a.replay {
                    Some(path) => replay_cmd(path, p.slack, &sink)?,
                    None => verify_cmd(&p, &sink, cli.format)?,
                };
                Ok(("verify", hash, seed, outcome))
            }
            Command::Counterexample(a) => {
                let mut p = file.counterexample.unwrap_or_default();
                set(&mut p.epsilons, a.epsilons);
                set(&mut p.hot_kl, a.hot_kl);
                set(&mut p.vocab, a.vocab);
                set(&mut p.horizon, a.horizon);
                let (hash, outcome) = counterexample_cmd(&p, &sink, cli.format)?;
                Ok(("counterexample", hash, 0, outcome))
            }
            Command::TrmRun(a) => {
                let mut p = file.trm_run.unwrap_or_default();
                set(&mut p.vocab, a.vocab);
                set(&mut p.horizon, a.horizon);
                set(&mut p.prompts, a.prompts);
                set(&mut p.roll_scale, a.roll_scale);
                if a.delta.is_some() {
                    p.delta = a.delta;
                }
                if a.delta_avg.is_some() {
                    p.delta_avg = a.delta_avg;
                }
                set(&mut p.mode, a.mode);
                set(&mut p.learning_rate, a.learning_rate);
                set(&mut p.steps, a.steps);
                set(&mut p.batch_size, a.batch_size);
                set(&mut p.seed, a.seed);
                set(&mut p.sync_every, a.sync_every);
                if let Some(kind) = a.mismatch {
                    p.init_mismatch = Some(PerturbationSpec::new(kind));
                }
                let seed = p.seed;
                let (hash, outcome) = trm_run_cmd(&p, &sink, cli.format)?;
                Ok(("trm-run", hash, seed, outcome))
            }
            Command::Estimators(a) => {
                let mut p = file.estimators.unwrap_or_default();
                set(&mut p.ratios, a.ratios);
                let (hash, outcome) = estimators_cmd(&p, &sink, cli.format)?;
                Ok(("estimators", hash, 0, outcome))
            }
            Command::Profile(a) => {
                let mut p = file.profile.unwrap_or_default();
                if a.pair.is_some() {
                    p.pair = a.pair;
                }
                set(&mut p.vocab, a.vocab);
                set(&mut p.horizon, a.horizon);
                set(&mut p.scale, a.scale);
                set(&mut p.seed, a.seed);
                if let Some(kind) = a.perturbation {
                    p.perturbation.kind = kind;
                }
                let seed = p.seed;
                let (hash, outcome) = profile_cmd(&p, &sink, cli.format)?;
                Ok(("profile", hash, seed, outcome))
            }
        }
    })?;

    if let Some(dir) = &cli.out {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = json!({
            "tool": TOOL,
            "version": VERSION,
            "command": name,
            "config_sha256": hash,
            "seed": seed,
            "threads": pool.current_num_threads(),
            "unix_time": stamp,
        });
        std::fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    }
    Ok(outcome)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn grid_cells(a: &VerifyArgs) -> Vec<SweepCell> {
    let vocabs = a.vocab.clone().unwrap_or_else(|| vec![2]);
    let horizons = a.horizon.clone().unwrap_or_else(|| vec![4]);
    let scales = a.scale.clone().unwrap_or_else(|| vec![1.0]);
    let mut cells = Vec::new();
    for &vocab in &vocabs {
        for &horizon in &horizons {
            for &scale in &scales {
                cells.push(SweepCell {
                    vocab,
                    horizon,
                    prompts: a.prompts.unwrap_or(1),
                    scale,
                    pairs: a.pairs.unwrap_or(1000),
                    perturbation: a.perturbation.map(PerturbationSpec::new),
                });
            }
        }
    }
    cells
}

fn pick(format: Option<Format>, default: Format, allowed: &[Format]) -> Result<Format> {
    let f = format.unwrap_or(default);
    if allowed.contains(&f) {
        Ok(f)
    } else {
        Err(LabError::InvalidParameter(format!(
            "format {f:?} is not available here; use one of {allowed:?}"
        )))
    }
}

fn json_doc(meta: &Meta, data: impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(&json!({ "meta": meta, "data": data }))? + "\n")
}

fn meta(command: &'static str, hash: &str, seed: u64) -> Meta {
    Meta {
        tool: TOOL,
        version: VERSION,
        command,
        config_sha256: hash.to_string(),
        seed,
    }
}

fn bounds_table_cmd(p: &BoundsTableParams, sink: &Sink, format: Option<Format>) -> Result<(String, Outcome)> {
    if p.horizon == 0 {
        return Err(LabError::InvalidParameter("horizon must be at least 1".into()));
    }
    let hash = config_hash("bounds-table", p);
    let m = meta("bounds-table", &hash, 0);
    let rows = bound_table(p.horizon, p.kl_tok_max, p.kl_seq);
    match pick(format, Format::Csv, &[Format::Csv, Format::Json])? {
        Format::Csv => {
            let mut out = m.csv_header();
            out.push_str("bound,value,value_rounded\n");
            for r in &rows {
                let _ = writeln!(out, "{},{},{:.1}", r.name, fmt_num(r.value), r.value);
            }
            sink.write("bounds_table.csv", &out)?;
        }
        _ => sink.write("bounds_table.json", &json_doc(&m, &rows)?)?,
    }
    Ok((hash, Outcome::Passed))
}

fn verify_cmd(p: &VerifyParams, sink: &Sink, format: Option<Format>) -> Result<(String, Outcome)> {
    let config = SweepConfig {
        cells: p.cells.clone(),
        seed: p.seed,
        slack: p.slack,
    };
    validate_sweep(&config)?;
    let hash = config_hash("verify", p);
    let m = meta("verify", &hash, p.seed);
    let summary = dominance_sweep(&config)?;
    eprintln!("verify: {} pairs, {} violations", summary.pairs, summary.violations.len());

    let mut report = serde_json::to_value(&summary)?;
    // Bundles are written separately; the summary lists indices and failed checks.
    if let Some(vs) = report.get_mut("violations").and_then(Value::as_array_mut) {
        for v in vs {
            if let Some(obj) = v.as_object_mut() {
                obj.remove("bundle");
            }
        }
    }
    match pick(format, Format::Json, &[Format::Json, Format::Csv])? {
        Format::Json => sink.write("verify.json", &json_doc(&m, &report)?)?,
        _ => {
            let mut out = m.csv_header();
            out.push_str("bound,max_error_ratio,evaluated,skipped\n");
            for t in &summary.tightness {
                let _ = writeln!(out, "{},{},{},{}", t.bound, fmt_num(t.max_ratio), t.evaluated, t.skipped);
            }
            let _ = writeln!(out, "# pairs={} violations={}", summary.pairs, summary.violations.len());
            sink.write("verify.csv", &out)?;
        }
    }
    if summary.passed() {
        return Ok((hash, Outcome::Passed));
    }
    let dir = sink.repro_dir()?;
    for v in &summary.violations {
        let path = dir.join(format!("violation_{:06}.json", v.pair_index));
        std::fs::write(&path, serde_json::to_string_pretty(&v.bundle)? + "\n")?;
        eprintln!("  pair {}: {} -> {}", v.pair_index, v.failed_checks.join(", "), path.display());
    }
    Ok((hash, Outcome::Violated))
}

fn replay_cmd(path: &Path, slack: f64, sink: &Sink) -> Result<(String, Outcome)> {
    let bundle = PairBundle::load(path)?;
    let hash = config_hash("verify-replay", &json!({ "bundle": &bundle, "slack": slack }));
    let audit = replay(&bundle, slack)?;
    let m = meta("verify", &hash, 0);
    sink.write("replay.json", &json_doc(&m, &audit)?)?;
    if audit.failed_checks.is_empty() {
        eprintln!("replay: all checks pass");
        Ok((hash, Outcome::Passed))
    } else {
        eprintln!("replay: failed {}", audit.failed_checks.join(", "));
        Ok((hash, Outcome::Violated))
    }
}

fn counterexample_cmd(p: &CounterexampleParams, sink: &Sink, format: Option<Format>) -> Result<(String, Outcome)> {
    let hash = config_hash("counterexample", p);
    let m = meta("counterexample", &hash, 0);
    let shape = ProblemShape::single_prompt(p.vocab, p.horizon)?;
    let rows = concentrated_sweep(&p.epsilons, p.hot_kl, &shape)?;
    match pick(format, Format::Csv, &[Format::Csv, Format::Json])? {
        Format::Csv => {
            let mut out = m.csv_header();
            out.push_str("epsilon,seq_kl,kl_tok_max,classical,pinsker_marginal,mixed\n");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    fmt_num(r.epsilon),
                    fmt_num(r.seq_kl),
                    fmt_num(r.kl_tok_max),
                    fmt_num(r.classical),
                    fmt_num(r.pinsker_marginal),
                    fmt_num(r.mixed)
                );
            }
            sink.write("counterexample.csv", &out)?;
        }
        _ => sink.write("counterexample.json", &json_doc(&m, &rows)?)?,
    }
    let bad: Vec<_> = rows
        .iter()
        .filter(|r| (r.seq_kl - r.epsilon * p.hot_kl).abs() > HOT_KL || (r.kl_tok_max - p.hot_kl).abs() > HOT_KL)
        .collect();
    if bad.is_empty() {
        return Ok((hash, Outcome::Passed));
    }
    let dir = sink.repro_dir()?;
    for r in bad {
        let pair = build_concentrated_pair(&ConcentratedPairSpec {
            epsilon: r.epsilon,
            hot_kl: p.hot_kl,
            shape: shape.clone(),
        })?;
        let rewards = RewardTable::constant(pair.roll.tree().clone(), 0.5)?;
        let bundle = PairBundle::new(&pair.roll, &pair.theta, &rewards);
        std::fs::write(
            dir.join(format!("concentrated_eps_{}.json", r.epsilon)),
            serde_json::to_string_pretty(&bundle)? + "\n",
        )?;
    }
    Ok((hash, Outcome::Violated))
}

fn trm_run_cmd(p: &TrmConfig, sink: &Sink, format: Option<Format>) -> Result<(String, Outcome)> {
    p.validate()?;
    let hash = config_hash("trm-run", p);
    let m = meta("trm-run", &hash, p.seed);
    let trace = trm_training_loop(p)?;
    match pick(format, Format::Jsonl, &[Format::Jsonl, Format::Json])? {
        Format::Jsonl => {
            let mut out = serde_json::to_string(&json!({ "meta": &m }))? + "\n";
            for r in &trace.records {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            sink.write("trace.jsonl", &out)?;
        }
        _ => sink.write("trace.json", &json_doc(&m, &trace)?)?,
    }
    eprintln!(
        "trm-run: {} steps, {} minorizer-positive, {} improvement violations, {} unsound masks",
        trace.records.len(),
        trace.minorizer_positive_steps,
        trace.improvement_violations,
        trace.soundness_violations
    );
    if trace.improvement_violations == 0 && trace.soundness_violations == 0 {
        return Ok((hash, Outcome::Passed));
    }
    let dir = sink.repro_dir()?;
    let doc = ConfigFile {
        version: CONFIG_VERSION,
        trm_run: Some(p.clone()),
        ..Default::default()
    };
    std::fs::write(dir.join("trm_run_config.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok((hash, Outcome::Violated))
}

fn estimators_cmd(p: &EstimatorsParams, sink: &Sink, format: Option<Format>) -> Result<(String, Outcome)> {
    let hash = config_hash("estimators", p);
    let m = meta("estimators", &hash, 0);
    let rows = p.ratios.iter().map(|&r| estimator_values(r)).collect::<Result<Vec<_>>>()?;
    match pick(format, Format::Csv, &[Format::Csv, Format::Json])? {
        Format::Csv => {
            let mut out = m.csv_header();
            out.push_str("rho,k1,k3,abs_log,k1_rounded,k3_rounded,abs_log_rounded\n");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.2},{:.2},{:.2}",
                    fmt_num(r.rho),
                    fmt_num(r.k1),
                    fmt_num(r.k3),
                    fmt_num(r.abs_log),
                    r.k1,
                    r.k3,
                    r.abs_log
                );
            }
            sink.write("estimators.csv", &out)?;
        }
        _ => sink.write("estimators.json", &json_doc(&m, &rows)?)?,
    }
    Ok((hash, Outcome::Passed))
}

fn profile_cmd(p: &ProfileParams, sink: &Sink, format: Option<Format>) -> Result<(String, Outcome)> {
    let (roll, theta, hash) = match &p.pair {
        Some(path) => {
            let bundle = PairBundle::load(path)?;
            let hash = config_hash("profile", &json!({ "bundle": &bundle, "deltas": &p.deltas }));
            let (roll, theta, _) = bundle.materialize()?;
            (roll, theta, hash)
        }
        None => {
            let tree = ContextTree::build(ProblemShape::uniform_prompts(p.vocab, p.horizon, p.prompts)?)?;
            let roll = random_softmax_policy(tree.clone(), p.scale, crate::seed::derive_seed(p.seed, 0))?;
            let rewards = RewardTable::random(tree, crate::seed::derive_seed(p.seed, 2));
            let spec = PerturbationSpec {
                seed: crate::seed::derive_seed(p.seed, 3),
                ..p.perturbation.clone()
            };
            let theta = perturb(&roll, &spec, Some(&rewards))?;
            (roll, theta, config_hash("profile", p))
        }
    };
    let m = meta("profile", &hash, p.seed);
    let profile = mismatch_profile(&roll, &theta, &p.deltas)?;
    match pick(format, Format::Csv, &[Format::Csv, Format::Json])? {
        Format::Csv => {
            let mut hist = m.csv_header();
            let _ = writeln!(
                hist,
                "# median_kl={} max_kl={} rho_min={} rho_max={} infinite_contexts={}",
                fmt_num(profile.median_kl),
                fmt_num(profile.max_kl),
                fmt_num(profile.rho_min),
                fmt_num(profile.rho_max),
                profile.infinite_contexts
            );
            hist.push_str("kl_lo,kl_hi,contexts\n");
            for b in &profile.histogram {
                let _ = writeln!(hist, "{},{},{}", fmt_num(b.lo), fmt_num(b.hi), b.count);
            }
            let mut curve = m.csv_header();
            curve.push_str("delta,accepted\n");
            for pt in &profile.mask_rate {
                let _ = writeln!(curve, "{},{}", fmt_num(pt.delta), fmt_num(pt.accepted));
            }
            sink.write("kl_histogram.csv", &hist)?;
            if sink.dir.is_none() {
                sink.write("", "\n")?;
            }
            sink.write("mask_rate.csv", &curve)?;
        }
        _ => sink.write("profile.json", &json_doc(&m, &profile)?)?,
    }
    Ok((hash, Outcome::Passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format_has_seventeen_digits() {
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
        assert_eq!(fmt_num(f64::NAN), "nan");
        let x = 1677.3247;
        assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn hash_depends_on_params_only() {
        let a = config_hash("bounds-table", &BoundsTableParams::default());
        assert_eq!(a, config_hash("bounds-table", &BoundsTableParams::default()));
        let b = config_hash("bounds-table", &BoundsTableParams { horizon: 8, ..Default::default() });
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn config_file_rejects_unknown_sections() {
        let err = serde_json::from_str::<ConfigFile>("{\"version\": 1,\n \"bogus\": {}}").unwrap_err();
        assert_eq!(err.line(), 2);
        let ok: ConfigFile = serde_json::from_str("{\"version\": 1, \"trm_run\": {\"steps\": 3}}").unwrap();
        assert_eq!(ok.trm_run.unwrap().steps, 3);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["trm-lab", "no-such-command"]), 2);
        assert_eq!(run(["trm-lab", "bounds-table", "--horizon", "x"]), 2);
        assert_eq!(run(["trm-lab", "estimators", "--format", "jsonl"]), 2);
        assert_eq!(run(["trm-lab", "--help"]), 0);
    }

    #[test]
    fn modes_parse_from_kebab_case() {
        assert_eq!(parse_serde::<TrmMode>("sample-k3-avg").unwrap(), TrmMode::SampleK3Avg);
        assert_eq!(parse_serde::<PerturbationKind>("routing-flip").unwrap(), PerturbationKind::RoutingFlip);
        assert!(parse_serde::<TrmMode>("fast").is_err());
    }
}
