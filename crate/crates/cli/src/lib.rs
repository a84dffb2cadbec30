//! Subcommands of the `cfd` binary.
//!
//! Every command writes its human-readable output to the supplied writer and
//! returns the process exit status: 0 on success, 1 when a check fails
//! (criterion violated, oracle deviation above tolerance), 2 on input or
//! runtime errors (reported by `main`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cfd_core::config::{BackendKind, PipelineConfig};
use cfd_core::eval::{self, Prediction, QueryRecord, SourceDataset};
use cfd_core::gateway::{ChatBackend, EmbeddingBackend, Gateway, ScriptedBackend, ScriptedFixture, WireBackend};
use cfd_core::graph::{self, node_set, CausalDag, GraphSpec, NodeSet};
use cfd_core::pipeline::{self, Method, Perturbation, RunOutput};
use cfd_core::scm::{self, DiscreteScm, EffectTable, ScmError, ScmSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "cfd", version, about = "Causal answer selection for knowledge-intensive QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an identification criterion on a causal graph.
    Identify(IdentifyArgs),
    /// Compare adjustment formulas with interventional ground truth.
    Oracle(OracleArgs),
    /// Answer every question of a dataset with one method.
    Run(RunArgs),
    /// Score a predictions file against a dataset.
    Eval(EvalArgs),
    /// Write a perturbed copy of a dataset.
    Perturb(PerturbArgs),
    /// Convert a published benchmark file into normalized records.
    Import(ImportArgs),
    /// Write the built-in scripted contrast world (dataset and fixture).
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Criterion {
    Backdoor,
    Standard,
    Conditional,
    Audit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    Direct,
    ChainOfThought,
    Knowledge,
}

impl Builtin {
    fn dag(self) -> CausalDag {
        match self {
            Builtin::Direct => graph::reference::direct(),
            Builtin::ChainOfThought => graph::reference::chain_of_thought(),
            Builtin::Knowledge => graph::reference::knowledge_intensive(),
        }
    }
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct GraphSource {
    /// Graph spec (JSON with `nodes`, `edges`, `latent`).
    #[arg(long, group = "source")]
    pub graph: Option<PathBuf>,
    /// One of the reference graphs.
    #[arg(long, value_enum, group = "source")]
    pub builtin: Option<Builtin>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub source: GraphSource,
    #[arg(long, value_enum)]
    pub criterion: Criterion,
    /// Treatment.
    #[arg(long, default_value = "Q")]
    pub x: String,
    /// Outcome.
    #[arg(long, default_value = "A")]
    pub y: String,
    /// Mediators or adjustment set, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    /// Conditioning set of the conditional front-door criterion.
    #[arg(long, value_delimiter = ',')]
    pub w: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// SCM spec (JSON).
    #[arg(long, conflicts_with = "random")]
    pub scm: Option<PathBuf>,
    /// Number of random binary SCMs to draw.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Graph for random SCMs.
    #[arg(long, value_enum, default_value = "knowledge")]
    pub builtin: Builtin,
    #[arg(long, default_value = "Q")]
    pub x: String,
    #[arg(long, default_value = "A")]
    pub y: String,
    #[arg(long, value_delimiter = ',', default_value = "C")]
    pub z: Vec<String>,
    /// Defaults to `E` when the graph has that node.
    #[arg(long, value_delimiter = ',')]
    pub w: Option<Vec<String>>,
    /// Back-door adjustment set; defaults to the parents of the treatment.
    #[arg(long, value_delimiter = ',')]
    pub adjust: Option<Vec<String>>,
    /// Maximum deviation allowed for estimators whose criterion holds.
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "cfd")]
    pub method: Method,
    #[arg(long, default_value = "none")]
    pub perturb: Perturbation,
    /// Scripted fixture; selects the scripted backend.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub retry_budget: Option<u32>,
    #[arg(long)]
    pub template_version: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub fail_fast: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Restrict scoring to these record ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub kind: Perturbation,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// sciq, hotpotqa, wikihop or musique.
    #[arg(long)]
    pub source: SourceDataset,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Identify(a) => cmd_identify(&a, out),
        Command::Oracle(a) => cmd_oracle(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Perturb(a) => cmd_perturb(&a, out),
        Command::Import(a) => cmd_import(&a, out),
        Command::Fixture(a) => cmd_fixture(&a, out),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_graph(source: &GraphSource) -> Result<CausalDag> {
    if let Some(b) = source.builtin {
        return Ok(b.dag());
    }
    let path = source.graph.as_ref().expect("clap enforces one source");
    let spec: GraphSpec = serde_json::from_str(&read_to_string(path)?)
        .with_context(|| format!("parsing graph spec {}", path.display()))?;
    CausalDag::from_spec(&spec).with_context(|| format!("invalid graph in {}", path.display()))
}

pub fn cmd_identify(args: &IdentifyArgs, out: &mut dyn Write) -> Result<u8> {
    let dag = load_graph(&args.source)?;
    let z: NodeSet = args.z.iter().cloned().collect();
    let w: NodeSet = args.w.iter().cloned().collect();
    if args.criterion == Criterion::Audit {
        let audit = graph::audit_cfd_derivation(&dag)?;
        if args.json {
            writeln!(out, "{}", serde_json::to_string_pretty(&audit)?)?;
        } else {
            writeln!(
                out,
                "derivation audit: {}",
                if audit.passed() { "PASSED" } else { "FAILED" }
            )?;
            for (i, s) in audit.steps.iter().enumerate() {
                writeln!(
                    out,
                    "  step {} (rule {}) {} ... {}",
                    i + 1,
                    s.rule,
                    s.description,
                    if s.holds { "ok" } else { "FAIL" }
                )?;
            }
        }
        return Ok(if audit.passed() { 0 } else { 1 });
    }
    let report = match args.criterion {
        Criterion::Backdoor => graph::check_backdoor(&dag, &z, &args.x, &args.y)?,
        Criterion::Standard => graph::check_standard_frontdoor(&dag, &z, &args.x, &args.y)?,
        Criterion::Conditional => graph::check_conditional_frontdoor(&dag, &z, &w, &args.x, &args.y)?,
        Criterion::Audit => unreachable!(),
    };
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        write!(out, "{report}")?;
    }
    Ok(if report.satisfied { 0 } else { 1 })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub estimator: String,
    pub applicable: bool,
    pub instances: usize,
    pub errors: usize,
    pub max_deviation: Option<f64>,
    pub note: String,
}

struct Accum {
    row: OracleRow,
}

impl Accum {
    fn new(name: &str, applicable: bool, note: &str) -> Self {
        Accum {
            row: OracleRow {
                estimator: name.into(),
                applicable,
                instances: 0,
                errors: 0,
                max_deviation: None,
                note: note.into(),
            },
        }
    }

    fn add(&mut self, est: Result<EffectTable, ScmError>, truth: &EffectTable) {
        self.row.instances += 1;
        match est {
            Ok(e) => {
                let d = e.max_abs_deviation(truth);
                self.row.max_deviation = Some(self.row.max_deviation.map_or(d, |m: f64| m.max(d)));
            }
            Err(e) => {
                self.row.errors += 1;
                if self.row.note.is_empty() {
                    self.row.note = e.to_string();
                }
            }
        }
    }
}

/// Deviation of each estimator from the interventional truth over `scms`.
pub fn oracle_rows(
    scms: &[DiscreteScm],
    x: &str,
    y: &str,
    z: &NodeSet,
    w: &NodeSet,
    adjust: &NodeSet,
) -> Result<Vec<OracleRow>> {
    let dag = scms.first().context("no SCMs")?.dag().clone();
    let bd_ok = graph::check_backdoor(&dag, adjust, x, y)?.satisfied;
    let sfd_ok = graph::check_standard_frontdoor(&dag, z, x, y)?.satisfied;
    let cfd_ok = graph::check_conditional_frontdoor(&dag, z, w, x, y)?.satisfied;
    let fmt = graph_set;
    let mut rows = vec![
        Accum::new(
            &format!("back-door adjust={}", fmt(adjust)),
            bd_ok,
            if bd_ok { "" } else { "criterion violated" },
        ),
        Accum::new(
            &format!("standard front-door Z={}", fmt(z)),
            sfd_ok,
            if sfd_ok { "" } else { "criterion violated" },
        ),
        Accum::new(
            &format!("conditional front-door Z={} W={}", fmt(z), fmt(w)),
            cfd_ok,
            if cfd_ok { "" } else { "criterion violated" },
        ),
    ];
    if !w.is_empty() {
        rows.push(Accum::new(
            &format!("front-door formula ignoring W={}", fmt(w)),
            false,
            "diagnostic: drops the conditioning set",
        ));
    }
    for m in scms {
        let truth = scm::interventional(m, x, y)?;
        if bd_ok {
            rows[0].add(scm::backdoor_estimate(m, x, y, adjust), &truth);
        }
        if sfd_ok {
            rows[1].add(scm::sfd_estimate(m, x, y, z), &truth);
        }
        if cfd_ok {
            rows[2].add(scm::cfd_estimate(m, x, y, z, w), &truth);
        }
        if !w.is_empty() {
            rows[3].add(scm::frontdoor_formula(m, x, y, z, &NodeSet::new()), &truth);
        }
    }
    Ok(rows.into_iter().map(|a| a.row).collect())
}

fn graph_set(s: &NodeSet) -> String {
    format!("{{{}}}", s.iter().cloned().collect::<Vec<_>>().join(","))
}

pub fn cmd_oracle(args: &OracleArgs, out: &mut dyn Write) -> Result<u8> {
    if args.tolerance.is_nan() || args.tolerance < 0.0 {
        bail!("--tolerance must be a non-negative number");
    }
    let scms: Vec<DiscreteScm> = match (&args.scm, args.random) {
        (Some(path), _) => {
            let spec: ScmSpec = serde_json::from_str(&read_to_string(path)?)
                .with_context(|| format!("parsing SCM spec {}", path.display()))?;
            vec![DiscreteScm::from_spec(&spec).with_context(|| format!("invalid SCM in {}", path.display()))?]
        }
        (None, Some(count)) => {
            if count == 0 {
                bail!("--random needs a positive count");
            }
            let dag = args.builtin.dag();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            (0..count)
                .map(|_| scm::random_scm(&dag, &Default::default(), &mut rng))
                .collect::<Result<_, _>>()?
        }
        (None, None) => bail!("give either --scm or --random"),
    };
    let dag = scms[0].dag();
    let z: NodeSet = args.z.iter().cloned().collect();
    let w: NodeSet = match &args.w {
        Some(w) => w.iter().cloned().collect(),
        None if dag.contains("E") => node_set(&["E"]),
        None => NodeSet::new(),
    };
    let adjust = match &args.adjust {
        Some(a) => a.iter().cloned().collect(),
        None => dag.parents(&args.x)?,
    };
    let rows = oracle_rows(&scms, &args.x, &args.y, &z, &w, &adjust)?;
    let failed = rows
        .iter()
        .any(|r| r.applicable && (r.errors > 0 || r.max_deviation.is_some_and(|d| d > args.tolerance)));
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
    } else {
        writeln!(out, "{} SCM(s), effect of {} on {}", scms.len(), args.x, args.y)?;
        writeln!(out, "{:<45} {:>14} {:>7}  note", "estimator", "max |dev|", "errors")?;
        for r in &rows {
            let dev = r.max_deviation.map_or("-".to_string(), |d| format!("{d:.3e}"));
            writeln!(out, "{:<45} {:>14} {:>7}  {}", r.estimator, dev, r.errors, r.note)?;
        }
    }
    Ok(u8::from(failed))
}

fn read_dataset(path: &Path) -> Result<Vec<QueryRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = eval::read_dataset(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    Ok(records)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    eval::write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway> {
    let (chat, embed): (Arc<dyn ChatBackend>, Arc<dyn EmbeddingBackend>) = match cfg.backend.kind {
        BackendKind::Scripted => {
            let path = cfg
                .backend
                .fixture
                .as_ref()
                .context("the scripted backend needs a fixture (--fixture or backend.fixture)")?;
            let fixture: ScriptedFixture = serde_json::from_str(&read_to_string(path)?)
                .with_context(|| format!("parsing fixture {}", path.display()))?;
            let b = Arc::new(ScriptedBackend::new(fixture));
            (b.clone(), b)
        }
        BackendKind::Wire => {
            let endpoint = cfg
                .backend
                .endpoint
                .as_deref()
                .context("the wire backend needs an endpoint (backend.endpoint or CFD_ENDPOINT)")?;
            let b = Arc::new(WireBackend::new(
                endpoint,
                cfg.backend.api_key.clone(),
                &cfg.backend.chat_model,
                &cfg.backend.embedding_model,
                Duration::from_secs(cfg.backend.timeout_secs),
            )?);
            (b.clone(), b)
        }
    };
    let mut gw = Gateway::new(chat, embed, cfg.retry, cfg.parallelism);
    if let Some(dir) = &cfg.cache_dir {
        gw = gw.with_cache_dir(dir);
    }
    Ok(gw)
}

/// Loads the config file (or defaults), then applies environment variables
/// and command-line overrides.
pub fn resolve_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    if let Some(f) = &args.fixture {
        cfg.backend.kind = BackendKind::Scripted;
        cfg.backend.fixture = Some(f.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = &args.$field { cfg.$field = v.clone(); } )* };
    }
    set!(seed, m, n, t, p, s, parallelism, template_version);
    if let Some(b) = args.retry_budget {
        cfg.retry.budget = b;
    }
    if args.cache_dir.is_some() {
        cfg.cache_dir = args.cache_dir.clone();
    }
    cfg.fail_fast |= args.fail_fast;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<u8> {
    let cfg = resolve_config(args)?;
    let records = read_dataset(&args.dataset)?;
    eval::validate(&records)?;
    let records = pipeline::perturb_dataset(&records, args.perturb, cfg.seed)?;
    let gw = build_gateway(&cfg)?;
    log::info!(
        "running {} on {} records ({:?} backend)",
        args.method,
        records.len(),
        cfg.backend.kind
    );
    let run: RunOutput = pipeline::run_dataset(&gw, &cfg, args.method, &records)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&args.out.join("predictions.jsonl"), &run.predictions)?;
    write_jsonl(&args.out.join("reports.jsonl"), &run.reports)?;
    write_jsonl(&args.out.join("failures.jsonl"), &run.failures)?;
    write_jsonl(&args.out.join("trace.jsonl"), &gw.trace())?;
    if args.perturb != Perturbation::None {
        write_jsonl(&args.out.join("dataset.jsonl"), &records)?;
    }
    fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    let metrics = if run.predictions.is_empty() {
        None
    } else {
        Some(eval::score(
            &run.predictions,
            &records,
            args.method.name(),
            &run.config_digest,
            cfg.seed,
        )?)
    };
    if let Some(m) = &metrics {
        fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
        write!(out, "{}", m.table())?;
    }
    writeln!(
        out,
        "{} records, {} predictions, {} failures, config {}",
        records.len(),
        run.predictions.len(),
        run.failures.len(),
        &run.config_digest[..12]
    )?;
    for f in &run.failures {
        writeln!(out, "  failed {}: {}", f.id, f.error)?;
    }
    Ok(0)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<u8> {
    let f = File::open(&args.predictions).with_context(|| format!("opening {}", args.predictions.display()))?;
    let mut predictions: Vec<Prediction> =
        eval::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", args.predictions.display()))?;
    let mut dataset = read_dataset(&args.dataset)?;
    if !args.only.is_empty() {
        dataset.retain(|r| args.only.contains(&r.id));
        predictions.retain(|p| args.only.contains(&p.id));
    }
    let method = predictions.first().map(|p| p.method.clone()).unwrap_or_default();
    let report = eval::score(&predictions, &dataset, &method, "", 0)?;
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        write!(out, "{}", report.table())?;
    }
    Ok(0)
}

pub fn cmd_perturb(args: &PerturbArgs, out: &mut dyn Write) -> Result<u8> {
    let records = read_dataset(&args.dataset)?;
    let perturbed = pipeline::perturb_dataset(&records, args.kind, args.seed)?;
    write_jsonl(&args.out, &perturbed)?;
    writeln!(out, "wrote {} records to {}", perturbed.len(), args.out.display())?;
    Ok(0)
}

pub fn cmd_import(args: &ImportArgs, out: &mut dyn Write) -> Result<u8> {
    let raw = read_to_string(&args.input)?;
    let (records, report) = eval::load_source(args.source, &raw)?;
    write_jsonl(&args.out, &records)?;
    writeln!(
        out,
        "loaded {} records ({} without hop count, {} with too few hops excluded)",
        report.loaded, report.excluded_missing_hops, report.excluded_few_hops
    )?;
    Ok(0)
}

pub fn cmd_fixture(args: &FixtureArgs, out: &mut dyn Write) -> Result<u8> {
    let (records, fixture, designed) = cfd_core::contrast::contrast_world();
    fs::create_dir_all(&args.out)?;
    write_jsonl(&args.out.join("dataset.jsonl"), &records)?;
    fs::write(args.out.join("fixture.json"), serde_json::to_string_pretty(&fixture)?)?;
    fs::write(args.out.join("designed.txt"), designed.join("\n") + "\n")?;
    writeln!(
        out,
        "wrote {} records and their fixture to {}",
        records.len(),
        args.out.display()
    )?;
    Ok(0)
}
