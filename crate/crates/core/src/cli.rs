//! Command-line front end: `gen`, `train`, `eval`, `gradcheck`, `report`.
//!
//! Machine-readable output goes only to `--out` paths (or stdout for
//! `gradcheck` and `report`); logs go to stderr. Every artifact gets a
//! `<artifact>.run.json` record of how it was made.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use serde::Serialize;

use crate::corpus::{gen_corpus, read_manifest, split, write_manifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, render_table, EvalReport, ModalityMask};
use crate::gradsuite;
use crate::model::checkpoint::FORMAT_VERSION;
use crate::model::DvLlama;
use crate::trainer::{parse_stage_list, resume, run_stages, single_skip, Checkpoint, RunConfig, StageFamily, StageId};

/// Exit code when the gradient suite finds an error above tolerance.
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "dvllama",
    version,
    about = "Dual-branch document-video QA model: data, training, evaluation"
)]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Errors only on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus manifest.
    Gen(GenArgs),
    /// Run training stages and write a checkpoint per stage.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every op and stage objective.
    Gradcheck(GradArgs),
    /// Render one or more evaluation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set train.lr=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed; overrides corpus.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write only one part of the domain-stratified split.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitName,
    /// Train/val/test fractions used by --split.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Stage families to run, in order.
    #[arg(long, default_value = "s1,s2,s3")]
    stages: String,
    /// Ablate one stage family: s1 or s2 are not run, s3 trains projections only.
    #[arg(long, value_name = "STAGE")]
    skip: Vec<String>,
    /// Directory receiving `<STAGE>.ckpt` after every stage.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write `final.merged.ckpt` with LoRA folded into the decoder.
    #[arg(long)]
    merge: bool,
    /// Training seed; overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Accuracy threshold; overrides eval.threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value = "both")]
    modality: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// First seed of the sweep.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON; repeat for one table row each. `LABEL=PATH` sets the row name.
    #[arg(long = "in", required = true)]
    inputs: Vec<String>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

/// How an artifact was produced; enough to regenerate it.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a [String],
    config: BTreeMap<String, String>,
    root_seed: u64,
    artifacts: Vec<String>,
    wall_clock_secs: f64,
    format_versions: BTreeMap<&'static str, u32>,
    tool_version: &'static str,
}

struct Ctx {
    argv: Vec<String>,
    started: Instant,
}

impl Ctx {
    fn record(&self, at: &Path, cfg: &RunConfig, artifacts: &[PathBuf]) -> Result<()> {
        let config = cfg
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let rec = RunRecord {
            command: &self.argv,
            config,
            root_seed: cfg.train.seed,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            format_versions: BTreeMap::from([("checkpoint", FORMAT_VERSION), ("manifest", 1), ("report", 1)]),
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        let mut path = at.as_os_str().to_owned();
        path.push(".run.json");
        crate::util::write_atomic(
            Path::new(&path),
            (serde_json::to_string_pretty(&rec)? + "\n").as_bytes(),
        )
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --ratios {text:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("--ratios needs three values, got {text:?}")))
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Result<i32> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    let items = gen_corpus(&cfg.corpus)?;
    let items = match a.split {
        SplitName::All => items,
        part => {
            let s = split(&items, parse_ratios(&a.ratios)?, cfg.corpus.seed)?;
            match part {
                SplitName::Train => s.train,
                SplitName::Val => s.val,
                _ => s.test,
            }
        }
    };
    write_manifest(&a.out, &items)?;
    ctx.record(&a.out, &cfg, std::slice::from_ref(&a.out))?;
    info!("wrote {} sub-videos to {}", items.len(), a.out.display());
    Ok(0)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<i32> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let skips = a
        .skip
        .iter()
        .map(|s| s.parse::<StageFamily>())
        .collect::<Result<Vec<_>>>()?;
    let skip = single_skip(&skips)?;
    let mut stages = parse_stage_list(&a.stages)?;
    if let Some(sk) = skip {
        if sk != StageFamily::S3 {
            stages.retain(|s| s.family() != sk);
        }
        if stages.is_empty() {
            return Err(Error::Config("no stages left after --skip".into()));
        }
    }
    let corpus = read_manifest(&a.data)?;
    let trained = match &a.resume {
        Some(p) => resume(&Checkpoint::load(p)?, &corpus, &stages, &cfg, skip, Some(&a.out))?,
        None => run_stages(
            DvLlama::new(cfg.model.clone())?,
            None,
            &corpus,
            &stages,
            &cfg,
            skip,
            Some(&a.out),
        )?,
    };
    let mut artifacts: Vec<PathBuf> = stages.iter().map(|s| a.out.join(format!("{}.ckpt", s.tag()))).collect();
    if a.merge {
        let path = a.out.join("final.merged.ckpt");
        trained.checkpoint.merged()?.save(&path)?;
        artifacts.push(path);
    }
    for rec in &trained.checkpoint.meta.history {
        info!(
            "{}: loss {:.4} -> {:.4}, {} frozen parameters verified",
            rec.stage, rec.initial_loss, rec.final_loss, rec.frozen_verified
        );
    }
    ctx.record(&a.out.join("train"), &cfg, &artifacts)?;
    Ok(0)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<i32> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    let mask: ModalityMask = a.modality.parse()?;
    let ck = Checkpoint::load(&a.ckpt)?;
    // the checkpoint, not the config file, decides the architecture
    cfg.model = ck.meta.model.clone();
    let model = ck.restore()?;
    let manifest = read_manifest(&a.data)?;
    let report = evaluate_model(&model, &manifest, mask, cfg.eval.threshold, cfg.eval.max_new)?;
    crate::util::write_atomic(&a.out, report.to_json()?.as_bytes())?;
    ctx.record(&a.out, &cfg, std::slice::from_ref(&a.out))?;
    info!(
        "accuracy@{} = {:.4} over {} questions",
        report.threshold, report.overall, report.n
    );
    Ok(0)
}

fn cmd_gradcheck(a: &GradArgs) -> Result<i32> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let results = gradsuite::run_suite(a.seed..a.seed + a.seeds)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<width$}  {:.3e}  {verdict}", r.name, r.max_rel_err);
    }
    Ok(if ok { 0 } else { EXIT_GRADCHECK })
}

fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for spec in &a.inputs {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (stem, p)
            }
        };
        rows.push((label, EvalReport::from_json(&std::fs::read_to_string(&path)?)?));
    }
    match a.format {
        Format::Table => {
            let refs: Vec<(&str, &EvalReport)> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
            print!("{}", render_table(&refs));
        }
        Format::Json if rows.len() == 1 => print!("{}", rows[0].1.to_json()?),
        Format::Json => {
            let map: BTreeMap<&str, &EvalReport> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
            println!("{}", serde_json::to_string_pretty(&map)?);
        }
    }
    Ok(0)
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    // the logger is process-global; the level is applied per invocation
    let _ = env_logger::Builder::new()
        .filter_level(LevelFilter::Trace)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(level);
    let ctx = Ctx {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started: Instant::now(),
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("run `dvllama {} --help` for usage", subcommand_name(&cli.command));
            }
            e.exit_code()
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::Report(_) => "report",
    }
}

/// Stage ids a `--stages`/`--skip` pair resolves to; exposed for tooling.
pub fn resolve_stages(stages: &str, skip: &[StageFamily]) -> Result<Vec<StageId>> {
    let mut out = parse_stage_list(stages)?;
    if let Some(sk) = single_skip(skip)? {
        if sk != StageFamily::S3 {
            out.retain(|s| s.family() != sk);
        }
    }
    Ok(out)
}
