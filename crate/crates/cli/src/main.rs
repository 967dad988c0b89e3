use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use xmodal_core::io::{read_json, write_json};
use xmodal_core::model::ModelConfig;
use xmodal_core::par::Exec;
use xmodal_core::pipeline::{raw_records_from, run_files, write_records};
use xmodal_core::retrieval::{evaluate, EvalPool};
use xmodal_core::synth::{World, WorldSpec};
use xmodal_core::tokenizer::{Tokenizer, Vocab};
use xmodal_core::trainer::{load_checkpoint, run_plan, RunOptions, StagePlan};

/// Provenance record written beside every output.
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal transformer pre-training, fine-tuning and retrieval evaluation on a desk",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for every random choice; recorded in the run manifest.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Run all data-parallel work on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic corpora: out-of-domain and in-domain training sets,
    /// an evaluation pool and raw records for the cleaning pipeline.
    Gen(GenArgs),
    /// Corpus cleaning.
    Pipeline {
        #[command(subcommand)]
        action: PipelineCommand,
    },
    /// Run a multi-stage training plan.
    Train(TrainArgs),
    /// Score an evaluation pool with a checkpoint and report Recall@K.
    Eval(EvalArgs),
    /// Print the token sequence of a text as JSON.
    Tokenize(TokenizeArgs),
    /// Finite-difference check of every op and of the model under each loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// World description (JSON); built-in defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Class-frequency and dialect skew of the out-of-domain set.
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
}

#[derive(Subcommand, Debug)]
enum PipelineCommand {
    /// Filter, score and deduplicate raw records.
    Run(PipelineArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Raw records, one JSON object per line.
    #[arg(long)]
    input: PathBuf,
    /// Cleaned pairs (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Policy (JSON); built-in defaults when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Stage counters (JSON); `<out>.report.json` when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to start from instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume at this stage from the previous stage's checkpoint in `--out`.
    #[arg(long, default_value_t = 0)]
    start_stage: usize,
    /// Stop before this stage.
    #[arg(long)]
    end_stage: Option<usize>,
    /// Use the plan's own seed instead of `--seed`.
    #[arg(long)]
    plan_seed: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory with the images and captions to rank.
    #[arg(long)]
    pool: PathBuf,
    /// Checkpoint directory (holds `model.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    ks: Vec<usize>,
    /// Report (JSON); printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    text: String,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Model configuration (JSON); the small check configuration when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 8)]
    per_tensor: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a [String],
    seed: u64,
    version: &'static str,
    format: &'static str,
    parallel: bool,
    outputs: Vec<String>,
}

struct Ctx {
    argv: Vec<String>,
    seed: u64,
    exec: Exec,
}

impl Ctx {
    fn manifest(&self, path: &Path, outputs: &[&Path]) -> Result<()> {
        let m = RunManifest {
            command: &self.argv,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            format: xmodal_core::checkpoint::FORMAT,
            parallel: self.exec.is_parallel(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        write_json(path, &m).with_context(|| format!("writing {}", path.display()))
    }
}

fn tokenizer(vocab: Option<&Path>) -> Result<Tokenizer> {
    Ok(Tokenizer::new(match vocab {
        Some(p) => Vocab::from_file(p)?,
        None => Vocab::fixture(),
    }))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let spec: WorldSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => WorldSpec::default(),
    };
    let world = World::new(spec, ctx.seed)?;
    let (ood, id) = world.domain_pair(a.shift)?;
    let pool = world.pool()?;
    let dirs = ["ood", "id", "pool"].map(|d| a.out.join(d));
    for (ds, dir) in [&ood, &id, &pool].into_iter().zip(&dirs) {
        ds.save(dir)?;
    }
    let raw = a.out.join("raw.jsonl");
    write_records(&raw, &raw_records_from(&ood))?;
    write_json(&a.out.join("world.json"), world.spec())?;
    ctx.manifest(&a.out.join(RUN_MANIFEST), &[&dirs[0], &dirs[1], &dirs[2], &raw])?;
    println!(
        "wrote {} out-of-domain, {} in-domain and {} pool images to {}",
        ood.len(),
        id.len(),
        pool.len(),
        a.out.display()
    );
    Ok(())
}

fn pipeline(ctx: &Ctx, a: &PipelineArgs) -> Result<()> {
    let report = a.report.clone().unwrap_or_else(|| sibling(&a.out, ".report.json"));
    let stats = run_files(
        &a.input,
        &a.out,
        a.policy.as_deref(),
        &report,
        tokenizer(a.vocab.as_deref())?,
        ctx.exec,
    )?;
    for s in &stats.stages {
        let dropped: Vec<String> = s
            .dropped
            .iter()
            .map(|(r, n)| format!("{}={n}", serde_json::to_string(r).unwrap_or_default().trim_matches('"')))
            .collect();
        println!(
            "{:<10} in {:>7} kept {:>7} dropped [{}]",
            s.stage,
            s.input,
            s.kept,
            dropped.join(" ")
        );
    }
    ctx.manifest(&sibling(&a.out, ".manifest.json"), &[&a.out, &report])?;
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut plan = StagePlan::load(&a.plan)?;
    if !a.plan_seed {
        plan.seed = ctx.seed;
    }
    let base = a.plan.parent().unwrap_or(Path::new("."));
    let opts = RunOptions {
        init: a.init.as_deref().map(xmodal_core::checkpoint::load).transpose()?,
        start_stage: a.start_stage,
        end_stage: a.end_stage,
        exec: ctx.exec,
    };
    let summary = run_plan(&plan, base, &a.out, opts)?;
    for s in &summary.stages {
        let zs = s
            .zero_shot
            .as_ref()
            .and_then(|r| r.recall(xmodal_core::retrieval::RetrievalDirection::ImageRetrieval, 1))
            .map(|r| format!(" zero-shot image R@1 {r:.3}"))
            .unwrap_or_default();
        println!(
            "stage {} {:<12} steps {:>6} final loss {:.4} checkpoint {}{zs}",
            s.index,
            s.name,
            s.steps,
            s.final_loss,
            &s.checkpoint[..12.min(s.checkpoint.len())]
        );
    }
    println!("final checkpoint {}", a.out.join("final").display());
    let run_manifest = Ctx {
        seed: plan.seed,
        argv: ctx.argv.clone(),
        exec: ctx.exec,
    };
    run_manifest.manifest(
        &a.out.join(RUN_MANIFEST),
        &[&a.out.join("summary.json"), &a.out.join("final")],
    )?;
    Ok(())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let cfg = model.config();
    let tok = tokenizer(a.vocab.as_deref())?;
    if tok.vocab().len() != cfg.vocab_size {
        bail!(
            "vocabulary has {} tokens, checkpoint expects {}",
            tok.vocab().len(),
            cfg.vocab_size
        );
    }
    let ds = xmodal_core::corpus::Dataset::load(&a.pool)?;
    let pool = EvalPool::from_dataset(&ds, &tok, cfg.max_text_len, cfg.num_visual_tokens)?;
    let id = xmodal_core::checkpoint::read_manifest(&a.checkpoint)?.id().to_string();
    let report = evaluate(&model, &pool, &a.ks, &id, ctx.exec)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        ctx.manifest(&sibling(out, ".manifest.json"), &[out])?;
    }
    Ok(())
}

fn tokenize(a: &TokenizeArgs) -> Result<()> {
    let tok = tokenizer(a.vocab.as_deref())?;
    let seq = tok.tokenize(&a.text, a.max_len)?;
    let pieces: Vec<&str> = seq
        .token_ids
        .iter()
        .take(seq.content_len())
        .map(|&i| tok.vocab().token(i).unwrap_or("?"))
        .collect();
    println!("{}", serde_json::json!({ "tokens": pieces, "sequence": seq }));
    Ok(())
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<bool> {
    let cfg: ModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => xmodal_core::gradcheck::check_config(),
    };
    let report = xmodal_core::gradcheck::run_suite(&cfg, ctx.seed, a.per_tensor)?;
    for r in &report.results {
        let mark = if r.max_rel_err < a.tolerance { "ok  " } else { "FAIL" };
        println!(
            "{mark} {:<24} {:>6} coords  max rel err {:.3e}",
            r.name, r.checked, r.max_rel_err
        );
    }
    println!("max relative error {:.3e}", report.max_rel_err);
    Ok(report.max_rel_err < a.tolerance)
}

fn run(cli: Cli, argv: Vec<String>) -> Result<bool> {
    let ctx = Ctx {
        argv,
        seed: cli.seed,
        exec: if cli.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        },
    };
    match &cli.command {
        Command::Gen(a) => gen(&ctx, a)?,
        Command::Pipeline {
            action: PipelineCommand::Run(a),
        } => pipeline(&ctx, a)?,
        Command::Train(a) => train(&ctx, a)?,
        Command::Eval(a) => eval(&ctx, a)?,
        Command::Tokenize(a) => tokenize(a)?,
        Command::Gradcheck(a) => return gradcheck(&ctx, a),
    }
    Ok(true)
}

/// Error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli, argv) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded the tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
