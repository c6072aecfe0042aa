use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tracing::Level;

use screennav_cli::commands;
use screennav_cli::config::{BackendKind, ConfigFile, RunConfig, RunOverrides};
use screennav_cli::serve::{self, AppState};
use screennav_core::agent::VariantKind;
use screennav_core::Condition;

#[derive(Parser)]
#[command(name = "screennav", version, about = "Screen navigation agent runner and benchmark harness")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw numeric tags on a screenshot and write the tag map beside it.
    Tag {
        #[arg(long)]
        image: PathBuf,
        /// JSON array of UI elements.
        #[arg(long)]
        elements: PathBuf,
        /// by-side, red, or center.
        #[arg(long, default_value = "center")]
        style: String,
        #[arg(long)]
        font_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out the agent over dataset episodes.
    Run(Box<RunArgs>),
    /// Score run directories and write reports.
    Eval {
        /// Run directories holding transcripts.jsonl.
        runs: Vec<PathBuf>,
        #[arg(long, required_unless_present = "fractions")]
        dataset: Option<PathBuf>,
        /// Click distance threshold (normalized).
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write a combined table to <TABLE>.md and <TABLE>.csv.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Aggregate precomputed fractions ({category: {episode: fraction}}) instead.
        #[arg(long, conflicts_with_all = ["runs", "dataset"], requires = "out")]
        fractions: Option<PathBuf>,
        /// Output directory for --fractions.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Serve the human-evaluation API for one run.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory with the built annotation UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Shared token required in the x-session-token header.
        #[arg(long)]
        token: Option<String>,
    },
    /// Check an episode file or a dataset directory.
    Validate { path: PathBuf },
    /// Print a seeded sample of episode ids.
    Sample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(short, long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        stratified: bool,
    },
    /// Rebuild manifest.json from the episode files.
    Index {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        version: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of episodes to sample; all when omitted.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stratified: Option<bool>,
    /// image-only, +text, or +history.
    #[arg(long, allow_hyphen_values = true)]
    condition: Option<Condition>,
    /// baseline, think, or detail.
    #[arg(long)]
    variant: Option<VariantKind>,
    /// Directory with <variant>.txt prompt templates.
    #[arg(long)]
    prompt_dir: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_tags: Option<bool>,
    #[arg(long)]
    tag_style: Option<String>,
    #[arg(long)]
    font_scale: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// remote, scripted, replay, or gold.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// JSONL script for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Recorded session for the replay backend.
    #[arg(long)]
    session: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    auth_header: Option<String>,
    /// Episodes in flight; also caps concurrent remote requests.
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Parent directory for run outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Wall-clock timestamps instead of a step counter.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    wall_clock: Option<bool>,
}

impl RunArgs {
    fn resolve(self) -> Result<(RunConfig, bool)> {
        let file = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let flags = RunOverrides {
            dataset: self.dataset,
            sample: self.sample,
            seed: self.seed,
            stratified: self.stratified,
            condition: self.condition,
            variant: self.variant,
            prompt_dir: self.prompt_dir,
            use_tags: self.use_tags,
            tag_style: self.tag_style,
            font_scale: self.font_scale,
            max_steps: self.max_steps,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            backend: self.backend,
            script: self.script,
            session: self.session,
            endpoint: self.endpoint,
            model: self.model,
            api_key_env: self.api_key_env,
            auth_header: self.auth_header,
            parallel: self.parallel,
            timeout_secs: self.timeout_secs,
            out: self.out,
            run_id: self.run_id,
            wall_clock: self.wall_clock,
        };
        Ok((RunConfig::resolve(flags, &file)?, self.force))
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Tag {
            image,
            elements,
            style,
            font_scale,
            out,
        } => {
            let sidecar = commands::tag(&image, &elements, &style, font_scale, &out)?;
            println!("{}\n{}", out.display(), sidecar.display());
        }
        Command::Run(args) => {
            let (cfg, force) = args.resolve()?;
            let outcome = commands::run(&cfg, force)?;
            let steps: usize = outcome.transcripts.iter().map(|t| t.steps.len()).sum();
            println!(
                "{}: {} episode(s), {steps} step(s), {} failed",
                outcome.run_dir.display(),
                outcome.transcripts.len(),
                outcome.failures.len()
            );
            for f in &outcome.failures {
                eprintln!("  {}: {}", f.episode_id, f.error);
            }
            if !outcome.failures.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval {
            runs,
            dataset,
            threshold,
            table,
            fractions,
            out,
            label,
        } => {
            if let Some(fractions) = fractions {
                let out = out.expect("clap requires --out");
                let report = commands::eval_fractions(&fractions, &out, &label)?;
                println!("{label}: overall {:.2}", report.overall);
                return Ok(ExitCode::SUCCESS);
            }
            let dataset = dataset.expect("clap requires --dataset");
            for o in commands::eval(&runs, &dataset, threshold, table.as_deref())? {
                println!(
                    "{}: overall {:.2} ({} of {} steps correct)",
                    o.label, o.report.overall, o.report.counts.correct_steps, o.report.counts.steps
                );
            }
        }
        Command::Serve {
            dataset,
            run_dir,
            bind,
            ui_dir,
            token,
        } => {
            let state = AppState::load(&dataset, &run_dir, token)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve::serve(state, ui_dir, bind))?;
        }
        Command::Validate { path } => {
            let violations = commands::validate(&path)?;
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                eprintln!("{} violation(s)", violations.len());
                return Ok(ExitCode::FAILURE);
            }
            eprintln!("ok");
        }
        Command::Sample {
            dataset,
            n,
            seed,
            stratified,
        } => {
            for id in commands::sample(&dataset, n, seed, stratified)? {
                println!("{id}");
            }
        }
        Command::Index { dataset, name, version } => {
            let manifest = commands::index(&dataset, name.as_deref(), version.as_deref())?;
            println!("{} episode(s) indexed", manifest.episodes.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
