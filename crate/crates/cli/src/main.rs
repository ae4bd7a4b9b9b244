use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use infoseeker::config::{EngineConfig, Overrides};
use infoseeker::domain::{TaskId, TaskQuery};
use infoseeker::mcp::{MockFixture, MockToolServer};
use infoseeker::simharness::{bless, run_many, sweep_table, sweep_workers, ScenarioError, ScenarioSpec};
use infoseeker::telemetry::{read_trace, summarize, verify};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "infoseeker", version, about = "Hierarchical parallel information-seeking engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task and print the final answer.
    Run {
        #[arg(long)]
        task: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "task")]
        task_id: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_steps: Option<u32>,
        #[arg(long)]
        reflect_limit: Option<u32>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        virtual_clock: bool,
    },
    /// Run scenario directories and report each assertion.
    Scenario {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Comma-separated worker budgets to sweep, e.g. 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        /// Rewrite golden files from this run.
        #[arg(long)]
        bless: bool,
        #[arg(long)]
        parallel: bool,
    },
    /// Inspect a recorded trace.
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Serve a mock tool fixture over stdin/stdout.
    #[command(hide = true)]
    MockToolServer {
        #[arg(long)]
        fixture: PathBuf,
    },
}

#[derive(Subcommand)]
enum TraceAction {
    Summarize { path: PathBuf },
    Verify { path: PathBuf },
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            task,
            config,
            task_id,
            workers,
            max_steps,
            reflect_limit,
            trace_out,
            virtual_clock,
        } => {
            let overrides = Overrides {
                workers,
                max_steps,
                reflect_limit,
                virtual_clock,
                trace_out,
            };
            cmd_run(&task, &task_id, &config, &overrides).await
        }
        Command::Scenario {
            paths,
            sweep,
            bless,
            parallel,
        } => cmd_scenario(&paths, sweep.as_deref(), bless, parallel).await,
        Command::Trace { action } => cmd_trace(action),
        Command::MockToolServer { fixture } => cmd_mock_server(&fixture).await,
    }
}

async fn cmd_run(task: &str, task_id: &str, config: &Path, overrides: &Overrides) -> ExitCode {
    let engine = async {
        let mut cfg = EngineConfig::load(config)?;
        cfg.apply(overrides)?;
        cfg.build().await
    }
    .await;
    let engine = match engine {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let query = match TaskQuery::new(TaskId::new(task_id), task) {
        Ok(q) => q,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match engine.run(query).await {
        Ok(run) => {
            print!("{}", run.answer.text);
            if !run.answer.text.ends_with('\n') {
                println!();
            }
            if let Some(p) = &engine.trace_path {
                eprintln!("trace written to {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("task failed: {}", f.cause);
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

async fn cmd_scenario(paths: &[PathBuf], sweep: Option<&[usize]>, do_bless: bool, parallel: bool) -> ExitCode {
    let mut specs = Vec::new();
    for p in paths {
        match ScenarioSpec::load(p) {
            Ok(s) => specs.push(s),
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let mut code = ExitCode::SUCCESS;
    for (spec, report) in specs.iter().zip(run_many(&specs, parallel).await) {
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {}: {e}", spec.name);
                return ExitCode::from(exit_for(&e));
            }
        };
        if do_bless {
            match bless(spec, &report) {
                Ok(files) => files.iter().for_each(|f| eprintln!("blessed {}", f.display())),
                Err(e) => {
                    eprintln!("error: cannot write goldens for {}: {e}", spec.name);
                    return ExitCode::from(EXIT_FAILURE);
                }
            }
        }
        print!("{}", report.to_text());
        if !report.passed() {
            code = ExitCode::from(EXIT_FAILURE);
        }
        let budgets = sweep.map(<[usize]>::to_vec).unwrap_or_default();
        if !budgets.is_empty() {
            match sweep_workers(spec, &budgets).await {
                Ok(rows) => print!("{}", sweep_table(&rows)),
                Err(e) => {
                    eprintln!("error: sweep of {}: {e}", spec.name);
                    return ExitCode::from(exit_for(&e));
                }
            }
        }
    }
    code
}

fn exit_for(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Invalid(_) | ScenarioError::Config(_) => EXIT_CONFIG,
    }
}

fn cmd_trace(action: TraceAction) -> ExitCode {
    let (path, summarize_only) = match &action {
        TraceAction::Summarize { path } => (path, true),
        TraceAction::Verify { path } => (path, false),
    };
    let events = match read_trace(path) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    if summarize_only {
        return match summarize(&events) {
            Ok(m) => {
                print!("{}", m.to_table());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_FAILURE)
            }
        };
    }
    match verify(&events) {
        Ok(r) if r.passed() => {
            println!("ok: {} events verified", events.len());
            ExitCode::SUCCESS
        }
        Ok(r) => {
            for v in &r.violations {
                println!("violation [{}]: {}", v.check, v.detail);
            }
            ExitCode::from(EXIT_FAILURE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

async fn cmd_mock_server(fixture: &Path) -> ExitCode {
    let fixture = match MockFixture::load(fixture) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {}: {e}", fixture.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let stdin = tokio::io::BufReader::new(tokio::io::stdin());
    match MockToolServer::new(fixture).serve_io(stdin, tokio::io::stdout()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
