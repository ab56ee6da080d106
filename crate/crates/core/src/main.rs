use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};

use tutorhub::cms::{export_worksheet, import_worksheet, WorksheetStore};
use tutorhub::grader::echo_script::{self, InProcess};
use tutorhub::grader::{ExecutorConfig, ExecutorTable, Grade};
use tutorhub::server::config::Config;
use tutorhub::server::events::{recover_with_snapshots, scan_log, SnapshotDir};
use tutorhub::server::http::{EVENT_LOG_FILE, SNAPSHOT_DIR};
use tutorhub::sim::{self, Fixture, Scenario, SimOptions};

#[derive(Parser)]
#[command(name = "tutorhub", version, about = "Small-group tutoring server, simulator and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket server.
    Serve {
        #[arg(long, default_value = "tutorhub.toml")]
        config: PathBuf,
    },
    /// Write a starter config and the demo worksheet into a directory.
    Init { dir: PathBuf },
    /// Headless section simulator.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Worksheet markdown tools.
    Worksheet {
        #[command(subcommand)]
        command: WorksheetCommand,
    },
    /// Replay a data directory's event log and report what it contains.
    Recover {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Run an echo-script program (the bundled toy executor).
    EchoScript { file: PathBuf },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Use the virtual clock instead of pacing in real time.
        #[arg(long)]
        virtual_time: bool,
        /// Grade through subprocesses of this binary instead of in process.
        #[arg(long)]
        subprocess_grader: bool,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replay a fixture and compare its metrics with the embedded expectations.
    Replay {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WorksheetCommand {
    /// Parse and validate worksheet files.
    Check { files: Vec<PathBuf> },
    /// Print a worksheet as JSON, or re-emit it as canonical markdown.
    Export {
        file: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Validate a worksheet and copy it into a content directory.
    Import {
        file: PathBuf,
        #[arg(long, default_value = "content")]
        content_dir: PathBuf,
    },
}

const STARTER_CONFIG: &str = r#"listen = "127.0.0.1:8080"
content_dir = "content"
data_dir = "data"
active_worksheet = "demo"
groups = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]
max_group_size = 7
ta_allowlist = ["ta@example.edu"]

[tutor]
backend = "mock"
"#;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn verdict(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn write_report<T: serde::Serialize>(path: Option<&Path>, value: &T) -> anyhow::Result<()> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Serve { config } => {
            let config = Config::load(&config)?;
            let backend = config.backend(|k| std::env::var(k).ok())?;
            let program = std::env::current_exe().context("locating this executable")?;
            let grader: Arc<dyn Grade> = Arc::new(config.executor_table(&program));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(tutorhub::server::http::serve(config, backend, grader))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Init { dir } => {
            std::fs::create_dir_all(&dir)?;
            let config = dir.join("tutorhub.toml");
            if config.exists() {
                anyhow::bail!("{} already exists", config.display());
            }
            std::fs::write(&config, STARTER_CONFIG)?;
            WorksheetStore::open(&dir.join("content"))?.store(&sim::demo_worksheet())?;
            println!("wrote {} and the demo worksheet", config.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sim { command } => match command {
            SimCommand::Run {
                scenario,
                seed,
                virtual_time,
                subprocess_grader,
                report,
            } => {
                let scenario = Scenario::load(&scenario)?;
                let grader: Arc<dyn Grade> = if subprocess_grader {
                    let program = std::env::current_exe()?;
                    Arc::new(ExecutorTable::new(tutorhub::grader::default_work_root()).with(ExecutorConfig::echo_script(&program)))
                } else {
                    Arc::new(InProcess)
                };
                let result = sim::run_scenario(scenario, SimOptions { seed, virtual_time }, grader)?;
                print!("{}", result.summary());
                write_report(report.as_deref(), &result)?;
                Ok(verdict(result.passed))
            }
            SimCommand::Replay { fixture, report } => {
                let fixture = Fixture::load(&fixture)?;
                let outcome = sim::replay_fixture(&fixture);
                print!("{}", outcome.summary());
                write_report(report.as_deref(), &outcome)?;
                Ok(verdict(outcome.passed))
            }
        },
        Command::Worksheet { command } => match command {
            WorksheetCommand::Check { files } => {
                let mut ok = true;
                for file in files {
                    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                    match import_worksheet(&text) {
                        Ok(w) => println!("{}: ok ({} problems)", file.display(), w.problems.len()),
                        Err(errors) => {
                            ok = false;
                            for e in errors {
                                println!("{}:{e}", file.display());
                            }
                        }
                    }
                }
                Ok(verdict(ok))
            }
            WorksheetCommand::Export { file, format } => {
                let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                let worksheet = import_worksheet(&text).map_err(|errors| {
                    anyhow::anyhow!(errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))
                })?;
                match format.as_str() {
                    "json" => println!("{}", serde_json::to_string_pretty(&worksheet)?),
                    "markdown" | "md" => print!("{}", export_worksheet(&worksheet)),
                    other => anyhow::bail!("unknown format `{other}` (json, markdown)"),
                }
                Ok(ExitCode::SUCCESS)
            }
            WorksheetCommand::Import { file, content_dir } => {
                let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                let worksheet = import_worksheet(&text).map_err(|errors| {
                    anyhow::anyhow!(errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))
                })?;
                WorksheetStore::open(&content_dir)?.store(&worksheet)?;
                println!("stored `{}`", worksheet.id);
                Ok(ExitCode::SUCCESS)
            }
        },
        Command::Recover { data_dir } => {
            let log = data_dir.join(EVENT_LOG_FILE);
            let bytes = std::fs::read(&log).with_context(|| format!("reading {}", log.display()))?;
            let scan = scan_log(&bytes);
            let snapshots = SnapshotDir::new(data_dir.join(SNAPSHOT_DIR))?.load_all()?;
            let recovery = recover_with_snapshots(&scan.records, snapshots);
            println!("{} records, last seq {}", scan.records.len(), recovery.last_seq);
            for (id, room) in &recovery.state.rooms {
                println!(
                    "{id}: {} members, {} AI-channel messages, {} unreviewed",
                    room.members.len(),
                    room.ai_chat.len(),
                    room.unreviewed_count
                );
            }
            let mut clean = true;
            if let Some(t) = &scan.truncation {
                clean = false;
                println!("log tail unreadable after seq {}: {}", t.last_valid_seq, t.reason);
            }
            if let Some(t) = &recovery.truncation {
                clean = false;
                println!("replay stopped after seq {}: {}", t.last_valid_seq, t.reason);
            }
            Ok(verdict(clean))
        }
        Command::EchoScript { file } => {
            let source = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let code = echo_script::run(&source, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
            Ok(ExitCode::from(code.clamp(0, 255) as u8))
        }
    }
}
