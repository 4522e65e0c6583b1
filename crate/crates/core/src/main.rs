use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use ehr_gateway::audit::export_since;
use ehr_gateway::mock_ehr::{FixtureSet, MockEhr};
use ehr_gateway::ref_classifier::{self, RuleModel};
use ehr_gateway::{load_config, Gateway};

#[derive(Parser)]
#[command(name = "ehr-gateway", version, about = "Classifier gateway between an EHR and ML sidecars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Validate a configuration file and list the classifiers.
    CheckConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inspect the audit store.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Mock EHR lab-data server for local runs and tests.
    MockEhr {
        #[command(subcommand)]
        command: MockEhrCommand,
    },
    /// Rule-based reference classifier sidecar.
    RefClassifier {
        #[command(subcommand)]
        command: RefClassifierCommand,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Print audit records written on or after a date, as JSONL.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        since: NaiveDate,
    },
}

#[derive(Subcommand)]
enum MockEhrCommand {
    /// Serve lab XML fixtures over the EHR lab-data endpoint.
    Serve {
        #[arg(long)]
        fixtures: PathBuf,
        /// Delay applied to every lab-data response.
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
        #[arg(long, default_value_t = 9000)]
        port: u16,
        #[arg(long, default_value = "dev-auth-code")]
        auth_code: String,
    },
}

#[derive(Subcommand)]
enum RefClassifierCommand {
    /// Serve a threshold model on 127.0.0.1.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        port: u16,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Serve { config } => {
            let config = load_config(&config)?;
            let gateway = Gateway::from_config(&config, None)?;
            let server = gateway.serve(config.listen).await?;
            tracing::info!(addr = %server.addr(), "gateway listening");
            tokio::signal::ctrl_c().await?;
            server.stop().await;
        }
        Command::CheckConfig { config } => {
            let config = load_config(&config)?;
            println!("ok: {} classifier(s)", config.classifiers.len());
            for c in &config.classifiers {
                let state = if c.enabled { "enabled" } else { "disabled" };
                println!("  /ml_classifier_run/{} -> {} ({state}, sidecar {})", c.route_path, c.classifier_id, c.sidecar.url());
            }
        }
        Command::Audit {
            command: AuditCommand::Export { config, since },
        } => {
            let config = load_config(&config)?;
            for record in export_since(&config.audit.path, since)? {
                println!("{}", serde_json::to_string(&record)?);
            }
        }
        Command::MockEhr {
            command: MockEhrCommand::Serve {
                fixtures,
                latency_ms,
                port,
                auth_code,
            },
        } => {
            let mut set = FixtureSet::load_dir(&fixtures)?;
            set.default_latency = Duration::from_millis(latency_ms);
            let records = set.records.len();
            let mock = MockEhr::start(set, &auth_code, SocketAddr::from(([127, 0, 0, 1], port))).await?;
            tracing::info!(addr = %mock.addr(), records, "mock EHR listening");
            tokio::signal::ctrl_c().await?;
            mock.stop().await;
        }
        Command::RefClassifier {
            command: RefClassifierCommand::Serve { model, port },
        } => {
            let model = RuleModel::load(&model)?;
            let server = ref_classifier::serve(model, port).await?;
            tracing::info!(addr = %server.addr(), "reference classifier listening");
            tokio::signal::ctrl_c().await?;
            server.stop().await;
        }
    }
    Ok(())
}
