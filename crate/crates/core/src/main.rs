use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgate::gateway::Gateway;
use fedgate::load_config;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "fedgate", version, about = "Dynamic storage federation gateway")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, env = "FEDGATE_CONFIG")]
    config: Option<PathBuf>,
    /// Validate the configuration and exit.
    #[arg(long)]
    check: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Serve until SIGTERM or Ctrl-C (the default).
    Serve {
        /// Override the configured listen address.
        #[arg(long)]
        listen: Option<String>,
        /// Log filter, e.g. `info` or `fedgate=debug`.
        #[arg(long)]
        log_level: Option<String>,
    },
    /// Validate the configuration and exit.
    Check,
    /// Print the ranked replicas of a federated path.
    Resolve {
        path: String,
        /// Rank as seen from this client address.
        #[arg(long)]
        client_ip: Option<IpAddr>,
    },
}

fn init_logging(level: Option<&str>) {
    let filter = match level {
        Some(l) => EnvFilter::new(l),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config_path) = cli.config.clone() else {
        eprintln!("fedgate: no configuration given (use --config or FEDGATE_CONFIG)");
        return ExitCode::from(2);
    };
    let mut config = match load_config(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fedgate: {}: {e}", config_path.display());
            return ExitCode::FAILURE;
        }
    };
    let command = if cli.check {
        Command::Check
    } else {
        cli.command.unwrap_or(Command::Serve {
            listen: None,
            log_level: None,
        })
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("fedgate: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match command {
        Command::Check => {
            println!("{}: ok ({} endpoints)", config_path.display(), config.endpoints.len());
            ExitCode::SUCCESS
        }
        Command::Serve { listen, log_level } => {
            init_logging(log_level.as_deref());
            if let Some(l) = listen {
                config.listen_address = l;
            }
            runtime.block_on(async {
                let gateway = match Gateway::new(config) {
                    Ok(g) => g,
                    Err(e) => {
                        eprintln!("fedgate: {e}");
                        return ExitCode::FAILURE;
                    }
                };
                match gateway.serve(shutdown_signal()).await {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => {
                        eprintln!("fedgate: {e}");
                        ExitCode::FAILURE
                    }
                }
            })
        }
        Command::Resolve { path, client_ip } => runtime.block_on(async {
            let gateway = match Gateway::new(config) {
                Ok(g) => g,
                Err(e) => {
                    eprintln!("fedgate: {e}");
                    return ExitCode::FAILURE;
                }
            };
            let set = match gateway.resolve(&path, client_ip).await {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("fedgate: {path}: {e}");
                    return ExitCode::from(2);
                }
            };
            for r in &set.replicas {
                let size = r.size.map_or_else(|| "-".to_string(), |s| s.to_string());
                println!("{}\t{}\t{size}", r.endpoint_id, r.backend_path);
            }
            if set.replicas.is_empty() {
                let why = if set.complete {
                    "not found"
                } else {
                    "unknown (some endpoints did not answer)"
                };
                eprintln!("fedgate: {}: {why}", set.federated_path);
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }),
    }
}
