use clap::Parser;
use rolegate_cli::{emit, error_report, exit, run, Cli, Command};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Serve(_) | Command::OpServe(_) => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let json = cli.json;
    let code = match run(cli).await {
        Ok(report) => {
            emit(&report, json);
            exit::OK
        }
        Err(e) => {
            let report = error_report(&e);
            if json {
                emit(&report, true);
            } else {
                eprintln!("{}", report.text);
            }
            e.exit_code()
        }
    };
    std::process::exit(code);
}
