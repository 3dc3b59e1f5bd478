use std::net::SocketAddr;

use rolegate_service::config::OpAccountSeed;
use rolegate_service::{AppOptions, Server};
use serde_json::json;

use crate::{emit, CliError, Context, Report};

pub(crate) async fn serve(
    ctx: Context,
    listen: Option<SocketAddr>,
    accounts: Vec<String>,
    with_provider: bool,
) -> Result<Report, CliError> {
    let mut config = ctx.config;
    if let Some(addr) = listen {
        config.listen = addr;
    }
    if with_provider {
        config.op_enabled = true;
        for spec in &accounts {
            config.op_accounts.push(parse_account(spec)?);
        }
    }
    if config.store_dir.is_none() {
        tracing::warn!("no store directory; state is kept in memory only");
    }
    let server = Server::bind(config, AppOptions::default()).await?;
    let base = server.base_url().to_string();
    let mut listening = json!({"event": "listening", "url": base});
    let mut text = format!("listening on {base}");
    if with_provider {
        listening["provider"] = json!(format!("{base}/op/server"));
        text.push_str(&format!(" (provider {base}/op/server)"));
    }
    emit(&Report::new(text, listening), ctx.json);
    tracing::info!(url = %base, "serving");

    server
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(Report::new("stopped", json!({"event": "stopped"})))
}

/// `user:password[:email]`. The email is the last field when it holds an
/// `@`, so passwords may contain colons.
fn parse_account(spec: &str) -> Result<OpAccountSeed, CliError> {
    let invalid = || CliError::Invalid {
        what: "account (expected user:password[:email])",
        value: spec.to_string(),
    };
    let (username, rest) = spec.split_once(':').ok_or_else(invalid)?;
    let (password, email) = match rest.rsplit_once(':') {
        Some((pw, email)) if email.contains('@') => (pw, Some(email.to_string())),
        _ => (rest, None),
    };
    if username.is_empty() || password.is_empty() {
        return Err(invalid());
    }
    Ok(OpAccountSeed {
        username: username.to_string(),
        password: password.to_string(),
        email,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn account_specs() {
        let a = parse_account("alice:s3:cret:alice@example.org").unwrap();
        assert_eq!((a.username.as_str(), a.password.as_str()), ("alice", "s3:cret"));
        assert_eq!(a.email.as_deref(), Some("alice@example.org"));
        let b = parse_account("bob:pw").unwrap();
        assert_eq!(b.email, None);
        assert!(parse_account("bob").is_err());
        assert!(parse_account(":pw").is_err());
    }
}
