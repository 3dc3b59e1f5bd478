//! Scripted login for smoke tests and CI.

use std::sync::Arc;

use rolegate_core::openid::message::parse_query;
use rolegate_core::store::Store;
use rolegate_service::client::{Browser, ClientError, LoginScript};
use rolegate_service::config::OpAccountSeed;
use rolegate_service::session::SessionCodec;
use rolegate_service::{AppOptions, Server, ServiceConfig};
use serde_json::{json, Value};

use crate::args::E2eArgs;
use crate::{CliError, Context, Report};

const DEMO_USER: &str = "demo";
const DEMO_EMAIL: &str = "demo@example.org";

/// What a completed login established.
#[derive(Clone, Debug)]
pub struct E2eResult {
    pub provider_endpoint: String,
    /// `None` when the relying party fell back to stateless verification.
    pub assoc_handle: Option<String>,
    pub realm: Option<String>,
    pub identity: String,
    pub email: Option<String>,
    pub user_id: u64,
    pub roles: Vec<String>,
}

pub async fn run(ctx: &Context, args: E2eArgs) -> Result<Report, CliError> {
    let result = match args.url {
        Some(url) => {
            let script = LoginScript {
                openid_url: args.identity.unwrap_or_default(),
                username: args.username.unwrap_or_default(),
                password: args.password.unwrap_or_default(),
                approve: true,
            };
            login(&url, &script).await?
        }
        None => in_process(ctx).await?,
    };
    Ok(report(&result))
}

/// Boots a throwaway gateway with the test provider on a loopback port,
/// logs in as a demo account and shuts it down again.
async fn in_process(ctx: &Context) -> Result<E2eResult, CliError> {
    let password = SessionCodec::generate_key();
    let config = ServiceConfig {
        listen: "127.0.0.1:0".parse().expect("literal address"),
        server_key: Some(SessionCodec::generate_key()),
        op_enabled: true,
        op_password_iterations: 1000,
        op_accounts: vec![OpAccountSeed {
            username: DEMO_USER.into(),
            password: password.clone(),
            email: Some(DEMO_EMAIL.into()),
        }],
        fixed_today: ctx.config.fixed_today,
        ..ServiceConfig::default()
    };
    let opts = AppOptions {
        store: Some(Arc::new(Store::in_memory())),
        ..AppOptions::default()
    };
    let server = Server::bind(config, opts).await?;
    let base = server.base_url().to_string();
    let running = server.spawn();
    let script = LoginScript {
        openid_url: format!("{base}/op/id/{DEMO_USER}"),
        username: DEMO_USER.into(),
        password,
        approve: true,
    };
    let result = login(&base, &script).await;
    running.stop().await?;
    result
}

pub async fn login(base: &str, script: &LoginScript) -> Result<E2eResult, CliError> {
    let failed = |e: ClientError| CliError::Login(e.to_string());
    let browser = Browser::new(base).map_err(failed)?;
    let t = browser.login(script).await.map_err(failed)?;
    let message = t.finish.message().unwrap_or_default();
    if t.finish.status != 200 {
        return Err(CliError::Login(format!("HTTP {}: {message}", t.finish.status)));
    }
    let identity = between(&message, "You have successfully verified ", " as your identity.")
        .ok_or_else(|| CliError::Login(format!("unexpected completion: {message}")))?;
    let email = between(&message, "You also returned '", "' as your email.");

    let me = browser.get("/api/me").await.map_err(failed)?;
    let me: Value = match (me.status, me.json()) {
        (200, Some(v)) => v,
        (status, _) => return Err(CliError::Login(format!("no session after login (HTTP {status})"))),
    };
    let roles = me["roles"]
        .as_array()
        .map(|a| a.iter().filter_map(|r| r.as_str().map(str::to_string)).collect())
        .unwrap_or_default();

    let (endpoint, query) = t.provider_url.split_once('?').unwrap_or((&t.provider_url, ""));
    let assoc_handle = parse_query(query)
        .into_iter()
        .find(|(k, _)| k == "openid.assoc_handle")
        .map(|(_, v)| v);
    Ok(E2eResult {
        provider_endpoint: endpoint.to_string(),
        assoc_handle,
        realm: t.realm_shown,
        identity,
        email,
        user_id: me["user_id"].as_u64().unwrap_or_default(),
        roles,
    })
}

fn between(s: &str, start: &str, end: &str) -> Option<String> {
    let from = s.find(start)? + start.len();
    let to = s[from..].find(end)? + from;
    Some(s[from..to].to_string())
}

fn report(r: &E2eResult) -> Report {
    let mut lines = vec![
        format!("provider {}", r.provider_endpoint),
        format!("association {}", r.assoc_handle.as_deref().unwrap_or("none (stateless)")),
    ];
    if let Some(realm) = &r.realm {
        lines.push(format!("approved realm {realm}"));
    }
    lines.push(format!("verified {}", r.identity));
    if let Some(email) = &r.email {
        lines.push(format!("email {email}"));
    }
    lines.push(format!("session user {} roles {}", r.user_id, r.roles.join(" ")));
    Report::new(
        lines.join("\n"),
        json!({
            "provider": r.provider_endpoint,
            "assoc_handle": r.assoc_handle,
            "realm": r.realm,
            "identity": r.identity,
            "email": r.email,
            "user_id": r.user_id,
            "roles": r.roles,
        }),
    )
}
