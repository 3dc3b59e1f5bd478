use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

/// Operate the rolegate gateway and its role store.
#[derive(Debug, Parser)]
#[command(name = "rolegate", version)]
pub struct Cli {
    /// Service configuration file (TOML).
    #[arg(long, global = true, env = "ROLEGATE_CONFIG")]
    pub config: Option<PathBuf>,

    /// Store directory; overrides `store_dir` from the config.
    #[arg(long, global = true, env = "ROLEGATE_STORE")]
    pub store: Option<PathBuf>,

    /// Emit one JSON object per line instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Date to treat as today (YYYY-MM-DD).
    #[arg(long, global = true, env = "ROLEGATE_TODAY")]
    pub today: Option<NaiveDate>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the gateway.
    Serve(ServeArgs),
    /// Run the gateway with the test identity provider mounted at /op.
    OpServe(OpServeArgs),
    /// Load the academy fixture tables into an empty store.
    Seed,
    #[command(subcommand)]
    User(UserCommand),
    #[command(subcommand)]
    Role(RoleCommand),
    /// Map a user to a role for a date range.
    Assign(AssignArgs),
    /// Delegate a held role to another user.
    Delegate(DelegateArgs),
    /// Roles a user holds on a date.
    Resolve(ResolveArgs),
    /// The user a role maps to on a date.
    Holder(HolderArgs),
    /// Revoke an assignment by serial number.
    Revoke(RevokeArgs),
    /// Scripted login through discovery, association, approval and
    /// completion.
    E2eLogin(E2eArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<SocketAddr>,
}

#[derive(Debug, Args)]
pub struct OpServeArgs {
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Provider account as `user:password[:email]`; repeatable.
    #[arg(long = "account")]
    pub accounts: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum UserCommand {
    /// Create a user, optionally bound to an OpenID identity.
    Add {
        name: String,
        #[arg(long)]
        identity: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RoleCommand {
    /// Register a role.
    Add {
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: String,
        /// Owner, by id or name.
        #[arg(long)]
        owner: String,
        /// Acting user; defaults to the administrator.
        #[arg(long = "as")]
        actor: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    #[arg(long)]
    pub user: String,
    /// Role id or name.
    #[arg(long)]
    pub role: String,
    #[arg(long)]
    pub from: NaiveDate,
    #[arg(long)]
    pub until: NaiveDate,
    #[arg(long = "as")]
    pub actor: Option<String>,
}

#[derive(Debug, Args)]
pub struct DelegateArgs {
    #[arg(long)]
    pub role: String,
    /// The delegating holder.
    #[arg(long)]
    pub from: String,
    /// The receiving user.
    #[arg(long)]
    pub to: String,
    /// First day of the delegation; defaults to today.
    #[arg(long)]
    pub start: Option<NaiveDate>,
    #[arg(long)]
    pub until: NaiveDate,
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    #[arg(long)]
    pub user: String,
    /// Defaults to today.
    #[arg(long)]
    pub at: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct HolderArgs {
    #[arg(long)]
    pub role: String,
    #[arg(long)]
    pub at: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct RevokeArgs {
    pub s_no: u64,
    #[arg(long = "as")]
    pub actor: Option<String>,
}

#[derive(Debug, Args)]
pub struct E2eArgs {
    /// Run against this gateway instead of an in-process one.
    #[arg(long, requires_all = ["identity", "username", "password"])]
    pub url: Option<String>,
    #[arg(long)]
    pub identity: Option<String>,
    #[arg(long)]
    pub username: Option<String>,
    #[arg(long, env = "ROLEGATE_E2E_PASSWORD")]
    pub password: Option<String>,
}
