//! The `rolegate` operator tool.
//!
//! Store verbs open the store directly and need the gateway stopped, since
//! the store admits one writer at a time.

pub mod args;
pub mod e2e;
pub mod error;
mod serve;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{FixedOffset, NaiveDate, Utc};
use rolegate_core::fixture::{load_seed_fixture, SEED_ASSIGNMENTS, SEED_ROLES, SEED_USERS};
use rolegate_core::rbac::{Rbac, RbacError, RoleDescriptor, RoleId, UserId, UserRecord, ValidityPeriod, ADMIN_ROLE};
use rolegate_core::store::Store;
use rolegate_service::clock::Calendar;
use rolegate_service::identity::BindingStore;
use rolegate_service::ServiceConfig;
use serde_json::{json, Value};

pub use args::{Cli, Command};
pub use error::{exit, CliError};

/// One result line, rendered as text or JSON.
#[derive(Clone, Debug)]
pub struct Report {
    pub text: String,
    pub json: Value,
}

impl Report {
    pub fn new(text: impl Into<String>, json: Value) -> Report {
        Report {
            text: text.into(),
            json,
        }
    }

    pub fn render(&self, json: bool) -> String {
        if json {
            self.json.to_string()
        } else {
            self.text.clone()
        }
    }
}

/// Prints a report and flushes, so a parent process can read it at once.
pub fn emit(report: &Report, json: bool) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", report.render(json));
    let _ = out.flush();
}

pub fn error_report(e: &CliError) -> Report {
    Report::new(
        format!("error: {e}"),
        json!({"error": e.cause_code(), "message": e.to_string()}),
    )
}

/// Resolved configuration shared by every verb.
pub struct Context {
    pub config: ServiceConfig,
    pub json: bool,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Context, CliError> {
        let mut config = ServiceConfig::load(cli.config.as_deref())?;
        if let Some(dir) = &cli.store {
            config.store_dir = Some(dir.clone());
        }
        if let Some(today) = cli.today {
            config.fixed_today = Some(today);
        }
        Ok(Context {
            config,
            json: cli.json,
        })
    }

    pub fn today(&self) -> Result<NaiveDate, CliError> {
        let minutes = self.config.utc_offset_minutes;
        let offset = FixedOffset::east_opt(minutes * 60).ok_or(CliError::Invalid {
            what: "utc offset",
            value: minutes.to_string(),
        })?;
        Ok(Calendar {
            offset,
            fixed_today: self.config.fixed_today,
        }
        .today(Utc::now()))
    }

    fn store_dir(&self) -> Result<&PathBuf, CliError> {
        self.config.store_dir.as_ref().ok_or(CliError::NoStore)
    }

    fn open(&self) -> Result<(Arc<Store>, Rbac), CliError> {
        let store = Arc::new(Store::open(self.store_dir()?)?);
        let rbac = Rbac::with_store(store.clone())?;
        Ok((store, rbac))
    }

    /// Opens the store, bootstrapping an administrator into an empty one.
    fn open_for_write(&self) -> Result<(Arc<Store>, Rbac), CliError> {
        let (store, rbac) = self.open()?;
        if rbac.is_empty() {
            rbac.bootstrap(&self.config.admin_name)?;
        }
        Ok((store, rbac))
    }
}

pub async fn run(cli: Cli) -> Result<Report, CliError> {
    let ctx = Context::from_cli(&cli)?;
    match cli.command {
        Command::Serve(a) => serve::serve(ctx, a.listen, Vec::new(), false).await,
        Command::OpServe(a) => serve::serve(ctx, a.listen, a.accounts, true).await,
        Command::E2eLogin(a) => e2e::run(&ctx, a).await,
        other => run_store_verb(&ctx, other),
    }
}

fn run_store_verb(ctx: &Context, command: Command) -> Result<Report, CliError> {
    use args::{RoleCommand, UserCommand};

    match command {
        Command::Seed => seed(ctx),
        Command::User(UserCommand::Add { name, identity }) => {
            let (store, rbac) = ctx.open_for_write()?;
            let user = rbac.add_user(&name)?;
            if let Some(identity) = &identity {
                BindingStore::open(store)?.bind(&rbac, identity, user.user_id)?;
            }
            let mut text = format!("user {} {}", user.user_id, user.user_name);
            if let Some(identity) = &identity {
                text.push_str(&format!(" bound to {identity}"));
            }
            Ok(Report::new(
                text,
                json!({"user_id": user.user_id.0, "user_name": user.user_name, "identity": identity}),
            ))
        }
        Command::Role(RoleCommand::Add {
            id,
            name,
            owner,
            actor,
        }) => {
            let (_, rbac) = ctx.open_for_write()?;
            let owner = find_user(&rbac, &owner)?;
            let actor = actor_or_admin(&rbac, actor.as_deref())?;
            let desc = RoleDescriptor::new(RoleId::new(id)?, name, owner.user_id);
            let role = rbac.register_role(actor, desc, ctx.today()?)?;
            Ok(Report::new(
                format!("role {} {} owner {}", role.id, role.name, owner.user_name),
                json!({"role_id": role.id.as_str(), "name": role.name, "owner": role.owner.0}),
            ))
        }
        Command::Assign(a) => {
            let (_, rbac) = ctx.open_for_write()?;
            let user = find_user(&rbac, &a.user)?;
            let role = find_role(&rbac, &a.role)?;
            let actor = actor_or_admin(&rbac, a.actor.as_deref())?;
            let period = ValidityPeriod::new(a.from, a.until)?;
            let row = rbac.assign_owner_role(actor, user.user_id, &role, period, ctx.today()?)?;
            Ok(Report::new(
                format!(
                    "assignment {}: {} holds {} {}..{}",
                    row.s_no,
                    user.user_name,
                    row.role_id,
                    period.valid_from(),
                    period.valid_upto()
                ),
                json!({
                    "s_no": row.s_no,
                    "user_id": row.user_id.0,
                    "role_id": row.role_id.as_str(),
                    "valid_from": period.valid_from(),
                    "valid_upto": period.valid_upto(),
                }),
            ))
        }
        Command::Delegate(a) => {
            let (_, rbac) = ctx.open_for_write()?;
            let today = ctx.today()?;
            let role = find_role(&rbac, &a.role)?;
            let assigner = find_user(&rbac, &a.from)?;
            let assignee = find_user(&rbac, &a.to)?;
            let requested = ValidityPeriod::new(a.start.unwrap_or(today), a.until)?;
            let d = rbac.delegate_role(assigner.user_id, assignee.user_id, &role, requested, today)?;
            let eff = d.effective();
            let mut text = format!(
                "assignment {}: {} holds {} {}..{}",
                d.assignment.s_no,
                assignee.user_name,
                role,
                eff.valid_from(),
                eff.valid_upto()
            );
            if d.clamped() {
                text.push_str(&format!(
                    " (clamped from {}..{})",
                    requested.valid_from(),
                    requested.valid_upto()
                ));
            }
            Ok(Report::new(
                text,
                json!({
                    "s_no": d.assignment.s_no,
                    "assigner": assigner.user_id.0,
                    "assignee": assignee.user_id.0,
                    "role_id": role.as_str(),
                    "requested": {"valid_from": requested.valid_from(), "valid_upto": requested.valid_upto()},
                    "effective": {"valid_from": eff.valid_from(), "valid_upto": eff.valid_upto()},
                    "start_clamped": d.start_clamped,
                    "end_clamped": d.end_clamped,
                }),
            ))
        }
        Command::Resolve(a) => {
            let (_, rbac) = ctx.open()?;
            let user = find_user(&rbac, &a.user)?;
            let at = a.at.map_or_else(|| ctx.today(), Ok)?;
            let roles: Vec<String> = rbac
                .resolve_roles(user.user_id, at)?
                .into_iter()
                .map(|r| r.as_str().to_string())
                .collect();
            Ok(Report::new(
                roles.join(" "),
                json!({"user_id": user.user_id.0, "at": at, "roles": roles}),
            ))
        }
        Command::Holder(a) => {
            let (_, rbac) = ctx.open()?;
            let role = find_role(&rbac, &a.role)?;
            let at = a.at.map_or_else(|| ctx.today(), Ok)?;
            let holder = rbac.effective_holder(&role, at)?;
            let name = rbac.user(holder).map(|u| u.user_name).unwrap_or_default();
            Ok(Report::new(
                name.clone(),
                json!({"role_id": role.as_str(), "at": at, "user_id": holder.0, "user_name": name}),
            ))
        }
        Command::Revoke(a) => {
            let (_, rbac) = ctx.open_for_write()?;
            let actor = actor_or_admin(&rbac, a.actor.as_deref())?;
            let r = rbac.revoke_assignment(actor, a.s_no, ctx.today()?)?;
            Ok(Report::new(
                format!("revoked assignment {} on {}", r.s_no, r.revoked_on),
                json!({"s_no": r.s_no, "revoked_by": r.revoked_by.0, "revoked_on": r.revoked_on}),
            ))
        }
        Command::Serve(_) | Command::OpServe(_) | Command::E2eLogin(_) => unreachable!("handled in run"),
    }
}

fn seed(ctx: &Context) -> Result<Report, CliError> {
    let (_, rbac) = ctx.open()?;
    load_seed_fixture(&rbac)?;
    Ok(Report::new(
        format!(
            "seeded {} users, {} roles, {} assignments",
            SEED_USERS.len(),
            SEED_ROLES.len(),
            SEED_ASSIGNMENTS.len()
        ),
        json!({"users": SEED_USERS.len(), "roles": SEED_ROLES.len(), "assignments": SEED_ASSIGNMENTS.len()}),
    ))
}

/// A user by numeric id or by name.
pub fn find_user(rbac: &Rbac, reference: &str) -> Result<UserRecord, CliError> {
    let found = match reference.parse::<u64>() {
        Ok(id) => rbac.user(UserId(id)).ok_or(RbacError::UnknownUser(UserId(id))),
        Err(_) => rbac
            .user_by_name(reference)
            .ok_or_else(|| RbacError::UnknownUserName(reference.to_string())),
    };
    Ok(found?)
}

/// A role by id when `reference` is all digits, else by name.
pub fn find_role(rbac: &Rbac, reference: &str) -> Result<RoleId, CliError> {
    if !reference.is_empty() && reference.bytes().all(|b| b.is_ascii_digit()) {
        return Ok(RoleId::new(reference)?);
    }
    rbac.role_by_name(reference)
        .map(|r| r.id)
        .ok_or_else(|| CliError::UnknownRoleName(reference.to_string()))
}

fn actor_or_admin(rbac: &Rbac, actor: Option<&str>) -> Result<UserId, CliError> {
    if let Some(a) = actor {
        return Ok(find_user(rbac, a)?.user_id);
    }
    let admin = RoleId::new(ADMIN_ROLE)?;
    rbac.role(&admin)
        .map(|r| r.owner)
        .ok_or_else(|| RbacError::UnknownRole(admin).into())
}
