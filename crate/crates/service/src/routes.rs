use std::sync::Arc;
use std::time::Instant;

use axum::extract::Request;
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::Router;
use rolegate_core::fixture::OPENID_ROLE;
use rolegate_core::rbac::{Privilege, RoleId};
use tower_http::services::{ServeDir, ServeFile};

use crate::guard::{GuardedRouter, Requirement, RouteSpec};
use crate::state::{App, AppState, BootError};
use crate::{api, auth, op_routes};

pub const HOME_ACCESS: &str = "openid.access";
pub const SELF_SERVICE: &str = "rbac.self-service";
pub const STUDENT_AFFAIRS: &str = "student-affairs.access";
pub const ACADEMIC: &str = "academic.access";
pub const FINANCE: &str = "finance.access";

pub struct GatewayPrivilege {
    pub id: &'static str,
    pub description: &'static str,
    pub granted_to: &'static [&'static str],
}

impl GatewayPrivilege {
    pub fn to_privilege(&self) -> Privilege {
        Privilege {
            id: self.id.to_string(),
            description: self.description.to_string(),
            granted_to: self
                .granted_to
                .iter()
                .map(|r| RoleId::new(*r).expect("digit ids"))
                .collect(),
        }
    }
}

/// Privileges the gateway's own routes rely on, registered at startup
/// when missing.
pub const GATEWAY_PRIVILEGES: [GatewayPrivilege; 5] = [
    GatewayPrivilege {
        id: HOME_ACCESS,
        description: "Landing page for verified OpenID users",
        granted_to: &[OPENID_ROLE],
    },
    GatewayPrivilege {
        id: SELF_SERVICE,
        description: "Role administration API; the role engine checks each change",
        granted_to: &[OPENID_ROLE],
    },
    GatewayPrivilege {
        id: STUDENT_AFFAIRS,
        description: "Student Affairs section",
        granted_to: &["10"],
    },
    GatewayPrivilege {
        id: ACADEMIC,
        description: "Academic Section records",
        granted_to: &["20"],
    },
    GatewayPrivilege {
        id: FINANCE,
        description: "Finance section",
        granted_to: &["50"],
    },
];

const CONSOLE_PLACEHOLDER: &str = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Console</title></head>\n\
<body><h1>Admin console</h1><p>The console bundle is not installed. Set <code>console_dir</code> \
to the built bundle, or use the REST API under <code>/api</code>.</p></body></html>\n";

/// The guarded route table. Exposed so the startup check can be tested.
pub fn guarded(app: AppState) -> GuardedRouter {
    use Requirement::{Privilege as Needs, Public};
    let op_enabled = app.provider.is_some();
    let mut r = GuardedRouter::new(app)
        .page("/", Needs(HOME_ACCESS), get(auth::home))
        .page("/login", Public, get(auth::login_page))
        .page("/try_auth", Public, get(auth::try_auth_get).post(auth::try_auth_post))
        .page("/finish_auth", Public, get(auth::finish_auth))
        .page("/logout", Public, get(auth::logout).post(auth::logout))
        .page("/sections/student-affairs", Needs(STUDENT_AFFAIRS), get(auth::section("Student Affairs")))
        .page("/sections/academic", Needs(ACADEMIC), get(auth::section("Academic Section")))
        .page("/sections/finance", Needs(FINANCE), get(auth::section("Finance")))
        .api("/api/me", Needs(SELF_SERVICE), get(api::me))
        .api("/api/users", Needs(SELF_SERVICE), get(api::list_users).post(api::create_user))
        .api("/api/users/{id}/roles", Needs(SELF_SERVICE), get(api::user_roles))
        .api("/api/users/{id}/holding/{role}", Needs(SELF_SERVICE), get(api::holding_end))
        .api("/api/bindings", Needs(SELF_SERVICE), post(api::create_binding))
        .api("/api/roles", Needs(SELF_SERVICE), get(api::list_roles).post(api::create_role))
        .api("/api/roles/{id}/holder", Needs(SELF_SERVICE), get(api::role_holder))
        .api("/api/assignments", Needs(SELF_SERVICE), get(api::list_assignments).post(api::create_assignment))
        .api("/api/assignments/{s_no}", Needs(SELF_SERVICE), delete(api::revoke_assignment))
        .api("/api/delegations", Needs(SELF_SERVICE), post(api::create_delegation));
    if op_enabled {
        r = r
            .page("/op/id/{user}", Public, get(op_routes::identity_page))
            .page("/op/links/{user}", Public, get(op_routes::links_page))
            .page("/op/xrds/{user}", Public, get(op_routes::xrds))
            .page("/op/server", Public, get(op_routes::checkid).post(op_routes::direct))
            .page("/op/login", Public, post(op_routes::login))
            .page("/op/decide", Public, post(op_routes::decide));
    }
    r
}

/// The complete service router. Fails if a route names a privilege that
/// is not registered.
pub fn router(app: App) -> Result<Router, BootError> {
    let app: AppState = Arc::new(app);
    let guarded = guarded(app.clone());
    guarded.verify(&app.rbac)?;
    log_table(guarded.table());

    let console = match app.config.console_dir.as_ref().filter(|d| d.is_dir()) {
        Some(dir) => {
            let index = ServeFile::new(dir.join("index.html"));
            Router::new().nest_service("/console", ServeDir::new(dir).fallback(index))
        }
        None => Router::new()
            .route("/console", get(|| async { Html(CONSOLE_PLACEHOLDER) }))
            .route("/console/", get(|| async { Html(CONSOLE_PLACEHOLDER) })),
    };

    Ok(guarded
        .into_router()
        .merge(console)
        .fallback(|| async { (axum::http::StatusCode::NOT_FOUND, "not found").into_response() })
        .layer(middleware::from_fn(request_log))
        .with_state(app))
}

fn log_table(table: &[RouteSpec]) {
    for spec in table {
        tracing::debug!(path = spec.path, requirement = ?spec.requirement, "route");
    }
}

/// One structured line per request.
async fn request_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        target: "rolegate::access",
        %method,
        path,
        status = resp.status().as_u16(),
        elapsed_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    resp
}
