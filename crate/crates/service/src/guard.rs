//! Route registration with mandatory access requirements, and the
//! middleware enforcing them.
//!
//! A privilege violation logs the session out in the same response.

use std::sync::Arc;

use axum::extract::{Request, State};
use axum::http::header::LOCATION;
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::MethodRouter;
use axum::{Json, Router};
use rolegate_core::rbac::Rbac;
use serde_json::json;

use crate::session::SessionToken;
use crate::state::{AppState, BootError};
use crate::web::{cookie, SESSION_COOKIE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Requirement {
    Public,
    Privilege(&'static str),
}

/// How failures are reported: pages redirect to the login page, API
/// routes answer with JSON status codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteKind {
    Page,
    Api,
}

#[derive(Clone, Debug)]
pub struct RouteSpec {
    pub path: &'static str,
    pub requirement: Requirement,
    pub kind: RouteKind,
}

/// The authenticated session, placed in request extensions by the guard.
#[derive(Clone, Debug)]
pub struct CurrentSession(pub SessionToken);

#[derive(Clone)]
struct GuardCtx {
    app: AppState,
    spec: Arc<RouteSpec>,
}

/// Builds a router in which every route carries an explicit requirement.
pub struct GuardedRouter {
    app: AppState,
    router: Router<AppState>,
    table: Vec<RouteSpec>,
}

impl GuardedRouter {
    pub fn new(app: AppState) -> GuardedRouter {
        GuardedRouter {
            app,
            router: Router::new(),
            table: Vec::new(),
        }
    }

    pub fn page(self, path: &'static str, requirement: Requirement, route: MethodRouter<AppState>) -> GuardedRouter {
        self.add(path, requirement, RouteKind::Page, route)
    }

    pub fn api(self, path: &'static str, requirement: Requirement, route: MethodRouter<AppState>) -> GuardedRouter {
        self.add(path, requirement, RouteKind::Api, route)
    }

    fn add(mut self, path: &'static str, requirement: Requirement, kind: RouteKind, route: MethodRouter<AppState>) -> GuardedRouter {
        let spec = RouteSpec {
            path,
            requirement,
            kind,
        };
        let ctx = GuardCtx {
            app: self.app.clone(),
            spec: Arc::new(spec.clone()),
        };
        self.router = self
            .router
            .route(path, route.route_layer(middleware::from_fn_with_state(ctx, guard)));
        self.table.push(spec);
        self
    }

    pub fn table(&self) -> &[RouteSpec] {
        &self.table
    }

    /// Fails if any route names a privilege the engine does not know.
    pub fn verify(&self, rbac: &Rbac) -> Result<(), BootError> {
        verify_table(&self.table, rbac)
    }

    pub fn into_router(self) -> Router<AppState> {
        self.router
    }
}

pub fn verify_table(table: &[RouteSpec], rbac: &Rbac) -> Result<(), BootError> {
    for spec in table {
        if let Requirement::Privilege(p) = spec.requirement {
            if rbac.privilege(p).is_none() {
                return Err(BootError::UnknownPrivilege {
                    path: spec.path.to_string(),
                    privilege: p.to_string(),
                });
            }
        }
    }
    Ok(())
}

async fn guard(State(ctx): State<GuardCtx>, mut req: Request, next: Next) -> Response {
    let Requirement::Privilege(privilege) = ctx.spec.requirement else {
        return next.run(req).await;
    };
    let app = &ctx.app;
    let presented = cookie(req.headers(), SESSION_COOKIE).map(str::to_string);
    let token = presented.as_deref().and_then(|c| app.read_session(c));
    let Some((token, reminted)) = token.and_then(|t| app.refresh_if_stale(t)) else {
        return unauthenticated(app, ctx.spec.kind, presented.is_some());
    };

    match app.rbac.grants(&token.roles, privilege) {
        Ok(true) => {
            let max_age = app.session_max_age(&token);
            req.extensions_mut().insert(CurrentSession(token));
            let mut resp = next.run(req).await;
            if let Some(c) = reminted {
                app.cookies.append_set(resp.headers_mut(), SESSION_COOKIE, &c, max_age);
            }
            resp
        }
        Ok(false) => {
            tracing::warn!(
                user = %token.user_id,
                path = %req.uri().path(),
                privilege,
                "privilege violation; session terminated"
            );
            app.end_session(&token);
            let mut resp = match ctx.spec.kind {
                RouteKind::Page => redirect_to_login(),
                RouteKind::Api => (
                    StatusCode::FORBIDDEN,
                    Json(json!({"cause": "privilege-violation", "message": format!("missing privilege {privilege}")})),
                )
                    .into_response(),
            };
            app.cookies.append_clear(resp.headers_mut(), SESSION_COOKIE);
            resp
        }
        Err(e) => {
            tracing::error!(error = %e, "route privilege missing at request time");
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

fn unauthenticated(app: &AppState, kind: RouteKind, had_cookie: bool) -> Response {
    let mut resp = match kind {
        RouteKind::Page => redirect_to_login(),
        RouteKind::Api => (
            StatusCode::UNAUTHORIZED,
            Json(json!({"cause": "unauthenticated", "message": "no valid session"})),
        )
            .into_response(),
    };
    if had_cookie {
        app.cookies.append_clear(resp.headers_mut(), SESSION_COOKIE);
    }
    resp
}

pub fn redirect_to_login() -> Response {
    let mut resp = StatusCode::SEE_OTHER.into_response();
    resp.headers_mut().insert(LOCATION, HeaderValue::from_static("/login"));
    resp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rolegate_core::rbac::{Privilege, UserId};

    #[test]
    fn table_rejects_unregistered_privilege() {
        let rbac = Rbac::new();
        rbac.bootstrap("root").unwrap();
        let table = vec![
            RouteSpec {
                path: "/login",
                requirement: Requirement::Public,
                kind: RouteKind::Page,
            },
            RouteSpec {
                path: "/reports",
                requirement: Requirement::Privilege("reports.read"),
                kind: RouteKind::Page,
            },
        ];
        let err = verify_table(&table, &rbac).unwrap_err();
        assert!(matches!(err, BootError::UnknownPrivilege { ref privilege, .. } if privilege == "reports.read"));

        let today = "2009-01-01".parse().unwrap();
        let p = Privilege {
            id: "reports.read".into(),
            description: String::new(),
            granted_to: Default::default(),
        };
        rbac.register_privilege(UserId(1), p, today).unwrap();
        verify_table(&table, &rbac).unwrap();
    }
}
