//! The relying-party pages: login form, try_auth, finish_auth, logout and
//! the privilege-gated landing pages.

use axum::extract::{Extension, Form, Query, RawQuery, State};
use axum::http::header::LOCATION;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use rolegate_core::openid::message::parse_query;
use rolegate_core::openid::op::html_escape;
use rolegate_core::openid::rp::{new_session_key, AuthStatus};
use serde::Deserialize;

use crate::guard::CurrentSession;
use crate::state::AppState;
use crate::web::{cookie, message_page, page, LOGIN_COOKIE, SESSION_COOKIE};

/// Seconds a begun login stays completable from the browser's side.
const LOGIN_COOKIE_TTL: i64 = 600;

pub async fn login_page(State(app): State<AppState>, headers: HeaderMap) -> Response {
    if cookie(&headers, SESSION_COOKIE).and_then(|c| app.read_session(c)).is_some() {
        return see_other("/");
    }
    page(
        "Log in",
        "<h1>Log in</h1>\n\
         <form method=\"post\" action=\"/try_auth\">\n\
         <label for=\"openid_url\">Identity URL:</label>\n\
         <input type=\"text\" id=\"openid_url\" name=\"openid_url\" size=\"40\">\n\
         <input type=\"submit\" value=\"Verify\">\n\
         </form>",
    )
    .into_response()
}

#[derive(Debug, Deserialize)]
pub struct TryAuthParams {
    #[serde(default)]
    openid_url: String,
}

pub async fn try_auth_get(State(app): State<AppState>, Query(p): Query<TryAuthParams>) -> Response {
    try_auth(&app, &p.openid_url).await
}

pub async fn try_auth_post(State(app): State<AppState>, Form(p): Form<TryAuthParams>) -> Response {
    try_auth(&app, &p.openid_url).await
}

async fn try_auth(app: &AppState, openid_url: &str) -> Response {
    let now = app.now();
    let session_key = new_session_key();
    let mut req = match app.consumer.begin(openid_url, &session_key, now).await {
        Ok(r) => r,
        Err(e) => {
            tracing::info!(error = %e, "login could not begin");
            return (StatusCode::BAD_REQUEST, message_page("Login error", e.user_message())).into_response();
        }
    };
    if let Err(e) = req.add_sreg(&[] as &[&str], &["email"]) {
        tracing::error!(error = %e, "invalid sreg request");
    }
    let url = match app
        .consumer
        .redirect_url(&mut req, &app.config.realm(), &app.config.return_to(), now)
    {
        Ok(u) => u,
        Err(e) => {
            tracing::error!(error = %e, "could not build provider redirect");
            return (StatusCode::INTERNAL_SERVER_ERROR, message_page("Login error", "Authentication error.")).into_response();
        }
    };
    let mut resp = see_other(&url);
    app.cookies
        .append_set(resp.headers_mut(), LOGIN_COOKIE, &session_key, LOGIN_COOKIE_TTL);
    resp
}

pub async fn finish_auth(State(app): State<AppState>, headers: HeaderMap, RawQuery(query): RawQuery) -> Response {
    let params = parse_query(query.as_deref().unwrap_or(""));
    let key = cookie(&headers, LOGIN_COOKIE).unwrap_or("");
    let outcome = app.consumer.complete(&params, key, app.now()).await;
    match outcome.status {
        AuthStatus::Success => {
            let identity = outcome.identity.as_deref().unwrap_or_default();
            let session = app
                .bindings
                .resolve_or_provision(&app.rbac, identity)
                .map_err(|e| tracing::error!(error = %e, "identity binding failed"))
                .ok()
                .and_then(|b| app.start_session(&b));
            let Some((token, cookie_value)) = session else {
                return (StatusCode::INTERNAL_SERVER_ERROR, message_page("Login error", "Authentication error.")).into_response();
            };
            tracing::info!(identity, user = %token.user_id, "login verified");
            let body = format!(
                "<h1>Logged in</h1>\n<p class=\"message\">{}</p>\n<p><a href=\"/\">Continue</a></p>",
                html_escape(&outcome.message)
            );
            let mut resp = page("Logged in", &body).into_response();
            let max_age = app.session_max_age(&token);
            app.cookies.append_set(resp.headers_mut(), SESSION_COOKIE, &cookie_value, max_age);
            app.cookies.append_clear(resp.headers_mut(), LOGIN_COOKIE);
            resp
        }
        AuthStatus::Cancel => message_page("Login cancelled", &outcome.message).into_response(),
        AuthStatus::SetupNeeded => message_page("Login incomplete", &outcome.message).into_response(),
        AuthStatus::Failure => {
            tracing::warn!(cause = ?outcome.cause, "login failed");
            (StatusCode::UNAUTHORIZED, message_page("Login failed", &outcome.message)).into_response()
        }
    }
}

pub async fn logout(State(app): State<AppState>, headers: HeaderMap) -> Response {
    if let Some(token) = cookie(&headers, SESSION_COOKIE).and_then(|c| app.read_session(c)) {
        app.end_session(&token);
    }
    let mut resp = see_other("/login");
    app.cookies.append_clear(resp.headers_mut(), SESSION_COOKIE);
    resp
}

pub async fn home(State(app): State<AppState>, Extension(CurrentSession(token)): Extension<CurrentSession>) -> Html<String> {
    let name = app
        .rbac
        .user(token.user_id)
        .map(|u| u.user_name)
        .unwrap_or_default();
    let roles: Vec<&str> = token.roles.iter().map(|r| r.as_str()).collect();
    page(
        "Home",
        &format!(
            "<h1>Welcome</h1>\n<p>Signed in as <span class=\"user\">{}</span> (user {}).</p>\n\
             <p>Roles: <span class=\"roles\">{}</span></p>\n\
             <ul><li><a href=\"/sections/student-affairs\">Student Affairs</a></li>\
             <li><a href=\"/sections/academic\">Academic Section</a></li>\
             <li><a href=\"/sections/finance\">Finance</a></li>\
             <li><a href=\"/console/\">Console</a></li></ul>\n\
             <form method=\"post\" action=\"/logout\"><input type=\"submit\" value=\"Log out\"></form>",
            html_escape(&name),
            token.user_id,
            roles.join(" ")
        ),
    )
}

/// Landing page of one academy section.
pub fn section(title: &'static str) -> impl Fn(Extension<CurrentSession>) -> std::future::Ready<Html<String>> + Clone {
    move |Extension(CurrentSession(token))| {
        std::future::ready(page(
            title,
            &format!(
                "<h1>{}</h1>\n<p>Access granted to user {}.</p>",
                html_escape(title),
                token.user_id
            ),
        ))
    }
}

fn see_other(location: &str) -> Response {
    let mut resp = StatusCode::SEE_OTHER.into_response();
    match HeaderValue::from_str(location) {
        Ok(v) => {
            resp.headers_mut().insert(LOCATION, v);
        }
        Err(_) => *resp.status_mut() = StatusCode::INTERNAL_SERVER_ERROR,
    }
    resp
}
