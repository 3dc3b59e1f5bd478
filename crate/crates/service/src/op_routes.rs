//! HTTP front of the test identity provider, mounted under `/op`.

use std::collections::HashMap;

use axum::body::Bytes;
use axum::extract::{Form, Path, RawQuery, State};
use axum::http::header::{CONTENT_TYPE, LOCATION};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rolegate_core::openid::message::{parse_query, Message};
use rolegate_core::openid::op::{html_escape, CheckidRequest, Decision, Principal, Provider};
use rolegate_core::openid::rp::new_session_key;
use serde::Deserialize;

use crate::state::AppState;
use crate::web::{cookie, message_page, page, OP_COOKIE};

/// How long a checkid request waits for the user.
const REQUEST_TTL: i64 = 600;
/// Lifetime of a provider sign-in.
const OP_SESSION_TTL: i64 = 3600;

/// Provider-side browser state: checkid requests awaiting a decision and
/// signed-in provider users.
#[derive(Default)]
pub struct OpFlow {
    requests: Mutex<HashMap<String, (CheckidRequest, DateTime<Utc>)>>,
    sessions: Mutex<HashMap<String, (Principal, DateTime<Utc>)>>,
}

impl OpFlow {
    fn park(&self, req: CheckidRequest, now: DateTime<Utc>) -> String {
        let token = new_session_key();
        let mut map = self.requests.lock();
        map.retain(|_, (_, at)| now - *at < Duration::seconds(REQUEST_TTL));
        map.insert(token.clone(), (req, now));
        token
    }

    fn request(&self, token: &str, now: DateTime<Utc>) -> Option<CheckidRequest> {
        self.requests
            .lock()
            .get(token)
            .filter(|(_, at)| now - *at < Duration::seconds(REQUEST_TTL))
            .map(|(r, _)| r.clone())
    }

    fn take_request(&self, token: &str, now: DateTime<Utc>) -> Option<CheckidRequest> {
        self.requests
            .lock()
            .remove(token)
            .filter(|(_, at)| now - *at < Duration::seconds(REQUEST_TTL))
            .map(|(r, _)| r)
    }

    fn sign_in(&self, principal: Principal, now: DateTime<Utc>) -> String {
        let sid = new_session_key();
        let mut map = self.sessions.lock();
        map.retain(|_, (_, at)| now - *at < Duration::seconds(OP_SESSION_TTL));
        map.insert(sid.clone(), (principal, now));
        sid
    }

    fn principal(&self, headers: &HeaderMap, now: DateTime<Utc>) -> Option<Principal> {
        let sid = cookie(headers, OP_COOKIE)?;
        self.sessions
            .lock()
            .get(sid)
            .filter(|(_, at)| now - *at < Duration::seconds(OP_SESSION_TTL))
            .map(|(p, _)| p.clone())
    }
}

fn provider(app: &AppState) -> Result<&Provider, Response> {
    app.provider
        .as_ref()
        .ok_or_else(|| StatusCode::NOT_FOUND.into_response())
}

pub async fn identity_page(State(app): State<AppState>, Path(user): Path<String>) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    match p.identity_html(&user, true) {
        Some(html) => {
            let mut resp = Html(html).into_response();
            if let Ok(v) = HeaderValue::from_str(&p.xrds_url(&user)) {
                resp.headers_mut().insert("x-xrds-location", v);
            }
            resp
        }
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

/// Identity page offering only HTML discovery links.
pub async fn links_page(State(app): State<AppState>, Path(user): Path<String>) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    match p.identity_html(&user, false) {
        Some(html) => Html(html).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

pub async fn xrds(State(app): State<AppState>, Path(user): Path<String>) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    match p.identity_xrds(&user) {
        Some(doc) => ([(CONTENT_TYPE, "application/xrds+xml")], doc).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

/// Direct messages: associate and check_authentication.
pub async fn direct(State(app): State<AppState>, body: Bytes) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    let msg = Provider::parse_direct(&body);
    let reply = p.handle_direct(&msg, app.now());
    (
        StatusCode::from_u16(reply.status).unwrap_or(StatusCode::BAD_REQUEST),
        [(CONTENT_TYPE, "text/plain; charset=utf-8")],
        reply.body,
    )
        .into_response()
}

/// Indirect checkid_setup from the browser.
pub async fn checkid(State(app): State<AppState>, headers: HeaderMap, RawQuery(query): RawQuery) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    let msg = Message::from_openid_params(parse_query(query.as_deref().unwrap_or("")));
    let req = match p.prepare_checkid(&msg) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, message_page("Provider error", &e.to_string())).into_response(),
    };
    let now = app.now();
    let token = app.op_flow.park(req.clone(), now);
    match app.op_flow.principal(&headers, now) {
        Some(principal) => approval_page(&req, &principal, &token).into_response(),
        None => login_form(&req, &token, None).into_response(),
    }
}

#[derive(Debug, Deserialize)]
pub struct LoginForm {
    request: String,
    username: String,
    password: String,
}

pub async fn login(State(app): State<AppState>, Form(form): Form<LoginForm>) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    let now = app.now();
    let Some(req) = app.op_flow.request(&form.request, now) else {
        return (StatusCode::BAD_REQUEST, message_page("Provider error", "Unknown or expired request.")).into_response();
    };
    let Some(principal) = p.authenticate_user(&form.username, &form.password) else {
        return (StatusCode::UNAUTHORIZED, login_form(&req, &form.request, Some("Invalid username or password."))).into_response();
    };
    let sid = app.op_flow.sign_in(principal.clone(), now);
    let mut resp = approval_page(&req, &principal, &form.request).into_response();
    app.cookies.append_set(resp.headers_mut(), OP_COOKIE, &sid, OP_SESSION_TTL);
    resp
}

#[derive(Debug, Deserialize)]
pub struct DecideForm {
    request: String,
    decision: String,
}

pub async fn decide(State(app): State<AppState>, headers: HeaderMap, Form(form): Form<DecideForm>) -> Response {
    let p = match provider(&app) {
        Ok(p) => p,
        Err(r) => return r,
    };
    let now = app.now();
    let decision = match form.decision.as_str() {
        "approve" => Decision::ApproveOnce,
        "deny" => Decision::Deny,
        _ => return (StatusCode::BAD_REQUEST, message_page("Provider error", "Unknown decision.")).into_response(),
    };
    let Some(principal) = app.op_flow.principal(&headers, now) else {
        return (StatusCode::UNAUTHORIZED, message_page("Provider error", "Sign in first.")).into_response();
    };
    let Some(req) = app.op_flow.take_request(&form.request, now) else {
        return (StatusCode::BAD_REQUEST, message_page("Provider error", "Unknown or expired request.")).into_response();
    };
    match p.respond_checkid(&req, Some(&principal), decision, now) {
        Ok(url) => match HeaderValue::from_str(&url) {
            Ok(v) => (StatusCode::SEE_OTHER, [(LOCATION, v)]).into_response(),
            Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
        },
        Err(e) => (StatusCode::FORBIDDEN, message_page("Provider error", &e.to_string())).into_response(),
    }
}

fn login_form(req: &CheckidRequest, token: &str, error: Option<&str>) -> Html<String> {
    let error = error
        .map(|e| format!("<p class=\"error\">{}</p>\n", html_escape(e)))
        .unwrap_or_default();
    page(
        "Provider sign-in",
        &format!(
            "<h1>Sign in</h1>\n<p>The site <span class=\"realm\">{realm}</span> asks you to log in.</p>\n{error}\
             <form method=\"post\" action=\"/op/login\">\n\
             <input type=\"hidden\" name=\"request\" value=\"{token}\">\n\
             <label>Username <input type=\"text\" name=\"username\"></label>\n\
             <label>Password <input type=\"password\" name=\"password\"></label>\n\
             <input type=\"submit\" value=\"Sign in\">\n</form>",
            realm = html_escape(&req.realm),
            token = html_escape(token),
        ),
    )
}

fn approval_page(req: &CheckidRequest, principal: &Principal, token: &str) -> Html<String> {
    let fields: Vec<&str> = req.sreg.fields().collect();
    let sreg = if fields.is_empty() {
        String::new()
    } else {
        format!(
            "<p>It also asks for: <span class=\"sreg\">{}</span></p>\n",
            html_escape(&fields.join(", "))
        )
    };
    page(
        "Approve login",
        &format!(
            "<h1>Approve login</h1>\n\
             <p>Signed in as <span class=\"identity\">{identity}</span>.</p>\n\
             <p>Do you want to log in to <span class=\"realm\">{realm}</span>?</p>\n{sreg}\
             <form method=\"post\" action=\"/op/decide\">\n\
             <input type=\"hidden\" name=\"request\" value=\"{token}\">\n\
             <button type=\"submit\" name=\"decision\" value=\"approve\">Approve</button>\n\
             <button type=\"submit\" name=\"decision\" value=\"deny\">Deny</button>\n</form>",
            identity = html_escape(&principal.identity_url),
            realm = html_escape(&req.realm),
            token = html_escape(token),
        ),
    )
}
