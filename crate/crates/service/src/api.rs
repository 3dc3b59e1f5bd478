//! The role administration REST API. Thin adapters over the role engine;
//! the engine makes every authorization decision about the change itself.

use std::collections::BTreeSet;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Extension, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::NaiveDate;
use rolegate_core::rbac::{
    Delegation, HoldingEnd, RbacError, RoleAssignment, RoleDescriptor, RoleId, UserId, UserRecord, ValidityPeriod,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::guard::CurrentSession;
use crate::identity::BindingError;
use crate::state::AppState;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    cause: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            cause: "bad-request",
            message: message.into(),
        }
    }

    fn forbidden(message: impl Into<String>) -> ApiError {
        ApiError {
            status: StatusCode::FORBIDDEN,
            cause: "unauthorized",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"cause": self.cause, "message": self.message}))).into_response()
    }
}

pub fn status_for(e: &RbacError) -> StatusCode {
    match e {
        RbacError::UnknownUser(_)
        | RbacError::UnknownUserName(_)
        | RbacError::UnknownRole(_)
        | RbacError::UnknownPrivilege(_)
        | RbacError::AssignmentNotFound(_) => StatusCode::NOT_FOUND,
        RbacError::DuplicateUser(_)
        | RbacError::DuplicateRole(_)
        | RbacError::DuplicatePrivilege(_)
        | RbacError::AlreadyRevoked(_)
        | RbacError::AlreadyBootstrapped => StatusCode::CONFLICT,
        RbacError::Unauthorized { .. } => StatusCode::FORBIDDEN,
        RbacError::InvalidRoleId(_)
        | RbacError::InvertedPeriod { .. }
        | RbacError::NotHolder { .. }
        | RbacError::OutsideValidity { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        RbacError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<RbacError> for ApiError {
    fn from(e: RbacError) -> Self {
        ApiError {
            status: status_for(&e),
            cause: e.cause_code(),
            message: e.to_string(),
        }
    }
}

impl From<BindingError> for ApiError {
    fn from(e: BindingError) -> Self {
        match e {
            BindingError::Rbac(e) => e.into(),
            other => ApiError {
                status: match other {
                    BindingError::AlreadyBound(_) => StatusCode::CONFLICT,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                },
                cause: other.cause_code(),
                message: other.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Session = Extension<CurrentSession>;

fn role_id(s: &str) -> ApiResult<RoleId> {
    Ok(RoleId::new(s)?)
}

fn period(from: NaiveDate, upto: NaiveDate) -> ApiResult<ValidityPeriod> {
    Ok(ValidityPeriod::new(from, upto)?)
}

#[derive(Debug, Deserialize)]
pub struct AtQuery {
    at: Option<NaiveDate>,
}

#[derive(Serialize)]
struct Me {
    user_id: UserId,
    user_name: String,
    identity: Option<String>,
    roles: Vec<RoleId>,
    groups: Vec<String>,
    is_admin: bool,
    today: NaiveDate,
}

pub async fn me(State(app): State<AppState>, Extension(CurrentSession(token)): Session) -> ApiResult<Json<Value>> {
    let today = app.today();
    let user = app.rbac.user(token.user_id).ok_or(RbacError::UnknownUser(token.user_id))?;
    Ok(Json(serde_json::to_value(Me {
        user_id: token.user_id,
        user_name: user.user_name,
        identity: token.identity,
        roles: token.roles.into_iter().collect(),
        groups: token.groups.into_iter().collect(),
        is_admin: app.rbac.is_admin(token.user_id, today),
        today,
    })
    .expect("plain struct")))
}

pub async fn list_users(State(app): State<AppState>) -> Json<Vec<UserRecord>> {
    Json(app.rbac.users())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewUser {
    user_name: String,
    identity: Option<String>,
}

pub async fn create_user(
    State(app): State<AppState>,
    Extension(CurrentSession(token)): Session,
    body: Result<Json<NewUser>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    if !app.rbac.is_admin(token.user_id, app.today()) {
        return Err(ApiError::forbidden("only administrators may add users"));
    }
    let user = app.rbac.add_user(&body.user_name)?;
    let binding = match &body.identity {
        Some(identity) => Some(app.bindings.bind(&app.rbac, identity, user.user_id)?),
        None => None,
    };
    Ok((StatusCode::CREATED, Json(json!({"user": user, "binding": binding}))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewBinding {
    identity: String,
    user_id: UserId,
}

pub async fn create_binding(
    State(app): State<AppState>,
    Extension(CurrentSession(token)): Session,
    body: Result<Json<NewBinding>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    if !app.rbac.is_admin(token.user_id, app.today()) {
        return Err(ApiError::forbidden("only administrators may bind identities"));
    }
    let binding = app.bindings.bind(&app.rbac, &body.identity, body.user_id)?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(binding).expect("plain struct"))))
}

pub async fn list_roles(State(app): State<AppState>) -> Json<Vec<RoleDescriptor>> {
    Json(app.rbac.roles())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewRole {
    id: String,
    name: String,
    owner: UserId,
}

pub async fn create_role(
    State(app): State<AppState>,
    Extension(CurrentSession(token)): Session,
    body: Result<Json<NewRole>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<RoleDescriptor>)> {
    let Json(body) = body?;
    let desc = RoleDescriptor::new(role_id(&body.id)?, body.name, body.owner);
    let created = app.rbac.register_role(token.user_id, desc, app.today())?;
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Serialize)]
struct AssignmentView {
    #[serde(flatten)]
    assignment: RoleAssignment,
    revoked: bool,
}

pub async fn list_assignments(State(app): State<AppState>) -> Json<Value> {
    let rows: Vec<AssignmentView> = app
        .rbac
        .assignments()
        .into_iter()
        .map(|a| AssignmentView {
            revoked: app.rbac.is_revoked(a.s_no),
            assignment: a,
        })
        .collect();
    Json(serde_json::to_value(rows).expect("plain struct"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewAssignment {
    user_id: UserId,
    role_id: String,
    valid_from: NaiveDate,
    valid_upto: NaiveDate,
}

pub async fn create_assignment(
    State(app): State<AppState>,
    Extension(CurrentSession(token)): Session,
    body: Result<Json<NewAssignment>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<RoleAssignment>)> {
    let Json(body) = body?;
    let role = role_id(&body.role_id)?;
    let p = period(body.valid_from, body.valid_upto)?;
    let row = app
        .rbac
        .assign_owner_role(token.user_id, body.user_id, &role, p, app.today())?;
    Ok((StatusCode::CREATED, Json(row)))
}

pub async fn revoke_assignment(
    State(app): State<AppState>,
    Extension(CurrentSession(token)): Session,
    s_no: Result<Path<u64>, PathRejection>,
) -> ApiResult<Json<Value>> {
    let Path(s_no) = s_no?;
    let rev = app.rbac.revoke_assignment(token.user_id, s_no, app.today())?;
    Ok(Json(serde_json::to_value(rev).expect("plain struct")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewDelegation {
    /// Defaults to the caller. Only administrators may act for another.
    assigner: Option<UserId>,
    assignee: UserId,
    role_id: String,
    valid_from: Option<NaiveDate>,
    valid_upto: NaiveDate,
}

#[derive(Serialize)]
pub struct DelegationView {
    pub assignment: RoleAssignment,
    pub requested: ValidityPeriod,
    pub effective: ValidityPeriod,
    pub start_clamped: bool,
    pub end_clamped: bool,
    pub clamped: bool,
}

impl From<Delegation> for DelegationView {
    fn from(d: Delegation) -> Self {
        DelegationView {
            effective: d.effective(),
            clamped: d.clamped(),
            requested: d.requested,
            start_clamped: d.start_clamped,
            end_clamped: d.end_clamped,
            assignment: d.assignment,
        }
    }
}

pub async fn create_delegation(
    State(app): State<AppState>,
    Extension(CurrentSession(token)): Session,
    body: Result<Json<NewDelegation>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<DelegationView>)> {
    let Json(body) = body?;
    let today = app.today();
    let assigner = body.assigner.unwrap_or(token.user_id);
    if assigner != token.user_id && !app.rbac.is_admin(token.user_id, today) {
        return Err(ApiError::forbidden("only administrators may delegate for another user"));
    }
    let role = role_id(&body.role_id)?;
    let requested = period(body.valid_from.unwrap_or(today), body.valid_upto)?;
    let d = app.rbac.delegate_role(assigner, body.assignee, &role, requested, today)?;
    Ok((StatusCode::CREATED, Json(d.into())))
}

pub async fn user_roles(
    State(app): State<AppState>,
    id: Result<Path<u64>, PathRejection>,
    q: Result<Query<AtQuery>, QueryRejection>,
) -> ApiResult<Json<BTreeSet<RoleId>>> {
    let (Path(id), Query(q)) = (id?, q?);
    let at = q.at.unwrap_or_else(|| app.today());
    Ok(Json(app.rbac.resolve_roles(UserId(id), at)?))
}

pub async fn holding_end(
    State(app): State<AppState>,
    ids: Result<Path<(u64, String)>, PathRejection>,
    q: Result<Query<AtQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let (Path((user, role)), Query(q)) = (ids?, q?);
    let at = q.at.unwrap_or_else(|| app.today());
    let end = app.rbac.holding_end(UserId(user), &role_id(&role)?, at)?;
    let upto = match end {
        HoldingEnd::Until(d) => Some(d),
        HoldingEnd::Unbounded => None,
    };
    Ok(Json(json!({"user_id": user, "role_id": role, "at": at, "holding_end": end, "valid_upto": upto})))
}

pub async fn role_holder(
    State(app): State<AppState>,
    id: Result<Path<String>, PathRejection>,
    q: Result<Query<AtQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let (Path(id), Query(q)) = (id?, q?);
    let at = q.at.unwrap_or_else(|| app.today());
    let holder = app.rbac.effective_holder(&role_id(&id)?, at)?;
    let name = app.rbac.user(holder).map(|u| u.user_name);
    Ok(Json(json!({"role_id": id, "at": at, "user_id": holder, "user_name": name})))
}
