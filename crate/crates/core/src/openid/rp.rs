//! Relying party: begin a login from a user-supplied identifier, send the
//! browser to the provider, and verify what comes back.
//!
//! Every answer other than a fully verified positive assertion is a
//! `Cancel`, `SetupNeeded` or `Failure`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::association::{AssociationStore, DhParams, PendingAssociation, SessionType, AssociationError, SUPPORTED};
use super::discovery::{discover, normalize, ClaimedIdentifier, DiscoveryError, OpEndpoint};
use super::fetch::{Fetcher, HttpRequest};
use super::message::{
    append_query, indirect_encode, kv_decode, parse_query, verify_signature, AssocType, Association, Message,
    MessageError, ProtocolVersion, SignedFieldList,
};
use super::nonce::{generate_nonce, NonceStore, ReplayError};
use super::realm::{validate_realm, RealmError};
use super::sreg::{self, SregError, SregRequest};

/// Query parameter carrying our own nonce on 1.1 return URLs, which lack
/// a provider nonce.
pub const RP_NONCE_PARAM: &str = "rp_nonce";

/// Associations this close to expiry are not reused.
const ASSOC_MIN_REMAINING: i64 = 60;

#[derive(Debug, Error)]
pub enum BeginError {
    #[error("Expected an OpenID URL.")]
    EmptyIdentifier,
    #[error("discovery failed: {0}")]
    Discovery(DiscoveryError),
    #[error("no endpoint permitted for {0}")]
    NotAllowed(String),
    #[error("invalid session key")]
    BadSessionKey,
}

impl BeginError {
    /// The text shown to the person logging in.
    pub fn user_message(&self) -> &'static str {
        match self {
            BeginError::EmptyIdentifier => "Expected an OpenID URL.",
            _ => "Authentication error.",
        }
    }
}

#[derive(Debug, Error)]
pub enum RpError {
    #[error("return_to `{return_to}` is outside realm `{realm}`")]
    RealmMismatch { realm: String, return_to: String },
    #[error(transparent)]
    Realm(#[from] RealmError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Sreg(#[from] SregError),
}

/// An authentication in progress, bound to the browser session that
/// started it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthRequest {
    pub claimed_id: ClaimedIdentifier,
    pub endpoint: OpEndpoint,
    pub assoc_handle: Option<String>,
    pub sreg: SregRequest,
    pub session_key: String,
    pub return_to: Option<String>,
    pub realm: Option<String>,
}

impl AuthRequest {
    pub fn add_sreg<S: AsRef<str>>(&mut self, required: &[S], optional: &[S]) -> Result<(), SregError> {
        self.sreg.extend(SregRequest::new(required, optional)?);
        Ok(())
    }

    pub fn is_stateless(&self) -> bool {
        self.assoc_handle.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthStatus {
    Success,
    Failure,
    Cancel,
    SetupNeeded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCause {
    NoPendingRequest,
    ProviderError,
    UnexpectedMode,
    VersionMismatch,
    ReturnToMismatch,
    EndpointMismatch,
    IdentityMismatch,
    UnsignedField,
    BadSignature,
    NonceMissing,
    NonceStale,
    NonceReused,
    CheckAuthRejected,
    CheckAuthUnavailable,
}

impl FailureCause {
    pub fn code(self) -> &'static str {
        match self {
            FailureCause::NoPendingRequest => "no-pending-request",
            FailureCause::ProviderError => "provider-error",
            FailureCause::UnexpectedMode => "unexpected-mode",
            FailureCause::VersionMismatch => "version-mismatch",
            FailureCause::ReturnToMismatch => "return-to-mismatch",
            FailureCause::EndpointMismatch => "endpoint-mismatch",
            FailureCause::IdentityMismatch => "identity-mismatch",
            FailureCause::UnsignedField => "unsigned-field",
            FailureCause::BadSignature => "bad-signature",
            FailureCause::NonceMissing => "nonce-missing",
            FailureCause::NonceStale => "nonce-stale",
            FailureCause::NonceReused => "nonce-reused",
            FailureCause::CheckAuthRejected => "check-authentication-rejected",
            FailureCause::CheckAuthUnavailable => "check-authentication-unavailable",
        }
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthOutcome {
    pub status: AuthStatus,
    pub identity: Option<String>,
    pub sreg: BTreeMap<String, String>,
    pub message: String,
    pub cause: Option<FailureCause>,
}

impl AuthOutcome {
    fn success(identity: String, sreg: BTreeMap<String, String>) -> AuthOutcome {
        let mut message = format!("You have successfully verified {identity} as your identity.");
        if let Some(email) = sreg.get("email").filter(|e| !e.is_empty()) {
            message.push_str(&format!(" You also returned '{email}' as your email."));
        }
        AuthOutcome {
            status: AuthStatus::Success,
            identity: Some(identity),
            sreg,
            message,
            cause: None,
        }
    }

    fn cancel() -> AuthOutcome {
        AuthOutcome {
            status: AuthStatus::Cancel,
            identity: None,
            sreg: BTreeMap::new(),
            message: "Verification cancelled.".into(),
            cause: None,
        }
    }

    fn setup_needed() -> AuthOutcome {
        AuthOutcome {
            status: AuthStatus::SetupNeeded,
            identity: None,
            sreg: BTreeMap::new(),
            message: "The provider needs further interaction to complete the login.".into(),
            cause: None,
        }
    }

    fn failure(cause: FailureCause, detail: impl fmt::Display) -> AuthOutcome {
        AuthOutcome {
            status: AuthStatus::Failure,
            identity: None,
            sreg: BTreeMap::new(),
            message: format!("OpenID authentication failed: {detail}"),
            cause: Some(cause),
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == AuthStatus::Success
    }
}

#[derive(Clone, Debug)]
pub struct ConsumerConfig {
    /// Association pairs to try against 2.0 providers, best first.
    pub preferred: Vec<(AssocType, SessionType)>,
    pub dh_params: DhParams,
    /// Never associate; verify every assertion with the provider.
    pub stateless: bool,
    /// How long a begun login stays completable.
    pub pending_ttl: Duration,
    /// Provider hosts logins may use. `None` allows any.
    pub allowed_op_hosts: Option<Vec<String>>,
}

impl Default for ConsumerConfig {
    fn default() -> Self {
        ConsumerConfig {
            preferred: SUPPORTED.to_vec(),
            dh_params: DhParams::default(),
            stateless: false,
            pending_ttl: Duration::minutes(10),
            allowed_op_hosts: None,
        }
    }
}

#[derive(Debug)]
struct PendingEntry {
    request: AuthRequest,
    recorded_at: DateTime<Utc>,
}

pub fn new_session_key() -> String {
    let mut raw = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut raw);
    URL_SAFE_NO_PAD.encode(raw)
}

pub struct Consumer {
    fetcher: Arc<dyn Fetcher>,
    associations: Arc<AssociationStore>,
    nonces: Arc<NonceStore>,
    pending: Mutex<HashMap<String, PendingEntry>>,
    config: ConsumerConfig,
}

impl fmt::Debug for Consumer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Consumer")
            .field("config", &self.config)
            .field("pending", &self.pending.lock().len())
            .finish_non_exhaustive()
    }
}

impl Consumer {
    pub fn new(
        fetcher: Arc<dyn Fetcher>,
        associations: Arc<AssociationStore>,
        nonces: Arc<NonceStore>,
        config: ConsumerConfig,
    ) -> Consumer {
        Consumer {
            fetcher,
            associations,
            nonces,
            pending: Mutex::new(HashMap::new()),
            config,
        }
    }

    pub fn associations(&self) -> &Arc<AssociationStore> {
        &self.associations
    }

    pub fn nonces(&self) -> &Arc<NonceStore> {
        &self.nonces
    }

    fn allowed(&self, ep: &OpEndpoint) -> bool {
        let Some(hosts) = &self.config.allowed_op_hosts else {
            return true;
        };
        url::Url::parse(&ep.endpoint_url)
            .ok()
            .and_then(|u| u.host_str().map(str::to_ascii_lowercase))
            .is_some_and(|h| hosts.iter().any(|a| a.eq_ignore_ascii_case(&h)))
    }

    /// Discovers the provider for `raw`, ensures an association where the
    /// provider allows one, and records the request under `session_key`.
    pub async fn begin(&self, raw: &str, session_key: &str, now: DateTime<Utc>) -> Result<AuthRequest, BeginError> {
        if session_key.len() < 16 {
            return Err(BeginError::BadSessionKey);
        }
        let claimed_id = match normalize(raw) {
            Ok(id) => id,
            Err(DiscoveryError::Empty) => return Err(BeginError::EmptyIdentifier),
            Err(e) => return Err(BeginError::Discovery(e)),
        };
        let discovered = discover(&claimed_id, self.fetcher.as_ref())
            .await
            .map_err(BeginError::Discovery)?;
        let endpoint = discovered
            .endpoints
            .into_iter()
            .find(|e| self.allowed(e))
            .ok_or_else(|| BeginError::NotAllowed(claimed_id.normalized.clone()))?;

        let assoc_handle = self.ensure_association(&endpoint, now).await.map(|a| a.handle);
        let request = AuthRequest {
            claimed_id,
            endpoint,
            assoc_handle,
            sreg: SregRequest::default(),
            session_key: session_key.to_string(),
            return_to: None,
            realm: None,
        };
        self.record(request.clone(), now);
        Ok(request)
    }

    /// Reuses a live association with the endpoint or negotiates a new one.
    /// `None` means the login will run statelessly.
    pub async fn ensure_association(&self, endpoint: &OpEndpoint, now: DateTime<Utc>) -> Option<Association> {
        if self.config.stateless {
            return None;
        }
        let server = endpoint.endpoint_url.as_str();
        if let Some(a) = self.associations.find_for_server(server, now) {
            if a.expires_in(now) > ASSOC_MIN_REMAINING {
                return Some(a);
            }
        }
        let mut candidates = match endpoint.version {
            ProtocolVersion::V1_1 => vec![(AssocType::HmacSha1, SessionType::DhSha1)],
            ProtocolVersion::V2_0 => self.config.preferred.clone(),
        };
        candidates.truncate(1);
        let mut tried = Vec::new();
        while let Some((assoc_type, session_type)) = candidates.pop() {
            tried.push((assoc_type, session_type));
            match self.associate(endpoint, assoc_type, session_type, now).await {
                Ok(assoc) => {
                    if let Err(e) = self.associations.put_for_server(server, assoc.clone()) {
                        tracing::warn!(error = %e, "could not store association");
                    }
                    return Some(assoc);
                }
                Err(AssociationError::Unsupported {
                    suggested: Some(pair), ..
                }) if self.config.preferred.contains(&pair) && !tried.contains(&pair) => {
                    candidates.push(pair);
                }
                Err(e) => {
                    tracing::info!(endpoint = server, error = %e, "association refused; continuing statelessly");
                    return None;
                }
            }
        }
        None
    }

    async fn associate(
        &self,
        endpoint: &OpEndpoint,
        assoc_type: AssocType,
        session_type: SessionType,
        now: DateTime<Utc>,
    ) -> Result<Association, AssociationError> {
        let (request, pending) = PendingAssociation::start(
            endpoint.version,
            assoc_type,
            session_type,
            self.config.dh_params.clone(),
            &mut rand::thread_rng(),
        );
        let resp = self
            .fetcher
            .fetch(HttpRequest::post_message(&endpoint.endpoint_url, &request))
            .await
            .map_err(|e| AssociationError::Provider(e.to_string()))?;
        let reply = kv_decode(&resp.body)?;
        pending.finish(&reply, now)
    }

    fn record(&self, request: AuthRequest, now: DateTime<Utc>) {
        let ttl = self.config.pending_ttl;
        let mut pending = self.pending.lock();
        pending.retain(|_, e| now - e.recorded_at < ttl);
        pending.insert(
            request.session_key.clone(),
            PendingEntry {
                request,
                recorded_at: now,
            },
        );
    }

    fn pending_for(&self, session_key: &str, now: DateTime<Utc>) -> Option<AuthRequest> {
        let pending = self.pending.lock();
        pending
            .get(session_key)
            .filter(|e| now - e.recorded_at < self.config.pending_ttl)
            .map(|e| e.request.clone())
    }

    /// Builds the checkid_setup redirect and re-records the request with
    /// the return URL it must come back to.
    pub fn redirect_url(
        &self,
        req: &mut AuthRequest,
        realm: &str,
        return_to: &str,
        now: DateTime<Utc>,
    ) -> Result<String, RpError> {
        if !validate_realm(realm, return_to)? {
            return Err(RpError::RealmMismatch {
                realm: realm.to_string(),
                return_to: return_to.to_string(),
            });
        }
        let version = req.endpoint.version;
        let return_to = match version {
            ProtocolVersion::V2_0 => return_to.to_string(),
            ProtocolVersion::V1_1 => {
                let nonce = generate_nonce(now, &mut rand::thread_rng()).to_string();
                append_query(return_to, [(RP_NONCE_PARAM, nonce)])
            }
        };

        let mut msg = Message::for_version(version);
        msg.set("mode", "checkid_setup");
        match version {
            ProtocolVersion::V2_0 => {
                msg.set("claimed_id", req.endpoint.claimed_id.as_str());
                msg.set("identity", req.endpoint.op_local_id());
                msg.set("realm", realm);
            }
            ProtocolVersion::V1_1 => {
                msg.set("identity", req.endpoint.op_local_id());
                msg.set("trust_root", realm);
            }
        }
        msg.set("return_to", return_to.as_str());
        if let Some(handle) = &req.assoc_handle {
            msg.set("assoc_handle", handle.as_str());
        }
        req.sreg.apply(&mut msg);
        let url = indirect_encode(&msg, &req.endpoint.endpoint_url)?;

        req.return_to = Some(return_to);
        req.realm = Some(realm.to_string());
        self.record(req.clone(), now);
        Ok(url)
    }

    /// Verifies the provider's answer delivered to the return URL.
    /// `params` are all query parameters of that request.
    pub async fn complete(&self, params: &[(String, String)], session_key: &str, now: DateTime<Utc>) -> AuthOutcome {
        let Some(req) = self.pending_for(session_key, now) else {
            return AuthOutcome::failure(FailureCause::NoPendingRequest, "no pending authentication request");
        };
        let msg = Message::from_openid_params(params.iter().map(|(k, v)| (k.as_str(), v.clone())));
        match msg.get("mode") {
            Some("cancel") => return AuthOutcome::cancel(),
            Some("setup_needed") => return AuthOutcome::setup_needed(),
            Some("id_res") if msg.get("user_setup_url").is_some() => return AuthOutcome::setup_needed(),
            Some("error") => {
                return AuthOutcome::failure(FailureCause::ProviderError, msg.get("error").unwrap_or("provider error"))
            }
            Some("id_res") => {}
            other => {
                return AuthOutcome::failure(
                    FailureCause::UnexpectedMode,
                    format!("unexpected mode {}", other.unwrap_or("(none)")),
                )
            }
        }
        let ep = &req.endpoint;
        if msg.version() != ep.version {
            return AuthOutcome::failure(FailureCause::VersionMismatch, "response protocol version does not match");
        }
        if req.return_to.is_none() || msg.get("return_to") != req.return_to.as_deref() {
            return AuthOutcome::failure(FailureCause::ReturnToMismatch, "return_to does not match the request");
        }
        if msg.get("identity") != Some(ep.op_local_id()) {
            return AuthOutcome::failure(FailureCause::IdentityMismatch, "asserted identity was not requested");
        }
        let required: &[&str] = match ep.version {
            ProtocolVersion::V2_0 => {
                if msg.get("op_endpoint") != Some(ep.endpoint_url.as_str()) {
                    return AuthOutcome::failure(FailureCause::EndpointMismatch, "assertion from an undiscovered endpoint");
                }
                if msg.get("claimed_id") != Some(ep.claimed_id.as_str()) {
                    return AuthOutcome::failure(FailureCause::IdentityMismatch, "claimed_id was not requested");
                }
                &["op_endpoint", "return_to", "response_nonce", "assoc_handle", "claimed_id", "identity"]
            }
            ProtocolVersion::V1_1 => &["return_to", "identity"],
        };
        let (Some(_), Some(signed)) = (msg.get("sig"), msg.get("signed")) else {
            return AuthOutcome::failure(FailureCause::UnsignedField, "assertion is not signed");
        };
        let signed = SignedFieldList::parse(signed);
        if let Some(missing) = required.iter().find(|f| !signed.contains(f)) {
            return AuthOutcome::failure(FailureCause::UnsignedField, format!("{missing} is not signed"));
        }

        let Some(handle) = msg.get("assoc_handle") else {
            return AuthOutcome::failure(FailureCause::UnsignedField, "missing assoc_handle");
        };
        let association = self.associations.get(handle, now);
        if let Some(assoc) = &association {
            if !matches!(verify_signature(&msg, assoc), Ok(true)) {
                return AuthOutcome::failure(FailureCause::BadSignature, "signature mismatch");
            }
        }

        let nonce = match ep.version {
            ProtocolVersion::V2_0 => msg.get("response_nonce").map(str::to_string),
            ProtocolVersion::V1_1 => req.return_to.as_deref().and_then(rp_nonce_of),
        };
        let Some(nonce) = nonce else {
            return AuthOutcome::failure(FailureCause::NonceMissing, "response carries no nonce");
        };
        let scope = match ep.version {
            ProtocolVersion::V2_0 => ep.endpoint_url.clone(),
            ProtocolVersion::V1_1 => format!("rp:{}", ep.endpoint_url),
        };
        match self.nonces.check_and_store(&scope, &nonce, now) {
            Ok(()) => {}
            Err(ReplayError::Reused) => {
                return AuthOutcome::failure(FailureCause::NonceReused, "response nonce already used")
            }
            Err(e) => return AuthOutcome::failure(FailureCause::NonceStale, e),
        }

        if association.is_none() {
            match check_authentication(&msg, &ep.endpoint_url, self.fetcher.as_ref()).await {
                Ok(check) => {
                    if let Some(h) = &check.invalidate_handle {
                        self.associations.expire(h);
                    }
                    if !check.is_valid {
                        return AuthOutcome::failure(FailureCause::CheckAuthRejected, "provider rejected the assertion");
                    }
                }
                Err(e) => return AuthOutcome::failure(FailureCause::CheckAuthUnavailable, e),
            }
        } else if let Some(h) = msg.get("invalidate_handle") {
            // Only act on this once the message is known to be authentic.
            self.associations.expire(h);
        }

        AuthOutcome::success(ep.claimed_id.clone(), sreg::extract_signed(&msg))
    }
}

fn rp_nonce_of(return_to: &str) -> Option<String> {
    let query = url::Url::parse(return_to).ok()?.query()?.to_string();
    parse_query(&query)
        .into_iter()
        .find(|(k, _)| k == RP_NONCE_PARAM)
        .map(|(_, v)| v)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckAuthResponse {
    pub is_valid: bool,
    pub invalidate_handle: Option<String>,
}

#[derive(Debug, Error)]
pub enum CheckAuthError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("provider sent a malformed reply: {0}")]
    Malformed(#[from] MessageError),
}

/// Asks the provider whether it issued `assertion` (stateless mode).
pub async fn check_authentication(
    assertion: &Message,
    endpoint: &str,
    fetcher: &dyn Fetcher,
) -> Result<CheckAuthResponse, CheckAuthError> {
    let mut msg = assertion.clone();
    msg.set("mode", "check_authentication");
    let resp = fetcher
        .fetch(HttpRequest::post_message(endpoint, &msg))
        .await
        .map_err(|e| CheckAuthError::Unreachable(e.0))?;
    if resp.status != 200 {
        return Ok(CheckAuthResponse {
            is_valid: false,
            invalidate_handle: None,
        });
    }
    let reply = kv_decode(&resp.body)?;
    Ok(CheckAuthResponse {
        is_valid: reply.get("is_valid") == Some("true"),
        invalidate_handle: reply.get("invalidate_handle").map(str::to_string),
    })
}
