//! A small identity provider: enough to run the relying party end to end.
//!
//! Assertions for relying parties that hold an association are signed
//! with it. Everything else is signed with a fresh private association
//! that only this provider knows, and which `check_authentication`
//! accepts exactly once.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use super::association::{answer_associate, error_reply, new_handle, AssociationStore, DEFAULT_LIFETIME};
use super::discovery::{TYPE_SIGNON_1_1, TYPE_SIGNON_2_0};
use super::message::{
    append_query, constant_time_eq, is_absolute_http, kv_decode, kv_encode, parse_query, sign_message,
    verify_signature, AssocType, Association, Message, ProtocolVersion, SignedFieldList,
};
use super::nonce::generate_nonce;
use super::realm::validate_realm;
use super::sreg::{self, SregRequest};
use crate::store::{RecordKind, Store, StoreError};

pub const PASSWORD_ALGORITHM: &str = "pbkdf2-hmac-sha256";
pub const DEFAULT_ITERATIONS: u32 = 1 << 15;
const SALT_LEN: usize = 16;
const DIGEST_LEN: usize = 32;
/// Private associations only need to outlive the round trip to the RP.
const PRIVATE_LIFETIME: u64 = 300;

/// A salted, stretched password digest.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordRecord {
    pub algorithm: String,
    pub salt: String,
    pub iterations: u32,
    pub digest: String,
}

impl fmt::Debug for PasswordRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PasswordRecord")
            .field("algorithm", &self.algorithm)
            .field("iterations", &self.iterations)
            .finish_non_exhaustive()
    }
}

impl PasswordRecord {
    pub fn create(password: &str, iterations: u32) -> PasswordRecord {
        let mut salt = [0u8; SALT_LEN];
        rand::thread_rng().fill_bytes(&mut salt);
        let digest = derive(password, &salt, iterations);
        PasswordRecord {
            algorithm: PASSWORD_ALGORITHM.into(),
            salt: B64.encode(salt),
            iterations,
            digest: B64.encode(digest),
        }
    }

    pub fn verify(&self, password: &str) -> bool {
        if self.algorithm != PASSWORD_ALGORITHM {
            return false;
        }
        let (Ok(salt), Ok(expected)) = (B64.decode(&self.salt), B64.decode(&self.digest)) else {
            return false;
        };
        constant_time_eq(&derive(password, &salt, self.iterations), &expected)
    }
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> [u8; DIGEST_LEN] {
    pbkdf2::pbkdf2_hmac_array::<Sha256, DIGEST_LEN>(password.as_bytes(), salt, iterations.max(1))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpAccount {
    pub username: String,
    pub password: PasswordRecord,
    pub identity_url: String,
    pub email: Option<String>,
    pub fullname: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub username: String,
    pub identity_url: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    ApproveOnce,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalDecision {
    pub realm: String,
    pub decision: Decision,
    pub decided_at: DateTime<Utc>,
}

/// Decides whether the signed-in user approves a realm. Implementations
/// receive the realm exactly as it will be asserted to.
pub trait ApprovalHook {
    fn decide(&self, realm: &str, request: &CheckidRequest) -> Decision;
}

impl<F: Fn(&str, &CheckidRequest) -> Decision> ApprovalHook for F {
    fn decide(&self, realm: &str, request: &CheckidRequest) -> Decision {
        self(realm, request)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpError {
    #[error("unknown or duplicate account `{0}`")]
    Account(String),
    #[error("not a checkid_setup request")]
    NotCheckid,
    #[error("missing or invalid return_to")]
    BadReturnTo,
    #[error("return_to `{return_to}` is not within realm `{realm}`")]
    RealmMismatch { realm: String, return_to: String },
    #[error("invalid realm `{0}`")]
    BadRealm(String),
    #[error("missing identity")]
    MissingIdentity,
    #[error("user must sign in first")]
    NotAuthenticated,
    #[error("signed-in user cannot assert `{0}`")]
    IdentityMismatch(String),
    #[error("store error: {0}")]
    Store(String),
}

impl From<StoreError> for OpError {
    fn from(e: StoreError) -> Self {
        OpError::Store(e.to_string())
    }
}

/// A validated checkid_setup request awaiting the user's decision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckidRequest {
    pub version: ProtocolVersion,
    pub realm: String,
    pub return_to: String,
    pub identity: String,
    pub claimed_id: Option<String>,
    pub assoc_handle: Option<String>,
    pub sreg: SregRequest,
}

/// A direct-message reply: HTTP status plus key-value body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectResponse {
    pub status: u16,
    pub body: String,
}

impl DirectResponse {
    fn ok(msg: &Message) -> DirectResponse {
        DirectResponse {
            status: 200,
            body: kv_encode(msg).unwrap_or_default(),
        }
    }

    fn error(msg: &Message) -> DirectResponse {
        DirectResponse {
            status: 400,
            body: kv_encode(msg).unwrap_or_default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProviderConfig {
    /// Absolute URL of the server endpoint.
    pub endpoint_url: String,
    /// Identity URLs are `<identity_base>/<username>`.
    pub identity_base: String,
    /// XRDS documents are `<xrds_base>/<username>`.
    pub xrds_base: String,
    pub assoc_lifetime: u64,
    pub password_iterations: u32,
}

impl ProviderConfig {
    /// Lays the endpoints out under `base` (`/server`, `/id/`, `/xrds/`).
    pub fn under(base: &str) -> ProviderConfig {
        let base = base.trim_end_matches('/');
        ProviderConfig {
            endpoint_url: format!("{base}/server"),
            identity_base: format!("{base}/id"),
            xrds_base: format!("{base}/xrds"),
            assoc_lifetime: DEFAULT_LIFETIME,
            password_iterations: DEFAULT_ITERATIONS,
        }
    }
}

pub struct Provider {
    config: ProviderConfig,
    accounts: RwLock<BTreeMap<String, OpAccount>>,
    shared: AssociationStore,
    private: AssociationStore,
    approvals: Mutex<Vec<ApprovalDecision>>,
    dummy: PasswordRecord,
    store: Option<Arc<Store>>,
}

impl fmt::Debug for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Provider")
            .field("endpoint", &self.config.endpoint_url)
            .field("accounts", &self.accounts.read().len())
            .finish_non_exhaustive()
    }
}

impl Provider {
    pub fn new(config: ProviderConfig) -> Provider {
        let dummy = PasswordRecord::create("", config.password_iterations);
        Provider {
            config,
            accounts: RwLock::new(BTreeMap::new()),
            shared: AssociationStore::new(),
            private: AssociationStore::new(),
            approvals: Mutex::new(Vec::new()),
            dummy,
            store: None,
        }
    }

    /// Loads and persists accounts through `store`.
    pub fn with_store(config: ProviderConfig, store: Arc<Store>) -> Result<Provider, StoreError> {
        let mut p = Provider::new(config);
        let accounts = store.scan_json::<OpAccount>(RecordKind::OpAccount)?;
        *p.accounts.get_mut() = accounts.into_iter().map(|a| (a.username.clone(), a)).collect();
        p.store = Some(store);
        Ok(p)
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn endpoint_url(&self) -> &str {
        &self.config.endpoint_url
    }

    pub fn identity_url(&self, username: &str) -> String {
        format!("{}/{}", self.config.identity_base, username)
    }

    pub fn add_account(&self, username: &str, password: &str, email: Option<&str>) -> Result<OpAccount, OpError> {
        let valid = !username.is_empty()
            && username
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
        if !valid {
            return Err(OpError::Account(username.to_string()));
        }
        let mut accounts = self.accounts.write();
        if accounts.contains_key(username) {
            return Err(OpError::Account(username.to_string()));
        }
        let account = OpAccount {
            username: username.to_string(),
            password: PasswordRecord::create(password, self.config.password_iterations),
            identity_url: self.identity_url(username),
            email: email.map(str::to_string),
            fullname: None,
        };
        if let Some(store) = &self.store {
            store.put_json(RecordKind::OpAccount, username, &account)?;
        }
        accounts.insert(username.to_string(), account.clone());
        Ok(account)
    }

    pub fn account(&self, username: &str) -> Option<OpAccount> {
        self.accounts.read().get(username).cloned()
    }

    /// Checks credentials. Unknown users cost the same work as a wrong
    /// password and produce the same refusal.
    pub fn authenticate_user(&self, username: &str, password: &str) -> Option<Principal> {
        let account = self.account(username);
        let record = account.as_ref().map(|a| &a.password).unwrap_or(&self.dummy);
        let ok = record.verify(password);
        match account {
            Some(a) if ok => Some(Principal {
                username: a.username,
                identity_url: a.identity_url,
            }),
            _ => None,
        }
    }

    pub fn approvals(&self) -> Vec<ApprovalDecision> {
        self.approvals.lock().clone()
    }

    /// Parses a direct request body, form-encoded or key-value.
    pub fn parse_direct(body: &[u8]) -> Message {
        let text = String::from_utf8_lossy(body);
        let first = text.split(['&', '\n']).next().unwrap_or("");
        let is_form = match (first.find('='), first.find(':')) {
            (Some(eq), Some(colon)) => eq < colon,
            (Some(_), None) => true,
            _ => false,
        };
        if is_form {
            Message::from_openid_params(parse_query(&text))
        } else {
            kv_decode(body).unwrap_or_default()
        }
    }

    /// Dispatches a direct (POST) message by mode.
    pub fn handle_direct(&self, msg: &Message, now: DateTime<Utc>) -> DirectResponse {
        match msg.get("mode") {
            Some("associate") => self.handle_associate(msg, now),
            Some("check_authentication") => self.handle_check_authentication(msg, now),
            _ => DirectResponse::error(&error_reply(msg.version(), "unsupported mode")),
        }
    }

    pub fn handle_associate(&self, msg: &Message, now: DateTime<Utc>) -> DirectResponse {
        match answer_associate(msg, now, self.config.assoc_lifetime, &mut rand::thread_rng()) {
            Ok((reply, assoc)) => {
                if let Err(e) = self.shared.put(assoc) {
                    tracing::warn!(error = %e, "failed to store association");
                    return DirectResponse::error(&error_reply(msg.version(), "internal error"));
                }
                DirectResponse::ok(&reply)
            }
            Err(reply) => DirectResponse::error(&reply),
        }
    }

    /// Validates an incoming checkid_setup message.
    pub fn prepare_checkid(&self, msg: &Message) -> Result<CheckidRequest, OpError> {
        if msg.get("mode") != Some("checkid_setup") {
            return Err(OpError::NotCheckid);
        }
        let version = msg.version();
        let return_to = msg
            .get("return_to")
            .filter(|r| is_absolute_http(r))
            .ok_or(OpError::BadReturnTo)?
            .to_string();
        let realm_key = match version {
            ProtocolVersion::V2_0 => "realm",
            ProtocolVersion::V1_1 => "trust_root",
        };
        let realm = msg.get(realm_key).unwrap_or(&return_to).to_string();
        match validate_realm(&realm, &return_to) {
            Ok(true) => {}
            Ok(false) => return Err(OpError::RealmMismatch { realm, return_to }),
            Err(_) => return Err(OpError::BadRealm(realm)),
        }
        let identity = msg.get("identity").ok_or(OpError::MissingIdentity)?.to_string();
        Ok(CheckidRequest {
            version,
            realm,
            return_to,
            identity,
            claimed_id: msg.get("claimed_id").map(str::to_string),
            assoc_handle: msg.get("assoc_handle").map(str::to_string),
            sreg: SregRequest::from_message(msg),
        })
    }

    /// Runs a checkid_setup to its redirect: the hook sees the realm, its
    /// decision is logged, then an assertion or a cancel is produced.
    pub fn handle_checkid_setup(
        &self,
        msg: &Message,
        principal: Option<&Principal>,
        hook: &dyn ApprovalHook,
        now: DateTime<Utc>,
    ) -> Result<String, OpError> {
        let req = self.prepare_checkid(msg)?;
        if principal.is_none() {
            return Err(OpError::NotAuthenticated);
        }
        let decision = hook.decide(&req.realm, &req);
        self.respond_checkid(&req, principal, decision, now)
    }

    /// Records the decision, then returns the redirect URL back to the RP.
    pub fn respond_checkid(
        &self,
        req: &CheckidRequest,
        principal: Option<&Principal>,
        decision: Decision,
        now: DateTime<Utc>,
    ) -> Result<String, OpError> {
        self.approvals.lock().push(ApprovalDecision {
            realm: req.realm.clone(),
            decision,
            decided_at: now,
        });
        if decision == Decision::Deny {
            let mut cancel = Message::for_version(req.version);
            cancel.set("mode", "cancel");
            return Ok(append_query(&req.return_to, cancel.to_openid_params()));
        }
        let principal = principal.ok_or(OpError::NotAuthenticated)?;
        if req.identity != principal.identity_url {
            return Err(OpError::IdentityMismatch(req.identity.clone()));
        }
        let assertion = self.positive_assertion(req, principal, now)?;
        Ok(append_query(&req.return_to, assertion.to_openid_params()))
    }

    fn positive_assertion(&self, req: &CheckidRequest, principal: &Principal, now: DateTime<Utc>) -> Result<Message, OpError> {
        let mut msg = Message::for_version(req.version);
        msg.set("mode", "id_res");
        let mut signed: Vec<String> = Vec::new();
        match req.version {
            ProtocolVersion::V2_0 => {
                msg.set("op_endpoint", self.config.endpoint_url.as_str());
                msg.set("claimed_id", req.claimed_id.as_deref().unwrap_or(&req.identity));
                msg.set("identity", req.identity.as_str());
                msg.set("return_to", req.return_to.as_str());
                msg.set("response_nonce", generate_nonce(now, &mut rand::thread_rng()).to_string());
                signed.extend(
                    ["op_endpoint", "claimed_id", "identity", "return_to", "response_nonce", "assoc_handle"]
                        .map(String::from),
                );
            }
            ProtocolVersion::V1_1 => {
                msg.set("identity", req.identity.as_str());
                msg.set("return_to", req.return_to.as_str());
                signed.extend(["mode", "identity", "return_to"].map(String::from));
            }
        }

        let account = self.account(&principal.username);
        let mut values = BTreeMap::new();
        for field in req.sreg.required.iter().chain(&req.sreg.optional) {
            let value = match (field.as_str(), &account) {
                ("email", Some(a)) => a.email.clone(),
                ("fullname", Some(a)) => a.fullname.clone(),
                ("nickname", _) => Some(principal.username.clone()),
                _ => None,
            };
            if let Some(v) = value {
                values.insert(field.clone(), v);
            }
        }
        signed.extend(sreg::add_response(&mut msg, &values));

        let live = req.assoc_handle.as_deref().and_then(|h| self.shared.get(h, now));
        let assoc = match live {
            Some(a) => a,
            None => {
                if let Some(stale) = &req.assoc_handle {
                    msg.set("invalidate_handle", stale.as_str());
                }
                self.new_private_association(req.version, now)?
            }
        };
        sign_message(&mut msg, &assoc, &SignedFieldList::new(signed)).map_err(|e| OpError::Store(e.to_string()))?;
        Ok(msg)
    }

    fn new_private_association(&self, version: ProtocolVersion, now: DateTime<Utc>) -> Result<Association, OpError> {
        let assoc_type = match version {
            ProtocolVersion::V2_0 => AssocType::HmacSha256,
            ProtocolVersion::V1_1 => AssocType::HmacSha1,
        };
        let mut rng = rand::thread_rng();
        let mut key = vec![0u8; assoc_type.key_len()];
        rng.fill_bytes(&mut key);
        let assoc = Association::new(new_handle(&mut rng), key, assoc_type, now, PRIVATE_LIFETIME)
            .expect("key length matches type");
        self.private.put(assoc.clone())?;
        Ok(assoc)
    }

    /// Verifies an assertion echoed back by a stateless RP. Each private
    /// handle verifies at most once.
    pub fn handle_check_authentication(&self, msg: &Message, now: DateTime<Utc>) -> DirectResponse {
        let mut reply = Message::for_version(msg.version());
        let valid = msg
            .get("assoc_handle")
            .and_then(|h| self.private.get(h, now))
            .is_some_and(|assoc| {
                let mut original = msg.clone();
                original.set("mode", "id_res");
                // Expire first: of two concurrent checks only one may win.
                self.private.expire(&assoc.handle) && matches!(verify_signature(&original, &assoc), Ok(true))
            });
        reply.set("is_valid", if valid { "true" } else { "false" });
        if let Some(h) = msg.get("invalidate_handle") {
            if self.shared.get(h, now).is_none() {
                reply.set("invalidate_handle", h);
            }
        }
        DirectResponse::ok(&reply)
    }

    /// HTML identity page. With `yadis` the page also points at the XRDS
    /// document; without it only the `<link>` tags are offered.
    pub fn identity_html(&self, username: &str, yadis: bool) -> Option<String> {
        let account = self.account(username)?;
        let ep = html_escape(&self.config.endpoint_url);
        let id = html_escape(&account.identity_url);
        let meta = if yadis {
            format!(
                "\n<meta http-equiv=\"X-XRDS-Location\" content=\"{}\">",
                html_escape(&self.xrds_url(username))
            )
        } else {
            String::new()
        };
        Some(format!(
            "<!DOCTYPE html>\n<html><head><title>{user}</title>{meta}\n\
             <link rel=\"openid2.provider\" href=\"{ep}\">\n\
             <link rel=\"openid2.local_id\" href=\"{id}\">\n\
             <link rel=\"openid.server\" href=\"{ep}\">\n\
             <link rel=\"openid.delegate\" href=\"{id}\">\n\
             </head><body><p>OpenID identity of {user}.</p></body></html>\n",
            user = html_escape(username),
        ))
    }

    pub fn xrds_url(&self, username: &str) -> String {
        format!("{}/{}", self.config.xrds_base, username)
    }

    pub fn identity_xrds(&self, username: &str) -> Option<String> {
        let account = self.account(username)?;
        let ep = html_escape(&self.config.endpoint_url);
        let id = html_escape(&account.identity_url);
        Some(format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
             <xrds:XRDS xmlns:xrds=\"xri://$xrds\" xmlns=\"xri://$xrd*($v*2.0)\" xmlns:openid=\"http://openid.net/xmlns/1.0\">\n\
             <XRD>\n\
             <Service priority=\"0\"><Type>{TYPE_SIGNON_2_0}</Type><URI>{ep}</URI><LocalID>{id}</LocalID></Service>\n\
             <Service priority=\"1\"><Type>{TYPE_SIGNON_1_1}</Type><URI>{ep}</URI><openid:Delegate>{id}</openid:Delegate></Service>\n\
             </XRD>\n</xrds:XRDS>\n"
        ))
    }
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}
