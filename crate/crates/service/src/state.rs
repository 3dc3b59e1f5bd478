use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, Utc};
use parking_lot::Mutex;
use rolegate_core::fixture::{ensure_openid_role, ensure_privilege};
use rolegate_core::openid::association::AssociationStore;
use rolegate_core::openid::fetch::Fetcher;
use rolegate_core::openid::nonce::NonceStore;
use rolegate_core::openid::op::{Provider, ProviderConfig};
use rolegate_core::openid::rp::{new_session_key, Consumer, ConsumerConfig};
use rolegate_core::rbac::{Rbac, RbacError, RoleId, UserId, ADMIN_ROLE};
use rolegate_core::store::{Store, StoreError};
use thiserror::Error;

use crate::clock::{Calendar, Clock, SystemClock};
use crate::config::{ConfigError, ServiceConfig};
use crate::fetcher::ReqwestFetcher;
use crate::identity::{BindingError, BindingStore, IdentityBinding};
use crate::op_routes::OpFlow;
use crate::routes::GATEWAY_PRIVILEGES;
use crate::session::{KeyError, SessionCodec, SessionToken};
use crate::web::CookiePolicy;

#[derive(Debug, Error)]
pub enum BootError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rbac(#[from] RbacError),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error("route {path} requires unregistered privilege `{privilege}`")]
    UnknownPrivilege { path: String, privilege: String },
    #[error("invalid utc offset {0} minutes")]
    Offset(i32),
    #[error("test provider account `{0}` could not be created")]
    OpAccount(String),
    #[error("cannot listen on {addr}: {source}")]
    Listen {
        addr: std::net::SocketAddr,
        source: std::io::Error,
    },
}

pub type AppState = Arc<App>;

/// Everything a request handler can reach.
pub struct App {
    pub config: ServiceConfig,
    pub store: Arc<Store>,
    pub rbac: Arc<Rbac>,
    pub bindings: BindingStore,
    pub consumer: Consumer,
    pub provider: Option<Provider>,
    pub op_flow: OpFlow,
    pub codec: SessionCodec,
    pub clock: Arc<dyn Clock>,
    pub calendar: Calendar,
    pub cookies: CookiePolicy,
    /// Sessions ended server-side, with their expiry.
    ended: Mutex<HashMap<String, DateTime<Utc>>>,
}

/// Options for [`App::build`] beyond the config file.
#[derive(Default)]
pub struct AppOptions {
    pub clock: Option<Arc<dyn Clock>>,
    pub fetcher: Option<Arc<dyn Fetcher>>,
    /// Use this store instead of opening `store_dir`.
    pub store: Option<Arc<Store>>,
}

impl App {
    pub fn build(config: ServiceConfig, opts: AppOptions) -> Result<App, BootError> {
        let codec = SessionCodec::from_base64(config.server_key()?)?;
        let offset = FixedOffset::east_opt(config.utc_offset_minutes * 60).ok_or(BootError::Offset(config.utc_offset_minutes))?;
        let store = match opts.store {
            Some(s) => s,
            None => match &config.store_dir {
                Some(dir) => Arc::new(Store::open(dir)?),
                None => Arc::new(Store::in_memory()),
            },
        };

        let rbac = Arc::new(Rbac::with_store(store.clone())?);
        if rbac.is_empty() {
            let admin = rbac.bootstrap(&config.admin_name)?;
            tracing::info!(user = %admin.user_id, name = %admin.user_name, "bootstrapped administrator");
        }
        let admin = administrator(&rbac);
        ensure_openid_role(&rbac, admin)?;
        for p in GATEWAY_PRIVILEGES.iter() {
            let kept = ensure_privilege(&rbac, p.to_privilege())?;
            if kept.granted_to.is_empty() {
                tracing::warn!(privilege = %kept.id, "privilege is granted to no registered role");
            }
        }

        let bindings = BindingStore::open(store.clone())?;
        if let Some(identity) = config.admin_identity_url() {
            if bindings.get(&identity).is_none() {
                bindings.bind(&rbac, &identity, admin)?;
            }
        }

        let fetcher = opts
            .fetcher
            .unwrap_or_else(|| Arc::new(ReqwestFetcher::new(StdDuration::from_secs(10))));
        let skew = Duration::seconds(config.clock_skew_secs);
        let consumer = Consumer::new(
            fetcher,
            Arc::new(AssociationStore::with_store(store.clone())?),
            Arc::new(NonceStore::new(skew, skew * 2)),
            ConsumerConfig {
                allowed_op_hosts: config.op_allowlist.clone(),
                ..ConsumerConfig::default()
            },
        );

        let provider = if config.op_enabled {
            let mut pc = ProviderConfig::under(&format!("{}/op", config.base_url()));
            pc.password_iterations = config.op_password_iterations;
            let provider = Provider::with_store(pc, store.clone())?;
            for seed in &config.op_accounts {
                if provider.account(&seed.username).is_none() {
                    provider
                        .add_account(&seed.username, &seed.password, seed.email.as_deref())
                        .map_err(|_| BootError::OpAccount(seed.username.clone()))?;
                }
            }
            Some(provider)
        } else {
            None
        };

        Ok(App {
            calendar: Calendar {
                offset,
                fixed_today: config.fixed_today,
            },
            cookies: CookiePolicy {
                secure: config.secure_cookies,
            },
            clock: opts.clock.unwrap_or_else(|| Arc::new(SystemClock)),
            op_flow: OpFlow::default(),
            config,
            store,
            rbac,
            bindings,
            consumer,
            provider,
            codec,
            ended: Mutex::new(HashMap::new()),
        })
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn today(&self) -> NaiveDate {
        self.calendar.today(self.now())
    }

    fn live_roles(&self, user: UserId, auto_roles: &BTreeSet<RoleId>, at: NaiveDate) -> Option<BTreeSet<RoleId>> {
        let mut roles = self.rbac.resolve_roles(user, at).ok()?;
        roles.extend(auto_roles.iter().cloned());
        Some(roles)
    }

    /// A fresh session for a verified binding.
    pub fn start_session(&self, binding: &IdentityBinding) -> Option<(SessionToken, String)> {
        let now = self.now();
        let roles = self.live_roles(binding.user_id, &binding.auto_roles, self.calendar.today(now))?;
        let token = SessionToken {
            session_id: new_session_key(),
            user_id: binding.user_id,
            roles,
            identity: Some(binding.openid_identity.clone()),
            groups: binding.groups.clone(),
            issued_at: now,
            expires_at: now + Duration::seconds(self.config.session_ttl_secs),
            resolved_at: now,
        };
        let cookie = self.codec.mint(&token);
        Some((token, cookie))
    }

    /// The session carried by `cookie`, if it authenticates and has not
    /// been ended.
    pub fn read_session(&self, cookie: &str) -> Option<SessionToken> {
        let token = self.codec.read(cookie, self.now())?;
        (!self.ended.lock().contains_key(&token.session_id)).then_some(token)
    }

    /// Invalidates every cookie of `token`'s session, including copies the
    /// client kept.
    pub fn end_session(&self, token: &SessionToken) {
        let now = self.now();
        let mut ended = self.ended.lock();
        ended.retain(|_, expires| *expires > now);
        ended.insert(token.session_id.clone(), token.expires_at);
    }

    /// Re-resolves the role snapshot once it is older than the staleness
    /// bound. Returns the token to use and, when refreshed, its new cookie.
    /// `None` means the session no longer maps to a live user or binding.
    pub fn refresh_if_stale(&self, token: SessionToken) -> Option<(SessionToken, Option<String>)> {
        let now = self.now();
        if now - token.resolved_at < Duration::seconds(self.config.staleness_secs) {
            return Some((token, None));
        }
        let auto_roles = match &token.identity {
            Some(identity) => {
                let binding = self.bindings.get(identity).filter(|b| b.user_id == token.user_id)?;
                binding.auto_roles
            }
            None => BTreeSet::new(),
        };
        let roles = self.live_roles(token.user_id, &auto_roles, self.calendar.today(now))?;
        let refreshed = SessionToken {
            roles,
            resolved_at: now,
            ..token
        };
        let cookie = self.codec.mint(&refreshed);
        Some((refreshed, Some(cookie)))
    }

    pub fn session_max_age(&self, token: &SessionToken) -> i64 {
        (token.expires_at - self.now()).num_seconds().max(0)
    }
}

/// Owner of the administrator role, else the first user.
fn administrator(rbac: &Rbac) -> UserId {
    RoleId::new(ADMIN_ROLE)
        .ok()
        .and_then(|id| rbac.role(&id))
        .map(|r| r.owner)
        .or_else(|| rbac.users().first().map(|u| u.user_id))
        .unwrap_or(UserId(1))
}
