//! Service configuration: one TOML file, then `ROLEGATE_*` environment
//! overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {key}: {value}")]
    Invalid { key: &'static str, value: String },
    #[error("no server key configured (set server_key or ROLEGATE_SERVER_KEY)")]
    MissingServerKey,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Externally visible base URL; realm and return_to derive from it.
    pub public_url: Option<String>,
    /// Store directory. In-memory when absent.
    pub store_dir: Option<PathBuf>,
    /// Base64 (standard or URL-safe) 32-byte session key.
    pub server_key: Option<String>,
    /// Provider hosts logins may use. Any provider when absent.
    pub op_allowlist: Option<Vec<String>>,
    pub clock_skew_secs: i64,
    pub staleness_secs: i64,
    pub session_ttl_secs: i64,
    /// Offset from UTC, in minutes, of the civil day used for role dates.
    pub utc_offset_minutes: i32,
    /// Pins "today" for role operations. Meant for demos and replaying
    /// historical scenarios.
    pub fixed_today: Option<NaiveDate>,
    /// Built admin console bundle served under `/console`.
    pub console_dir: Option<PathBuf>,
    /// Name of the first administrator created on an empty store.
    pub admin_name: String,
    /// Mounts the test identity provider at `/op`.
    pub op_enabled: bool,
    pub op_password_iterations: u32,
    /// Accounts created on the test provider at startup when missing.
    pub op_accounts: Vec<OpAccountSeed>,
    /// OpenID identity bound to the administrator at startup. A value
    /// starting with `/` is taken relative to the public URL, so
    /// `/op/id/root` names the local test provider's `root` account.
    pub admin_identity: Option<String>,
    /// Mark cookies `Secure`. Enable behind a TLS terminator.
    pub secure_cookies: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpAccountSeed {
    pub username: String,
    pub password: String,
    pub email: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8081".parse().expect("literal address"),
            public_url: None,
            store_dir: None,
            server_key: None,
            op_allowlist: None,
            clock_skew_secs: 300,
            staleness_secs: 60,
            session_ttl_secs: 3600,
            utc_offset_minutes: 0,
            fixed_today: None,
            console_dir: None,
            admin_name: "root".into(),
            op_enabled: false,
            op_password_iterations: rolegate_core::openid::op::DEFAULT_ITERATIONS,
            op_accounts: Vec::new(),
            admin_identity: None,
            secure_cookies: false,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<ServiceConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<ServiceConfig, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                ServiceConfig::from_toml(&text)?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &'static str, v: String) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError::Invalid { key, value: v })
        }
        if let Some(v) = get("ROLEGATE_LISTEN") {
            self.listen = parse("ROLEGATE_LISTEN", v)?;
        }
        if let Some(v) = get("ROLEGATE_PUBLIC_URL") {
            self.public_url = Some(v);
        }
        if let Some(v) = get("ROLEGATE_STORE") {
            self.store_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("ROLEGATE_SERVER_KEY") {
            self.server_key = Some(v);
        }
        if let Some(v) = get("ROLEGATE_OP_ALLOWLIST") {
            self.op_allowlist = Some(v.split(',').map(|h| h.trim().to_string()).filter(|h| !h.is_empty()).collect());
        }
        if let Some(v) = get("ROLEGATE_CLOCK_SKEW") {
            self.clock_skew_secs = parse("ROLEGATE_CLOCK_SKEW", v)?;
        }
        if let Some(v) = get("ROLEGATE_STALENESS") {
            self.staleness_secs = parse("ROLEGATE_STALENESS", v)?;
        }
        if let Some(v) = get("ROLEGATE_SESSION_TTL") {
            self.session_ttl_secs = parse("ROLEGATE_SESSION_TTL", v)?;
        }
        if let Some(v) = get("ROLEGATE_UTC_OFFSET_MINUTES") {
            self.utc_offset_minutes = parse("ROLEGATE_UTC_OFFSET_MINUTES", v)?;
        }
        if let Some(v) = get("ROLEGATE_TODAY") {
            self.fixed_today = Some(parse("ROLEGATE_TODAY", v)?);
        }
        if let Some(v) = get("ROLEGATE_CONSOLE_DIR") {
            self.console_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("ROLEGATE_OP_ENABLED") {
            self.op_enabled = parse("ROLEGATE_OP_ENABLED", v)?;
        }
        Ok(())
    }

    /// The configured session key, required to boot.
    pub fn server_key(&self) -> Result<&str, ConfigError> {
        self.server_key.as_deref().filter(|k| !k.trim().is_empty()).ok_or(ConfigError::MissingServerKey)
    }

    /// The public base URL without a trailing slash.
    pub fn base_url(&self) -> String {
        self.public_url
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.listen))
            .trim_end_matches('/')
            .to_string()
    }

    pub fn admin_identity_url(&self) -> Option<String> {
        let id = self.admin_identity.as_deref()?;
        Some(if id.starts_with('/') {
            format!("{}{id}", self.base_url())
        } else {
            id.to_string()
        })
    }

    pub fn realm(&self) -> String {
        format!("{}/", self.base_url())
    }

    pub fn return_to(&self) -> String {
        format!("{}/finish_auth", self.base_url())
    }
}
