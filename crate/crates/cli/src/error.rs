use rolegate_core::fixture::FixtureError;
use rolegate_core::rbac::RbacError;
use rolegate_core::store::StoreError;
use rolegate_service::config::ConfigError;
use rolegate_service::identity::BindingError;
use rolegate_service::BootError;
use thiserror::Error;

pub mod exit {
    pub const OK: i32 = 0;
    /// clap's own code for bad arguments.
    pub const USAGE: i32 = 2;
    pub const NOT_FOUND: i32 = 3;
    pub const REFUSED: i32 = 4;
    pub const INVALID: i32 = 5;
    pub const STORE: i32 = 6;
    pub const CONFIG: i32 = 7;
    pub const CONNECTION: i32 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Rbac(#[from] RbacError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error("unknown role `{0}`")]
    UnknownRoleName(String),
    #[error("no store configured (pass --store or set store_dir)")]
    NoStore,
    #[error("store already holds data; seed needs an empty store")]
    NotEmpty,
    #[error("invalid {what}: {value}")]
    Invalid { what: &'static str, value: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("login failed: {0}")]
    Login(String),
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::NotEmpty => CliError::NotEmpty,
            FixtureError::Rbac(e) => CliError::Rbac(e),
        }
    }
}

impl CliError {
    pub fn cause_code(&self) -> &'static str {
        match self {
            CliError::Rbac(e) => e.cause_code(),
            CliError::Binding(e) => e.cause_code(),
            CliError::Store(StoreError::Locked(_)) => "store-locked",
            CliError::Store(_) => "store-error",
            CliError::Config(ConfigError::MissingServerKey) => "missing-server-key",
            CliError::Config(_) | CliError::NoStore => "config-error",
            CliError::Boot(BootError::Store(StoreError::Locked(_))) => "store-locked",
            CliError::Boot(BootError::Store(_)) => "store-error",
            CliError::Boot(BootError::Config(ConfigError::MissingServerKey)) => "missing-server-key",
            CliError::Boot(BootError::Listen { .. }) => "listen-failed",
            CliError::Boot(_) => "boot-error",
            CliError::UnknownRoleName(_) => "role-not-found",
            CliError::NotEmpty => "store-not-empty",
            CliError::Invalid { .. } => "invalid-argument",
            CliError::Io(_) => "io-error",
            CliError::Login(_) => "login-failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.cause_code() {
            "user-not-found" | "role-not-found" | "assignment-not-found" | "privilege-not-found" => exit::NOT_FOUND,
            "invalid-role-id" | "invalid-period" | "invalid-argument" => exit::INVALID,
            "store-error" | "store-locked" | "io-error" => exit::STORE,
            "config-error" | "missing-server-key" | "boot-error" => exit::CONFIG,
            "login-failed" | "listen-failed" => exit::CONNECTION,
            _ => exit::REFUSED,
        }
    }
}
