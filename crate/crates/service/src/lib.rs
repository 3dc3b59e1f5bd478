//! The rolegate HTTP gateway.
//!
//! Serves the OpenID login pages, issues encrypted session cookies, gates
//! the academy section pages by privilege and exposes the role
//! administration API. Optionally mounts a test identity provider at
//! `/op`.

pub mod api;
pub mod auth;
pub mod client;
pub mod clock;
pub mod config;
pub mod fetcher;
pub mod guard;
pub mod identity;
pub mod op_routes;
pub mod routes;
pub mod session;
pub mod state;
pub mod web;

use std::future::Future;
use std::net::SocketAddr;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use config::ServiceConfig;
pub use state::{App, AppOptions, AppState, BootError};

/// A bound but not yet serving gateway.
pub struct Server {
    listener: TcpListener,
    router: axum::Router,
    base_url: String,
}

impl Server {
    /// Binds `listener`, builds the app and checks the route table.
    pub async fn bind(config: ServiceConfig, opts: AppOptions) -> Result<Server, BootError> {
        let listener = TcpListener::bind(config.listen)
            .await
            .map_err(|source| BootError::Listen {
                addr: config.listen,
                source,
            })?;
        Server::from_listener(listener, config, opts)
    }

    /// Uses an already bound listener. When `public_url` is unset it is
    /// derived from the listener's address.
    pub fn from_listener(listener: TcpListener, mut config: ServiceConfig, opts: AppOptions) -> Result<Server, BootError> {
        let addr = listener.local_addr().map_err(|source| BootError::Listen {
            addr: config.listen,
            source,
        })?;
        config.listen = addr;
        let base_url = config.base_url();
        let app = App::build(config, opts)?;
        let router = routes::router(app)?;
        Ok(Server {
            listener,
            router,
            base_url,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// The public base URL, without a trailing slash.
    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub async fn run(self) -> std::io::Result<()> {
        axum::serve(self.listener, self.router).await
    }

    /// Serves on a background task until [`Running::stop`].
    pub fn spawn(self) -> Running {
        let base_url = self.base_url.clone();
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(self.run_until(async {
            let _ = rx.await;
        }));
        Running {
            base_url,
            shutdown: tx,
            task,
        }
    }

    pub async fn run_until(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        axum::serve(self.listener, self.router)
            .with_graceful_shutdown(shutdown)
            .await
    }
}

pub struct Running {
    pub base_url: String,
    shutdown: oneshot::Sender<()>,
    task: JoinHandle<std::io::Result<()>>,
}

impl Running {
    pub async fn stop(self) -> std::io::Result<()> {
        let _ = self.shutdown.send(());
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}
