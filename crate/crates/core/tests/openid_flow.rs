use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{Duration, Utc};
use rolegate_core::openid::association::AssociationStore;
use rolegate_core::openid::fetch::{FetchError, Fetcher, HttpRequest, HttpResponse, Method};
use rolegate_core::openid::message::{parse_query, Message};
use rolegate_core::openid::nonce::NonceStore;
use rolegate_core::openid::op::{CheckidRequest, Decision, Provider, ProviderConfig};
use rolegate_core::openid::rp::{
    new_session_key, AuthStatus, BeginError, Consumer, ConsumerConfig, FailureCause,
};

const REALM: &str = "http://ipsacademy.org:8081/";
const RETURN_TO: &str = "http://ipsacademy.org:8081/finish_auth";

struct World {
    op: Provider,
    refuse_assoc: AtomicBool,
    down: AtomicBool,
    direct_calls: AtomicUsize,
}

impl World {
    fn new() -> Arc<World> {
        let mut cfg = ProviderConfig::under("http://op.example");
        cfg.password_iterations = 32;
        let op = Provider::new(cfg);
        op.add_account("alice", "secret", Some("alice@ipsacademy.org")).unwrap();
        Arc::new(World {
            op,
            refuse_assoc: AtomicBool::new(false),
            down: AtomicBool::new(false),
            direct_calls: AtomicUsize::new(0),
        })
    }

    fn serve(&self, req: HttpRequest) -> Result<HttpResponse, FetchError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(FetchError("connection refused".into()));
        }
        let now = Utc::now();
        if req.method == Method::Post && req.url == self.op.endpoint_url() {
            self.direct_calls.fetch_add(1, Ordering::SeqCst);
            let msg = Provider::parse_direct(&req.body);
            if self.refuse_assoc.load(Ordering::SeqCst) && msg.get("mode") == Some("associate") {
                let body = "error:associations disabled\n";
                return Ok(HttpResponse::new(400, body));
            }
            let r = self.op.handle_direct(&msg, now);
            return Ok(HttpResponse::new(r.status, r.body));
        }
        if let Some(user) = req.url.strip_prefix("http://op.example/id/") {
            let page = self.op.identity_html(user, true).ok_or_else(|| FetchError("404".into()))?;
            return Ok(HttpResponse::new(200, page).with_header("content-type", "text/html"));
        }
        if let Some(user) = req.url.strip_prefix("http://op.example/xrds/") {
            let doc = self.op.identity_xrds(user).ok_or_else(|| FetchError("404".into()))?;
            return Ok(HttpResponse::new(200, doc).with_header("content-type", "application/xrds+xml"));
        }
        if let Some(user) = req.url.strip_prefix("http://links.example/") {
            let page = self.op.identity_html(user, false).ok_or_else(|| FetchError("404".into()))?;
            return Ok(HttpResponse::new(200, page).with_header("content-type", "text/html"));
        }
        if req.url == "http://v1only.example/" {
            let page = format!(
                r#"<html><head><link rel="openid.server" href="{}"><link rel="openid.delegate" href="http://op.example/id/alice"></head></html>"#,
                self.op.endpoint_url()
            );
            return Ok(HttpResponse::new(200, page).with_header("content-type", "text/html"));
        }
        Err(FetchError(format!("no route to {}", req.url)))
    }
}

fn consumer(world: &Arc<World>, config: ConsumerConfig) -> Arc<Consumer> {
    let w = world.clone();
    let fetcher: Arc<dyn Fetcher> = Arc::new(move |req: HttpRequest| w.serve(req));
    Arc::new(Consumer::new(
        fetcher,
        Arc::new(AssociationStore::new()),
        Arc::new(NonceStore::default()),
        config,
    ))
}

fn query_pairs(url: &str) -> Vec<(String, String)> {
    parse_query(url::Url::parse(url).unwrap().query().unwrap_or(""))
}

/// Plays the browser at the provider: signs in as alice and decides.
fn at_provider(world: &World, redirect: &str, decision: Decision) -> Vec<(String, String)> {
    let msg = Message::from_openid_params(query_pairs(redirect));
    let alice = world.op.authenticate_user("alice", "secret").unwrap();
    let hook = move |_: &str, _: &CheckidRequest| decision;
    let callback = world.op.handle_checkid_setup(&msg, Some(&alice), &hook, Utc::now()).unwrap();
    assert!(callback.starts_with(RETURN_TO));
    query_pairs(&callback)
}

async fn login(
    world: &Arc<World>,
    rp: &Consumer,
    identifier: &str,
    decision: Decision,
) -> (String, Vec<(String, String)>, String) {
    let session = new_session_key();
    let now = Utc::now();
    let mut req = rp.begin(identifier, &session, now).await.unwrap();
    req.add_sreg(&[] as &[&str], &["email"]).unwrap();
    let redirect = rp.redirect_url(&mut req, REALM, RETURN_TO, now).unwrap();
    let params = at_provider(world, &redirect, decision);
    (session, params, redirect)
}

#[tokio::test]
async fn smart_mode_round_trip_and_replay() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let (session, params, redirect) = login(&world, &rp, "op.example/id/alice", Decision::ApproveOnce).await;
    assert!(redirect.contains("openid.mode=checkid_setup"));
    assert!(redirect.contains("openid.sreg.optional=email"));
    assert!(redirect.contains("openid.realm="));

    let calls_before = world.direct_calls.load(Ordering::SeqCst);
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.status, AuthStatus::Success, "{}", outcome.message);
    assert_eq!(outcome.identity.as_deref(), Some("http://op.example/id/alice"));
    assert_eq!(outcome.sreg.get("email").map(String::as_str), Some("alice@ipsacademy.org"));
    assert_eq!(
        outcome.message,
        "You have successfully verified http://op.example/id/alice as your identity. \
         You also returned 'alice@ipsacademy.org' as your email."
    );
    // smart mode never goes back to the provider
    assert_eq!(world.direct_calls.load(Ordering::SeqCst), calls_before);

    let replay = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(replay.status, AuthStatus::Failure);
    assert_eq!(replay.cause, Some(FailureCause::NonceReused));
    assert!(replay.message.starts_with("OpenID authentication failed: "));
}

#[tokio::test]
async fn association_is_reused() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let s1 = new_session_key();
    let s2 = new_session_key();
    let a = rp.begin("op.example/id/alice", &s1, Utc::now()).await.unwrap();
    let b = rp.begin("op.example/id/alice", &s2, Utc::now()).await.unwrap();
    assert!(a.assoc_handle.is_some());
    assert_eq!(a.assoc_handle, b.assoc_handle);
}

#[tokio::test]
async fn cancel_and_empty_identifier() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let (session, params, _) = login(&world, &rp, "op.example/id/alice", Decision::Deny).await;
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.status, AuthStatus::Cancel);
    assert_eq!(outcome.message, "Verification cancelled.");
    assert!(outcome.identity.is_none());

    let err = rp.begin("  ", &new_session_key(), Utc::now()).await.unwrap_err();
    assert!(matches!(err, BeginError::EmptyIdentifier));
    assert_eq!(err.user_message(), "Expected an OpenID URL.");
    let err = rp.begin("unknown.invalid", &new_session_key(), Utc::now()).await.unwrap_err();
    assert_eq!(err.user_message(), "Authentication error.");
}

#[tokio::test]
async fn stateless_fallback_when_association_refused() {
    let world = World::new();
    world.refuse_assoc.store(true, Ordering::SeqCst);
    let rp = consumer(&world, ConsumerConfig::default());
    let session = new_session_key();
    let now = Utc::now();
    let mut req = rp.begin("op.example/id/alice", &session, now).await.unwrap();
    assert!(req.is_stateless());
    let redirect = rp.redirect_url(&mut req, REALM, RETURN_TO, now).unwrap();
    assert!(!redirect.contains("assoc_handle"));
    let params = at_provider(&world, &redirect, Decision::ApproveOnce);

    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.status, AuthStatus::Success, "{}", outcome.message);
    let replay = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(replay.cause, Some(FailureCause::NonceReused));
}

#[tokio::test]
async fn stateless_tamper_and_outage_fail_closed() {
    let world = World::new();
    let rp = consumer(
        &world,
        ConsumerConfig {
            stateless: true,
            ..Default::default()
        },
    );
    let (session, mut params, _) = login(&world, &rp, "op.example/id/alice", Decision::ApproveOnce).await;
    let email = params.iter_mut().find(|(k, _)| k == "openid.sreg.email").unwrap();
    email.1 = "mallory@evil.example".into();
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.cause, Some(FailureCause::CheckAuthRejected));

    let (session, params, _) = login(&world, &rp, "op.example/id/alice", Decision::ApproveOnce).await;
    world.down.store(true, Ordering::SeqCst);
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.status, AuthStatus::Failure);
    assert_eq!(outcome.cause, Some(FailureCause::CheckAuthUnavailable));
}

#[tokio::test]
async fn smart_mode_tamper_rejected() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let (session, mut params, _) = login(&world, &rp, "op.example/id/alice", Decision::ApproveOnce).await;
    let rt = params.iter_mut().find(|(k, _)| k == "openid.sreg.email").unwrap();
    rt.1.push('x');
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.cause, Some(FailureCause::BadSignature));
}

#[tokio::test]
async fn html_discovery_with_local_id() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let (session, params, redirect) = login(&world, &rp, "http://links.example/alice", Decision::ApproveOnce).await;
    assert!(redirect.contains("openid.claimed_id=http%3A%2F%2Flinks.example%2Falice"));
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.status, AuthStatus::Success, "{}", outcome.message);
    assert_eq!(outcome.identity.as_deref(), Some("http://links.example/alice"));
}

#[tokio::test]
async fn v1_provider_uses_trust_root_and_rp_nonce() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let (session, params, redirect) = login(&world, &rp, "v1only.example", Decision::ApproveOnce).await;
    assert!(redirect.contains("openid.trust_root="));
    assert!(!redirect.contains("openid.realm="));
    assert!(!redirect.contains("openid.ns="));
    let outcome = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(outcome.status, AuthStatus::Success, "{}", outcome.message);
    assert_eq!(outcome.identity.as_deref(), Some("http://v1only.example/"));
    let replay = rp.complete(&params, &session, Utc::now()).await;
    assert_eq!(replay.cause, Some(FailureCause::NonceReused));
}

#[tokio::test]
async fn realm_must_contain_return_to() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let now = Utc::now();
    let mut req = rp.begin("op.example/id/alice", &new_session_key(), now).await.unwrap();
    assert!(rp.redirect_url(&mut req, REALM, "http://elsewhere.example/finish", now).is_err());
}

#[tokio::test]
async fn stale_and_foreign_sessions_fail() {
    let world = World::new();
    let rp = consumer(&world, ConsumerConfig::default());
    let (session, params, _) = login(&world, &rp, "op.example/id/alice", Decision::ApproveOnce).await;
    let other = rp.complete(&params, &new_session_key(), Utc::now()).await;
    assert_eq!(other.cause, Some(FailureCause::NoPendingRequest));
    let late = rp.complete(&params, &session, Utc::now() + Duration::minutes(11)).await;
    assert_eq!(late.cause, Some(FailureCause::NoPendingRequest));
}

#[tokio::test]
async fn allowlist_blocks_other_providers() {
    let world = World::new();
    let rp = consumer(
        &world,
        ConsumerConfig {
            allowed_op_hosts: Some(vec!["trusted.example".into()]),
            ..Default::default()
        },
    );
    let err = rp.begin("op.example/id/alice", &new_session_key(), Utc::now()).await.unwrap_err();
    assert!(matches!(err, BeginError::NotAllowed(_)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_duplicates_succeed_once() {
    for stateless in [false, true] {
        let world = World::new();
        let rp = consumer(
            &world,
            ConsumerConfig {
                stateless,
                ..Default::default()
            },
        );
        let (session, params, _) = login(&world, &rp, "op.example/id/alice", Decision::ApproveOnce).await;
        let params = Arc::new(params);
        let handles: Vec<_> = (0..100)
            .map(|_| {
                let (rp, params, session) = (rp.clone(), params.clone(), session.clone());
                tokio::spawn(async move { rp.complete(&params, &session, Utc::now()).await })
            })
            .collect();
        let mut successes = 0;
        for h in handles {
            if h.await.unwrap().is_success() {
                successes += 1;
            }
        }
        assert_eq!(successes, 1, "stateless={stateless}");
    }
}
