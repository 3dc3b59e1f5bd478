//! Diffie-Hellman association: both parties derive a shared secret, the
//! provider blinds a fresh MAC key with a hash of it, and the relying party
//! unblinds it. The result is an [`Association`] known to both by handle.
//!
//! The exchange itself is unauthenticated, so an active attacker on the
//! path can sit in the middle. Run it over a confidential transport.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use num_bigint::{BigUint, RandBigInt};
use num_traits::One;
use parking_lot::RwLock;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use sha2::Sha256;
use thiserror::Error;

use super::btwoc::{btwoc_decode, btwoc_encode};
use super::message::{AssocType, Association, Message, MessageError, ProtocolVersion};
use crate::store::{RecordKind, Store, StoreError};

pub const DEFAULT_LIFETIME: u64 = 3600;

/// The OpenID default Diffie-Hellman modulus (1024-bit safe prime).
const DEFAULT_MODULUS_HEX: &str = "\
DCF93A0B883972EC0E19989AC5A2CE310E1D37717E8D9571BB7623731866E61E\
F75A2E27898B057F9891C2E27A639C3F29B60814581CD3B2CA3986D268370557\
7D45C2E7E52DC81C7A171876E5CEA74B1448BFDFAF18828EFD2519F14E45E382\
6634AF1949E5B535CC829A483B8A76223E5D490A257F05BDFF16F2FB22C583AB";

/// Moduli smaller than this are refused outside of the `toy-dh` feature.
const MIN_MODULUS_BITS: u64 = 512;

#[derive(Debug, Error)]
pub enum AssociationError {
    #[error("invalid Diffie-Hellman parameters: {0}")]
    BadParams(&'static str),
    #[error("peer public key out of range")]
    PublicKeyOutOfRange,
    #[error("mac key is {actual} bytes, session hash yields {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unsupported association: {message}")]
    Unsupported {
        message: String,
        suggested: Option<(AssocType, SessionType)>,
    },
    #[error("provider returned an error: {0}")]
    Provider(String),
    #[error("malformed association message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Message(#[from] MessageError),
}

#[derive(Clone, PartialEq, Eq)]
pub struct DhParams {
    modulus: BigUint,
    generator: BigUint,
}

impl fmt::Debug for DhParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhParams")
            .field("modulus_bits", &self.modulus.bits())
            .field("generator", &self.generator)
            .finish()
    }
}

impl Default for DhParams {
    fn default() -> Self {
        DhParams::openid_default()
    }
}

impl DhParams {
    pub fn openid_default() -> DhParams {
        DhParams {
            modulus: BigUint::parse_bytes(DEFAULT_MODULUS_HEX.as_bytes(), 16)
                .expect("default modulus parses"),
            generator: BigUint::from(2u8),
        }
    }

    /// Caller-supplied parameters. The modulus is trusted to be prime.
    pub fn new(modulus: BigUint, generator: BigUint) -> Result<DhParams, AssociationError> {
        if modulus.bits() < MIN_MODULUS_BITS && !cfg!(any(test, feature = "toy-dh")) {
            return Err(AssociationError::BadParams("modulus too small"));
        }
        if modulus <= BigUint::from(3u8) {
            return Err(AssociationError::BadParams("modulus too small"));
        }
        if generator <= BigUint::one() || generator >= modulus {
            return Err(AssociationError::BadParams("generator must satisfy 1 < g < p"));
        }
        Ok(DhParams { modulus, generator })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn generator(&self) -> &BigUint {
        &self.generator
    }

    pub fn is_default(&self) -> bool {
        *self == DhParams::openid_default()
    }
}

/// A private exponent and its public value. The private half is never
/// serialized or printed.
#[derive(Clone)]
pub struct DhKeyPair {
    private: BigUint,
    public: BigUint,
}

impl fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl DhKeyPair {
    /// Uses a fixed private exponent; `None` when it is outside `[1, p-2]`
    /// or yields a degenerate public value.
    pub fn from_private(params: &DhParams, private: BigUint) -> Option<DhKeyPair> {
        let upper = &params.modulus - 2u8;
        if private < BigUint::one() || private > upper {
            return None;
        }
        let public = params.generator.modpow(&private, &params.modulus);
        if public <= BigUint::one() {
            return None;
        }
        Some(DhKeyPair { private, public })
    }

    pub fn public(&self) -> &BigUint {
        &self.public
    }
}

pub fn dh_generate<R: Rng + ?Sized>(params: &DhParams, rng: &mut R) -> DhKeyPair {
    let upper = &params.modulus - 1u8; // exclusive bound => x <= p-2
    loop {
        let x = rng.gen_biguint_range(&BigUint::one(), &upper);
        if let Some(kp) = DhKeyPair::from_private(params, x) {
            return kp;
        }
    }
}

/// `their_public ^ x mod p`, after rejecting publics outside `(1, p)`.
pub fn dh_shared(
    ours: &DhKeyPair,
    their_public: &BigUint,
    params: &DhParams,
) -> Result<BigUint, AssociationError> {
    if *their_public <= BigUint::one() || *their_public >= params.modulus {
        return Err(AssociationError::PublicKeyOutOfRange);
    }
    Ok(their_public.modpow(&ours.private, &params.modulus))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionType {
    #[serde(rename = "DH-SHA1")]
    DhSha1,
    #[serde(rename = "DH-SHA256")]
    DhSha256,
}

impl SessionType {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionType::DhSha1 => "DH-SHA1",
            SessionType::DhSha256 => "DH-SHA256",
        }
    }

    pub fn parse(s: &str) -> Option<SessionType> {
        match s {
            "DH-SHA1" => Some(SessionType::DhSha1),
            "DH-SHA256" => Some(SessionType::DhSha256),
            _ => None,
        }
    }

    pub fn hash(self, data: &[u8]) -> Vec<u8> {
        match self {
            SessionType::DhSha1 => Sha1::digest(data).to_vec(),
            SessionType::DhSha256 => Sha256::digest(data).to_vec(),
        }
    }

    pub fn digest_len(self) -> usize {
        match self {
            SessionType::DhSha1 => 20,
            SessionType::DhSha256 => 32,
        }
    }

    /// The association type whose key this session can carry.
    pub fn matching(self) -> AssocType {
        match self {
            SessionType::DhSha1 => AssocType::HmacSha1,
            SessionType::DhSha256 => AssocType::HmacSha256,
        }
    }
}

impl fmt::Display for SessionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `H(btwoc(Z)) XOR mac_key`. The same operation unblinds.
pub fn blind_mac_key(
    shared: &BigUint,
    mac_key: &[u8],
    session: SessionType,
) -> Result<Vec<u8>, AssociationError> {
    let pad = session.hash(&btwoc_encode(shared));
    if pad.len() != mac_key.len() {
        return Err(AssociationError::LengthMismatch {
            expected: pad.len(),
            actual: mac_key.len(),
        });
    }
    Ok(pad.iter().zip(mac_key).map(|(a, b)| a ^ b).collect())
}

pub fn unblind_mac_key(
    shared: &BigUint,
    enc_mac_key: &[u8],
    session: SessionType,
) -> Result<Vec<u8>, AssociationError> {
    blind_mac_key(shared, enc_mac_key, session)
}

fn b64_int(n: &BigUint) -> String {
    B64.encode(btwoc_encode(n))
}

fn int_from_b64(field: &str, s: &str) -> Result<BigUint, AssociationError> {
    let bytes = B64
        .decode(s)
        .map_err(|_| AssociationError::Malformed(format!("{field} is not base64")))?;
    btwoc_decode(&bytes).map_err(|e| AssociationError::Malformed(format!("{field}: {e}")))
}

/// Pairs the provider will accept, in order of preference.
pub const SUPPORTED: [(AssocType, SessionType); 2] = [
    (AssocType::HmacSha256, SessionType::DhSha256),
    (AssocType::HmacSha1, SessionType::DhSha1),
];

fn supported_list() -> String {
    SUPPORTED
        .iter()
        .map(|(a, s)| format!("{a}/{s}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// The relying party's half of an exchange in flight.
#[derive(Debug)]
pub struct PendingAssociation {
    pub assoc_type: AssocType,
    pub session_type: SessionType,
    params: DhParams,
    keypair: DhKeyPair,
    version: ProtocolVersion,
}

impl PendingAssociation {
    pub fn start<R: Rng + ?Sized>(
        version: ProtocolVersion,
        assoc_type: AssocType,
        session_type: SessionType,
        params: DhParams,
        rng: &mut R,
    ) -> (Message, PendingAssociation) {
        let keypair = dh_generate(&params, rng);
        let mut msg = Message::for_version(version);
        msg.set("mode", "associate");
        msg.set("assoc_type", assoc_type.as_str());
        msg.set("session_type", session_type.as_str());
        if !params.is_default() {
            msg.set("dh_modulus", b64_int(&params.modulus));
            msg.set("dh_gen", b64_int(&params.generator));
        }
        msg.set("dh_consumer_public", b64_int(keypair.public()));
        (
            msg,
            PendingAssociation {
                assoc_type,
                session_type,
                params,
                keypair,
                version,
            },
        )
    }

    /// Unblinds the MAC key from the provider's reply.
    pub fn finish(self, reply: &Message, now: DateTime<Utc>) -> Result<Association, AssociationError> {
        if let Some(err) = reply.get("error") {
            if reply.get("error_code") == Some("unsupported-type") {
                let suggested = reply
                    .get("assoc_type")
                    .and_then(AssocType::parse)
                    .zip(reply.get("session_type").and_then(SessionType::parse));
                return Err(AssociationError::Unsupported {
                    message: err.to_string(),
                    suggested,
                });
            }
            return Err(AssociationError::Provider(err.to_string()));
        }
        if self.version == ProtocolVersion::V2_0 && reply.version() != ProtocolVersion::V2_0 {
            return Err(AssociationError::Malformed("reply lacks the 2.0 namespace".into()));
        }
        let missing = |f: &str| AssociationError::Malformed(format!("missing {f}"));
        let handle = reply.get("assoc_handle").ok_or_else(|| missing("assoc_handle"))?;
        if handle.is_empty() || handle.len() > 255 || !handle.bytes().all(|b| (0x21..=0x7e).contains(&b)) {
            return Err(AssociationError::Malformed("bad assoc_handle".into()));
        }
        if reply.get("assoc_type") != Some(self.assoc_type.as_str()) {
            return Err(AssociationError::Malformed("assoc_type mismatch".into()));
        }
        if let Some(st) = reply.get("session_type") {
            if st != self.session_type.as_str() {
                return Err(AssociationError::Malformed("session_type mismatch".into()));
            }
        }
        let lifetime: u64 = reply
            .get("expires_in")
            .ok_or_else(|| missing("expires_in"))?
            .parse()
            .map_err(|_| AssociationError::Malformed("expires_in is not a number".into()))?;
        let server_public = int_from_b64(
            "dh_server_public",
            reply.get("dh_server_public").ok_or_else(|| missing("dh_server_public"))?,
        )?;
        let enc = B64
            .decode(reply.get("enc_mac_key").ok_or_else(|| missing("enc_mac_key"))?)
            .map_err(|_| AssociationError::Malformed("enc_mac_key is not base64".into()))?;
        let shared = dh_shared(&self.keypair, &server_public, &self.params)?;
        let mac_key = unblind_mac_key(&shared, &enc, self.session_type)?;
        Ok(Association::new(handle, mac_key, self.assoc_type, now, lifetime)?)
    }
}

/// Builds the negotiation error reply suggesting our preferred pair.
pub fn unsupported_reply(version: ProtocolVersion, detail: &str) -> Message {
    let (a, s) = SUPPORTED[0];
    let mut msg = Message::for_version(version);
    msg.set("error", format!("{detail}; supported: {}", supported_list()));
    msg.set("error_code", "unsupported-type");
    msg.set("assoc_type", a.as_str());
    msg.set("session_type", s.as_str());
    msg
}

pub fn error_reply(version: ProtocolVersion, detail: &str) -> Message {
    let mut msg = Message::for_version(version);
    msg.set("error", detail);
    msg
}

pub fn new_handle<R: RngCore + ?Sized>(rng: &mut R) -> String {
    let mut raw = [0u8; 16];
    rng.fill_bytes(&mut raw);
    B64.encode(raw)
}

/// The provider's half: validates an associate request, mints a MAC key
/// and returns the reply alongside the association to remember. `Err`
/// carries the error reply to send back with a 400 status.
pub fn answer_associate<R: Rng + ?Sized>(
    request: &Message,
    now: DateTime<Utc>,
    lifetime: u64,
    rng: &mut R,
) -> Result<(Message, Association), Message> {
    let version = request.version();
    if request.get("mode") != Some("associate") {
        return Err(error_reply(version, "mode must be associate"));
    }
    let Some(assoc_type) = request.get("assoc_type") else {
        return Err(error_reply(version, "missing assoc_type"));
    };
    let session_type = request.get("session_type").unwrap_or("");
    let (Some(assoc_type), Some(session_type)) =
        (AssocType::parse(assoc_type), SessionType::parse(session_type))
    else {
        return Err(unsupported_reply(
            version,
            &format!("unsupported pair {assoc_type}/{session_type}"),
        ));
    };
    if session_type.matching() != assoc_type {
        return Err(unsupported_reply(
            version,
            &format!("{session_type} cannot carry a {assoc_type} key"),
        ));
    }
    let Some(consumer_public) = request.get("dh_consumer_public") else {
        return Err(error_reply(version, "missing dh_consumer_public"));
    };
    let consumer_public = int_from_b64("dh_consumer_public", consumer_public)
        .map_err(|e| error_reply(version, &e.to_string()))?;

    let params = match (request.get("dh_modulus"), request.get("dh_gen")) {
        (None, None) => DhParams::openid_default(),
        (Some(p), Some(g)) => {
            let parsed = int_from_b64("dh_modulus", p)
                .and_then(|p| Ok((p, int_from_b64("dh_gen", g)?)))
                .and_then(|(p, g)| DhParams::new(p, g));
            parsed.map_err(|e| error_reply(version, &e.to_string()))?
        }
        _ => return Err(error_reply(version, "dh_modulus and dh_gen must come together")),
    };

    let keypair = dh_generate(&params, rng);
    let shared = dh_shared(&keypair, &consumer_public, &params)
        .map_err(|e| error_reply(version, &e.to_string()))?;
    let mut mac_key = vec![0u8; assoc_type.key_len()];
    rng.fill_bytes(&mut mac_key);
    let enc = blind_mac_key(&shared, &mac_key, session_type).expect("lengths match by construction");
    let assoc = Association::new(new_handle(rng), mac_key, assoc_type, now, lifetime)
        .expect("key length matches type");

    let mut reply = Message::for_version(version);
    reply.set("assoc_handle", assoc.handle.clone());
    reply.set("session_type", session_type.as_str());
    reply.set("assoc_type", assoc_type.as_str());
    reply.set("expires_in", lifetime.to_string());
    reply.set("dh_server_public", b64_int(keypair.public()));
    reply.set("enc_mac_key", B64.encode(enc));
    Ok((reply, assoc))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredAssociation {
    server: Option<String>,
    association: Association,
}

/// Handle-keyed association table, optionally persisted.
#[derive(Default)]
pub struct AssociationStore {
    entries: RwLock<HashMap<String, StoredAssociation>>,
    store: Option<Arc<Store>>,
}

impl fmt::Debug for AssociationStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AssociationStore")
            .field("len", &self.entries.read().len())
            .finish()
    }
}

impl AssociationStore {
    pub fn new() -> AssociationStore {
        AssociationStore::default()
    }

    pub fn with_store(store: Arc<Store>) -> Result<AssociationStore, StoreError> {
        let entries = store
            .scan_json::<StoredAssociation>(RecordKind::Association)?
            .into_iter()
            .map(|s| (s.association.handle.clone(), s))
            .collect();
        Ok(AssociationStore {
            entries: RwLock::new(entries),
            store: Some(store),
        })
    }

    /// Inserts or replaces; the last write for a handle wins.
    pub fn put(&self, assoc: Association) -> Result<(), StoreError> {
        self.insert(None, assoc)
    }

    /// Stores an association established with the provider at `server`.
    pub fn put_for_server(&self, server: &str, assoc: Association) -> Result<(), StoreError> {
        self.insert(Some(server.to_string()), assoc)
    }

    fn insert(&self, server: Option<String>, association: Association) -> Result<(), StoreError> {
        let entry = StoredAssociation {
            server,
            association,
        };
        let mut entries = self.entries.write();
        if let Some(store) = &self.store {
            store.put_json(RecordKind::Association, &entry.association.handle, &entry)?;
        }
        entries.insert(entry.association.handle.clone(), entry);
        Ok(())
    }

    /// The association for `handle` if it is still live at `now`.
    pub fn get(&self, handle: &str, now: DateTime<Utc>) -> Option<Association> {
        self.entries
            .read()
            .get(handle)
            .map(|e| &e.association)
            .filter(|a| a.is_live(now))
            .cloned()
    }

    /// The newest live association with `server`.
    pub fn find_for_server(&self, server: &str, now: DateTime<Utc>) -> Option<Association> {
        self.entries
            .read()
            .values()
            .filter(|e| e.server.as_deref() == Some(server) && e.association.is_live(now))
            .max_by_key(|e| e.association.issued_at)
            .map(|e| e.association.clone())
    }

    /// Forgets `handle`. Returns whether it was present; repeat calls are
    /// harmless.
    pub fn expire(&self, handle: &str) -> bool {
        let mut entries = self.entries.write();
        let removed = entries.remove(handle).is_some();
        if removed {
            if let Some(store) = &self.store {
                if let Err(e) = store.delete(RecordKind::Association, handle) {
                    tracing::warn!(error = %e, "failed to persist association expiry");
                }
            }
        }
        removed
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use rand::SeedableRng;

    fn toy() -> DhParams {
        DhParams::new(BigUint::from(23u8), BigUint::from(5u8)).unwrap()
    }

    fn pow_mod(b: u64, e: u64, m: u64) -> u64 {
        // independent square-and-multiply over machine integers
        let (mut r, mut b, mut e) = (1u64, b % m, e);
        while e > 0 {
            if e & 1 == 1 {
                r = r * b % m;
            }
            b = b * b % m;
            e >>= 1;
        }
        r
    }

    #[test]
    fn toy_group_known_answers() {
        assert_eq!(pow_mod(5, 6, 23), 8);
        assert_eq!(pow_mod(5, 15, 23), 19);
        assert_eq!(pow_mod(19, 6, 23), 2);
        assert_eq!(pow_mod(8, 15, 23), 2);

        let p = toy();
        let a = DhKeyPair::from_private(&p, 6u8.into()).unwrap();
        let b = DhKeyPair::from_private(&p, 15u8.into()).unwrap();
        assert_eq!(*a.public(), BigUint::from(8u8));
        assert_eq!(*b.public(), BigUint::from(19u8));
        assert_eq!(dh_shared(&a, b.public(), &p).unwrap(), BigUint::from(2u8));
        assert_eq!(dh_shared(&b, a.public(), &p).unwrap(), BigUint::from(2u8));
    }

    #[test]
    fn degenerate_publics_rejected() {
        let p = toy();
        let a = DhKeyPair::from_private(&p, 6u8.into()).unwrap();
        assert!(matches!(dh_shared(&a, &BigUint::one(), &p), Err(AssociationError::PublicKeyOutOfRange)));
        assert!(matches!(dh_shared(&a, &BigUint::from(23u8), &p), Err(AssociationError::PublicKeyOutOfRange)));
        assert!(matches!(dh_shared(&a, &BigUint::from(0u8), &p), Err(AssociationError::PublicKeyOutOfRange)));
    }

    #[test]
    fn private_range_enforced() {
        let p = toy();
        assert!(DhKeyPair::from_private(&p, 0u8.into()).is_none());
        assert!(DhKeyPair::from_private(&p, 22u8.into()).is_none());
        assert!(DhKeyPair::from_private(&p, 21u8.into()).is_some());
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let kp = dh_generate(&p, &mut rng);
            assert!(kp.private >= BigUint::one() && kp.private <= BigUint::from(21u8));
            assert_eq!(kp.public, p.generator.modpow(&kp.private, &p.modulus));
        }
    }

    #[test]
    fn default_params_shape() {
        let p = DhParams::openid_default();
        assert_eq!(p.modulus().bits(), 1024);
        assert_eq!(*p.generator(), BigUint::from(2u8));
        assert!(p.is_default());
    }

    #[test]
    fn blinding() {
        let z = BigUint::from(123456789u64);
        let zeros = vec![0u8; 32];
        let enc = blind_mac_key(&z, &zeros, SessionType::DhSha256).unwrap();
        assert_eq!(enc, Sha256::digest(btwoc_encode(&z)).to_vec());
        let key: Vec<u8> = (0..32).collect();
        let enc = blind_mac_key(&z, &key, SessionType::DhSha256).unwrap();
        assert_eq!(unblind_mac_key(&z, &enc, SessionType::DhSha256).unwrap(), key);
        assert!(matches!(
            blind_mac_key(&z, &key, SessionType::DhSha1),
            Err(AssociationError::LengthMismatch { expected: 20, actual: 32 })
        ));
    }

    #[test]
    fn full_exchange_agrees() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let now = Utc::now();
        for (assoc_type, session_type) in SUPPORTED {
            let (req, pending) = PendingAssociation::start(
                ProtocolVersion::V2_0,
                assoc_type,
                session_type,
                DhParams::default(),
                &mut rng,
            );
            let (reply, op_side) = answer_associate(&req, now, DEFAULT_LIFETIME, &mut rng).unwrap();
            let rp_side = pending.finish(&reply, now).unwrap();
            assert_eq!(rp_side.handle, op_side.handle);
            assert_eq!(rp_side.mac_key(), op_side.mac_key());
            assert_eq!(rp_side.assoc_type, assoc_type);
        }
    }

    #[test]
    fn negotiation_errors() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let now = Utc::now();
        let (mut req, pending) = PendingAssociation::start(
            ProtocolVersion::V2_0,
            AssocType::HmacSha256,
            SessionType::DhSha256,
            DhParams::default(),
            &mut rng,
        );
        req.set("session_type", "no-encryption");
        let reply = answer_associate(&req, now, 60, &mut rng).unwrap_err();
        assert_eq!(reply.get("error_code"), Some("unsupported-type"));
        assert!(reply.get("error").unwrap().contains("HMAC-SHA256/DH-SHA256, HMAC-SHA1/DH-SHA1"));
        match pending.finish(&reply, now) {
            Err(AssociationError::Unsupported { suggested, .. }) => {
                assert_eq!(suggested, Some((AssocType::HmacSha256, SessionType::DhSha256)))
            }
            other => panic!("{other:?}"),
        }

        let mut missing = req.clone();
        missing.set("session_type", "DH-SHA256");
        missing.remove("dh_consumer_public");
        let reply = answer_associate(&missing, now, 60, &mut rng).unwrap_err();
        assert!(reply.get("error").unwrap().contains("dh_consumer_public"));
        assert!(reply.get("error_code").is_none());

        let mut mixed = req.clone();
        mixed.set("session_type", "DH-SHA1");
        let reply = answer_associate(&mixed, now, 60, &mut rng).unwrap_err();
        assert_eq!(reply.get("error_code"), Some("unsupported-type"));
    }

    #[test]
    fn custom_modulus_round_trip() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let now = Utc::now();
        let (req, pending) = PendingAssociation::start(
            ProtocolVersion::V2_0,
            AssocType::HmacSha1,
            SessionType::DhSha1,
            toy(),
            &mut rng,
        );
        assert!(req.get("dh_modulus").is_some());
        let (reply, op) = answer_associate(&req, now, 60, &mut rng).unwrap();
        assert_eq!(pending.finish(&reply, now).unwrap().mac_key(), op.mac_key());
    }

    #[test]
    fn store_contract() {
        let store = AssociationStore::new();
        let now = Utc::now();
        let a = Association::new("h1", vec![1; 32], AssocType::HmacSha256, now, 60).unwrap();
        store.put(a.clone()).unwrap();
        assert_eq!(store.get("h1", now), Some(a.clone()));
        assert_eq!(store.get("h1", now + Duration::seconds(60)), None);

        let b = Association::new("h1", vec![2; 32], AssocType::HmacSha256, now, 60).unwrap();
        store.put(b.clone()).unwrap();
        assert_eq!(store.get("h1", now).unwrap().mac_key(), b.mac_key());

        assert!(store.expire("h1"));
        assert!(!store.expire("h1"));
        assert_eq!(store.get("h1", now), None);

        let zero = Association::new("z", vec![1; 32], AssocType::HmacSha256, now, 0).unwrap();
        store.put(zero).unwrap();
        assert_eq!(store.get("z", now), None);
    }

    #[test]
    fn server_lookup_prefers_newest() {
        let store = AssociationStore::new();
        let now = Utc::now();
        let old = Association::new("a", vec![1; 20], AssocType::HmacSha1, now - Duration::seconds(10), 600).unwrap();
        let new = Association::new("b", vec![1; 20], AssocType::HmacSha1, now, 600).unwrap();
        store.put_for_server("http://op/", old).unwrap();
        store.put_for_server("http://op/", new).unwrap();
        store.put(Association::new("c", vec![1; 20], AssocType::HmacSha1, now, 600).unwrap()).unwrap();
        assert_eq!(store.find_for_server("http://op/", now).unwrap().handle, "b");
        assert!(store.find_for_server("http://other/", now).is_none());
    }

    #[test]
    fn persisted_store_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let now = Utc::now();
        {
            let s = AssociationStore::with_store(Arc::new(Store::open(dir.path()).unwrap())).unwrap();
            s.put_for_server("http://op/", Association::new("h", vec![3; 20], AssocType::HmacSha1, now, 600).unwrap())
                .unwrap();
            s.put(Association::new("gone", vec![3; 20], AssocType::HmacSha1, now, 600).unwrap()).unwrap();
            s.expire("gone");
        }
        let s = AssociationStore::with_store(Arc::new(Store::open(dir.path()).unwrap())).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.find_for_server("http://op/", now).unwrap().mac_key(), &[3; 20]);
    }
}
