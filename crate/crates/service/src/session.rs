//! Client-side session tokens, sealed with XChaCha20-Poly1305.
//!
//! Cookie form: `v1.` followed by base64url(nonce || ciphertext). The
//! version label is bound as associated data, so a token cannot be
//! replayed under another format version.

use std::collections::BTreeSet;
use std::fmt;

use base64::engine::general_purpose::{STANDARD, URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine as _;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{Key, XChaCha20Poly1305, XNonce};
use chrono::{DateTime, Utc};
use rand::RngCore;
use rolegate_core::rbac::{RoleId, UserId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const VERSION: &str = "v1";
const NONCE_LEN: usize = 24;
pub const KEY_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("server key is not valid base64")]
    Encoding,
    #[error("server key must be {KEY_LEN} bytes, got {0}")]
    Length(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    /// Random id shared by every re-mint of one login session.
    pub session_id: String,
    pub user_id: UserId,
    /// Role snapshot, including roles granted by the identity binding.
    pub roles: BTreeSet<RoleId>,
    pub identity: Option<String>,
    pub groups: BTreeSet<String>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    /// When `roles` was last resolved against the role engine.
    pub resolved_at: DateTime<Utc>,
}

impl SessionToken {
    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        now >= self.expires_at
    }
}

#[derive(Clone)]
pub struct SessionCodec {
    cipher: XChaCha20Poly1305,
}

impl fmt::Debug for SessionCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionCodec(..)")
    }
}

impl SessionCodec {
    pub fn new(key: &[u8; KEY_LEN]) -> SessionCodec {
        SessionCodec {
            cipher: XChaCha20Poly1305::new(Key::from_slice(key)),
        }
    }

    /// Accepts standard or URL-safe base64, padded or not.
    pub fn from_base64(encoded: &str) -> Result<SessionCodec, KeyError> {
        let s = encoded.trim();
        let bytes = STANDARD
            .decode(s)
            .or_else(|_| URL_SAFE.decode(s))
            .or_else(|_| URL_SAFE_NO_PAD.decode(s))
            .map_err(|_| KeyError::Encoding)?;
        let key: [u8; KEY_LEN] = bytes.as_slice().try_into().map_err(|_| KeyError::Length(bytes.len()))?;
        Ok(SessionCodec::new(&key))
    }

    pub fn generate_key() -> String {
        let mut key = [0u8; KEY_LEN];
        rand::thread_rng().fill_bytes(&mut key);
        STANDARD.encode(key)
    }

    pub fn mint(&self, token: &SessionToken) -> String {
        let plaintext = serde_json::to_vec(token).expect("token serializes");
        let mut nonce = [0u8; NONCE_LEN];
        rand::thread_rng().fill_bytes(&mut nonce);
        let sealed = self
            .cipher
            .encrypt(
                XNonce::from_slice(&nonce),
                Payload {
                    msg: &plaintext,
                    aad: VERSION.as_bytes(),
                },
            )
            .expect("encryption of a bounded buffer cannot fail");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&sealed);
        format!("{VERSION}.{}", URL_SAFE_NO_PAD.encode(out))
    }

    /// The token inside `cookie`, or `None` if it was altered, sealed
    /// under another key, or has expired.
    pub fn read(&self, cookie: &str, now: DateTime<Utc>) -> Option<SessionToken> {
        let body = cookie.strip_prefix(VERSION)?.strip_prefix('.')?;
        let raw = URL_SAFE_NO_PAD.decode(body).ok()?;
        if raw.len() <= NONCE_LEN {
            return None;
        }
        let (nonce, sealed) = raw.split_at(NONCE_LEN);
        let plaintext = self
            .cipher
            .decrypt(
                XNonce::from_slice(nonce),
                Payload {
                    msg: sealed,
                    aad: VERSION.as_bytes(),
                },
            )
            .ok()?;
        let token: SessionToken = serde_json::from_slice(&plaintext).ok()?;
        (!token.is_expired(now)).then_some(token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn token(now: DateTime<Utc>) -> SessionToken {
        SessionToken {
            session_id: "s1".into(),
            user_id: UserId(4),
            roles: ["10".parse().unwrap(), "6".parse().unwrap()].into(),
            identity: Some("http://op.example/id/alice".into()),
            groups: ["VALID_OPENID_USER".to_string()].into(),
            issued_at: now,
            expires_at: now + Duration::seconds(3600),
            resolved_at: now,
        }
    }

    #[test]
    fn round_trip_and_expiry() {
        let codec = SessionCodec::from_base64(&SessionCodec::generate_key()).unwrap();
        let now = Utc::now();
        let t = token(now);
        let cookie = codec.mint(&t);
        assert!(cookie.starts_with("v1."));
        assert_eq!(codec.read(&cookie, now), Some(t.clone()));
        assert_eq!(codec.read(&cookie, t.expires_at), None);
        // fresh nonce per mint
        assert_ne!(codec.mint(&t), cookie);
    }

    #[test]
    fn tamper_and_rotation() {
        let codec = SessionCodec::new(&[7; 32]);
        let now = Utc::now();
        let cookie = codec.mint(&token(now));
        let mut raw = URL_SAFE_NO_PAD.decode(&cookie[3..]).unwrap();
        for i in [0, NONCE_LEN, raw.len() - 1] {
            raw[i] ^= 1;
            let forged = format!("v1.{}", URL_SAFE_NO_PAD.encode(&raw));
            assert_eq!(codec.read(&forged, now), None, "byte {i}");
            raw[i] ^= 1;
        }
        assert_eq!(codec.read(&cookie.replacen("v1.", "v2.", 1), now), None);
        assert_eq!(codec.read("garbage", now), None);
        let rotated = SessionCodec::new(&[8; 32]);
        assert_eq!(rotated.read(&cookie, now), None);
    }

    #[test]
    fn key_validation() {
        assert!(matches!(SessionCodec::from_base64("AAAA"), Err(KeyError::Length(3))));
        assert!(matches!(SessionCodec::from_base64("***"), Err(KeyError::Encoding)));
        let urlsafe = URL_SAFE_NO_PAD.encode([0xfb; 32]);
        assert!(SessionCodec::from_base64(&urlsafe).is_ok());
    }
}
