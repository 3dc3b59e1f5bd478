//! Response nonces: a UTC second-precision timestamp followed by a salt.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, Duration, NaiveDateTime, SubsecRound, Utc};
use parking_lot::Mutex;
use rand::Rng;
use thiserror::Error;

const SALT_LEN: usize = 6;
const SALT_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const TIME_LEN: usize = 20;
pub const MAX_NONCE_LEN: usize = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NonceError {
    #[error("nonce too long")]
    TooLong,
    #[error("nonce lacks a valid timestamp prefix")]
    BadTimestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Nonce {
    timestamp: DateTime<Utc>,
    salt: String,
}

impl Nonce {
    pub fn timestamp(&self) -> DateTime<Utc> {
        self.timestamp
    }

    pub fn salt(&self) -> &str {
        &self.salt
    }

    pub fn parse(s: &str) -> Result<Nonce, NonceError> {
        if s.len() > MAX_NONCE_LEN {
            return Err(NonceError::TooLong);
        }
        let stamp = s.get(..TIME_LEN).ok_or(NonceError::BadTimestamp)?;
        let naive = NaiveDateTime::parse_from_str(stamp, TIME_FORMAT)
            .map_err(|_| NonceError::BadTimestamp)?;
        Ok(Nonce {
            timestamp: naive.and_utc(),
            salt: s[TIME_LEN..].to_string(),
        })
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.timestamp.format(TIME_FORMAT), self.salt)
    }
}

/// Builds a nonce stamped with `now` (truncated to the second). Reads no
/// clock of its own.
pub fn generate_nonce<R: Rng + ?Sized>(now: DateTime<Utc>, rng: &mut R) -> Nonce {
    let salt = (0..SALT_LEN)
        .map(|_| SALT_ALPHABET[rng.gen_range(0..SALT_ALPHABET.len())] as char)
        .collect();
    Nonce {
        timestamp: now.trunc_subsecs(0),
        salt,
    }
}


#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error(transparent)]
    Malformed(#[from] NonceError),
    #[error("nonce timestamp outside the acceptance window")]
    Stale,
    #[error("nonce already used")]
    Reused,
}

/// Remembers nonces seen per provider endpoint so each is accepted once.
///
/// A nonce is accepted only while its timestamp lies within `skew` of the
/// caller's clock; entries are kept for `retention`, which must cover the
/// whole window so nothing can be replayed after being forgotten.
#[derive(Debug)]
pub struct NonceStore {
    skew: Duration,
    retention: Duration,
    seen: Mutex<HashMap<(String, String), DateTime<Utc>>>,
}

impl Default for NonceStore {
    fn default() -> Self {
        NonceStore::new(Duration::seconds(300), Duration::seconds(600))
    }
}

impl NonceStore {
    pub fn new(skew: Duration, retention: Duration) -> NonceStore {
        NonceStore {
            skew,
            retention: retention.max(skew * 2),
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn skew(&self) -> Duration {
        self.skew
    }

    /// Atomically checks freshness and records the nonce.
    pub fn check_and_store(&self, server: &str, nonce: &str, now: DateTime<Utc>) -> Result<(), ReplayError> {
        let parsed = Nonce::parse(nonce)?;
        let ts = parsed.timestamp();
        if ts < now - self.skew || ts > now + self.skew {
            return Err(ReplayError::Stale);
        }
        let mut seen = self.seen.lock();
        let cutoff = now - self.retention;
        seen.retain(|_, at| *at >= cutoff);
        match seen.entry((server.to_string(), nonce.to_string())) {
            Entry::Occupied(_) => Err(ReplayError::Reused),
            Entry::Vacant(slot) => {
                slot.insert(now);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.seen.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::SeedableRng;

    #[test]
    fn timestamp_is_the_given_instant() {
        let now = Utc.with_ymd_and_hms(2009, 7, 4, 10, 0, 0).unwrap() + Duration::milliseconds(750);
        let n = generate_nonce(now, &mut rand::thread_rng());
        assert_eq!(n.timestamp(), Utc.with_ymd_and_hms(2009, 7, 4, 10, 0, 0).unwrap());
        assert!(n.to_string().starts_with("2009-07-04T10:00:00Z"));
        assert_eq!(n.salt().len(), SALT_LEN);
    }

    #[test]
    fn same_second_distinct_salts() {
        let now = Utc::now();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let a = generate_nonce(now, &mut rng);
        let b = generate_nonce(now, &mut rng);
        assert_eq!(a.timestamp(), b.timestamp());
        assert_ne!(a, b);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let n = generate_nonce(Utc::now(), &mut rand::thread_rng());
        assert_eq!(Nonce::parse(&n.to_string()).unwrap(), n);
        assert_eq!(Nonce::parse("garbage"), Err(NonceError::BadTimestamp));
        assert_eq!(Nonce::parse(&"x".repeat(300)), Err(NonceError::TooLong));
    }

    #[test]
    fn rendered_form_sorts_by_time() {
        // fixed-width prefix: string order equals time order
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let base = Utc.with_ymd_and_hms(2001, 1, 1, 0, 0, 0).unwrap();
        let mut samples: Vec<Nonce> = (0..1000)
            .map(|_| {
                let offset = rng.gen_range(0..3_000_000_000i64);
                generate_nonce(base + Duration::seconds(offset), &mut rng)
            })
            .collect();
        samples.sort_by_key(|n| n.to_string());
        assert!(samples.windows(2).all(|w| w[0].timestamp() <= w[1].timestamp()));
    }

    #[test]
    fn store_accepts_once_and_enforces_window() {
        let store = NonceStore::default();
        let now = Utc.with_ymd_and_hms(2009, 7, 4, 12, 0, 0).unwrap();
        let n = generate_nonce(now, &mut rand::thread_rng()).to_string();
        assert_eq!(store.check_and_store("op", &n, now), Ok(()));
        assert_eq!(store.check_and_store("op", &n, now), Err(ReplayError::Reused));
        // same nonce from another endpoint is a different key
        assert_eq!(store.check_and_store("op2", &n, now), Ok(()));

        let old = generate_nonce(now - Duration::seconds(301), &mut rand::thread_rng()).to_string();
        assert_eq!(store.check_and_store("op", &old, now), Err(ReplayError::Stale));
        let future = generate_nonce(now + Duration::seconds(301), &mut rand::thread_rng()).to_string();
        assert_eq!(store.check_and_store("op", &future, now), Err(ReplayError::Stale));
        let edge = generate_nonce(now - Duration::seconds(300), &mut rand::thread_rng()).to_string();
        assert_eq!(store.check_and_store("op", &edge, now), Ok(()));
        assert!(matches!(store.check_and_store("op", "junk", now), Err(ReplayError::Malformed(_))));
    }

    #[test]
    fn expired_entries_are_pruned() {
        let store = NonceStore::default();
        let t0 = Utc.with_ymd_and_hms(2009, 7, 4, 12, 0, 0).unwrap();
        let n = generate_nonce(t0, &mut rand::thread_rng()).to_string();
        store.check_and_store("op", &n, t0).unwrap();
        let later = t0 + Duration::seconds(700);
        let m = generate_nonce(later, &mut rand::thread_rng()).to_string();
        store.check_and_store("op", &m, later).unwrap();
        assert_eq!(store.len(), 1);
    }
}
