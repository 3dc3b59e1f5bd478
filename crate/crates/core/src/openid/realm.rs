//! Realm (trust root) patterns: a URL whose host may start with a single
//! `*.` wildcard label.

use thiserror::Error;
use url::Url;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RealmError {
    #[error("invalid realm `{0}`")]
    Invalid(String),
    #[error("realm `{0}` may only use a wildcard as its leftmost label")]
    MisplacedWildcard(String),
    #[error("realm `{0}` must not carry a fragment")]
    Fragment(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Realm {
    scheme: String,
    wildcard: bool,
    host: String,
    port: Option<u16>,
    path: String,
}

impl Realm {
    pub fn parse(realm: &str) -> Result<Realm, RealmError> {
        let invalid = || RealmError::Invalid(realm.to_string());
        let (scheme, rest) = realm.split_once("://").ok_or_else(invalid)?;
        let scheme = scheme.to_ascii_lowercase();
        if scheme != "http" && scheme != "https" {
            return Err(invalid());
        }
        let authority_end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
        let authority = &rest[..authority_end];
        let (wildcard, bare) = match authority.strip_prefix("*.") {
            Some(b) => (true, b),
            None => (false, authority),
        };
        if bare.contains('*') {
            return Err(RealmError::MisplacedWildcard(realm.to_string()));
        }
        // Parse with the wildcard removed so the URL crate validates the rest.
        let url = Url::parse(&format!("{scheme}://{bare}{}", &rest[authority_end..])).map_err(|_| invalid())?;
        if url.fragment().is_some() {
            return Err(RealmError::Fragment(realm.to_string()));
        }
        let host = url.host_str().ok_or_else(invalid)?.to_string();
        if host.is_empty() || url.username() != "" || url.password().is_some() {
            return Err(invalid());
        }
        Ok(Realm {
            scheme,
            wildcard,
            host,
            port: url.port_or_known_default(),
            path: url.path().to_string(),
        })
    }

    /// Whether `url` falls inside this realm.
    pub fn matches(&self, url: &str) -> bool {
        let Ok(u) = Url::parse(url) else { return false };
        if u.scheme() != self.scheme || u.port_or_known_default() != self.port {
            return false;
        }
        let Some(host) = u.host_str() else { return false };
        let host_ok = if self.wildcard {
            host == self.host
                || host
                    .strip_suffix(self.host.as_str())
                    .is_some_and(|prefix| prefix.ends_with('.'))
        } else {
            host == self.host
        };
        host_ok && path_within(&self.path, u.path())
    }
}

fn path_within(base: &str, path: &str) -> bool {
    if path == base {
        return true;
    }
    match path.strip_prefix(base) {
        Some(rest) => base.ends_with('/') || rest.starts_with('/'),
        None => false,
    }
}

/// True iff `url` lies within the namespace described by `realm`.
pub fn validate_realm(realm: &str, url: &str) -> Result<bool, RealmError> {
    Ok(Realm::parse(realm)?.matches(url))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcard_subdomains() {
        let r = "http://*.kent.ac.uk/";
        assert!(validate_realm(r, "http://www.kent.ac.uk/x").unwrap());
        assert!(validate_realm(r, "http://a.b.kent.ac.uk/").unwrap());
        assert!(validate_realm(r, "http://kent.ac.uk/").unwrap());
        assert!(!validate_realm(r, "http://kent.ac.uk.evil.com/").unwrap());
        assert!(!validate_realm(r, "http://evilkent.ac.uk/").unwrap());
        assert!(!validate_realm(r, "https://www.kent.ac.uk/").unwrap());
    }

    #[test]
    fn paths_and_ports() {
        assert!(!validate_realm("http://a.example/app/", "http://a.example/other").unwrap());
        assert!(validate_realm("http://a.example/app/", "http://a.example/app/finish").unwrap());
        assert!(validate_realm("http://a.example/app", "http://a.example/app/finish?x=1").unwrap());
        assert!(!validate_realm("http://a.example/app", "http://a.example/apple").unwrap());
        assert!(validate_realm(
            "http://ipsacademy.org:8081/",
            "http://ipsacademy.org:8081/finish_auth"
        )
        .unwrap());
        assert!(!validate_realm("http://ipsacademy.org:8081/", "http://ipsacademy.org/finish_auth").unwrap());
        assert!(validate_realm("http://a.example/", "http://a.example:80/").unwrap());
    }

    #[test]
    fn bad_realms() {
        assert!(matches!(
            validate_realm("http://www.*.kent.ac.uk/", "http://www.x.kent.ac.uk/"),
            Err(RealmError::MisplacedWildcard(_))
        ));
        assert!(matches!(validate_realm("http://a/#f", "http://a/"), Err(RealmError::Fragment(_))));
        assert!(matches!(validate_realm("ftp://a/", "ftp://a/"), Err(RealmError::Invalid(_))));
        assert!(matches!(validate_realm("a.example", "http://a.example/"), Err(RealmError::Invalid(_))));
    }
}
