//! Simple Registration: profile attributes requested alongside login.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::message::{Message, ProtocolVersion, SignedFieldList};

pub const SREG_NS: &str = "http://openid.net/extensions/sreg/1.1";
pub const SREG_FIELDS: [&str; 9] = [
    "nickname", "email", "fullname", "dob", "gender", "postcode", "country", "language", "timezone",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown SREG field `{0}`")]
pub struct SregError(pub String);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SregRequest {
    pub required: Vec<String>,
    pub optional: Vec<String>,
}

impl SregRequest {
    pub fn new<S: AsRef<str>>(required: &[S], optional: &[S]) -> Result<SregRequest, SregError> {
        let check = |names: &[S]| -> Result<Vec<String>, SregError> {
            names
                .iter()
                .map(|n| {
                    let n = n.as_ref();
                    if SREG_FIELDS.contains(&n) {
                        Ok(n.to_string())
                    } else {
                        Err(SregError(n.to_string()))
                    }
                })
                .collect()
        };
        Ok(SregRequest {
            required: check(required)?,
            optional: check(optional)?,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.required.is_empty() && self.optional.is_empty()
    }

    /// Merges another request, keeping each name once.
    pub fn extend(&mut self, other: SregRequest) {
        for n in other.required {
            if !self.required.contains(&n) {
                self.required.push(n);
            }
        }
        for n in other.optional {
            if !self.optional.contains(&n) {
                self.optional.push(n);
            }
        }
    }

    pub fn apply(&self, msg: &mut Message) {
        if self.is_empty() {
            return;
        }
        if msg.version() == ProtocolVersion::V2_0 {
            msg.set("ns.sreg", SREG_NS);
        }
        if !self.required.is_empty() {
            msg.set("sreg.required", self.required.join(","));
        }
        if !self.optional.is_empty() {
            msg.set("sreg.optional", self.optional.join(","));
        }
    }

    /// Parses a request carried by an incoming checkid message.
    pub fn from_message(msg: &Message) -> SregRequest {
        let alias = sreg_alias(msg);
        let list = |key: &str| -> Vec<String> {
            msg.get(&format!("{alias}.{key}"))
                .map(|v| {
                    v.split(',')
                        .map(str::trim)
                        .filter(|n| SREG_FIELDS.contains(n))
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default()
        };
        SregRequest {
            required: list("required"),
            optional: list("optional"),
        }
    }

    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.required.iter().chain(&self.optional).map(String::as_str)
    }
}

/// The alias the message binds to the SREG namespace, defaulting to `sreg`.
fn sreg_alias(msg: &Message) -> String {
    msg.iter()
        .find_map(|(k, v)| (v == SREG_NS).then(|| k.strip_prefix("ns.")).flatten())
        .unwrap_or("sreg")
        .to_string()
}

/// Attaches SREG values to an outgoing response.
pub fn add_response(msg: &mut Message, values: &BTreeMap<String, String>) -> Vec<String> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut keys = Vec::new();
    if msg.version() == ProtocolVersion::V2_0 {
        msg.set("ns.sreg", SREG_NS);
        keys.push("ns.sreg".to_string());
    }
    for (k, v) in values {
        let key = format!("sreg.{k}");
        msg.set(&key, v.as_str());
        keys.push(key);
    }
    keys
}

/// SREG values from a positive assertion. Only signed fields count.
pub fn extract_signed(msg: &Message) -> BTreeMap<String, String> {
    let signed = SignedFieldList::parse(msg.get("signed").unwrap_or(""));
    let alias = sreg_alias(msg);
    if msg.version() == ProtocolVersion::V2_0 && alias != "sreg" && !signed.contains(&format!("ns.{alias}")) {
        return BTreeMap::new();
    }
    let prefix = format!("{alias}.");
    msg.iter()
        .filter_map(|(k, v)| {
            let name = k.strip_prefix(&prefix)?;
            (SREG_FIELDS.contains(&name) && signed.contains(k)).then(|| (name.to_string(), v.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_guard() {
        assert_eq!(SregRequest::new(&[] as &[&str], &["shoe_size"]).unwrap_err(), SregError("shoe_size".into()));
        let r = SregRequest::new(&[] as &[&str], &[]).unwrap();
        let mut m = Message::v2();
        let before = m.clone();
        r.apply(&mut m);
        assert_eq!(m, before);
    }

    #[test]
    fn request_round_trip() {
        let r = SregRequest::new(&["nickname"], &["email"]).unwrap();
        let mut m = Message::v2();
        r.apply(&mut m);
        assert_eq!(m.get("ns.sreg"), Some(SREG_NS));
        assert_eq!(m.get("sreg.optional"), Some("email"));
        assert_eq!(SregRequest::from_message(&m), r);
    }

    #[test]
    fn only_signed_values_extracted() {
        let mut m = Message::v2();
        m.set("ns.ext1", SREG_NS);
        m.set("ext1.email", "a@b.c");
        m.set("ext1.nickname", "unsigned");
        m.set("signed", "ns.ext1,ext1.email");
        let got = extract_signed(&m);
        assert_eq!(got.len(), 1);
        assert_eq!(got["email"], "a@b.c");

        m.set("signed", "ext1.email");
        assert!(extract_signed(&m).is_empty());
    }
}
