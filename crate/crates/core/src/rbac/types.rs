use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::RbacError;

/// A role identifier: a non-empty string of decimal digits.
///
/// A single digit names a global role. Longer ids are local to the
/// application named by their first digit (`"10"`, `"11"`, ... `"110"`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RoleId(pub(super) String);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum RoleScope {
    Global,
    Local { app_id: u8, code: String },
}

impl RoleId {
    pub fn new(digits: impl Into<String>) -> Result<RoleId, RbacError> {
        let digits = digits.into();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(RbacError::InvalidRoleId(digits));
        }
        Ok(RoleId(digits))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn scope(&self) -> RoleScope {
        classify_role_id(self)
    }

    pub fn is_global(&self) -> bool {
        self.0.len() == 1
    }
}

/// Global for single-digit ids, otherwise local to the first digit's
/// application with the remaining digits as the role code.
pub fn classify_role_id(id: &RoleId) -> RoleScope {
    let digits = id.as_str();
    if digits.len() == 1 {
        RoleScope::Global
    } else {
        RoleScope::Local {
            app_id: digits.as_bytes()[0] - b'0',
            code: digits[1..].to_string(),
        }
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RoleId {
    type Err = RbacError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoleId::new(s)
    }
}

impl TryFrom<String> for RoleId {
    type Error = RbacError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        RoleId::new(s)
    }
}

impl From<RoleId> for String {
    fn from(id: RoleId) -> String {
        id.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub user_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDescriptor {
    pub id: RoleId,
    pub name: String,
    pub owner: UserId,
}

impl RoleDescriptor {
    pub fn new(id: RoleId, name: impl Into<String>, owner: UserId) -> RoleDescriptor {
        RoleDescriptor {
            id,
            name: name.into(),
            owner,
        }
    }

    pub fn scope(&self) -> RoleScope {
        self.id.scope()
    }
}

/// Inclusive date window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPeriod")]
pub struct ValidityPeriod {
    valid_from: NaiveDate,
    valid_upto: NaiveDate,
}

#[derive(Deserialize)]
struct RawPeriod {
    valid_from: NaiveDate,
    valid_upto: NaiveDate,
}

impl TryFrom<RawPeriod> for ValidityPeriod {
    type Error = RbacError;
    fn try_from(raw: RawPeriod) -> Result<Self, Self::Error> {
        ValidityPeriod::new(raw.valid_from, raw.valid_upto)
    }
}

impl ValidityPeriod {
    pub fn new(valid_from: NaiveDate, valid_upto: NaiveDate) -> Result<ValidityPeriod, RbacError> {
        if valid_from > valid_upto {
            return Err(RbacError::InvertedPeriod {
                valid_from,
                valid_upto,
            });
        }
        Ok(ValidityPeriod {
            valid_from,
            valid_upto,
        })
    }

    pub fn valid_from(&self) -> NaiveDate {
        self.valid_from
    }

    pub fn valid_upto(&self) -> NaiveDate {
        self.valid_upto
    }

    pub fn contains(&self, at: NaiveDate) -> bool {
        self.valid_from <= at && at <= self.valid_upto
    }
}

impl fmt::Display for ValidityPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.valid_from, self.valid_upto)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentKind {
    Owner,
    Delegated,
}

/// One row of the user-role relation. Rows are never edited; revocation
/// is recorded separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub s_no: u64,
    pub user_id: UserId,
    pub role_id: RoleId,
    pub period: ValidityPeriod,
    pub assigner: UserId,
    pub kind: AssignmentKind,
    pub created_on: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revocation {
    pub s_no: u64,
    pub revoked_by: UserId,
    pub revoked_on: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Privilege {
    pub id: String,
    pub description: String,
    pub granted_to: BTreeSet<RoleId>,
}

/// How far a user's hold on a role extends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "date", rename_all = "snake_case")]
pub enum HoldingEnd {
    Until(NaiveDate),
    Unbounded,
}

impl HoldingEnd {
    pub fn caps(self, date: NaiveDate) -> NaiveDate {
        match self {
            HoldingEnd::Until(end) => end.min(date),
            HoldingEnd::Unbounded => date,
        }
    }
}

/// Result of a delegation, reporting any clamping applied to the request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delegation {
    pub assignment: RoleAssignment,
    pub requested: ValidityPeriod,
    pub start_clamped: bool,
    pub end_clamped: bool,
}

impl Delegation {
    pub fn effective(&self) -> ValidityPeriod {
        self.assignment.period
    }

    pub fn clamped(&self) -> bool {
        self.start_clamped || self.end_clamped
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Permit,
    Deny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionReason {
    Ok,
    NoRole,
    Expired,
    NoPrivilege,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessDecision {
    pub outcome: Outcome,
    pub reason: DecisionReason,
}

impl AccessDecision {
    pub const PERMIT: AccessDecision = AccessDecision {
        outcome: Outcome::Permit,
        reason: DecisionReason::Ok,
    };

    pub fn deny(reason: DecisionReason) -> AccessDecision {
        debug_assert!(reason != DecisionReason::Ok);
        AccessDecision {
            outcome: Outcome::Deny,
            reason,
        }
    }

    pub fn is_permit(&self) -> bool {
        self.outcome == Outcome::Permit
    }
}

/// A change to the local role catalog, fed to the global catalog hook.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LocalChange {
    Add(RoleDescriptor),
    Modify(RoleDescriptor),
    Delete(RoleId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub key: String,
    pub role_id: RoleId,
    pub name: String,
}

/// Key under which a local role is mirrored in the global catalog.
pub fn encoded_local_key(id: &RoleId) -> String {
    format!("local:{id}")
}
