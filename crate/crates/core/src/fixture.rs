//! Seed data: the academy role table, user table and user-role relation.

use chrono::NaiveDate;
use thiserror::Error;

use crate::rbac::{AssignmentKind, Privilege, Rbac, RbacError, RoleDescriptor, RoleId, UserId, ValidityPeriod};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("seed fixture requires an empty store")]
    NotEmpty,
    #[error(transparent)]
    Rbac(#[from] RbacError),
}

pub const SEED_ROLES: [(&str, &str); 11] = [
    ("0", "Administrator"),
    ("1", "Student"),
    ("2", "Faculty"),
    ("10", "Assistant Registrar (Student Affairs)"),
    ("20", "Assistant Registrar (Academic)"),
    ("30", "Assistant Registrar (RND)"),
    ("40", "Assistant Registrar (TNP)"),
    ("50", "Assistant Registrar (Finance)"),
    ("3", "Registrar"),
    ("4", "Director"),
    ("5", "Head of Departments"),
];

pub const SEED_USERS: [&str; 3] = ["root", "dharmendra", "try"];

/// (user_id, role_id, valid_from, valid_upto)
pub const SEED_ASSIGNMENTS: [(u64, &str, &str, &str); 3] = [
    (1, "12", "2008-01-01", "2009-01-02"),
    (1, "13", "2008-01-01", "2008-05-06"),
    (2, "12", "2007-01-01", "2008-01-01"),
];

/// Global role granted to every verified OpenID login. Not part of the
/// academy tables; the gateway registers it on startup.
pub const OPENID_ROLE: &str = "6";
pub const OPENID_ROLE_NAME: &str = "OpenID User";
/// Group carried by every identity binding created from an OpenID login.
pub const VALID_OPENID_USER: &str = "VALID_OPENID_USER";

/// Registers [`OPENID_ROLE`] owned by `owner` unless already present.
/// Returns whether it was added.
pub fn ensure_openid_role(rbac: &Rbac, owner: UserId) -> Result<bool, RbacError> {
    let id = RoleId::new(OPENID_ROLE)?;
    if rbac.role(&id).is_some() {
        return Ok(false);
    }
    rbac.import_role(RoleDescriptor::new(id, OPENID_ROLE_NAME, owner))?;
    Ok(true)
}

/// Registers `privilege` unless one with the same id exists. Grants to
/// roles missing from the catalog are dropped; the returned privilege
/// shows what was kept.
pub fn ensure_privilege(rbac: &Rbac, mut privilege: Privilege) -> Result<Privilege, RbacError> {
    if let Some(existing) = rbac.privilege(&privilege.id) {
        return Ok(existing);
    }
    privilege.granted_to.retain(|r| rbac.role(r).is_some());
    rbac.import_privilege(privilege)
}

fn date(s: &str) -> NaiveDate {
    s.parse().expect("fixture date")
}

/// Loads the three seed tables into an empty engine. Every role is owned
/// by `root` (user 1); assignment rows are copied verbatim with `root` as
/// assigner.
pub fn load_seed_fixture(rbac: &Rbac) -> Result<(), FixtureError> {
    let store_empty = rbac.store().is_none_or(|s| s.is_empty());
    if !rbac.is_empty() || !store_empty {
        return Err(FixtureError::NotEmpty);
    }
    for name in SEED_USERS {
        rbac.add_user(name)?;
    }
    let root = UserId(1);
    for (id, name) in SEED_ROLES {
        rbac.import_role(RoleDescriptor::new(RoleId::new(id)?, name, root))?;
    }
    for (user, role, from, upto) in SEED_ASSIGNMENTS {
        let period = ValidityPeriod::new(date(from), date(upto))?;
        rbac.import_assignment(
            UserId(user),
            RoleId::new(role)?,
            period,
            root,
            AssignmentKind::Owner,
            period.valid_from(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::store::{RecordKind, Store};

    fn rid(s: &str) -> RoleId {
        RoleId::new(s).unwrap()
    }

    #[test]
    fn seeded_tables() {
        let store = Arc::new(Store::in_memory());
        let rbac = Rbac::with_store(store.clone()).unwrap();
        load_seed_fixture(&rbac).unwrap();

        assert_eq!(store.scan(RecordKind::Role).len(), 11);
        assert_eq!(rbac.user_by_name("root").unwrap().user_id, UserId(1));
        assert_eq!(rbac.user_by_name("try").unwrap().user_id, UserId(3));
        assert_eq!(rbac.role(&rid("50")).unwrap().name, "Assistant Registrar (Finance)");
        assert_eq!(rbac.assignments().len(), 3);
        assert_eq!(
            rbac.resolve_roles(UserId(1), date("2008-03-01")).unwrap(),
            [rid("12"), rid("13")].into()
        );
    }

    #[test]
    fn gateway_extensions_are_idempotent() {
        let rbac = Rbac::new();
        load_seed_fixture(&rbac).unwrap();
        assert!(ensure_openid_role(&rbac, UserId(1)).unwrap());
        assert!(!ensure_openid_role(&rbac, UserId(1)).unwrap());
        let p = Privilege {
            id: "finance.read".into(),
            description: "finance pages".into(),
            granted_to: [rid("50"), rid("99")].into(),
        };
        let kept = ensure_privilege(&rbac, p.clone()).unwrap();
        assert_eq!(kept.granted_to, [rid("50")].into());
        assert_eq!(ensure_privilege(&rbac, p).unwrap(), kept);
    }

    #[test]
    fn refuses_non_empty() {
        let rbac = Rbac::new();
        rbac.add_user("someone").unwrap();
        assert!(matches!(load_seed_fixture(&rbac), Err(FixtureError::NotEmpty)));
    }
}
