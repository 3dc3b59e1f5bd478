//! Mapping from verified OpenID identities to local users.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use rolegate_core::fixture::{OPENID_ROLE, VALID_OPENID_USER};
use rolegate_core::rbac::{Rbac, RbacError, RoleId, UserId};
use rolegate_core::store::{RecordKind, Store, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityBinding {
    pub openid_identity: String,
    pub user_id: UserId,
    pub groups: BTreeSet<String>,
    /// Roles held for as long as the binding exists, outside the
    /// assignment log.
    pub auto_roles: BTreeSet<RoleId>,
}

impl IdentityBinding {
    pub fn openid(identity: &str, user_id: UserId) -> IdentityBinding {
        IdentityBinding {
            openid_identity: identity.to_string(),
            user_id,
            groups: [VALID_OPENID_USER.to_string()].into(),
            auto_roles: [RoleId::new(OPENID_ROLE).expect("digit id")].into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BindingError {
    #[error("identity {0} is already bound")]
    AlreadyBound(String),
    #[error(transparent)]
    Rbac(#[from] RbacError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl BindingError {
    pub fn cause_code(&self) -> &'static str {
        match self {
            BindingError::AlreadyBound(_) => "already-bound",
            BindingError::Rbac(e) => e.cause_code(),
            BindingError::Store(_) => "store-error",
        }
    }
}

pub struct BindingStore {
    bindings: Mutex<BTreeMap<String, IdentityBinding>>,
    store: Arc<Store>,
}

impl BindingStore {
    pub fn open(store: Arc<Store>) -> Result<BindingStore, StoreError> {
        let bindings = store
            .scan_json::<IdentityBinding>(RecordKind::IdentityBinding)?
            .into_iter()
            .map(|b| (b.openid_identity.clone(), b))
            .collect();
        Ok(BindingStore {
            bindings: Mutex::new(bindings),
            store,
        })
    }

    pub fn get(&self, identity: &str) -> Option<IdentityBinding> {
        self.bindings.lock().get(identity).cloned()
    }

    pub fn all(&self) -> Vec<IdentityBinding> {
        self.bindings.lock().values().cloned().collect()
    }

    /// Binds `identity` to an existing user.
    pub fn bind(&self, rbac: &Rbac, identity: &str, user: UserId) -> Result<IdentityBinding, BindingError> {
        if rbac.user(user).is_none() {
            return Err(RbacError::UnknownUser(user).into());
        }
        let mut map = self.bindings.lock();
        if map.contains_key(identity) {
            return Err(BindingError::AlreadyBound(identity.to_string()));
        }
        let binding = IdentityBinding::openid(identity, user);
        self.store.put_json(RecordKind::IdentityBinding, identity, &binding)?;
        map.insert(identity.to_string(), binding.clone());
        Ok(binding)
    }

    /// The binding for `identity`, creating a fresh user named after the
    /// identity on first sight.
    pub fn resolve_or_provision(&self, rbac: &Rbac, identity: &str) -> Result<IdentityBinding, BindingError> {
        let mut map = self.bindings.lock();
        if let Some(b) = map.get(identity) {
            return Ok(b.clone());
        }
        let user = provision_user(rbac, identity)?;
        let binding = IdentityBinding::openid(identity, user);
        self.store.put_json(RecordKind::IdentityBinding, identity, &binding)?;
        map.insert(identity.to_string(), binding.clone());
        tracing::info!(identity, user = %user, "provisioned user for new identity");
        Ok(binding)
    }
}

fn provision_user(rbac: &Rbac, identity: &str) -> Result<UserId, RbacError> {
    let mut name = identity.to_string();
    for n in 2.. {
        match rbac.add_user(&name) {
            Ok(u) => return Ok(u.user_id),
            Err(RbacError::DuplicateUser(_)) => name = format!("{identity}#{n}"),
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provisioning_and_reload() {
        let store = Arc::new(Store::in_memory());
        let rbac = Rbac::with_store(store.clone()).unwrap();
        rbac.add_user("http://op.example/id/bob").unwrap();
        let bindings = BindingStore::open(store.clone()).unwrap();

        let b = bindings.resolve_or_provision(&rbac, "http://op.example/id/bob").unwrap();
        assert_eq!(rbac.user(b.user_id).unwrap().user_name, "http://op.example/id/bob#2");
        assert!(b.groups.contains(VALID_OPENID_USER));
        assert!(b.auto_roles.contains(&RoleId::new(OPENID_ROLE).unwrap()));
        assert_eq!(bindings.resolve_or_provision(&rbac, "http://op.example/id/bob").unwrap(), b);

        let root = rbac.add_user("root").unwrap();
        bindings.bind(&rbac, "http://op.example/id/root", root.user_id).unwrap();
        assert!(matches!(
            bindings.bind(&rbac, "http://op.example/id/root", root.user_id),
            Err(BindingError::AlreadyBound(_))
        ));
        assert!(bindings.bind(&rbac, "http://x/", UserId(99)).is_err());

        let reopened = BindingStore::open(store).unwrap();
        assert_eq!(reopened.all().len(), 2);
    }
}
