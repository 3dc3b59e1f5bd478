//! Temporal role-based access control.
//!
//! Roles are granted to users through dated assignment rows; privileges are
//! granted to roles. A user's authorization on a date is the union of the
//! roles on every live row covering that date. Holders may delegate a role
//! for a window that never outlives their own hold, and when delegations
//! lapse the role falls back to its owner.
//!
//! All mutations serialize on one write lock and hit the store (when
//! attached) before becoming visible, so readers never observe a partially
//! applied change.

mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::Serialize;
use thiserror::Error;

use crate::store::{RecordKind, Store, StoreError};

pub use types::*;

/// The administrator role id.
pub const ADMIN_ROLE: &str = "0";

#[derive(Debug, Error)]
pub enum RbacError {
    #[error("malformed role id `{0}`: expected a non-empty string of decimal digits")]
    InvalidRoleId(String),
    #[error("validity period starts {valid_from} after it ends {valid_upto}")]
    InvertedPeriod {
        valid_from: NaiveDate,
        valid_upto: NaiveDate,
    },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown user name `{0}`")]
    UnknownUserName(String),
    #[error("user name `{0}` already taken")]
    DuplicateUser(String),
    #[error("unknown role {0}")]
    UnknownRole(RoleId),
    #[error("role {0} already registered")]
    DuplicateRole(RoleId),
    #[error("user {actor} may not {action}")]
    Unauthorized { actor: UserId, action: &'static str },
    #[error("user {user} does not hold role {role} on {at}")]
    NotHolder {
        user: UserId,
        role: RoleId,
        at: NaiveDate,
    },
    #[error("requested window {requested} lies outside the assigner's validity (hold ends {holder_end:?}, today {today})")]
    OutsideValidity {
        requested: ValidityPeriod,
        holder_end: HoldingEnd,
        today: NaiveDate,
    },
    #[error("unknown privilege `{0}`")]
    UnknownPrivilege(String),
    #[error("privilege `{0}` already registered")]
    DuplicatePrivilege(String),
    #[error("assignment {0} not found")]
    AssignmentNotFound(u64),
    #[error("assignment {0} already revoked")]
    AlreadyRevoked(u64),
    #[error("catalog already bootstrapped")]
    AlreadyBootstrapped,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl RbacError {
    /// Stable machine-readable cause code.
    pub fn cause_code(&self) -> &'static str {
        match self {
            RbacError::InvalidRoleId(_) => "invalid-role-id",
            RbacError::InvertedPeriod { .. } => "invalid-period",
            RbacError::UnknownUser(_) | RbacError::UnknownUserName(_) => "user-not-found",
            RbacError::DuplicateUser(_) => "duplicate-user",
            RbacError::UnknownRole(_) => "role-not-found",
            RbacError::DuplicateRole(_) => "duplicate-role",
            RbacError::Unauthorized { .. } => "unauthorized",
            RbacError::NotHolder { .. } => "not-holder",
            RbacError::OutsideValidity { .. } => "outside-validity",
            RbacError::UnknownPrivilege(_) => "privilege-not-found",
            RbacError::DuplicatePrivilege(_) => "duplicate-privilege",
            RbacError::AssignmentNotFound(_) => "assignment-not-found",
            RbacError::AlreadyRevoked(_) => "already-revoked",
            RbacError::AlreadyBootstrapped => "already-bootstrapped",
            RbacError::Store(_) => "store-error",
        }
    }
}

pub type Result<T, E = RbacError> = std::result::Result<T, E>;

/// The global role table: global roles under their own id, local roles
/// mirrored under an encoded `local:<id>` key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GlobalCatalog {
    entries: BTreeMap<String, CatalogEntry>,
}

impl GlobalCatalog {
    /// Catalog-sync hook for local role changes. Idempotent; global ids are
    /// ignored.
    pub fn sync(&mut self, change: &LocalChange) {
        match change {
            LocalChange::Add(desc) | LocalChange::Modify(desc) => {
                if desc.id.is_global() {
                    return;
                }
                let key = encoded_local_key(&desc.id);
                self.entries.insert(
                    key.clone(),
                    CatalogEntry {
                        key,
                        role_id: desc.id.clone(),
                        name: desc.name.clone(),
                    },
                );
            }
            LocalChange::Delete(id) => {
                if !id.is_global() {
                    self.entries.remove(&encoded_local_key(id));
                }
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&CatalogEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert_global(&mut self, desc: &RoleDescriptor) {
        self.entries.insert(
            desc.id.to_string(),
            CatalogEntry {
                key: desc.id.to_string(),
                role_id: desc.id.clone(),
                name: desc.name.clone(),
            },
        );
    }
}

#[derive(Default)]
struct State {
    users: BTreeMap<UserId, UserRecord>,
    roles: BTreeMap<RoleId, RoleDescriptor>,
    catalog: GlobalCatalog,
    log: Vec<RoleAssignment>,
    revoked: BTreeMap<u64, Revocation>,
    privileges: BTreeMap<String, Privilege>,
}

impl State {
    fn user(&self, id: UserId) -> Result<&UserRecord> {
        self.users.get(&id).ok_or(RbacError::UnknownUser(id))
    }

    fn role(&self, id: &RoleId) -> Result<&RoleDescriptor> {
        self.roles
            .get(id)
            .ok_or_else(|| RbacError::UnknownRole(id.clone()))
    }

    fn live(&self) -> impl Iterator<Item = &RoleAssignment> {
        self.log
            .iter()
            .filter(|a| !self.revoked.contains_key(&a.s_no))
    }

    fn is_admin(&self, user: UserId, at: NaiveDate) -> bool {
        let admin = RoleId(ADMIN_ROLE.to_string());
        self.roles.get(&admin).is_some_and(|r| r.owner == user)
            || self
                .live()
                .any(|a| a.user_id == user && a.role_id == admin && a.period.contains(at))
    }

    fn resolve(&self, user: UserId, at: NaiveDate) -> BTreeSet<RoleId> {
        self.live()
            .filter(|a| a.user_id == user && a.period.contains(at))
            .map(|a| a.role_id.clone())
            .collect()
    }

    fn holding_end(&self, user: UserId, role: &RoleId, at: NaiveDate) -> Result<HoldingEnd> {
        let desc = self.role(role)?;
        let covering = self
            .live()
            .filter(|a| a.user_id == user && &a.role_id == role && a.period.contains(at))
            .map(|a| a.period.valid_upto())
            .max();
        match covering {
            Some(end) => Ok(HoldingEnd::Until(end)),
            None if desc.owner == user => Ok(HoldingEnd::Unbounded),
            None => Err(RbacError::NotHolder {
                user,
                role: role.clone(),
                at,
            }),
        }
    }
}

fn user_key(id: UserId) -> String {
    format!("{:010}", id.0)
}

fn s_no_key(s_no: u64) -> String {
    format!("{s_no:010}")
}

/// The role engine. Cheap to share behind an `Arc`.
pub struct Rbac {
    state: RwLock<State>,
    store: Option<Arc<Store>>,
}

impl Default for Rbac {
    fn default() -> Self {
        Rbac::new()
    }
}

impl Rbac {
    /// An engine with no backing store.
    pub fn new() -> Rbac {
        Rbac {
            state: RwLock::new(State::default()),
            store: None,
        }
    }

    /// An engine persisted to `store`, loading whatever it already holds.
    pub fn with_store(store: Arc<Store>) -> Result<Rbac> {
        let mut st = State::default();
        for u in store.scan_json::<UserRecord>(RecordKind::User)? {
            st.users.insert(u.user_id, u);
        }
        for r in store.scan_json::<RoleDescriptor>(RecordKind::Role)? {
            st.roles.insert(r.id.clone(), r);
        }
        for e in store.scan_json::<CatalogEntry>(RecordKind::GlobalCatalog)? {
            st.catalog.entries.insert(e.key.clone(), e);
        }
        st.log = store.scan_json(RecordKind::Assignment)?;
        for r in store.scan_json::<Revocation>(RecordKind::Revocation)? {
            st.revoked.insert(r.s_no, r);
        }
        for p in store.scan_json::<Privilege>(RecordKind::Privilege)? {
            st.privileges.insert(p.id.clone(), p);
        }
        Ok(Rbac {
            state: RwLock::new(st),
            store: Some(store),
        })
    }

    pub fn store(&self) -> Option<&Arc<Store>> {
        self.store.as_ref()
    }

    fn persist<T: Serialize>(&self, kind: RecordKind, key: &str, value: &T) -> Result<()> {
        if let Some(store) = &self.store {
            store.put_json(kind, key, value)?;
        }
        Ok(())
    }

    fn unpersist(&self, kind: RecordKind, key: &str) -> Result<()> {
        if let Some(store) = &self.store {
            store.delete(kind, key)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        let st = self.state.read();
        st.users.is_empty() && st.roles.is_empty() && st.log.is_empty()
    }

    /// Creates the first user as owner of the administrator role.
    pub fn bootstrap(&self, admin_name: &str) -> Result<UserRecord> {
        {
            let st = self.state.read();
            if !st.users.is_empty() || !st.roles.is_empty() {
                return Err(RbacError::AlreadyBootstrapped);
            }
        }
        let admin = self.add_user(admin_name)?;
        self.import_role(RoleDescriptor::new(
            RoleId(ADMIN_ROLE.to_string()),
            "Administrator",
            admin.user_id,
        ))?;
        Ok(admin)
    }

    pub fn add_user(&self, user_name: &str) -> Result<UserRecord> {
        let mut st = self.state.write();
        if st.users.values().any(|u| u.user_name == user_name) {
            return Err(RbacError::DuplicateUser(user_name.to_string()));
        }
        let next = st.users.keys().next_back().map_or(1, |id| id.0 + 1);
        let record = UserRecord {
            user_id: UserId(next),
            user_name: user_name.to_string(),
        };
        self.persist(RecordKind::User, &user_key(record.user_id), &record)?;
        st.users.insert(record.user_id, record.clone());
        Ok(record)
    }

    pub fn user(&self, id: UserId) -> Option<UserRecord> {
        self.state.read().users.get(&id).cloned()
    }

    pub fn user_by_name(&self, name: &str) -> Option<UserRecord> {
        self.state
            .read()
            .users
            .values()
            .find(|u| u.user_name == name)
            .cloned()
    }

    pub fn users(&self) -> Vec<UserRecord> {
        self.state.read().users.values().cloned().collect()
    }

    pub fn role(&self, id: &RoleId) -> Option<RoleDescriptor> {
        self.state.read().roles.get(id).cloned()
    }

    pub fn role_by_name(&self, name: &str) -> Option<RoleDescriptor> {
        self.state
            .read()
            .roles
            .values()
            .find(|r| r.name == name)
            .cloned()
    }

    pub fn roles(&self) -> Vec<RoleDescriptor> {
        self.state.read().roles.values().cloned().collect()
    }

    pub fn global_catalog(&self) -> GlobalCatalog {
        self.state.read().catalog.clone()
    }

    pub fn is_admin(&self, user: UserId, at: NaiveDate) -> bool {
        self.state.read().is_admin(user, at)
    }

    pub fn register_role(
        &self,
        actor: UserId,
        desc: RoleDescriptor,
        today: NaiveDate,
    ) -> Result<RoleDescriptor> {
        let mut st = self.state.write();
        if !st.is_admin(actor, today) {
            return Err(RbacError::Unauthorized {
                actor,
                action: "register roles",
            });
        }
        if st.roles.contains_key(&desc.id) {
            return Err(RbacError::DuplicateRole(desc.id));
        }
        st.user(desc.owner)?;
        self.apply_role(&mut st, desc.clone(), LocalChange::Add(desc.clone()))?;
        Ok(desc)
    }

    /// Replaces a role's name or owner. Administrators only.
    pub fn update_role(
        &self,
        actor: UserId,
        desc: RoleDescriptor,
        today: NaiveDate,
    ) -> Result<RoleDescriptor> {
        let mut st = self.state.write();
        if !st.is_admin(actor, today) {
            return Err(RbacError::Unauthorized {
                actor,
                action: "update roles",
            });
        }
        st.role(&desc.id)?;
        st.user(desc.owner)?;
        self.apply_role(&mut st, desc.clone(), LocalChange::Modify(desc.clone()))?;
        Ok(desc)
    }

    pub fn remove_role(&self, actor: UserId, id: &RoleId, today: NaiveDate) -> Result<RoleDescriptor> {
        let mut st = self.state.write();
        if !st.is_admin(actor, today) {
            return Err(RbacError::Unauthorized {
                actor,
                action: "remove roles",
            });
        }
        let desc = st.role(id)?.clone();
        self.unpersist(RecordKind::Role, id.as_str())?;
        let key = if id.is_global() {
            id.to_string()
        } else {
            encoded_local_key(id)
        };
        self.unpersist(RecordKind::GlobalCatalog, &key)?;
        st.roles.remove(id);
        if id.is_global() {
            st.catalog.entries.remove(&key);
        } else {
            st.catalog.sync(&LocalChange::Delete(id.clone()));
        }
        Ok(desc)
    }

    fn apply_role(&self, st: &mut State, desc: RoleDescriptor, change: LocalChange) -> Result<()> {
        self.persist(RecordKind::Role, desc.id.as_str(), &desc)?;
        let mut catalog = st.catalog.clone();
        if desc.id.is_global() {
            catalog.insert_global(&desc);
        } else {
            catalog.sync(&change);
        }
        let key = if desc.id.is_global() {
            desc.id.to_string()
        } else {
            encoded_local_key(&desc.id)
        };
        if let Some(entry) = catalog.get(&key) {
            self.persist(RecordKind::GlobalCatalog, &key, entry)?;
        }
        st.catalog = catalog;
        st.roles.insert(desc.id.clone(), desc);
        Ok(())
    }

    pub(crate) fn import_role(&self, desc: RoleDescriptor) -> Result<()> {
        let mut st = self.state.write();
        st.user(desc.owner)?;
        self.apply_role(&mut st, desc.clone(), LocalChange::Add(desc))
    }

    /// Appends an assignment row without authorization or catalog checks.
    /// Used to load fixed tables verbatim.
    pub(crate) fn import_assignment(
        &self,
        user: UserId,
        role: RoleId,
        period: ValidityPeriod,
        assigner: UserId,
        kind: AssignmentKind,
        created_on: NaiveDate,
    ) -> Result<RoleAssignment> {
        let mut st = self.state.write();
        st.user(user)?;
        self.append(&mut st, user, role, period, assigner, kind, created_on)
    }

    #[allow(clippy::too_many_arguments)]
    fn append(
        &self,
        st: &mut State,
        user_id: UserId,
        role_id: RoleId,
        period: ValidityPeriod,
        assigner: UserId,
        kind: AssignmentKind,
        created_on: NaiveDate,
    ) -> Result<RoleAssignment> {
        let row = RoleAssignment {
            s_no: st.log.len() as u64 + 1,
            user_id,
            role_id,
            period,
            assigner,
            kind,
            created_on,
        };
        self.persist(RecordKind::Assignment, &s_no_key(row.s_no), &row)?;
        st.log.push(row.clone());
        Ok(row)
    }

    /// Maps `user` to `role` for `period` on the authority of the role's
    /// owner or an administrator.
    pub fn assign_owner_role(
        &self,
        actor: UserId,
        user: UserId,
        role: &RoleId,
        period: ValidityPeriod,
        today: NaiveDate,
    ) -> Result<RoleAssignment> {
        let mut st = self.state.write();
        let owner = st.role(role)?.owner;
        st.user(user)?;
        if actor != owner && !st.is_admin(actor, today) {
            return Err(RbacError::Unauthorized {
                actor,
                action: "assign this role",
            });
        }
        self.append(
            &mut st,
            user,
            role.clone(),
            period,
            actor,
            AssignmentKind::Owner,
            today,
        )
    }

    /// Hands `role` to `assignee`. The effective window starts no earlier
    /// than `today` and ends no later than the assigner's own hold.
    pub fn delegate_role(
        &self,
        assigner: UserId,
        assignee: UserId,
        role: &RoleId,
        requested: ValidityPeriod,
        today: NaiveDate,
    ) -> Result<Delegation> {
        let mut st = self.state.write();
        st.user(assigner)?;
        st.user(assignee)?;
        let holder_end = st.holding_end(assigner, role, today)?;

        let start = requested.valid_from().max(today);
        let end = holder_end.caps(requested.valid_upto());
        if start > end {
            return Err(RbacError::OutsideValidity {
                requested,
                holder_end,
                today,
            });
        }
        let period = ValidityPeriod::new(start, end)?;
        let assignment = self.append(
            &mut st,
            assignee,
            role.clone(),
            period,
            assigner,
            AssignmentKind::Delegated,
            today,
        )?;
        Ok(Delegation {
            assignment,
            requested,
            start_clamped: start != requested.valid_from(),
            end_clamped: end != requested.valid_upto(),
        })
    }

    /// How long `user`'s hold on `role` runs, as seen on `at`.
    pub fn holding_end(&self, user: UserId, role: &RoleId, at: NaiveDate) -> Result<HoldingEnd> {
        let st = self.state.read();
        st.user(user)?;
        st.holding_end(user, role, at)
    }

    pub fn resolve_roles(&self, user: UserId, at: NaiveDate) -> Result<BTreeSet<RoleId>> {
        let st = self.state.read();
        st.user(user)?;
        Ok(st.resolve(user, at))
    }

    /// The single user the role maps to on `at`: the newest live delegation
    /// covering the date, else the owner.
    pub fn effective_holder(&self, role: &RoleId, at: NaiveDate) -> Result<UserId> {
        let st = self.state.read();
        let owner = st.role(role)?.owner;
        Ok(st
            .live()
            .filter(|a| {
                &a.role_id == role && a.kind == AssignmentKind::Delegated && a.period.contains(at)
            })
            .max_by_key(|a| a.s_no)
            .map_or(owner, |a| a.user_id))
    }

    pub fn register_privilege(
        &self,
        actor: UserId,
        privilege: Privilege,
        today: NaiveDate,
    ) -> Result<Privilege> {
        let mut st = self.state.write();
        if !st.is_admin(actor, today) {
            return Err(RbacError::Unauthorized {
                actor,
                action: "register privileges",
            });
        }
        self.insert_privilege(&mut st, privilege)
    }

    pub(crate) fn import_privilege(&self, privilege: Privilege) -> Result<Privilege> {
        let mut st = self.state.write();
        self.insert_privilege(&mut st, privilege)
    }

    fn insert_privilege(&self, st: &mut State, privilege: Privilege) -> Result<Privilege> {
        if st.privileges.contains_key(&privilege.id) {
            return Err(RbacError::DuplicatePrivilege(privilege.id));
        }
        for role in &privilege.granted_to {
            st.role(role)?;
        }
        self.persist(RecordKind::Privilege, &privilege.id, &privilege)?;
        st.privileges.insert(privilege.id.clone(), privilege.clone());
        Ok(privilege)
    }

    pub fn privilege(&self, id: &str) -> Option<Privilege> {
        self.state.read().privileges.get(id).cloned()
    }

    pub fn privileges(&self) -> Vec<Privilege> {
        self.state.read().privileges.values().cloned().collect()
    }

    pub fn check_access(&self, user: UserId, privilege: &str, at: NaiveDate) -> Result<AccessDecision> {
        let st = self.state.read();
        let p = st
            .privileges
            .get(privilege)
            .ok_or_else(|| RbacError::UnknownPrivilege(privilege.to_string()))?;
        st.user(user)?;
        let roles = st.resolve(user, at);
        if roles.iter().any(|r| p.granted_to.contains(r)) {
            return Ok(AccessDecision::PERMIT);
        }
        let lapsed = st
            .live()
            .any(|a| a.user_id == user && p.granted_to.contains(&a.role_id));
        let reason = if lapsed {
            DecisionReason::Expired
        } else if roles.is_empty() {
            DecisionReason::NoRole
        } else {
            DecisionReason::NoPrivilege
        };
        Ok(AccessDecision::deny(reason))
    }

    /// Whether any role in `roles` carries `privilege`.
    pub fn grants(&self, roles: &BTreeSet<RoleId>, privilege: &str) -> Result<bool> {
        let st = self.state.read();
        let p = st
            .privileges
            .get(privilege)
            .ok_or_else(|| RbacError::UnknownPrivilege(privilege.to_string()))?;
        Ok(roles.iter().any(|r| p.granted_to.contains(r)))
    }

    /// Records a revocation of row `s_no`. The row itself stays in the log.
    pub fn revoke_assignment(&self, actor: UserId, s_no: u64, today: NaiveDate) -> Result<Revocation> {
        let mut st = self.state.write();
        let row = st
            .log
            .get((s_no as usize).wrapping_sub(1))
            .cloned()
            .ok_or(RbacError::AssignmentNotFound(s_no))?;
        let owner = st.roles.get(&row.role_id).map(|r| r.owner);
        if actor != row.assigner && Some(actor) != owner && !st.is_admin(actor, today) {
            return Err(RbacError::Unauthorized {
                actor,
                action: "revoke this assignment",
            });
        }
        if st.revoked.contains_key(&s_no) {
            return Err(RbacError::AlreadyRevoked(s_no));
        }
        let rev = Revocation {
            s_no,
            revoked_by: actor,
            revoked_on: today,
        };
        self.persist(RecordKind::Revocation, &s_no_key(s_no), &rev)?;
        st.revoked.insert(s_no, rev.clone());
        Ok(rev)
    }

    pub fn assignments(&self) -> Vec<RoleAssignment> {
        self.state.read().log.clone()
    }

    pub fn assignment(&self, s_no: u64) -> Option<RoleAssignment> {
        self.state
            .read()
            .log
            .get((s_no as usize).wrapping_sub(1))
            .cloned()
    }

    pub fn is_revoked(&self, s_no: u64) -> bool {
        self.state.read().revoked.contains_key(&s_no)
    }

    pub fn revocations(&self) -> Vec<Revocation> {
        self.state.read().revoked.values().cloned().collect()
    }
}
