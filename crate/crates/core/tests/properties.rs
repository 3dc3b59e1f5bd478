use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{Duration, NaiveDate, Utc};
use num_bigint::{BigInt, BigUint, Sign};
use proptest::prelude::*;
use rolegate_core::openid::btwoc::{btwoc_decode, btwoc_encode};
use rolegate_core::openid::discovery::normalize;
use rolegate_core::openid::message::{kv_decode, kv_encode, sign_message, verify_signature, AssocType, Association, Message, SignedFieldList};
use rolegate_core::openid::op::PasswordRecord;
use rolegate_core::rbac::{HoldingEnd, Rbac, RoleDescriptor, RoleId, UserId, ValidityPeriod};
use rolegate_core::store::{RecordKind, Store};

fn day(offset: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2009, 1, 1).unwrap() + Duration::days(offset)
}

fn kv_key() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.]{0,11}"
}

fn kv_value() -> impl Strategy<Value = String> {
    // Anything printable, colons and spaces included, but no newline.
    "[^\n\r]{0,24}".prop_map(|s| s.to_string())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn kv_round_trip(fields in prop::collection::btree_map(kv_key(), kv_value(), 0..8)) {
        let mut msg = Message::new();
        for (k, v) in &fields {
            msg.set(k.clone(), v.clone());
        }
        let encoded = kv_encode(&msg).unwrap();
        prop_assert_eq!(encoded.lines().count(), fields.len());
        let decoded = kv_decode(encoded.as_bytes()).unwrap();
        let back: BTreeMap<String, String> = decoded.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        prop_assert_eq!(back, fields);
    }

    #[test]
    fn btwoc_round_trip_and_oracle(bytes in prop::collection::vec(any::<u8>(), 0..80)) {
        let n = BigUint::from_bytes_be(&bytes);
        let encoded = btwoc_encode(&n);
        prop_assert_eq!(btwoc_decode(&encoded).unwrap(), n.clone());
        // num-bigint's signed encoding is an independent implementation of
        // the same minimal two's-complement form.
        let oracle = BigInt::from_biguint(Sign::Plus, n).to_signed_bytes_be();
        prop_assert_eq!(encoded, oracle);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn single_bit_flip_never_verifies(
        key in prop::collection::vec(any::<u8>(), 32),
        identity in "[a-z]{1,12}",
        target in 0usize..5,
        pos in any::<prop::sample::Index>(),
        bit in 0u8..7,
    ) {
        let assoc = Association::new("h1", key, AssocType::HmacSha256, Utc::now(), 3600).unwrap();
        let mut msg = Message::v2();
        msg.set("mode", "id_res");
        msg.set("op_endpoint", "http://op.example/server");
        msg.set("claimed_id", format!("http://op.example/id/{identity}"));
        msg.set("identity", format!("http://op.example/id/{identity}"));
        msg.set("return_to", "http://rp.example/finish_auth");
        msg.set("response_nonce", "2009-06-01T00:00:00Zabc");
        let signed = SignedFieldList::new(["op_endpoint", "claimed_id", "identity", "return_to", "response_nonce"]);
        sign_message(&mut msg, &assoc, &signed).unwrap();
        prop_assert!(verify_signature(&msg, &assoc).unwrap());

        let field = ["claimed_id", "identity", "return_to", "response_nonce", "sig"][target];
        let mut value = msg.get(field).unwrap().as_bytes().to_vec();
        let i = pos.index(value.len());
        value[i] ^= 1 << bit;
        // Bits 0..7 of ASCII stay ASCII.
        msg.set(field, String::from_utf8(value).unwrap());
        let accepted = verify_signature(&msg, &assoc).unwrap_or(false);
        prop_assert!(!accepted);
    }

    #[test]
    fn password_records_round_trip(pw in ".{0,24}", other in ".{0,24}") {
        let rec = PasswordRecord::create(&pw, 2);
        prop_assert!(rec.verify(&pw));
        prop_assert_eq!(rec.verify(&other), pw == other);
    }

    #[test]
    fn normalization_is_idempotent(host in "[a-z]{1,10}(\\.[a-z]{2,5}){0,2}", path in "(/[a-zA-Z0-9._~-]{0,6}){0,3}", scheme in prop::option::of(prop::sample::select(vec!["http://", "https://", "HTTP://"]))) {
        let raw = format!("{}{host}{path}", scheme.unwrap_or(""));
        let once = normalize(&raw).unwrap();
        let twice = normalize(&once.normalized).unwrap();
        prop_assert_eq!(once.normalized, twice.normalized);
    }
}

/// One step of a random delegation chain.
#[derive(Clone, Debug)]
struct Step {
    assigner: usize,
    assignee: usize,
    today: i64,
    from: i64,
    len: i64,
}

fn steps() -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec(
        (0usize..5, 0usize..5, 0i64..60, 0i64..90, 0i64..120).prop_map(|(assigner, assignee, today, from, len)| Step {
            assigner,
            assignee,
            today,
            from,
            len,
        }),
        1..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn delegation_never_outlives_the_assigner(chain in steps()) {
        let rbac = Rbac::new();
        let admin = rbac.bootstrap("root").unwrap().user_id;
        let users: Vec<UserId> = (0..5).map(|i| rbac.add_user(&format!("u{i}")).unwrap().user_id).collect();
        let role = RoleId::new("55").unwrap();
        rbac.register_role(admin, RoleDescriptor::new(role.clone(), "HODCSE", users[0]), day(0)).unwrap();

        for step in chain {
            let today = day(step.today);
            let (assigner, assignee) = (users[step.assigner], users[step.assignee]);
            let before = rbac.holding_end(assigner, &role, today);
            let requested = ValidityPeriod::new(day(step.from), day(step.from + step.len)).unwrap();
            match rbac.delegate_role(assigner, assignee, &role, requested, today) {
                Ok(d) => {
                    let end = before.expect("delegation succeeded, so the assigner held the role");
                    let effective = d.effective();
                    prop_assert!(effective.valid_from() >= today);
                    prop_assert!(effective.valid_upto() <= requested.valid_upto());
                    if let HoldingEnd::Until(limit) = end {
                        prop_assert!(effective.valid_upto() <= limit);
                    }
                    prop_assert_eq!(d.end_clamped, effective.valid_upto() != requested.valid_upto());
                }
                Err(e) => {
                    let code = e.cause_code();
                    prop_assert!(code == "not-holder" || code == "outside-validity", "unexpected {}", code);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Assign { user: usize, role: usize, from: i64, len: i64 },
    Revoke { pick: prop::sample::Index },
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            4 => (0usize..4, 0usize..4, 0i64..60, 0i64..40).prop_map(|(user, role, from, len)| Op::Assign { user, role, from, len }),
            1 => any::<prop::sample::Index>().prop_map(|pick| Op::Revoke { pick }),
        ],
        0..100,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn resolve_agrees_with_brute_force(log in ops(), probes in prop::collection::vec((0usize..4, -5i64..110), 20)) {
        let rbac = Rbac::new();
        let admin = rbac.bootstrap("root").unwrap().user_id;
        let users: Vec<UserId> = (0..4).map(|i| rbac.add_user(&format!("u{i}")).unwrap().user_id).collect();
        let roles: Vec<RoleId> = ["11", "12", "13", "2"].iter().map(|r| RoleId::new(*r).unwrap()).collect();
        for r in &roles {
            rbac.register_role(admin, RoleDescriptor::new(r.clone(), r.as_str(), admin), day(0)).unwrap();
        }

        // (s_no, user, role, from, upto, revoked)
        let mut oracle: Vec<(u64, usize, usize, i64, i64, bool)> = Vec::new();
        for op in log {
            match op {
                Op::Assign { user, role, from, len } => {
                    let period = ValidityPeriod::new(day(from), day(from + len)).unwrap();
                    let row = rbac.assign_owner_role(admin, users[user], &roles[role], period, day(0)).unwrap();
                    oracle.push((row.s_no, user, role, from, from + len, false));
                }
                Op::Revoke { pick } if !oracle.is_empty() => {
                    let i = pick.index(oracle.len());
                    let result = rbac.revoke_assignment(admin, oracle[i].0, day(0));
                    prop_assert_eq!(result.is_ok(), !oracle[i].5);
                    oracle[i].5 = true;
                }
                Op::Revoke { .. } => {}
            }
        }

        for (user, at) in probes {
            let expected: BTreeSet<RoleId> = oracle
                .iter()
                .filter(|r| !r.5 && r.1 == user && r.3 <= at && at <= r.4)
                .map(|r| roles[r.2].clone())
                .collect();
            prop_assert_eq!(rbac.resolve_roles(users[user], day(at)).unwrap(), expected);
        }
    }
}

#[derive(Clone, Debug)]
enum StoreOp {
    Put(u8, String),
    Delete(u8),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn torn_log_recovers_a_prefix(
        script in prop::collection::vec(
            prop_oneof![
                3 => (0u8..6, "[a-z ]{0,12}").prop_map(|(k, v)| StoreOp::Put(k, v)),
                1 => (0u8..6).prop_map(StoreOp::Delete),
            ],
            1..40,
        ),
        cut in any::<prop::sample::Index>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut snapshots = vec![BTreeMap::new()];
        {
            let store = Store::open(dir.path()).unwrap();
            let mut state: BTreeMap<String, String> = BTreeMap::new();
            for op in &script {
                let changed = match op {
                    StoreOp::Put(k, v) => {
                        store.put(RecordKind::User, &k.to_string(), v.clone()).unwrap();
                        state.insert(k.to_string(), v.clone());
                        true
                    }
                    StoreOp::Delete(k) => {
                        let present = store.delete(RecordKind::User, &k.to_string()).unwrap();
                        state.remove(&k.to_string());
                        present
                    }
                };
                // Deleting an absent key writes nothing.
                if changed {
                    snapshots.push(state.clone());
                }
            }
        }

        let path = dir.path().join("user.log");
        let bytes = std::fs::read(&path).unwrap();
        let keep = cut.index(bytes.len() + 1);
        std::fs::write(&path, &bytes[..keep]).unwrap();
        let complete_lines = bytes[..keep].iter().filter(|b| **b == b'\n').count();

        let store = Store::open(dir.path()).unwrap();
        let recovered: BTreeMap<String, String> = store
            .scan(RecordKind::User)
            .into_iter()
            .map(|r| (r.key, r.payload))
            .collect();
        prop_assert_eq!(&recovered, &snapshots[complete_lines]);

        // The repaired log accepts appends and reloads cleanly.
        store.put(RecordKind::User, "z", "after".into()).unwrap();
        drop(store);
        let reopened = Arc::new(Store::open(dir.path()).unwrap());
        prop_assert_eq!(reopened.len(RecordKind::User), recovered.len() + 1);
    }
}
