use std::collections::BTreeSet;
use std::num::NonZeroU64;

use proptest::prelude::*;

use carelabel::harness::fuzz::fuzz;
use carelabel::harness::runner::RunOptions;
use carelabel::harness::snapshot;
use carelabel::{
    flow_permitted, may_read, ActorId, DeleteMode, DeviceId, DeviceKind, DlmLabel, ItemKey,
    LabelledItem, Meta, SystemState,
};

const NAMES: [&str; 6] = ["alice", "bob", "carol", "hosp1", "hosp2", "dave"];

fn actor() -> impl Strategy<Value = ActorId> {
    prop::sample::select(&NAMES[..]).prop_map(|s| ActorId::new(s).unwrap())
}

fn label() -> impl Strategy<Value = DlmLabel> {
    (actor(), prop::collection::btree_set(actor(), 0..4)).prop_map(|(o, r)| DlmLabel::new(o, r))
}

fn a(s: &str) -> ActorId {
    ActorId::new(s).unwrap()
}

/// alice with a phone, hosp1 and hosp2 both staffed by drbob.
fn fixture() -> SystemState {
    let mut s = SystemState::new();
    s.register_patient(a("alice")).unwrap();
    for u in ["hosp1", "hosp2", "drbob"] {
        s.register_user(a(u)).unwrap();
    }
    s.add_hospital(a("hosp1"), [a("drbob")]).unwrap();
    s.add_hospital(a("hosp2"), [a("drbob")]).unwrap();
    s.bind_device(
        DeviceId::new("phone").unwrap(),
        DeviceKind::Sphone,
        a("alice"),
        "1",
    )
    .unwrap();
    s
}

#[derive(Debug, Clone)]
struct Upload {
    payload: String,
    readers: Vec<&'static str>,
    expiry: u64,
    fetch: bool,
}

fn uploads() -> impl Strategy<Value = Vec<Upload>> {
    let one = (
        prop::sample::select(vec!["hr=72", "hr=90", "bp", "spo2"]),
        prop::sample::subsequence(vec!["hosp1", "hosp2"], 0..=2),
        0u64..30,
        any::<bool>(),
    )
        .prop_map(|(p, readers, expiry, fetch)| Upload {
            payload: p.to_string(),
            readers,
            expiry,
            fetch,
        });
    prop::collection::vec(one, 1..12)
}

fn populate(ups: &[Upload]) -> SystemState {
    let mut s = fixture();
    let phone = DeviceId::new("phone").unwrap();
    for u in ups {
        let label = DlmLabel::new(a("alice"), u.readers.iter().map(|r| a(r)));
        s.upload(&phone, &u.payload, &label, "care", u.expiry, &a("alice"))
            .unwrap();
        if u.fetch {
            for h in &u.readers {
                let _ = s.download(&a(h), &a("drbob"), &a("alice"));
            }
        }
    }
    s
}

fn all_keys(s: &SystemState) -> BTreeSet<(String, ItemKey)> {
    s.tables()
        .flat_map(|(n, t)| {
            t.keys()
                .map(move |k| (n.to_string(), k.clone()))
                .collect::<Vec<_>>()
        })
        .collect()
}

proptest! {
    #[test]
    fn flow_is_membership(l in label(), dest in actor()) {
        let item = LabelledItem::new(l.clone(), Meta::new("x", 0), "p");
        let allowed = dest == *l.owner() || l.readers().iter().any(|r| *r == dest);
        prop_assert_eq!(flow_permitted(&item, &dest), allowed);
    }

    #[test]
    fn owner_always_reads(l in label()) {
        prop_assert!(may_read(&l, l.owner()));
    }

    #[test]
    fn adding_readers_never_revokes(l in label(), extra in actor(), dest in actor()) {
        let wider = l.clone().with_reader(extra);
        prop_assert!(!may_read(&l, &dest) || may_read(&wider, &dest));
    }

    #[test]
    fn snapshot_round_trips(ups in uploads(), ticks in 0u64..20) {
        let mut s = populate(&ups);
        if let Some(n) = NonZeroU64::new(ticks) {
            s.tick(n);
        }
        s.sweep();
        let text = snapshot::render(&s, true);
        let back = snapshot::parse(&text).unwrap();
        prop_assert_eq!(snapshot::render(&back, true), text);
    }

    #[test]
    fn sweep_removes_exactly_the_expired(ups in uploads(), ticks in 1u64..40) {
        let mut s = populate(&ups);
        s.tick(NonZeroU64::new(ticks).unwrap());
        let now = s.clock;
        let before = all_keys(&s);
        let expected: BTreeSet<_> = s
            .tables()
            .flat_map(|(n, t)| {
                t.iter()
                    .filter(|(_, m)| m.expiry < now)
                    .map(move |(k, _)| (n.to_string(), k.clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let erased = s.sweep();
        let after = all_keys(&s);
        let gone: BTreeSet<_> = before.difference(&after).cloned().collect();
        prop_assert_eq!(&gone, &expected);
        let erased_keys: BTreeSet<_> = expected.iter().map(|(_, k)| k.clone()).collect();
        prop_assert_eq!(erased, erased_keys);
        // a second sweep at the same time has nothing left to do
        prop_assert!(s.sweep().is_empty());
    }

    #[test]
    fn delete_removes_one_key_everywhere(ups in uploads(), pick in any::<prop::sample::Index>()) {
        let mut s = populate(&ups);
        let keys: Vec<ItemKey> = s.db.table.keys().cloned().collect();
        let key = pick.get(&keys).clone();
        let before = all_keys(&s);
        let phone = DeviceId::new("phone").unwrap();
        s.delete(&phone, &key.payload, &key.label, &a("alice"), DeleteMode::Lenient).unwrap();
        let expected: BTreeSet<_> = before.into_iter().filter(|(_, k)| *k != key).collect();
        prop_assert_eq!(all_keys(&s), expected);
    }

    #[test]
    fn clock_and_audit_are_monotone(ups in uploads(), ticks in prop::collection::vec(1u64..5, 0..6)) {
        let mut s = populate(&ups);
        for t in ticks {
            s.tick(NonZeroU64::new(t).unwrap());
            s.sweep();
        }
        let recs = s.audit.records();
        for w in recs.windows(2) {
            prop_assert_eq!(w[1].seq, w[0].seq + 1);
            prop_assert!(w[1].at >= w[0].at);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn short_fuzz_traces_hold(seed in any::<u64>(), strict in any::<bool>()) {
        let opts = RunOptions {
            diff: true,
            check_each: true,
            strict_delete: strict,
            sweep_every: NonZeroU64::new(10),
            seed,
            ..RunOptions::default()
        };
        let report = fuzz(seed, 200, &opts);
        prop_assert!(report.failure.is_none(), "{:?}", report.failure);
    }
}
