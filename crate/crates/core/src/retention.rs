//! Logical clock and the erasure sweep.

use std::collections::BTreeSet;
use std::num::NonZeroU64;

use crate::audit::{Detail, Effect, Node, OpKind};
use crate::label::ItemKey;
use crate::state::{Entry, SystemState};

impl SystemState {
    /// Advances the clock. Tables are not touched; erasure happens on
    /// [`SystemState::sweep`].
    pub fn tick(&mut self, n: NonZeroU64) {
        self.clock = self.clock.saturating_add(n.get());
        self.log(Entry {
            op: OpKind::Tick,
            actor: None,
            node: Node::Clock,
            item: None,
            effect: Effect::Ticked,
            detail: Detail::Ticks(n.get()),
        });
    }

    /// Erases every item whose expiry lies before the current tick, from
    /// every table. One audit record per removal, then a summary record.
    pub fn sweep(&mut self) -> BTreeSet<ItemKey> {
        let now = self.clock;
        let doomed: Vec<(Node, ItemKey)> = self
            .tables()
            .flat_map(|(node, table)| {
                table
                    .iter()
                    .filter(|(_, m)| m.expired_at(now))
                    .map(move |(k, _)| (node.clone(), k.clone()))
            })
            .collect();

        let mut erased = BTreeSet::new();
        for (node, key) in doomed {
            match &node {
                Node::Db => {
                    self.db.table.remove(&key);
                }
                Node::Hospital(h) => {
                    if let Some(h) = self.hospitals.get_mut(h) {
                        h.table.remove(&key);
                    }
                }
                Node::Auth | Node::Clock => unreachable!("not a table"),
            }
            self.log(Entry {
                op: OpKind::Sweep,
                actor: None,
                node,
                item: Some(key.clone()),
                effect: Effect::Removed,
                detail: Detail::None,
            });
            erased.insert(key);
        }
        self.log(Entry {
            op: OpKind::Sweep,
            actor: None,
            node: Node::Clock,
            item: None,
            effect: Effect::Read,
            detail: Detail::Erased(erased.len() as u64),
        });
        erased
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{ActorId, DeviceId, DlmLabel};
    use crate::state::DeviceKind;

    fn n(v: u64) -> NonZeroU64 {
        NonZeroU64::new(v).unwrap()
    }

    fn a(s: &str) -> ActorId {
        ActorId::new(s).unwrap()
    }

    fn seeded(expiries: &[u64]) -> SystemState {
        let mut s = SystemState::new();
        s.register_patient(a("alice")).unwrap();
        s.register_user(a("hosp1")).unwrap();
        s.add_hospital(a("hosp1"), [a("drbob")]).unwrap();
        let phone = DeviceId::new("phone").unwrap();
        s.bind_device(phone.clone(), DeviceKind::Sphone, a("alice"), "1")
            .unwrap();
        let label = DlmLabel::new(a("alice"), [a("hosp1")]);
        for (i, e) in expiries.iter().enumerate() {
            s.upload(&phone, &format!("d{i}"), &label, "p", *e, &a("alice"))
                .unwrap();
        }
        s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        s
    }

    #[test]
    fn tick_adds() {
        let mut s = SystemState::new();
        s.tick(n(5));
        assert_eq!(s.clock, 5);
        let mut t = SystemState::new();
        t.tick(n(2));
        t.tick(n(3));
        assert_eq!(t.clock, s.clock);
    }

    #[test]
    fn sweep_erases_everywhere() {
        let mut s = seeded(&[5, 6, 9]);
        s.tick(n(6));
        let erased = s.sweep();
        assert_eq!(erased.len(), 1);
        let key = erased.into_iter().next().unwrap();
        assert_eq!(key.payload, "d0");
        assert!(s.locations_of(&key).is_empty());
        for (_, t) in s.tables() {
            assert!(t.iter().all(|(_, m)| m.expiry >= s.clock));
        }
    }

    #[test]
    fn empty_sweep_changes_only_audit() {
        let mut s = seeded(&[5]);
        let mut before = s.clone();
        assert!(s.sweep().is_empty());
        before.audit = s.audit.clone();
        assert_eq!(s, before);
    }

    #[test]
    fn sweep_is_idempotent() {
        let mut s = seeded(&[1, 2, 30]);
        s.tick(n(10));
        s.sweep();
        let mut again = s.clone();
        assert!(again.sweep().is_empty());
        again.audit = s.audit.clone();
        assert_eq!(again, s);
    }
}
