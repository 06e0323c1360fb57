//! Rebuilding a state from its audit log.
//!
//! The replayer re-executes each logged effect on a fresh state. While doing
//! so it checks every hospital copy against the db copy it came from: same
//! key present in the db, db copy unrestricted, destination a permitted
//! reader. It can be fed incrementally, which is how the harness checks
//! audit completeness after every command without re-reading the log.

use thiserror::Error;

use crate::audit::{AuditRecord, Detail, Effect, Node, OpKind};
use crate::harness::invariants::{InvariantId, Violation};
use crate::label::{flow_permitted, LabelledItem};
use crate::state::{DeviceSession, HospitalNode, SystemState, Table};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("audit record {seq}: {message}")]
pub struct ReplayError {
    pub seq: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Replayer {
    state: SystemState,
    violations: Vec<Violation>,
}

impl Replayer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn into_state(self) -> SystemState {
        self.state
    }

    /// Copy violations seen so far (I3, I10, flow gate).
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn fed(&self) -> u64 {
        self.state.audit.next_seq()
    }

    pub fn feed_all<'a>(
        &mut self,
        records: impl IntoIterator<Item = &'a AuditRecord>,
    ) -> Result<(), ReplayError> {
        records.into_iter().try_for_each(|r| self.feed(r))
    }

    pub fn feed(&mut self, r: &AuditRecord) -> Result<(), ReplayError> {
        let fail = |message: String| ReplayError {
            seq: r.seq,
            message,
        };
        if r.effect == Effect::Ticked {
            let Detail::Ticks(n) = r.detail else {
                return Err(fail("tick record without tick count".into()));
            };
            if r.at != self.state.clock + n {
                return Err(fail(format!(
                    "tick of {n} from {} lands at {}, not {}",
                    self.state.clock,
                    self.state.clock + n,
                    r.at
                )));
            }
            self.state.clock = r.at;
        } else if r.at != self.state.clock {
            return Err(fail(format!(
                "stamped {} while clock is {}",
                r.at, self.state.clock
            )));
        }

        match (r.effect, &r.node) {
            (Effect::Ticked, Node::Clock) | (Effect::Read, _) => {}
            (Effect::Registered, Node::Auth) => self.register(r).map_err(fail)?,
            (Effect::Added, node) => {
                let (Some(key), Detail::Meta(meta)) = (&r.item, &r.detail) else {
                    return Err(fail("added record needs an item and its meta".into()));
                };
                match node {
                    Node::Db => {
                        self.state.db.table.insert(key.clone(), meta.clone());
                    }
                    Node::Hospital(h) => {
                        let source = self.state.db.table.get(key);
                        let item =
                            LabelledItem::new(key.label.clone(), meta.clone(), key.payload.clone());
                        match source {
                            None => self.violations.push(Violation::new(
                                InvariantId::I3,
                                format!("seq {}: {} copied to {h} but absent from db", r.seq, key),
                            )),
                            Some(m) if m.restricted => self.violations.push(Violation::new(
                                InvariantId::I10,
                                format!("seq {}: restricted {} copied to {h}", r.seq, key),
                            )),
                            Some(_) => {}
                        }
                        if !flow_permitted(&item, h) {
                            self.violations.push(Violation::new(
                                InvariantId::Flow,
                                format!("seq {}: {} copied to non-reader {h}", r.seq, key),
                            ));
                        }
                        self.state
                            .hospitals
                            .get_mut(h)
                            .ok_or_else(|| fail(format!("copy to unknown hospital {h}")))?
                            .table
                            .insert(key.clone(), meta.clone());
                    }
                    other => return Err(fail(format!("items cannot be added at {other}"))),
                }
            }
            (Effect::Removed, node) => {
                let key = r
                    .item
                    .as_ref()
                    .ok_or_else(|| fail("removal without item".into()))?;
                let table = self.table_mut(node).map_err(&fail)?;
                if table.remove(key).is_none() {
                    return Err(fail(format!("removal of {key} which {node} does not hold")));
                }
            }
            (Effect::Flagged, Node::Db) => {
                let (Some(key), Detail::Restricted(flag)) = (&r.item, &r.detail) else {
                    return Err(fail("flag record needs an item and a flag".into()));
                };
                self.state
                    .db
                    .table
                    .get_mut(key)
                    .ok_or_else(|| fail(format!("flag on {key} which db does not hold")))?
                    .restricted = *flag;
            }
            (effect, node) => {
                return Err(fail(format!(
                    "effect {} not valid at {node}",
                    effect.as_str()
                )))
            }
        }

        self.state
            .audit
            .append(r.clone())
            .map_err(|e| fail(e.to_string()))
    }

    fn table_mut(&mut self, node: &Node) -> Result<&mut Table, String> {
        match node {
            Node::Db => Ok(&mut self.state.db.table),
            Node::Hospital(h) => self
                .state
                .hospitals
                .get_mut(h)
                .map(|h| &mut h.table)
                .ok_or_else(|| format!("unknown hospital {h}")),
            other => Err(format!("{other} holds no table")),
        }
    }

    fn register(&mut self, r: &AuditRecord) -> Result<(), String> {
        let actor = r.actor.clone().ok_or("registration without actor")?;
        let s = &mut self.state;
        let fresh = match (r.op, &r.detail) {
            (OpKind::RegisterPatient, Detail::None) => s.auth.patients.insert(actor),
            (OpKind::RegisterUser, Detail::None) => s.auth.reg_usrs.insert(actor),
            (OpKind::AddHospital, Detail::Staff(staff)) => s
                .hospitals
                .insert(
                    actor.clone(),
                    HospitalNode {
                        hospital_id: actor,
                        staff: staff.clone(),
                        table: Table::new(),
                    },
                )
                .is_none(),
            (
                OpKind::BindDevice,
                Detail::Device {
                    id,
                    kind,
                    credential,
                },
            ) => s
                .devices
                .insert(
                    id.clone(),
                    DeviceSession {
                        device_id: id.clone(),
                        kind: *kind,
                        bound_actor: actor,
                        credential: credential.clone(),
                    },
                )
                .is_none(),
            (op, _) => return Err(format!("{} is not a registration", op.as_str())),
        };
        if fresh {
            Ok(())
        } else {
            Err("duplicate registration in log".into())
        }
    }
}

/// Replays a complete log from the empty state.
pub fn replay(records: &[AuditRecord]) -> Result<Replayer, ReplayError> {
    let mut r = Replayer::new();
    r.feed_all(records)?;
    Ok(r)
}

/// Equality of everything replay can rebuild (all but the outbox).
pub fn persistent_eq(a: &SystemState, b: &SystemState) -> bool {
    a.auth == b.auth
        && a.db == b.db
        && a.hospitals == b.hospitals
        && a.devices == b.devices
        && a.clock == b.clock
        && a.audit == b.audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::Outcome;
    use crate::label::{ActorId, DeviceId, DlmLabel, ItemKey, Meta};
    use crate::ops::DeleteMode;
    use crate::state::DeviceKind;
    use std::num::NonZeroU64;

    fn a(s: &str) -> ActorId {
        ActorId::new(s).unwrap()
    }

    #[test]
    fn replay_rebuilds_lifecycle() {
        let mut s = SystemState::new();
        let phone = DeviceId::new("phone").unwrap();
        s.register_patient(a("alice")).unwrap();
        s.register_user(a("hosp1")).unwrap();
        s.add_hospital(a("hosp1"), [a("drbob")]).unwrap();
        s.bind_device(phone.clone(), DeviceKind::Sphone, a("alice"), "12 34")
            .unwrap();
        let label = DlmLabel::new(a("alice"), [a("hosp1")]);
        s.upload(&phone, "x", &label, "p", 3, &a("alice")).unwrap();
        s.upload(&phone, "y", &label, "p", 9, &a("alice")).unwrap();
        s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        s.restrict(&phone, "y", &label, &a("alice"), true).unwrap();
        s.tick(NonZeroU64::new(5).unwrap());
        s.sweep();
        s.delete(&phone, "y", &label, &a("alice"), DeleteMode::Lenient)
            .unwrap();
        s.subject_access_request(&phone, &a("alice")).unwrap();

        let r = replay(s.audit.records()).unwrap();
        assert!(r.violations().is_empty());
        assert!(persistent_eq(r.state(), &s));
    }

    #[test]
    fn forged_copy_is_flagged() {
        let key = ItemKey::new(DlmLabel::new(a("alice"), []), "x");
        let mut s = SystemState::new();
        s.add_hospital(a("hosp1"), []).unwrap();
        let mut records = s.audit.records().to_vec();
        records.push(AuditRecord {
            seq: 1,
            at: 0,
            op: OpKind::Download,
            actor: Some(a("drbob")),
            node: Node::Hospital(a("hosp1")),
            item: Some(key),
            effect: Effect::Added,
            outcome: Outcome::Ok,
            detail: Detail::Meta(Meta::new("p", 1)),
        });
        let r = replay(&records).unwrap();
        let ids: Vec<_> = r.violations().iter().map(|v| v.invariant).collect();
        assert_eq!(ids, [InvariantId::I3, InvariantId::Flow]);
    }

    #[test]
    fn inconsistent_log_is_rejected() {
        let key = ItemKey::new(DlmLabel::new(a("alice"), []), "x");
        let bogus = AuditRecord {
            seq: 0,
            at: 0,
            op: OpKind::Delete,
            actor: Some(a("alice")),
            node: Node::Db,
            item: Some(key),
            effect: Effect::Removed,
            outcome: Outcome::Ok,
            detail: Detail::None,
        };
        assert!(replay(&[bogus]).is_err());
    }
}
