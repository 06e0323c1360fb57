//! Upload, delete, download, restrict and subject access requests.
//!
//! Each operation validates every precondition before touching the state,
//! so a refused call leaves the state exactly as it was (no audit record,
//! no message).

use std::collections::BTreeSet;

use crate::audit::{AuditRecord, Detail, Effect, Message, MessageKind, Node, OpKind, Recipient};
use crate::error::OpError;
use crate::label::{flow_permitted, ActorId, DeviceId, DlmLabel, ItemKey, LabelledItem, Meta};
use crate::state::{DeviceKind, Entry, SystemState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DeleteMode {
    /// Remove wherever present; the item must be in the db.
    #[default]
    Lenient,
    /// Additionally require the item in every reader hospital's table.
    Strict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpResult {
    pub emitted: Vec<Message>,
    pub touched: BTreeSet<ItemKey>,
}

/// One owned item as reported to its data subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SarEntry {
    pub key: ItemKey,
    pub meta: Meta,
    pub locations: BTreeSet<Node>,
    pub history: Vec<AuditRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SarReport {
    pub subject: ActorId,
    pub entries: Vec<SarEntry>,
}

impl SystemState {
    fn phone_session(&self, device_id: &DeviceId) -> Result<DeviceKind, OpError> {
        let session = self.devices.get(device_id).ok_or(OpError::UnknownDevice)?;
        Ok(session.kind)
    }

    /// Checks `id = o` through the device session.
    fn check_owner(
        &self,
        device_id: &DeviceId,
        claimed_id: &ActorId,
        label: &DlmLabel,
    ) -> Result<(), OpError> {
        self.authenticate(device_id, claimed_id)?;
        if claimed_id != label.owner() {
            return Err(OpError::AuthMismatch);
        }
        Ok(())
    }

    fn emit(&mut self, result: &mut OpResult, message: Message) {
        self.outbox.push(message.clone());
        result.emitted.push(message);
    }

    /// Stores `((o,r),d)` in the cloud db. A repeated upload of the same
    /// key refreshes purpose and expiry; the restriction flag is only ever
    /// changed by [`SystemState::restrict`].
    pub fn upload(
        &mut self,
        device_id: &DeviceId,
        payload: &str,
        label: &DlmLabel,
        purpose: &str,
        expiry: u64,
        claimed_id: &ActorId,
    ) -> Result<OpResult, OpError> {
        match self.phone_session(device_id)? {
            DeviceKind::Sphone | DeviceKind::Home => {}
        }
        self.check_owner(device_id, claimed_id, label)?;
        if !self.auth.patients.contains(label.owner()) {
            return Err(OpError::NotAPatient);
        }
        if !label.readers().is_subset(&self.auth.reg_usrs) {
            return Err(OpError::UnregisteredReader);
        }

        let key = ItemKey::new(label.clone(), payload);
        let restricted = self.db.table.get(&key).is_some_and(|m| m.restricted);
        let meta = Meta {
            purpose: purpose.to_string(),
            expiry,
            restricted,
        };
        self.db.table.insert(key.clone(), meta.clone());
        let seq = self.log(Entry {
            op: OpKind::Upload,
            actor: Some(claimed_id.clone()),
            node: Node::Db,
            item: Some(key.clone()),
            effect: Effect::Added,
            detail: Detail::Meta(meta),
        });

        let mut result = OpResult::default();
        result.touched.insert(key.clone());
        self.emit(
            &mut result,
            Message {
                kind: MessageKind::UploadOk,
                recipient: Recipient::Device(device_id.clone()),
                items: BTreeSet::from([key]),
                op_seq: seq,
            },
        );
        Ok(result)
    }

    /// Removes the item from the db and from every hospital holding it.
    pub fn delete(
        &mut self,
        device_id: &DeviceId,
        payload: &str,
        label: &DlmLabel,
        claimed_id: &ActorId,
        mode: DeleteMode,
    ) -> Result<OpResult, OpError> {
        if self.phone_session(device_id)? != DeviceKind::Sphone {
            return Err(OpError::WrongDeviceKind);
        }
        self.check_owner(device_id, claimed_id, label)?;
        let key = ItemKey::new(label.clone(), payload);
        if !self.db.table.contains(&key) {
            return Err(OpError::NotFound);
        }
        if mode == DeleteMode::Strict {
            let missing = label.readers().iter().any(|r| {
                self.hospitals
                    .get(r)
                    .is_some_and(|h| !h.table.contains(&key))
            });
            if missing {
                return Err(OpError::StrictPreconditionFailed);
            }
        }

        self.db.table.remove(&key);
        let seq = self.log(Entry {
            op: OpKind::Delete,
            actor: Some(claimed_id.clone()),
            node: Node::Db,
            item: Some(key.clone()),
            effect: Effect::Removed,
            detail: Detail::None,
        });
        let holders: Vec<ActorId> = self
            .hospitals
            .values()
            .filter(|h| h.table.contains(&key))
            .map(|h| h.hospital_id.clone())
            .collect();
        for h in holders {
            if let Some(node) = self.hospitals.get_mut(&h) {
                node.table.remove(&key);
            }
            self.log(Entry {
                op: OpKind::Delete,
                actor: Some(claimed_id.clone()),
                node: Node::Hospital(h),
                item: Some(key.clone()),
                effect: Effect::Removed,
                detail: Detail::None,
            });
        }

        let mut result = OpResult::default();
        result.touched.insert(key.clone());
        self.emit(
            &mut result,
            Message {
                kind: MessageKind::DeleteOk,
                recipient: Recipient::Device(device_id.clone()),
                items: BTreeSet::from([key]),
                op_seq: seq,
            },
        );
        Ok(result)
    }

    /// Copies every unrestricted db item of `owner` that names the hospital
    /// as a reader into the hospital's table.
    pub fn download(
        &mut self,
        hospital_id: &ActorId,
        claimed_id: &ActorId,
        owner: &ActorId,
    ) -> Result<OpResult, OpError> {
        let hospital = self
            .hospitals
            .get(hospital_id)
            .ok_or(OpError::UnknownHospital)?;
        if !hospital.staff.contains(claimed_id) {
            return Err(OpError::NotStaff);
        }
        if !self.auth.patients.contains(owner) {
            return Err(OpError::NotAPatient);
        }
        if !self.auth.reg_usrs.contains(hospital_id) {
            return Err(OpError::HospitalNotRegistered);
        }
        let matches: Vec<(ItemKey, Meta)> = self
            .db
            .table
            .owned_by(owner)
            .filter(|(k, m)| k.label.readers().contains(hospital_id) && !m.restricted)
            .map(|(k, m)| (k.clone(), m.clone()))
            .collect();
        if matches.is_empty() {
            return Err(OpError::NoAccessibleData);
        }

        let mut first_seq = None;
        for (key, meta) in &matches {
            debug_assert!(flow_permitted(
                &LabelledItem::new(key.label.clone(), meta.clone(), key.payload.clone()),
                hospital_id
            ));
            if let Some(node) = self.hospitals.get_mut(hospital_id) {
                node.table.insert(key.clone(), meta.clone());
            }
            let seq = self.log(Entry {
                op: OpKind::Download,
                actor: Some(claimed_id.clone()),
                node: Node::Hospital(hospital_id.clone()),
                item: Some(key.clone()),
                effect: Effect::Added,
                detail: Detail::Meta(meta.clone()),
            });
            first_seq.get_or_insert(seq);
        }
        let op_seq = first_seq.unwrap_or_default();

        let touched: BTreeSet<ItemKey> = matches.iter().map(|(k, _)| k.clone()).collect();
        let mut result = OpResult {
            emitted: Vec::new(),
            touched: touched.clone(),
        };
        self.emit(
            &mut result,
            Message {
                kind: MessageKind::DownloadOk,
                recipient: Recipient::Actor(claimed_id.clone()),
                items: touched,
                op_seq,
            },
        );
        let phones: Vec<DeviceId> = self.phones_of(owner).cloned().collect();
        for (key, _) in matches {
            let recipients: Vec<Recipient> = if phones.is_empty() {
                vec![Recipient::Actor(owner.clone())]
            } else {
                phones.iter().cloned().map(Recipient::Device).collect()
            };
            for recipient in recipients {
                self.emit(
                    &mut result,
                    Message {
                        kind: MessageKind::Access,
                        recipient,
                        items: BTreeSet::from([key.clone()]),
                        op_seq,
                    },
                );
            }
        }
        Ok(result)
    }

    /// Sets the processing-restriction flag on the db copy. Copies already
    /// held by hospitals keep their own flag.
    pub fn restrict(
        &mut self,
        device_id: &DeviceId,
        payload: &str,
        label: &DlmLabel,
        claimed_id: &ActorId,
        flag: bool,
    ) -> Result<OpResult, OpError> {
        if self.phone_session(device_id)? != DeviceKind::Sphone {
            return Err(OpError::WrongDeviceKind);
        }
        self.check_owner(device_id, claimed_id, label)?;
        let key = ItemKey::new(label.clone(), payload);
        let meta = self.db.table.get_mut(&key).ok_or(OpError::NotFound)?;
        meta.restricted = flag;
        self.log(Entry {
            op: OpKind::Restrict,
            actor: Some(claimed_id.clone()),
            node: Node::Db,
            item: Some(key.clone()),
            effect: Effect::Flagged,
            detail: Detail::Restricted(flag),
        });
        Ok(OpResult {
            emitted: Vec::new(),
            touched: BTreeSet::from([key]),
        })
    }

    /// Everything the system holds about `claimed_id`: items, metadata,
    /// locations and access history. Only the audit log changes.
    pub fn subject_access_request(
        &mut self,
        device_id: &DeviceId,
        claimed_id: &ActorId,
    ) -> Result<SarReport, OpError> {
        self.authenticate(device_id, claimed_id)?;
        if !self.auth.patients.contains(claimed_id) {
            return Err(OpError::NotAPatient);
        }
        let mut keys: BTreeSet<ItemKey> = BTreeSet::new();
        for (_, table) in self.tables() {
            keys.extend(table.owned_by(claimed_id).map(|(k, _)| k.clone()));
        }
        let entries = keys
            .into_iter()
            .map(|key| {
                let meta = self
                    .tables()
                    .find_map(|(_, t)| t.get(&key).cloned())
                    .expect("key was collected from a table");
                SarEntry {
                    locations: self.locations_of(&key),
                    history: self.audit.touching_item(&key).cloned().collect(),
                    meta,
                    key,
                }
            })
            .collect();
        self.log(Entry {
            op: OpKind::Sar,
            actor: Some(claimed_id.clone()),
            node: Node::Db,
            item: None,
            effect: Effect::Read,
            detail: Detail::None,
        });
        Ok(SarReport {
            subject: claimed_id.clone(),
            entries,
        })
    }

    /// Removes and returns all outbox messages for `recipient`, oldest first.
    pub fn drain(&mut self, recipient: &Recipient) -> Vec<Message> {
        let (taken, kept): (Vec<Message>, Vec<Message>) = std::mem::take(&mut self.outbox)
            .into_iter()
            .partition(|m| &m.recipient == recipient);
        self.outbox = kept;
        taken
    }

    /// Audit records touching any item owned by `owner`, in seq order.
    pub fn query_audit(&self, owner: &ActorId) -> Vec<AuditRecord> {
        self.audit.touching_owner(owner).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> ActorId {
        ActorId::new(s).unwrap()
    }

    fn d(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    fn label(owner: &str, readers: &[&str]) -> DlmLabel {
        DlmLabel::new(a(owner), readers.iter().map(|r| a(r)))
    }

    /// alice and carol are patients; hosp1/hosp2 are registered; drbob
    /// works at hosp1. alice has a phone and a home server.
    fn world() -> SystemState {
        let mut s = SystemState::new();
        s.register_patient(a("alice")).unwrap();
        s.register_patient(a("carol")).unwrap();
        s.register_user(a("hosp1")).unwrap();
        s.register_user(a("hosp2")).unwrap();
        s.register_user(a("drbob")).unwrap();
        s.add_hospital(a("hosp1"), [a("drbob")]).unwrap();
        s.add_hospital(a("hosp2"), [a("drdan")]).unwrap();
        s.bind_device(d("phone"), DeviceKind::Sphone, a("alice"), "1234")
            .unwrap();
        s.bind_device(d("home"), DeviceKind::Home, a("alice"), "0000")
            .unwrap();
        s
    }

    fn up(s: &mut SystemState, payload: &str, readers: &[&str]) -> OpResult {
        s.upload(
            &d("phone"),
            payload,
            &label("alice", readers),
            "cardio",
            10,
            &a("alice"),
        )
        .unwrap()
    }

    #[test]
    fn upload_stores_and_acknowledges() {
        let mut s = world();
        let r = up(&mut s, "hr=72", &["hosp1"]);
        let key = ItemKey::new(label("alice", &["hosp1"]), "hr=72");
        assert!(s.db.table.contains(&key));
        assert_eq!(r.emitted.len(), 1);
        assert_eq!(r.emitted[0].kind, MessageKind::UploadOk);
        assert_eq!(r.emitted[0].recipient, Recipient::Device(d("phone")));
    }

    #[test]
    fn upload_refusals_leave_state_alone() {
        let mut s = world();
        let before = s.clone();
        let cases = [
            (
                d("phone"),
                label("alice", &["hosp1"]),
                a("bob"),
                OpError::AuthMismatch,
            ),
            (
                d("phone"),
                label("carol", &[]),
                a("alice"),
                OpError::AuthMismatch,
            ),
            (
                d("ghost"),
                label("alice", &[]),
                a("alice"),
                OpError::UnknownDevice,
            ),
            (
                d("phone"),
                label("alice", &["stranger"]),
                a("alice"),
                OpError::UnregisteredReader,
            ),
        ];
        for (dev, l, who, want) in cases {
            assert_eq!(s.upload(&dev, "x", &l, "p", 1, &who), Err(want));
            assert_eq!(s, before);
        }
        let mut s2 = SystemState::new();
        s2.bind_device(d("p"), DeviceKind::Sphone, a("zed"), "1")
            .unwrap();
        assert_eq!(
            s2.upload(&d("p"), "x", &label("zed", &[]), "p", 1, &a("zed")),
            Err(OpError::NotAPatient)
        );
    }

    #[test]
    fn reupload_is_idempotent_on_the_table() {
        let mut once = world();
        up(&mut once, "hr=72", &["hosp1"]);
        let mut twice = world();
        up(&mut twice, "hr=72", &["hosp1"]);
        up(&mut twice, "hr=72", &["hosp1"]);
        assert_eq!(once.db.table, twice.db.table);
    }

    #[test]
    fn reupload_keeps_restriction() {
        let mut s = world();
        up(&mut s, "x", &["hosp1"]);
        s.restrict(
            &d("phone"),
            "x",
            &label("alice", &["hosp1"]),
            &a("alice"),
            true,
        )
        .unwrap();
        up(&mut s, "x", &["hosp1"]);
        let key = ItemKey::new(label("alice", &["hosp1"]), "x");
        assert!(s.db.table.get(&key).unwrap().restricted);
    }

    #[test]
    fn download_then_delete_clears_everything() {
        let mut s = world();
        up(&mut s, "hr=72", &["hosp1"]);
        let r = s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        let kinds: Vec<_> = r.emitted.iter().map(|m| m.kind).collect();
        assert_eq!(kinds, [MessageKind::DownloadOk, MessageKind::Access]);
        assert_eq!(r.emitted[1].recipient, Recipient::Device(d("phone")));
        let key = ItemKey::new(label("alice", &["hosp1"]), "hr=72");
        assert!(s.hospitals[&a("hosp1")].table.contains(&key));

        let r = s
            .delete(
                &d("phone"),
                "hr=72",
                &label("alice", &["hosp1"]),
                &a("alice"),
                DeleteMode::Lenient,
            )
            .unwrap();
        assert_eq!(r.emitted[0].kind, MessageKind::DeleteOk);
        assert!(s.locations_of(&key).is_empty());
    }

    #[test]
    fn delete_refusals() {
        let mut s = world();
        let l = label("alice", &["hosp1"]);
        let before = s.clone();
        assert_eq!(
            s.delete(&d("phone"), "nope", &l, &a("alice"), DeleteMode::Lenient),
            Err(OpError::NotFound)
        );
        assert_eq!(
            s.delete(&d("home"), "nope", &l, &a("alice"), DeleteMode::Lenient),
            Err(OpError::WrongDeviceKind)
        );
        assert_eq!(s, before);

        up(&mut s, "x", &["hosp1"]);
        let before = s.clone();
        assert_eq!(
            s.delete(&d("phone"), "x", &l, &a("alice"), DeleteMode::Strict),
            Err(OpError::StrictPreconditionFailed)
        );
        assert_eq!(s, before);
        assert!(s
            .delete(&d("phone"), "x", &l, &a("alice"), DeleteMode::Lenient)
            .is_ok());
    }

    #[test]
    fn strict_delete_passes_once_downloaded() {
        let mut s = world();
        up(&mut s, "x", &["hosp1"]);
        s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        let l = label("alice", &["hosp1"]);
        assert!(s
            .delete(&d("phone"), "x", &l, &a("alice"), DeleteMode::Strict)
            .is_ok());
    }

    #[test]
    fn download_refusals() {
        let mut s = world();
        up(&mut s, "x", &["hosp1"]);
        let before = s.clone();
        let cases = [
            (a("hospX"), a("drbob"), a("alice"), OpError::UnknownHospital),
            (a("hosp1"), a("mallory"), a("alice"), OpError::NotStaff),
            (a("hosp1"), a("drbob"), a("nobody"), OpError::NotAPatient),
            (
                a("hosp2"),
                a("drdan"),
                a("alice"),
                OpError::NoAccessibleData,
            ),
        ];
        for (h, dr, o, want) in cases {
            assert_eq!(s.download(&h, &dr, &o), Err(want));
            assert_eq!(s, before);
        }
        s.add_hospital(a("hosp3"), [a("drx")]).unwrap();
        assert_eq!(
            s.download(&a("hosp3"), &a("drx"), &a("alice")),
            Err(OpError::HospitalNotRegistered)
        );
    }

    #[test]
    fn restriction_gates_download() {
        let mut s = world();
        up(&mut s, "a", &["hosp1"]);
        up(&mut s, "b", &["hosp1"]);
        let l = label("alice", &["hosp1"]);
        s.restrict(&d("phone"), "a", &l, &a("alice"), true).unwrap();
        let r = s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        assert_eq!(r.touched, BTreeSet::from([ItemKey::new(l.clone(), "b")]));

        s.restrict(&d("phone"), "b", &l, &a("alice"), true).unwrap();
        let mut fresh = world();
        up(&mut fresh, "a", &["hosp1"]);
        fresh
            .restrict(&d("phone"), "a", &l, &a("alice"), true)
            .unwrap();
        assert_eq!(
            fresh.download(&a("hosp1"), &a("drbob"), &a("alice")),
            Err(OpError::NoAccessibleData)
        );
        fresh
            .restrict(&d("phone"), "a", &l, &a("alice"), false)
            .unwrap();
        assert!(fresh
            .download(&a("hosp1"), &a("drbob"), &a("alice"))
            .is_ok());
    }

    #[test]
    fn restrict_same_value_only_adds_audit() {
        let mut s = world();
        up(&mut s, "a", &["hosp1"]);
        let mut before = s.clone();
        s.restrict(
            &d("phone"),
            "a",
            &label("alice", &["hosp1"]),
            &a("alice"),
            false,
        )
        .unwrap();
        assert_eq!(s.audit.len(), before.audit.len() + 1);
        before.audit = s.audit.clone();
        assert_eq!(s, before);
    }

    #[test]
    fn access_is_parked_without_phone() {
        let mut s = world();
        s.bind_device(d("chome"), DeviceKind::Home, a("carol"), "9")
            .unwrap();
        s.upload(
            &d("chome"),
            "c",
            &label("carol", &["hosp1"]),
            "p",
            5,
            &a("carol"),
        )
        .unwrap();
        let r = s.download(&a("hosp1"), &a("drbob"), &a("carol")).unwrap();
        assert_eq!(r.emitted[1].recipient, Recipient::Actor(a("carol")));
    }

    #[test]
    fn sar_lists_locations_and_history() {
        let mut s = world();
        up(&mut s, "hr=72", &["hosp1"]);
        s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        let report = s.subject_access_request(&d("phone"), &a("alice")).unwrap();
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        assert_eq!(e.meta.purpose, "cardio");
        assert_eq!(e.meta.expiry, 10);
        assert_eq!(
            e.locations,
            BTreeSet::from([Node::Db, Node::Hospital(a("hosp1"))])
        );
        assert_eq!(e.history.len(), 2);
        assert_eq!(s.audit.records().last().unwrap().op, OpKind::Sar);

        s.bind_device(d("cphone"), DeviceKind::Sphone, a("carol"), "1")
            .unwrap();
        let empty = s.subject_access_request(&d("cphone"), &a("carol")).unwrap();
        assert!(empty.entries.is_empty());
        assert_eq!(
            s.subject_access_request(&d("phone"), &a("carol")),
            Err(OpError::AuthMismatch)
        );
    }

    #[test]
    fn drain_is_ordered_and_consuming() {
        let mut s = world();
        up(&mut s, "a", &["hosp1"]);
        up(&mut s, "b", &["hosp1"]);
        let got = s.drain(&Recipient::Device(d("phone")));
        assert_eq!(got.len(), 2);
        assert!(got[0].op_seq < got[1].op_seq);
        assert!(s.drain(&Recipient::Device(d("phone"))).is_empty());
    }

    #[test]
    fn query_audit_counts_lifecycle() {
        let mut s = world();
        up(&mut s, "a", &["hosp1"]);
        s.download(&a("hosp1"), &a("drbob"), &a("alice")).unwrap();
        s.delete(
            &d("phone"),
            "a",
            &label("alice", &["hosp1"]),
            &a("alice"),
            DeleteMode::Lenient,
        )
        .unwrap();
        let effects: Vec<_> = s
            .query_audit(&a("alice"))
            .iter()
            .map(|r| (r.effect, r.node.clone()))
            .collect();
        assert_eq!(
            effects,
            [
                (Effect::Added, Node::Db),
                (Effect::Added, Node::Hospital(a("hosp1"))),
                (Effect::Removed, Node::Db),
                (Effect::Removed, Node::Hospital(a("hosp1"))),
            ]
        );
        assert!(s.query_audit(&a("carol")).is_empty());
    }
}
