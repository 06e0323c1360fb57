//! The system class model: one Auth registry controlling one cloud
//! database, any number of hospital nodes, and device sessions.
//!
//! Devices (phones, home servers) sit outside the security perimeter and
//! have no storage at all: [`DeviceSession`] has no field that could hold
//! a labelled item.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::audit::{AuditLog, AuditRecord, Detail, Effect, Message, Node, OpKind, Outcome};
use crate::error::OpError;
use crate::label::{ActorId, DeviceId, ItemKey, LabelledItem, Meta};

/// Set of labelled items keyed by identity, with a per-owner index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    items: BTreeMap<ItemKey, Meta>,
    by_owner: BTreeMap<ActorId, BTreeSet<ItemKey>>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set-union insert. Returns the previous meta if the key was present;
    /// the stored meta is replaced either way.
    pub fn insert(&mut self, key: ItemKey, meta: Meta) -> Option<Meta> {
        self.by_owner
            .entry(key.owner().clone())
            .or_default()
            .insert(key.clone());
        self.items.insert(key, meta)
    }

    pub fn remove(&mut self, key: &ItemKey) -> Option<Meta> {
        let meta = self.items.remove(key)?;
        if let Some(keys) = self.by_owner.get_mut(key.owner()) {
            keys.remove(key);
            if keys.is_empty() {
                self.by_owner.remove(key.owner());
            }
        }
        Some(meta)
    }

    pub fn contains(&self, key: &ItemKey) -> bool {
        self.items.contains_key(key)
    }

    pub fn get(&self, key: &ItemKey) -> Option<&Meta> {
        self.items.get(key)
    }

    pub fn get_mut(&mut self, key: &ItemKey) -> Option<&mut Meta> {
        self.items.get_mut(key)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemKey, &Meta)> {
        self.items.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ItemKey> {
        self.items.keys()
    }

    pub fn owned_by<'a>(
        &'a self,
        owner: &ActorId,
    ) -> impl Iterator<Item = (&'a ItemKey, &'a Meta)> {
        self.by_owner
            .get(owner)
            .into_iter()
            .flatten()
            .map(|k| (k, &self.items[k]))
    }

    pub fn items(&self) -> impl Iterator<Item = LabelledItem> + '_ {
        self.items
            .iter()
            .map(|(k, m)| LabelledItem::new(k.label.clone(), m.clone(), k.payload.clone()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuthRegistry {
    pub patients: BTreeSet<ActorId>,
    pub reg_usrs: BTreeSet<ActorId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CloudDb {
    pub table: Table,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HospitalNode {
    pub hospital_id: ActorId,
    pub staff: BTreeSet<ActorId>,
    pub table: Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeviceKind {
    Sphone,
    Home,
}

impl DeviceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sphone => "sphone",
            Self::Home => "home",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphone" => Ok(Self::Sphone),
            "home" => Ok(Self::Home),
            other => Err(format!("unknown device kind {other:?}")),
        }
    }
}

/// A bound phone or home server. No storage for labelled data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSession {
    pub device_id: DeviceId,
    pub kind: DeviceKind,
    pub bound_actor: ActorId,
    pub credential: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SystemState {
    pub auth: AuthRegistry,
    pub db: CloudDb,
    pub hospitals: BTreeMap<ActorId, HospitalNode>,
    pub devices: BTreeMap<DeviceId, DeviceSession>,
    pub clock: u64,
    pub audit: AuditLog,
    pub outbox: Vec<Message>,
}

/// Fields of an audit record the caller chooses; seq and tick are filled in.
pub(crate) struct Entry {
    pub op: OpKind,
    pub actor: Option<ActorId>,
    pub node: Node,
    pub item: Option<ItemKey>,
    pub effect: Effect,
    pub detail: Detail,
}

impl SystemState {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn log(&mut self, entry: Entry) -> u64 {
        let seq = self.audit.next_seq();
        let record = AuditRecord {
            seq,
            at: self.clock,
            op: entry.op,
            actor: entry.actor,
            node: entry.node,
            item: entry.item,
            effect: entry.effect,
            outcome: Outcome::Ok,
            detail: entry.detail,
        };
        self.audit
            .append(record)
            .expect("engine assigns seq from the log length");
        seq
    }

    fn log_registration(&mut self, op: OpKind, actor: ActorId, detail: Detail) {
        self.log(Entry {
            op,
            actor: Some(actor),
            node: Node::Auth,
            item: None,
            effect: Effect::Registered,
            detail,
        });
    }

    pub fn register_patient(&mut self, actor: ActorId) -> Result<(), OpError> {
        if self.auth.patients.contains(&actor) {
            return Err(OpError::DuplicateRegistration);
        }
        self.auth.patients.insert(actor.clone());
        self.log_registration(OpKind::RegisterPatient, actor, Detail::None);
        Ok(())
    }

    pub fn register_user(&mut self, actor: ActorId) -> Result<(), OpError> {
        if self.auth.reg_usrs.contains(&actor) {
            return Err(OpError::DuplicateRegistration);
        }
        self.auth.reg_usrs.insert(actor.clone());
        self.log_registration(OpKind::RegisterUser, actor, Detail::None);
        Ok(())
    }

    pub fn add_hospital(
        &mut self,
        hospital_id: ActorId,
        staff: impl IntoIterator<Item = ActorId>,
    ) -> Result<(), OpError> {
        if self.hospitals.contains_key(&hospital_id) {
            return Err(OpError::DuplicateRegistration);
        }
        let staff: BTreeSet<ActorId> = staff.into_iter().collect();
        self.hospitals.insert(
            hospital_id.clone(),
            HospitalNode {
                hospital_id: hospital_id.clone(),
                staff: staff.clone(),
                table: Table::new(),
            },
        );
        self.log_registration(OpKind::AddHospital, hospital_id, Detail::Staff(staff));
        Ok(())
    }

    pub fn bind_device(
        &mut self,
        device_id: DeviceId,
        kind: DeviceKind,
        actor: ActorId,
        credential: impl Into<String>,
    ) -> Result<(), OpError> {
        if self.devices.contains_key(&device_id) {
            return Err(OpError::DuplicateRegistration);
        }
        let credential = credential.into();
        self.devices.insert(
            device_id.clone(),
            DeviceSession {
                device_id: device_id.clone(),
                kind,
                bound_actor: actor.clone(),
                credential: credential.clone(),
            },
        );
        self.log_registration(
            OpKind::BindDevice,
            actor,
            Detail::Device {
                id: device_id,
                kind,
                credential,
            },
        );
        Ok(())
    }

    /// Session check standing in for a real authentication protocol: the
    /// device must be bound to the identity it claims.
    pub fn authenticate(
        &self,
        device_id: &DeviceId,
        claimed_id: &ActorId,
    ) -> Result<&DeviceSession, OpError> {
        let session = self.devices.get(device_id).ok_or(OpError::UnknownDevice)?;
        if &session.bound_actor != claimed_id {
            return Err(OpError::AuthMismatch);
        }
        Ok(session)
    }

    /// Phones bound to `actor`, in device-id order.
    pub fn phones_of<'a>(&'a self, actor: &'a ActorId) -> impl Iterator<Item = &'a DeviceId> + 'a {
        self.devices
            .values()
            .filter(move |s| s.kind == DeviceKind::Sphone && &s.bound_actor == actor)
            .map(|s| &s.device_id)
    }

    /// Every table in the system: the db first, then hospitals by id.
    pub fn tables(&self) -> impl Iterator<Item = (Node, &Table)> {
        std::iter::once((Node::Db, &self.db.table)).chain(
            self.hospitals
                .values()
                .map(|h| (Node::Hospital(h.hospital_id.clone()), &h.table)),
        )
    }

    /// Nodes currently holding `key`.
    pub fn locations_of(&self, key: &ItemKey) -> BTreeSet<Node> {
        self.tables()
            .filter(|(_, t)| t.contains(key))
            .map(|(n, _)| n)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::DlmLabel;

    fn a(s: &str) -> ActorId {
        ActorId::new(s).unwrap()
    }

    fn d(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    #[test]
    fn register_patient_builds_up() {
        let mut s = SystemState::new();
        s.register_patient(a("alice")).unwrap();
        assert_eq!(s.auth.patients, BTreeSet::from([a("alice")]));
        assert_eq!(s.audit.len(), 1);
        assert_eq!(
            s.register_patient(a("alice")),
            Err(OpError::DuplicateRegistration)
        );
        assert_eq!(s.audit.len(), 1);
    }

    #[test]
    fn duplicate_hospital_and_device() {
        let mut s = SystemState::new();
        s.add_hospital(a("hosp1"), [a("drbob")]).unwrap();
        assert_eq!(
            s.add_hospital(a("hosp1"), []),
            Err(OpError::DuplicateRegistration)
        );
        s.bind_device(d("p1"), DeviceKind::Sphone, a("alice"), "1234")
            .unwrap();
        assert_eq!(
            s.bind_device(d("p1"), DeviceKind::Home, a("bob"), "0"),
            Err(OpError::DuplicateRegistration)
        );
        assert_eq!(s.hospitals[&a("hosp1")].hospital_id, a("hosp1"));
    }

    #[test]
    fn authenticate_cases() {
        let mut s = SystemState::new();
        s.bind_device(d("p1"), DeviceKind::Sphone, a("alice"), "1234")
            .unwrap();
        assert!(s.authenticate(&d("p1"), &a("alice")).is_ok());
        assert_eq!(
            s.authenticate(&d("p1"), &a("bob")).unwrap_err(),
            OpError::AuthMismatch
        );
        assert_eq!(
            s.authenticate(&d("nope"), &a("alice")).unwrap_err(),
            OpError::UnknownDevice
        );
    }

    #[test]
    fn table_index_stays_consistent() {
        let mut t = Table::new();
        let k1 = ItemKey::new(DlmLabel::new(a("alice"), [a("h")]), "x");
        let k2 = ItemKey::new(DlmLabel::new(a("alice"), []), "y");
        t.insert(k1.clone(), Meta::new("p", 1));
        t.insert(k2.clone(), Meta::new("p", 1));
        assert_eq!(t.owned_by(&a("alice")).count(), 2);
        t.remove(&k1);
        t.remove(&k2);
        assert_eq!(t, Table::new());
        assert_eq!(t.owned_by(&a("alice")).count(), 0);
    }
}
