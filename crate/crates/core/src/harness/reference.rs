//! Naive executable semantics used as a differential oracle.
//!
//! Tables are plain vectors of records, every query is a linear scan over
//! the whole state, and nothing is indexed. Label types are shared with the
//! engine; table storage, lookup and removal are not.

use std::collections::BTreeSet;

use crate::audit::{MessageKind, Recipient};
use crate::error::OpError;
use crate::label::{ActorId, DeviceId, DlmLabel, ItemKey, Meta};
use crate::state::DeviceKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefItem {
    pub owner: ActorId,
    pub readers: Vec<ActorId>,
    pub payload: String,
    pub purpose: String,
    pub expiry: u64,
    pub restricted: bool,
}

fn same_readers(a: &[ActorId], b: &[ActorId]) -> bool {
    a.iter().all(|x| b.contains(x)) && b.iter().all(|x| a.contains(x))
}

impl RefItem {
    fn is(&self, owner: &ActorId, readers: &[ActorId], payload: &str) -> bool {
        &self.owner == owner && same_readers(&self.readers, readers) && self.payload == payload
    }

    fn same_item(&self, other: &RefItem) -> bool {
        self.is(&other.owner, &other.readers, &other.payload)
    }

    pub fn key(&self) -> ItemKey {
        ItemKey::new(
            DlmLabel::new(self.owner.clone(), self.readers.iter().cloned()),
            self.payload.clone(),
        )
    }

    pub fn meta(&self) -> Meta {
        Meta {
            purpose: self.purpose.clone(),
            expiry: self.expiry,
            restricted: self.restricted,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefHospital {
    pub id: ActorId,
    pub staff: Vec<ActorId>,
    pub table: Vec<RefItem>,
}

#[derive(Debug, Clone)]
pub struct RefDevice {
    pub id: DeviceId,
    pub kind: DeviceKind,
    pub actor: ActorId,
}

/// Message without its sequence correlation (the model keeps no log).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RefMessage {
    pub kind: MessageKind,
    pub recipient: Recipient,
    pub items: BTreeSet<ItemKey>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefSarEntry {
    pub key: ItemKey,
    pub meta: Meta,
    pub db: bool,
    pub hospitals: BTreeSet<ActorId>,
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceModel {
    pub patients: Vec<ActorId>,
    pub users: Vec<ActorId>,
    pub hospitals: Vec<RefHospital>,
    pub devices: Vec<RefDevice>,
    pub db: Vec<RefItem>,
    pub clock: u64,
    pub outbox: Vec<RefMessage>,
}

fn label_parts(label: &DlmLabel) -> (ActorId, Vec<ActorId>) {
    (
        label.owner().clone(),
        label.readers().iter().cloned().collect(),
    )
}

impl ReferenceModel {
    pub fn new() -> Self {
        Self::default()
    }

    fn device(&self, id: &DeviceId) -> Option<&RefDevice> {
        self.devices.iter().find(|d| &d.id == id)
    }

    fn hospital(&self, id: &ActorId) -> Option<&RefHospital> {
        self.hospitals.iter().find(|h| &h.id == id)
    }

    fn send(
        &mut self,
        out: &mut Vec<RefMessage>,
        kind: MessageKind,
        to: Recipient,
        items: BTreeSet<ItemKey>,
    ) {
        let m = RefMessage {
            kind,
            recipient: to,
            items,
        };
        self.outbox.push(m.clone());
        out.push(m);
    }

    pub fn register_patient(&mut self, a: &ActorId) -> Result<(), OpError> {
        if self.patients.contains(a) {
            return Err(OpError::DuplicateRegistration);
        }
        self.patients.push(a.clone());
        Ok(())
    }

    pub fn register_user(&mut self, a: &ActorId) -> Result<(), OpError> {
        if self.users.contains(a) {
            return Err(OpError::DuplicateRegistration);
        }
        self.users.push(a.clone());
        Ok(())
    }

    pub fn add_hospital(&mut self, id: &ActorId, staff: &[ActorId]) -> Result<(), OpError> {
        if self.hospitals.iter().any(|h| &h.id == id) {
            return Err(OpError::DuplicateRegistration);
        }
        self.hospitals.push(RefHospital {
            id: id.clone(),
            staff: staff.to_vec(),
            table: Vec::new(),
        });
        Ok(())
    }

    pub fn bind_device(
        &mut self,
        id: &DeviceId,
        kind: DeviceKind,
        actor: &ActorId,
    ) -> Result<(), OpError> {
        if self.devices.iter().any(|d| &d.id == id) {
            return Err(OpError::DuplicateRegistration);
        }
        self.devices.push(RefDevice {
            id: id.clone(),
            kind,
            actor: actor.clone(),
        });
        Ok(())
    }

    /// device exists, kind allowed, bound to claimed, claimed owns label
    fn gate(
        &self,
        device: &DeviceId,
        phone_only: bool,
        claimed: &ActorId,
        owner: Option<&ActorId>,
    ) -> Result<(), OpError> {
        let d = self.device(device).ok_or(OpError::UnknownDevice)?;
        if phone_only && d.kind != DeviceKind::Sphone {
            return Err(OpError::WrongDeviceKind);
        }
        if &d.actor != claimed || owner.is_some_and(|o| o != claimed) {
            return Err(OpError::AuthMismatch);
        }
        Ok(())
    }

    pub fn upload(
        &mut self,
        device: &DeviceId,
        claimed: &ActorId,
        label: &DlmLabel,
        purpose: &str,
        expiry: u64,
        payload: &str,
    ) -> Result<Vec<RefMessage>, OpError> {
        let (owner, readers) = label_parts(label);
        self.gate(device, false, claimed, Some(&owner))?;
        if !self.patients.contains(&owner) {
            return Err(OpError::NotAPatient);
        }
        if !readers.iter().all(|r| self.users.contains(r)) {
            return Err(OpError::UnregisteredReader);
        }
        let mut item = RefItem {
            owner,
            readers,
            payload: payload.to_string(),
            purpose: purpose.to_string(),
            expiry,
            restricted: false,
        };
        let mut kept = Vec::new();
        for old in std::mem::take(&mut self.db) {
            if old.same_item(&item) {
                item.restricted = old.restricted;
            } else {
                kept.push(old);
            }
        }
        kept.push(item.clone());
        self.db = kept;
        let mut out = Vec::new();
        self.send(
            &mut out,
            MessageKind::UploadOk,
            Recipient::Device(device.clone()),
            BTreeSet::from([item.key()]),
        );
        Ok(out)
    }

    pub fn delete(
        &mut self,
        device: &DeviceId,
        claimed: &ActorId,
        label: &DlmLabel,
        payload: &str,
        strict: bool,
    ) -> Result<Vec<RefMessage>, OpError> {
        let (owner, readers) = label_parts(label);
        self.gate(device, true, claimed, Some(&owner))?;
        if !self.db.iter().any(|i| i.is(&owner, &readers, payload)) {
            return Err(OpError::NotFound);
        }
        if strict {
            for h in &self.hospitals {
                if readers.contains(&h.id)
                    && !h.table.iter().any(|i| i.is(&owner, &readers, payload))
                {
                    return Err(OpError::StrictPreconditionFailed);
                }
            }
        }
        self.db.retain(|i| !i.is(&owner, &readers, payload));
        for h in &mut self.hospitals {
            h.table.retain(|i| !i.is(&owner, &readers, payload));
        }
        let key = ItemKey::new(label.clone(), payload);
        let mut out = Vec::new();
        self.send(
            &mut out,
            MessageKind::DeleteOk,
            Recipient::Device(device.clone()),
            BTreeSet::from([key]),
        );
        Ok(out)
    }

    pub fn download(
        &mut self,
        hospital: &ActorId,
        doctor: &ActorId,
        owner: &ActorId,
    ) -> Result<Vec<RefMessage>, OpError> {
        let h = self.hospital(hospital).ok_or(OpError::UnknownHospital)?;
        if !h.staff.contains(doctor) {
            return Err(OpError::NotStaff);
        }
        if !self.patients.contains(owner) {
            return Err(OpError::NotAPatient);
        }
        if !self.users.contains(hospital) {
            return Err(OpError::HospitalNotRegistered);
        }
        let matches: Vec<RefItem> = self
            .db
            .iter()
            .filter(|i| &i.owner == owner && i.readers.contains(hospital) && !i.restricted)
            .cloned()
            .collect();
        if matches.is_empty() {
            return Err(OpError::NoAccessibleData);
        }
        let h = self
            .hospitals
            .iter_mut()
            .find(|h| &h.id == hospital)
            .expect("checked above");
        for m in &matches {
            h.table.retain(|i| !i.same_item(m));
            h.table.push(m.clone());
        }

        let mut out = Vec::new();
        let keys: BTreeSet<ItemKey> = matches.iter().map(RefItem::key).collect();
        self.send(
            &mut out,
            MessageKind::DownloadOk,
            Recipient::Actor(doctor.clone()),
            keys,
        );
        let phones: Vec<DeviceId> = self
            .devices
            .iter()
            .filter(|d| &d.actor == owner && d.kind == DeviceKind::Sphone)
            .map(|d| d.id.clone())
            .collect();
        for m in &matches {
            if phones.is_empty() {
                self.send(
                    &mut out,
                    MessageKind::Access,
                    Recipient::Actor(owner.clone()),
                    BTreeSet::from([m.key()]),
                );
            }
            for p in &phones {
                self.send(
                    &mut out,
                    MessageKind::Access,
                    Recipient::Device(p.clone()),
                    BTreeSet::from([m.key()]),
                );
            }
        }
        Ok(out)
    }

    pub fn restrict(
        &mut self,
        device: &DeviceId,
        claimed: &ActorId,
        label: &DlmLabel,
        payload: &str,
        flag: bool,
    ) -> Result<(), OpError> {
        let (owner, readers) = label_parts(label);
        self.gate(device, true, claimed, Some(&owner))?;
        let item = self
            .db
            .iter_mut()
            .find(|i| i.is(&owner, &readers, payload))
            .ok_or(OpError::NotFound)?;
        item.restricted = flag;
        Ok(())
    }

    pub fn tick(&mut self, n: u64) {
        self.clock += n;
    }

    pub fn sweep(&mut self) -> BTreeSet<ItemKey> {
        let now = self.clock;
        let mut erased = BTreeSet::new();
        let mut keep = |table: &mut Vec<RefItem>| {
            table.retain(|i| {
                let dead = i.expiry < now;
                if dead {
                    erased.insert(i.key());
                }
                !dead
            })
        };
        keep(&mut self.db);
        for h in &mut self.hospitals {
            keep(&mut h.table);
        }
        erased
    }

    /// Full-scan subject access: every table is searched for the owner.
    pub fn sar(&self, device: &DeviceId, claimed: &ActorId) -> Result<Vec<RefSarEntry>, OpError> {
        self.gate(device, false, claimed, None)?;
        if !self.patients.contains(claimed) {
            return Err(OpError::NotAPatient);
        }
        let mut entries: Vec<RefSarEntry> = Vec::new();
        let everywhere = self.db.iter().map(|i| (None, i)).chain(
            self.hospitals
                .iter()
                .flat_map(|h| h.table.iter().map(move |i| (Some(&h.id), i))),
        );
        for (place, item) in everywhere {
            if &item.owner != claimed {
                continue;
            }
            let key = item.key();
            let pos = match entries.iter().position(|e| e.key == key) {
                Some(p) => p,
                None => {
                    entries.push(RefSarEntry {
                        key,
                        meta: item.meta(),
                        db: false,
                        hospitals: BTreeSet::new(),
                    });
                    entries.len() - 1
                }
            };
            // meta comes from the db copy, else the lowest hospital id
            let e = &mut entries[pos];
            match place {
                None => {
                    e.db = true;
                    e.meta = item.meta();
                }
                Some(h) => {
                    e.hospitals.insert(h.clone());
                    if !e.db && e.hospitals.iter().next() == Some(h) {
                        e.meta = item.meta();
                    }
                }
            }
        }
        Ok(entries)
    }

    pub fn drain(&mut self, to: &Recipient) -> Vec<RefMessage> {
        let mut taken = Vec::new();
        let mut kept = Vec::new();
        for m in std::mem::take(&mut self.outbox) {
            if &m.recipient == to {
                taken.push(m);
            } else {
                kept.push(m);
            }
        }
        self.outbox = kept;
        taken
    }

    pub fn is_device(&self, token: &str) -> bool {
        self.devices.iter().any(|d| d.id.as_str() == token)
    }
}
