//! Append-only audit log and the notification outbox.
//!
//! Every table mutation, registration, restriction change, clock advance
//! and subject access request appends exactly one [`AuditRecord`]. The log
//! carries enough detail to rebuild the state from scratch (see
//! [`crate::harness::replay`]).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::error::OpError;
use crate::label::{ActorId, DeviceId, ItemKey, Meta};
use crate::state::DeviceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    UploadOk,
    DeleteOk,
    DownloadOk,
    Access,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UploadOk => "upload_ok",
            Self::DeleteOk => "delete_ok",
            Self::DownloadOk => "download_ok",
            Self::Access => "access",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "upload_ok" => Self::UploadOk,
            "delete_ok" => Self::DeleteOk,
            "download_ok" => Self::DownloadOk,
            "access" => Self::Access,
            other => return Err(format!("unknown message kind {other:?}")),
        })
    }
}

/// Either a person/institution or a concrete device session.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Recipient {
    Actor(ActorId),
    Device(DeviceId),
}

impl fmt::Display for Recipient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Actor(a) => write!(f, "actor:{a}"),
            Self::Device(d) => write!(f, "dev:{d}"),
        }
    }
}

impl FromStr for Recipient {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("actor:") {
            ActorId::new(rest)
                .map(Self::Actor)
                .map_err(|e| e.to_string())
        } else if let Some(rest) = s.strip_prefix("dev:") {
            DeviceId::new(rest)
                .map(Self::Device)
                .map_err(|e| e.to_string())
        } else {
            Err(format!("recipient {s:?} lacks actor:/dev: prefix"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Message {
    pub kind: MessageKind,
    pub recipient: Recipient,
    pub items: BTreeSet<ItemKey>,
    /// Audit seq of the first record appended by the originating operation.
    pub op_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    RegisterPatient,
    RegisterUser,
    AddHospital,
    BindDevice,
    Upload,
    Delete,
    Download,
    Restrict,
    Sar,
    Tick,
    Sweep,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        Self::RegisterPatient,
        Self::RegisterUser,
        Self::AddHospital,
        Self::BindDevice,
        Self::Upload,
        Self::Delete,
        Self::Download,
        Self::Restrict,
        Self::Sar,
        Self::Tick,
        Self::Sweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RegisterPatient => "register_patient",
            Self::RegisterUser => "register_user",
            Self::AddHospital => "add_hospital",
            Self::BindDevice => "bind_device",
            Self::Upload => "upload",
            Self::Delete => "delete",
            Self::Download => "download",
            Self::Restrict => "restrict",
            Self::Sar => "sar",
            Self::Tick => "tick",
            Self::Sweep => "sweep",
        }
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown operation {s:?}"))
    }
}

/// Where the effect happened.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Db,
    Hospital(ActorId),
    Auth,
    Clock,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Db => f.write_str("db"),
            Self::Hospital(h) => write!(f, "h:{h}"),
            Self::Auth => f.write_str("auth"),
            Self::Clock => f.write_str("clock"),
        }
    }
}

impl FromStr for Node {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "db" => Ok(Self::Db),
            "auth" => Ok(Self::Auth),
            "clock" => Ok(Self::Clock),
            _ => match s.strip_prefix("h:") {
                Some(h) => ActorId::new(h)
                    .map(Self::Hospital)
                    .map_err(|e| e.to_string()),
                None => Err(format!("unknown node {s:?}")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Effect {
    Added,
    Removed,
    Read,
    Flagged,
    Registered,
    Ticked,
}

impl Effect {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Added => "added",
            Self::Removed => "removed",
            Self::Read => "read",
            Self::Flagged => "flagged",
            Self::Registered => "registered",
            Self::Ticked => "ticked",
        }
    }
}

impl FromStr for Effect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "added" => Self::Added,
            "removed" => Self::Removed,
            "read" => Self::Read,
            "flagged" => Self::Flagged,
            "registered" => Self::Registered,
            "ticked" => Self::Ticked,
            other => return Err(format!("unknown effect {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Error(OpError),
}

/// Data needed to re-execute an effect during replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Detail {
    None,
    Meta(Meta),
    Restricted(bool),
    Staff(BTreeSet<ActorId>),
    Device {
        id: DeviceId,
        kind: DeviceKind,
        credential: String,
    },
    Ticks(u64),
    Erased(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub seq: u64,
    pub at: u64,
    pub op: OpKind,
    pub actor: Option<ActorId>,
    pub node: Node,
    pub item: Option<ItemKey>,
    pub effect: Effect,
    pub outcome: Outcome,
    pub detail: Detail,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: AuditRecord) -> Result<(), AuditError> {
        let expected = self.next_seq();
        if record.seq != expected {
            return Err(AuditError::SequenceGap {
                expected,
                got: record.seq,
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn since(&self, seq: u64) -> &[AuditRecord] {
        let start = (seq as usize).min(self.records.len());
        &self.records[start..]
    }

    /// Records whose item belongs to `owner`, in seq order.
    pub fn touching_owner<'a>(
        &'a self,
        owner: &'a ActorId,
    ) -> impl Iterator<Item = &'a AuditRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.item.as_ref().is_some_and(|k| k.owner() == owner))
    }

    pub fn touching_item<'a>(
        &'a self,
        key: &'a ItemKey,
    ) -> impl Iterator<Item = &'a AuditRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.item.as_ref() == Some(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u64) -> AuditRecord {
        AuditRecord {
            seq,
            at: 0,
            op: OpKind::Tick,
            actor: None,
            node: Node::Clock,
            item: None,
            effect: Effect::Ticked,
            outcome: Outcome::Ok,
            detail: Detail::Ticks(1),
        }
    }

    #[test]
    fn append_checks_sequence() {
        let mut log = AuditLog::new();
        log.append(rec(0)).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(
            log.append(rec(5)),
            Err(AuditError::SequenceGap {
                expected: 1,
                got: 5
            })
        );
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.as_str().parse::<OpKind>().unwrap(), k);
        }
        for n in ["db", "auth", "clock", "h:hosp1"] {
            assert_eq!(n.parse::<Node>().unwrap().to_string(), n);
        }
        assert!("h:".parse::<Node>().is_err());
        for r in ["actor:alice", "dev:phone1"] {
            assert_eq!(r.parse::<Recipient>().unwrap().to_string(), r);
        }
    }
}
