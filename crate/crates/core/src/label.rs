//! Actors, owner/reader labels, GDPR metadata and labelled items.
//!
//! A label names one owner and a finite reader set. The owner may always
//! read its own data; any other principal must appear in the reader set.
//! Every copy between nodes is gated by [`flow_permitted`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Characters that may never appear in an identifier token. They are the
/// separators of the textual formats (reader lists, item keys, quoting).
const RESERVED: &[char] = &[',', '{', '}', ';', '%', '"', '#', '\\', '|'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("identifier token is empty")]
    Empty,
    #[error("identifier token {0:?} contains a reserved or whitespace character")]
    BadChar(String),
}

fn validate_token(raw: &str) -> Result<(), TokenError> {
    if raw.is_empty() {
        return Err(TokenError::Empty);
    }
    if raw
        .chars()
        .any(|c| c.is_whitespace() || c.is_control() || RESERVED.contains(&c))
    {
        return Err(TokenError::BadChar(raw.to_string()));
    }
    Ok(())
}

/// Principal identifier. Patients, doctors, hospitals and other institutions
/// share one namespace; the role comes from registry membership.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId(String);

impl ActorId {
    pub fn new(raw: impl Into<String>) -> Result<Self, TokenError> {
        let raw = raw.into();
        validate_token(&raw)?;
        Ok(Self(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ActorId {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// Device session token (phone or home server).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(raw: impl Into<String>) -> Result<Self, TokenError> {
        let raw = raw.into();
        validate_token(&raw)?;
        Ok(Self(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DeviceId {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// Owner plus reader set. Fields are private: a label cannot be changed
/// after construction, so an item keeps the label it was uploaded with.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DlmLabel {
    owner: ActorId,
    readers: BTreeSet<ActorId>,
}

impl DlmLabel {
    pub fn new(owner: ActorId, readers: impl IntoIterator<Item = ActorId>) -> Self {
        Self {
            owner,
            readers: readers.into_iter().collect(),
        }
    }

    pub fn owner(&self) -> &ActorId {
        &self.owner
    }

    pub fn readers(&self) -> &BTreeSet<ActorId> {
        &self.readers
    }

    /// Returns a label with one more reader. The original is untouched.
    pub fn with_reader(&self, reader: ActorId) -> Self {
        let mut readers = self.readers.clone();
        readers.insert(reader);
        Self {
            owner: self.owner.clone(),
            readers,
        }
    }
}

impl fmt::Display for DlmLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{", self.owner)?;
        for (i, r) in self.readers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{r}")?;
        }
        f.write_str("}")
    }
}

/// Purpose, absolute expiry tick and processing-restriction flag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Meta {
    pub purpose: String,
    pub expiry: u64,
    pub restricted: bool,
}

impl Meta {
    /// Fresh upload metadata; restriction is off.
    pub fn new(purpose: impl Into<String>, expiry: u64) -> Self {
        Self {
            purpose: purpose.into(),
            expiry,
            restricted: false,
        }
    }

    /// An item is due for erasure once the clock has passed its expiry.
    /// Expiry equal to `now` still survives.
    pub fn expired_at(&self, now: u64) -> bool {
        self.expiry < now
    }
}

/// Identity of a table element: the `(label, payload)` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemKey {
    pub label: DlmLabel,
    pub payload: String,
}

impl ItemKey {
    pub fn new(label: DlmLabel, payload: impl Into<String>) -> Self {
        Self {
            label,
            payload: payload.into(),
        }
    }

    pub fn owner(&self) -> &ActorId {
        self.label.owner()
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {:?})", self.label, self.payload)
    }
}

/// Label, metadata and opaque payload. Equality of table elements is by
/// [`item_identity`]; `meta` is carried along but is not part of identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledItem {
    pub label: DlmLabel,
    pub meta: Meta,
    pub payload: String,
}

impl LabelledItem {
    pub fn new(label: DlmLabel, meta: Meta, payload: impl Into<String>) -> Self {
        Self {
            label,
            meta,
            payload: payload.into(),
        }
    }

    pub fn key(&self) -> ItemKey {
        item_identity(self)
    }
}

pub fn item_identity(item: &LabelledItem) -> ItemKey {
    ItemKey::new(item.label.clone(), item.payload.clone())
}

/// Reader check with the owner as implicit reader.
pub fn may_read(label: &DlmLabel, actor: &ActorId) -> bool {
    label.owner() == actor || label.readers().contains(actor)
}

/// The single gate for every inter-node copy.
pub fn flow_permitted(item: &LabelledItem, destination: &ActorId) -> bool {
    may_read(&item.label, destination)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> ActorId {
        ActorId::new(s).unwrap()
    }

    fn item(owner: &str, readers: &[&str], payload: &str) -> LabelledItem {
        LabelledItem::new(
            DlmLabel::new(a(owner), readers.iter().map(|r| a(r))),
            Meta::new("care", 10),
            payload,
        )
    }

    #[test]
    fn reader_owner_and_stranger() {
        let label = DlmLabel::new(a("alice"), [a("hosp1")]);
        assert!(may_read(&label, &a("hosp1")));
        assert!(may_read(&label, &a("alice")));
        assert!(!may_read(&label, &a("bob")));
    }

    #[test]
    fn flow_gate_follows_reader_set() {
        assert!(flow_permitted(&item("alice", &["hosp1"], "d"), &a("hosp1")));
        assert!(!flow_permitted(&item("alice", &[], "d"), &a("hosp1")));
    }

    #[test]
    fn identity_ignores_meta() {
        let x = item("alice", &["hosp1"], "hr=72");
        let mut y = x.clone();
        y.meta.purpose = "research".into();
        y.meta.expiry = 99;
        y.meta.restricted = true;
        assert_eq!(x.key(), y.key());
        assert_ne!(x.key(), item("alice", &["hosp1"], "hr=73").key());
        assert_ne!(x.key(), item("alice", &["hosp1", "hosp2"], "hr=72").key());
    }

    #[test]
    fn duplicate_readers_collapse() {
        let label = DlmLabel::new(a("alice"), [a("h"), a("h")]);
        assert_eq!(label.readers().len(), 1);
    }

    #[test]
    fn token_validation() {
        assert_eq!(ActorId::new(""), Err(TokenError::Empty));
        assert!(ActorId::new("a b").is_err());
        assert!(ActorId::new("a,b").is_err());
        assert!(ActorId::new("dr.bob@hosp-1").is_ok());
        assert!(DeviceId::new("phone{").is_err());
    }

    #[test]
    fn expiry_is_strict() {
        let m = Meta::new("p", 5);
        assert!(!m.expired_at(5));
        assert!(m.expired_at(6));
    }
}
