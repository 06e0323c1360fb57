//! Owner/reader-labelled healthcare data store.
//!
//! Patients upload readings from a phone or home server to a cloud
//! database; hospital staff copy them to their hospital's table when the
//! label names the hospital as a reader; patients delete, restrict and
//! query their data from the phone. Retention expiry is enforced by an
//! explicit sweep over every table, and every change is written to an
//! append-only audit log that can rebuild the whole state.
//!
//! The [`harness`] module drives the store from scenario scripts, checks
//! invariants after each command and compares against a naive reference
//! model.

pub mod audit;
pub mod codec;
pub mod error;
pub mod harness;
pub mod label;
pub mod ops;
pub mod retention;
pub mod state;

pub use audit::{AuditLog, AuditRecord, Message, MessageKind, Recipient};
pub use error::OpError;
pub use label::{
    flow_permitted, item_identity, may_read, ActorId, DeviceId, DlmLabel, ItemKey, LabelledItem,
    Meta,
};
pub use ops::{DeleteMode, OpResult, SarReport};
pub use state::{DeviceKind, SystemState};
