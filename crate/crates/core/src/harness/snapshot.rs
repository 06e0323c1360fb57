//! Versioned, line-oriented state snapshots. Fields are tab-separated:
//!
//! ```text
//! carelabel-snapshot 1
//! clock <tick>
//! patient <actor>
//! user <actor>
//! hospital <id> {<staff>,...}
//! device <id> <sphone|home> <actor> <credential>
//! db <item> <purpose> <expiry> <restricted>
//! held <hospital> <item> <purpose> <expiry> <restricted>
//! message <kind> <recipient> <op seq> <items>
//! audit <seq> <at> <op> <actor> <node> <item> <effect> <outcome> <detail>
//! end
//! ```
//!
//! Sections appear in this order; sets are written in their canonical
//! (sorted) order, the outbox and audit log in sequence order. Equal states
//! therefore produce identical bytes. An item survives a sweep while
//! `expiry >= clock`.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::codec::{self, DecodeError};
use crate::state::{DeviceSession, HospitalNode, SystemState, Table};

pub const MAGIC: &str = "carelabel-snapshot";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot format version {found} is not supported (expected {VERSION})")]
    FormatVersionMismatch { found: String },
    #[error("corrupt snapshot at line {line}: {message}")]
    CorruptSnapshot { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn table_rows(out: &mut String, prefix: &str, table: &Table) {
    for (key, meta) in table.iter() {
        out.push_str(prefix);
        out.push_str(&codec::format_item(key));
        out.push('\t');
        out.push_str(&codec::encode_text(&meta.purpose));
        out.push('\t');
        out.push_str(&format!("{}\t{}\n", meta.expiry, meta.restricted));
    }
}

/// Renders a snapshot. With `include_outbox = false` the message section is
/// omitted; that form is what audit replay can reconstruct.
pub fn render(state: &SystemState, include_outbox: bool) -> String {
    let mut out = format!("{MAGIC}\t{VERSION}\nclock\t{}\n", state.clock);
    for p in &state.auth.patients {
        out.push_str(&format!("patient\t{p}\n"));
    }
    for u in &state.auth.reg_usrs {
        out.push_str(&format!("user\t{u}\n"));
    }
    for h in state.hospitals.values() {
        out.push_str(&format!(
            "hospital\t{}\t{}\n",
            h.hospital_id,
            codec::format_actor_set(&h.staff)
        ));
    }
    for d in state.devices.values() {
        out.push_str(&format!(
            "device\t{}\t{}\t{}\t{}\n",
            d.device_id,
            d.kind,
            d.bound_actor,
            codec::encode_text(&d.credential)
        ));
    }
    table_rows(&mut out, "db\t", &state.db.table);
    for h in state.hospitals.values() {
        table_rows(&mut out, &format!("held\t{}\t", h.hospital_id), &h.table);
    }
    if include_outbox {
        for m in &state.outbox {
            out.push_str("message\t");
            out.push_str(&codec::format_message(m));
            out.push('\n');
        }
    }
    for r in state.audit.records() {
        out.push_str("audit\t");
        out.push_str(&codec::format_audit_record(r));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn save(state: &SystemState, path: &Path) -> Result<(), SnapshotError> {
    fs::write(path, render(state, true))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SystemState, SnapshotError> {
    parse(&fs::read_to_string(path)?)
}

fn corrupt(line: usize, message: impl Into<String>) -> SnapshotError {
    SnapshotError::CorruptSnapshot {
        line,
        message: message.into(),
    }
}

fn meta_fields(fields: &[&str]) -> Result<crate::label::Meta, DecodeError> {
    let [purpose, expiry, restricted] = fields[..] else {
        return Err(DecodeError(
            "item row needs purpose, expiry, restricted".into(),
        ));
    };
    Ok(crate::label::Meta {
        purpose: codec::decode_text(purpose)?,
        expiry: codec::parse_u64(expiry)?,
        restricted: codec::parse_bool(restricted)?,
    })
}

pub fn parse(text: &str) -> Result<SystemState, SnapshotError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| corrupt(1, "empty file"))?;
    match header.split_once('\t') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => {
            return Err(SnapshotError::FormatVersionMismatch {
                found: v.to_string(),
            })
        }
        _ => return Err(corrupt(1, "missing snapshot header")),
    }

    let mut state = SystemState::new();
    let mut ended = false;
    for (n, line) in lines {
        if ended {
            return Err(corrupt(n, "content after end marker"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |e: DecodeError| corrupt(n, e.0);
        match (fields[0], &fields[1..]) {
            ("clock", [t]) => state.clock = codec::parse_u64(t).map_err(err)?,
            ("patient", [a]) => {
                state.auth.patients.insert(codec::actor(a).map_err(err)?);
            }
            ("user", [a]) => {
                state.auth.reg_usrs.insert(codec::actor(a).map_err(err)?);
            }
            ("hospital", [id, staff]) => {
                let id = codec::actor(id).map_err(err)?;
                let staff = codec::parse_actor_set(staff).map_err(err)?;
                state.hospitals.insert(
                    id.clone(),
                    HospitalNode {
                        hospital_id: id,
                        staff,
                        table: Table::new(),
                    },
                );
            }
            ("device", [id, kind, actor, cred]) => {
                let id = codec::device(id).map_err(err)?;
                state.devices.insert(
                    id.clone(),
                    DeviceSession {
                        device_id: id,
                        kind: kind.parse().map_err(|e: String| corrupt(n, e))?,
                        bound_actor: codec::actor(actor).map_err(err)?,
                        credential: codec::decode_text(cred).map_err(err)?,
                    },
                );
            }
            ("db", [item, rest @ ..]) => {
                let key = codec::parse_item(item).map_err(err)?;
                state.db.table.insert(key, meta_fields(rest).map_err(err)?);
            }
            ("held", [h, item, rest @ ..]) => {
                let h = codec::actor(h).map_err(err)?;
                let key = codec::parse_item(item).map_err(err)?;
                let meta = meta_fields(rest).map_err(err)?;
                state
                    .hospitals
                    .get_mut(&h)
                    .ok_or_else(|| corrupt(n, format!("held row for unknown hospital {h}")))?
                    .table
                    .insert(key, meta);
            }
            ("message", rest) => state
                .outbox
                .push(codec::parse_message_fields(rest).map_err(err)?),
            ("audit", rest) => {
                let record = codec::parse_audit_fields(rest).map_err(err)?;
                state
                    .audit
                    .append(record)
                    .map_err(|e| corrupt(n, e.to_string()))?;
            }
            ("end", []) => ended = true,
            (tag, _) => return Err(corrupt(n, format!("unexpected row {tag:?}"))),
        }
    }
    if !ended {
        return Err(corrupt(
            text.lines().count() + 1,
            "missing end marker (truncated?)",
        ));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_state_round_trips() {
        let s = SystemState::new();
        let text = render(&s, true);
        assert_eq!(text, "carelabel-snapshot\t1\nclock\t0\nend\n");
        assert_eq!(parse(&text).unwrap(), s);
    }

    #[test]
    fn rejects_version_and_truncation() {
        assert!(matches!(
            parse("carelabel-snapshot\t9\nend\n"),
            Err(SnapshotError::FormatVersionMismatch { .. })
        ));
        assert!(matches!(
            parse("carelabel-snapshot\t1\nclock\t0\n"),
            Err(SnapshotError::CorruptSnapshot { line: 3, .. })
        ));
        assert!(matches!(
            parse("carelabel-snapshot\t1\nclock\tx\nend\n"),
            Err(SnapshotError::CorruptSnapshot { line: 2, .. })
        ));
        assert!(matches!(
            parse(""),
            Err(SnapshotError::CorruptSnapshot { line: 1, .. })
        ));
    }
}
