//! Line-oriented text forms shared by the audit dump and the snapshot.
//!
//! Fields are tab-separated. Free-form strings (payload, purpose,
//! credential) are percent-encoded so they never contain a tab, newline,
//! or one of the list separators. Identifier tokens are validated at
//! construction and are written verbatim.

use std::collections::BTreeSet;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use thiserror::Error;

use crate::audit::{AuditRecord, Detail, Message, Outcome};
use crate::label::{ActorId, DeviceId, DlmLabel, ItemKey, Meta};

const FREE_TEXT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'_')
    .remove(b'.')
    .remove(b'~')
    .remove(b'=')
    .remove(b'+')
    .remove(b'/')
    .remove(b':')
    .remove(b'@')
    .remove(b'!')
    .remove(b'*')
    .remove(b'(')
    .remove(b')');

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct DecodeError(pub String);

fn bad(msg: impl Into<String>) -> DecodeError {
    DecodeError(msg.into())
}

pub fn encode_text(s: &str) -> String {
    utf8_percent_encode(s, FREE_TEXT).to_string()
}

pub fn decode_text(s: &str) -> Result<String, DecodeError> {
    percent_decode_str(s)
        .decode_utf8()
        .map(|c| c.into_owned())
        .map_err(|e| bad(format!("bad percent-encoding in {s:?}: {e}")))
}

pub fn actor(s: &str) -> Result<ActorId, DecodeError> {
    ActorId::new(s).map_err(|e| bad(e.to_string()))
}

pub fn device(s: &str) -> Result<DeviceId, DecodeError> {
    DeviceId::new(s).map_err(|e| bad(e.to_string()))
}

pub fn format_actor_set(set: &BTreeSet<ActorId>) -> String {
    let inner: Vec<&str> = set.iter().map(|a| a.as_str()).collect();
    format!("{{{}}}", inner.join(","))
}

/// Accepts `{a,b}`, `{}` and the brace-less `a,b`.
pub fn parse_actor_set(s: &str) -> Result<BTreeSet<ActorId>, DecodeError> {
    let inner = match s.strip_prefix('{') {
        Some(rest) => rest
            .strip_suffix('}')
            .ok_or_else(|| bad(format!("unbalanced braces in {s:?}")))?,
        None => s,
    };
    if inner.is_empty() {
        return Ok(BTreeSet::new());
    }
    inner.split(',').map(actor).collect()
}

/// `owner{r1,r2}:payload`
pub fn format_item(key: &ItemKey) -> String {
    format!(
        "{}{}:{}",
        key.label.owner(),
        format_actor_set(key.label.readers()),
        encode_text(&key.payload)
    )
}

pub fn parse_item(s: &str) -> Result<ItemKey, DecodeError> {
    let open = s
        .find('{')
        .ok_or_else(|| bad(format!("item {s:?} lacks reader set")))?;
    let close = s[open..]
        .find('}')
        .map(|i| i + open)
        .ok_or_else(|| bad(format!("item {s:?} has unclosed reader set")))?;
    let owner = actor(&s[..open])?;
    let readers = parse_actor_set(&s[open..=close])?;
    let payload = s[close + 1..]
        .strip_prefix(':')
        .ok_or_else(|| bad(format!("item {s:?} lacks ':' before payload")))?;
    Ok(ItemKey::new(
        DlmLabel::new(owner, readers),
        decode_text(payload)?,
    ))
}

pub fn format_items(items: &BTreeSet<ItemKey>) -> String {
    if items.is_empty() {
        return "-".into();
    }
    items.iter().map(format_item).collect::<Vec<_>>().join(";")
}

pub fn parse_items(s: &str) -> Result<BTreeSet<ItemKey>, DecodeError> {
    if s == "-" {
        return Ok(BTreeSet::new());
    }
    s.split(';').map(parse_item).collect()
}

pub fn format_meta(meta: &Meta) -> String {
    format!(
        "{};{};{}",
        encode_text(&meta.purpose),
        meta.expiry,
        meta.restricted
    )
}

pub fn parse_meta(s: &str) -> Result<Meta, DecodeError> {
    let parts: Vec<&str> = s.split(';').collect();
    let [purpose, expiry, restricted] = parts[..] else {
        return Err(bad(format!("meta {s:?} needs purpose;expiry;restricted")));
    };
    Ok(Meta {
        purpose: decode_text(purpose)?,
        expiry: parse_u64(expiry)?,
        restricted: parse_bool(restricted)?,
    })
}

pub fn parse_u64(s: &str) -> Result<u64, DecodeError> {
    s.parse()
        .map_err(|_| bad(format!("expected a non-negative integer, got {s:?}")))
}

pub fn parse_bool(s: &str) -> Result<bool, DecodeError> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(format!("expected true/false, got {s:?}"))),
    }
}

pub fn format_detail(detail: &Detail) -> String {
    match detail {
        Detail::None => "-".into(),
        Detail::Meta(m) => format!("meta:{}", format_meta(m)),
        Detail::Restricted(b) => format!("restricted:{b}"),
        Detail::Staff(s) => format!("staff:{}", format_actor_set(s)),
        Detail::Device {
            id,
            kind,
            credential,
        } => {
            format!("device:{id};{kind};{}", encode_text(credential))
        }
        Detail::Ticks(n) => format!("ticks:{n}"),
        Detail::Erased(n) => format!("erased:{n}"),
    }
}

pub fn parse_detail(s: &str) -> Result<Detail, DecodeError> {
    if s == "-" {
        return Ok(Detail::None);
    }
    let (tag, body) = s
        .split_once(':')
        .ok_or_else(|| bad(format!("detail {s:?} lacks a tag")))?;
    Ok(match tag {
        "meta" => Detail::Meta(parse_meta(body)?),
        "restricted" => Detail::Restricted(parse_bool(body)?),
        "staff" => Detail::Staff(parse_actor_set(body)?),
        "device" => {
            let parts: Vec<&str> = body.split(';').collect();
            let [id, kind, cred] = parts[..] else {
                return Err(bad(format!(
                    "device detail {body:?} needs id;kind;credential"
                )));
            };
            Detail::Device {
                id: device(id)?,
                kind: kind.parse().map_err(bad)?,
                credential: decode_text(cred)?,
            }
        }
        "ticks" => Detail::Ticks(parse_u64(body)?),
        "erased" => Detail::Erased(parse_u64(body)?),
        other => return Err(bad(format!("unknown detail tag {other:?}"))),
    })
}

/// One audit record as a tab-separated line (no trailing newline):
/// seq, at, op, actor, node, item, effect, outcome, detail.
pub fn format_audit_record(r: &AuditRecord) -> String {
    let actor = r.actor.as_ref().map_or("-", |a| a.as_str());
    let item = r.item.as_ref().map_or_else(|| "-".to_string(), format_item);
    let outcome = match &r.outcome {
        Outcome::Ok => "ok".to_string(),
        Outcome::Error(e) => e.to_string(),
    };
    [
        r.seq.to_string(),
        r.at.to_string(),
        r.op.as_str().to_string(),
        actor.to_string(),
        r.node.to_string(),
        item,
        r.effect.as_str().to_string(),
        outcome,
        format_detail(&r.detail),
    ]
    .join("\t")
}

pub fn parse_audit_fields(fields: &[&str]) -> Result<AuditRecord, DecodeError> {
    let [seq, at, op, actor_f, node, item, effect, outcome, detail] = fields[..] else {
        return Err(bad(format!(
            "audit record needs 9 fields, got {}",
            fields.len()
        )));
    };
    Ok(AuditRecord {
        seq: parse_u64(seq)?,
        at: parse_u64(at)?,
        op: op.parse().map_err(bad)?,
        actor: match actor_f {
            "-" => None,
            a => Some(actor(a)?),
        },
        node: node.parse().map_err(bad)?,
        item: match item {
            "-" => None,
            i => Some(parse_item(i)?),
        },
        effect: effect.parse().map_err(bad)?,
        outcome: match outcome {
            "ok" => Outcome::Ok,
            e => Outcome::Error(e.parse().map_err(bad)?),
        },
        detail: parse_detail(detail)?,
    })
}

pub fn parse_audit_record(line: &str) -> Result<AuditRecord, DecodeError> {
    parse_audit_fields(&line.split('\t').collect::<Vec<_>>())
}

/// The whole log, one record per line.
pub fn dump_audit(records: &[AuditRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_audit_record(r));
        out.push('\n');
    }
    out
}

/// Parses an audit dump. Errors carry the 1-based line number.
pub fn parse_audit_dump(text: &str) -> Result<Vec<AuditRecord>, (usize, DecodeError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_audit_record(l).map_err(|e| (i + 1, e)))
        .collect()
}

/// kind, recipient, op_seq, items
pub fn format_message(m: &Message) -> String {
    format!(
        "{}\t{}\t{}\t{}",
        m.kind,
        m.recipient,
        m.op_seq,
        format_items(&m.items)
    )
}

pub fn parse_message_fields(fields: &[&str]) -> Result<Message, DecodeError> {
    let [kind, recipient, op_seq, items] = fields[..] else {
        return Err(bad(format!("message needs 4 fields, got {}", fields.len())));
    };
    Ok(Message {
        kind: kind.parse().map_err(bad)?,
        recipient: recipient.parse().map_err(bad)?,
        op_seq: parse_u64(op_seq)?,
        items: parse_items(items)?,
    })
}
