//! Scenario script language.
//!
//! One command per line, whitespace-separated tokens, `#` starts a comment.
//! Tokens may be double-quoted (`"hr = 72"`) with `\"`, `\\`, `\n`, `\t`
//! escapes. Reader sets are written `{a,b}`, `{}` or `a,b`.
//!
//! ```text
//! REGISTER-PATIENT alice
//! REGISTER-USER hosp1
//! ADD-HOSPITAL hosp1 drbob
//! BIND-DEVICE phone sphone alice 1234
//! UPLOAD phone alice alice {hosp1} cardio 10 hr=72
//! DOWNLOAD hosp1 drbob alice
//! DELETE phone alice alice {hosp1} hr=72
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::num::NonZeroU64;

use thiserror::Error;

use crate::audit::Recipient;
use crate::codec;
use crate::error::OpError;
use crate::label::{ActorId, DeviceId, DlmLabel};
use crate::state::DeviceKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, token {token}: {message}")]
pub struct ParseError {
    pub line: usize,
    /// 1-based token index on the line; 0 when the whole line is at fault.
    pub token: usize,
    pub message: String,
}

/// Target of a `DRAIN`. A bare token is resolved when the command runs:
/// a bound device id wins over an actor of the same name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DrainTarget {
    Explicit(Recipient),
    Bare(String),
}

impl fmt::Display for DrainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Explicit(r) => write!(f, "{r}"),
            Self::Bare(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    RegisterPatient(ActorId),
    RegisterUser(ActorId),
    AddHospital {
        hospital: ActorId,
        staff: Vec<ActorId>,
    },
    BindDevice {
        device: DeviceId,
        kind: DeviceKind,
        actor: ActorId,
        credential: String,
    },
    Upload {
        device: DeviceId,
        claimed: ActorId,
        label: DlmLabel,
        purpose: String,
        expiry: u64,
        payload: String,
    },
    Delete {
        device: DeviceId,
        claimed: ActorId,
        label: DlmLabel,
        payload: String,
    },
    Download {
        hospital: ActorId,
        doctor: ActorId,
        owner: ActorId,
    },
    Restrict {
        device: DeviceId,
        claimed: ActorId,
        label: DlmLabel,
        payload: String,
        flag: bool,
    },
    Tick(NonZeroU64),
    Sweep,
    Sar {
        device: DeviceId,
        claimed: ActorId,
    },
    Drain(DrainTarget),
    ExpectError(OpError),
    AssertInvariants,
}

/// A parsed command with its 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub command: Command,
}

fn quote(s: &str) -> String {
    let plain = !s.is_empty()
        && !s.starts_with('#')
        && s.chars()
            .all(|c| !c.is_whitespace() && !c.is_control() && c != '"' && c != '\\');
    if plain {
        return s.to_string();
    }
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let readers = |l: &DlmLabel| codec::format_actor_set(l.readers());
        match self {
            Self::RegisterPatient(a) => write!(f, "REGISTER-PATIENT {a}"),
            Self::RegisterUser(a) => write!(f, "REGISTER-USER {a}"),
            Self::AddHospital { hospital, staff } => {
                write!(f, "ADD-HOSPITAL {hospital}")?;
                for s in staff {
                    write!(f, " {s}")?;
                }
                Ok(())
            }
            Self::BindDevice {
                device,
                kind,
                actor,
                credential,
            } => write!(
                f,
                "BIND-DEVICE {device} {kind} {actor} {}",
                quote(credential)
            ),
            Self::Upload {
                device,
                claimed,
                label,
                purpose,
                expiry,
                payload,
            } => write!(
                f,
                "UPLOAD {device} {claimed} {} {} {} {expiry} {}",
                label.owner(),
                readers(label),
                quote(purpose),
                quote(payload)
            ),
            Self::Delete {
                device,
                claimed,
                label,
                payload,
            } => write!(
                f,
                "DELETE {device} {claimed} {} {} {}",
                label.owner(),
                readers(label),
                quote(payload)
            ),
            Self::Download {
                hospital,
                doctor,
                owner,
            } => write!(f, "DOWNLOAD {hospital} {doctor} {owner}"),
            Self::Restrict {
                device,
                claimed,
                label,
                payload,
                flag,
            } => write!(
                f,
                "RESTRICT {device} {claimed} {} {} {} {flag}",
                label.owner(),
                readers(label),
                quote(payload)
            ),
            Self::Tick(n) => write!(f, "TICK {n}"),
            Self::Sweep => f.write_str("SWEEP"),
            Self::Sar { device, claimed } => write!(f, "SAR {device} {claimed}"),
            Self::Drain(t) => write!(f, "DRAIN {t}"),
            Self::ExpectError(e) => write!(f, "EXPECT-ERROR {e}"),
            Self::AssertInvariants => f.write_str("ASSERT-INVARIANTS"),
        }
    }
}

/// Splits one line into tokens, honouring quotes and comments.
fn tokenize(line: &str, line_no: usize) -> Result<Vec<String>, ParseError> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        if c == '#' {
            break;
        }
        let mut tok = String::new();
        if c == '"' {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some('n') => tok.push('\n'),
                        Some('t') => tok.push('\t'),
                        Some('r') => tok.push('\r'),
                        Some(e @ ('"' | '\\')) => tok.push(e),
                        other => {
                            return Err(ParseError {
                                line: line_no,
                                token: tokens.len() + 1,
                                message: format!(
                                    "bad escape \\{}",
                                    other.map_or(String::new(), String::from)
                                ),
                            })
                        }
                    },
                    c => tok.push(c),
                }
            }
            if !closed {
                return Err(ParseError {
                    line: line_no,
                    token: tokens.len() + 1,
                    message: "unterminated quoted string".into(),
                });
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
        }
        tokens.push(tok);
    }
    Ok(tokens)
}

struct Args<'a> {
    line: usize,
    verb: &'a str,
    toks: &'a [String],
}

impl<'a> Args<'a> {
    fn err(&self, token: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            token,
            message: message.into(),
        }
    }

    fn arity(&self, n: usize) -> Result<(), ParseError> {
        if self.toks.len() - 1 != n {
            return Err(self.err(
                0,
                format!(
                    "{} takes {n} argument(s), got {}",
                    self.verb,
                    self.toks.len() - 1
                ),
            ));
        }
        Ok(())
    }

    fn raw(&self, i: usize) -> &'a str {
        &self.toks[i]
    }

    fn actor(&self, i: usize) -> Result<ActorId, ParseError> {
        ActorId::new(self.raw(i)).map_err(|e| self.err(i, e.to_string()))
    }

    fn device(&self, i: usize) -> Result<DeviceId, ParseError> {
        DeviceId::new(self.raw(i)).map_err(|e| self.err(i, e.to_string()))
    }

    fn label(&self, owner: usize, readers: usize) -> Result<DlmLabel, ParseError> {
        let readers_set: BTreeSet<ActorId> = codec::parse_actor_set(self.raw(readers))
            .map_err(|e| self.err(readers, e.to_string()))?;
        Ok(DlmLabel::new(self.actor(owner)?, readers_set))
    }

    fn u64(&self, i: usize) -> Result<u64, ParseError> {
        self.raw(i).parse().map_err(|_| {
            self.err(
                i,
                format!("expected a non-negative integer, got {:?}", self.raw(i)),
            )
        })
    }

    fn non_empty(&self, i: usize) -> Result<String, ParseError> {
        let s = self.raw(i);
        if s.is_empty() {
            return Err(self.err(i, "must not be empty"));
        }
        Ok(s.to_string())
    }
}

fn parse_command(toks: &[String], line: usize) -> Result<Command, ParseError> {
    let args = Args {
        line,
        verb: &toks[0],
        toks,
    };
    let cmd = match toks[0].as_str() {
        "REGISTER-PATIENT" => {
            args.arity(1)?;
            Command::RegisterPatient(args.actor(1)?)
        }
        "REGISTER-USER" => {
            args.arity(1)?;
            Command::RegisterUser(args.actor(1)?)
        }
        "ADD-HOSPITAL" => {
            if toks.len() < 2 {
                return Err(args.err(0, "ADD-HOSPITAL needs a hospital id"));
            }
            Command::AddHospital {
                hospital: args.actor(1)?,
                staff: (2..toks.len())
                    .map(|i| args.actor(i))
                    .collect::<Result<_, _>>()?,
            }
        }
        "BIND-DEVICE" => {
            args.arity(4)?;
            Command::BindDevice {
                device: args.device(1)?,
                kind: args.raw(2).parse().map_err(|e: String| args.err(2, e))?,
                actor: args.actor(3)?,
                credential: args.raw(4).to_string(),
            }
        }
        "UPLOAD" => {
            args.arity(7)?;
            Command::Upload {
                device: args.device(1)?,
                claimed: args.actor(2)?,
                label: args.label(3, 4)?,
                purpose: args.non_empty(5)?,
                expiry: args.u64(6)?,
                payload: args.raw(7).to_string(),
            }
        }
        "DELETE" => {
            args.arity(5)?;
            Command::Delete {
                device: args.device(1)?,
                claimed: args.actor(2)?,
                label: args.label(3, 4)?,
                payload: args.raw(5).to_string(),
            }
        }
        "DOWNLOAD" => {
            args.arity(3)?;
            Command::Download {
                hospital: args.actor(1)?,
                doctor: args.actor(2)?,
                owner: args.actor(3)?,
            }
        }
        "RESTRICT" => {
            args.arity(6)?;
            Command::Restrict {
                device: args.device(1)?,
                claimed: args.actor(2)?,
                label: args.label(3, 4)?,
                payload: args.raw(5).to_string(),
                flag: codec::parse_bool(args.raw(6)).map_err(|e| args.err(6, e.to_string()))?,
            }
        }
        "TICK" => {
            args.arity(1)?;
            let n =
                NonZeroU64::new(args.u64(1)?).ok_or_else(|| args.err(1, "TICK needs n >= 1"))?;
            Command::Tick(n)
        }
        "SWEEP" => {
            args.arity(0)?;
            Command::Sweep
        }
        "SAR" => {
            args.arity(2)?;
            Command::Sar {
                device: args.device(1)?,
                claimed: args.actor(2)?,
            }
        }
        "DRAIN" => {
            args.arity(1)?;
            let raw = args.raw(1);
            let target = if raw.starts_with("actor:") || raw.starts_with("dev:") {
                DrainTarget::Explicit(raw.parse().map_err(|e: String| args.err(1, e))?)
            } else {
                ActorId::new(raw).map_err(|e| args.err(1, e.to_string()))?;
                DrainTarget::Bare(raw.to_string())
            };
            Command::Drain(target)
        }
        "EXPECT-ERROR" => {
            args.arity(1)?;
            Command::ExpectError(args.raw(1).parse().map_err(|e: String| args.err(1, e))?)
        }
        "ASSERT-INVARIANTS" => {
            args.arity(0)?;
            Command::AssertInvariants
        }
        other => return Err(args.err(1, format!("unknown command {other:?}"))),
    };
    Ok(cmd)
}

pub fn parse_script(text: &str) -> Result<Vec<Step>, ParseError> {
    let mut steps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let toks = tokenize(line, line_no)?;
        if toks.is_empty() {
            continue;
        }
        steps.push(Step {
            line: line_no,
            command: parse_command(&toks, line_no)?,
        });
    }
    Ok(steps)
}

/// Renders steps back to script text, one command per line.
pub fn render_script(commands: &[Command]) -> String {
    let mut out = String::new();
    for c in commands {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out
}
