//! Scenario interpreter.
//!
//! Executes commands against the engine (and, with `diff`, against the
//! reference model in lock-step), writes a deterministic trace, and stops at
//! the first failed expectation, invariant or divergence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::num::NonZeroU64;

use thiserror::Error;

use crate::audit::{Message, MessageKind, Node, Recipient};
use crate::codec;
use crate::error::OpError;
use crate::harness::invariants::{self, InvariantId, InvariantReport, Violation};
use crate::harness::reference::{RefMessage, RefSarEntry, ReferenceModel};
use crate::harness::replay::Replayer;
use crate::harness::script::{parse_script, Command, DrainTarget, ParseError};
use crate::label::{ActorId, ItemKey, Meta};
use crate::ops::{DeleteMode, SarReport};
use crate::state::{SystemState, Table};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Run the reference model alongside and compare after every command.
    pub diff: bool,
    pub strict_delete: bool,
    /// Sweep automatically whenever the clock crosses a multiple of N.
    pub sweep_every: Option<NonZeroU64>,
    pub seed: u64,
    /// Evaluate the state invariants (incrementally) after every command.
    pub check_each: bool,
    /// Evaluate the full invariant suite when the script ends.
    pub check_on_exit: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            diff: false,
            strict_delete: false,
            sweep_every: None,
            seed: 0,
            check_each: false,
            check_on_exit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunFailure {
    #[error("line {line}: assertion failed: {violation}")]
    Invariant { line: usize, violation: Violation },
    #[error("line {line}: assertion failed: {message}")]
    Expectation { line: usize, message: String },
    #[error("line {line}: engine and reference diverge: {message}")]
    Divergence { line: usize, message: String },
}

impl RunFailure {
    pub fn line(&self) -> usize {
        match self {
            Self::Invariant { line, .. }
            | Self::Expectation { line, .. }
            | Self::Divergence { line, .. } => *line,
        }
    }
}

/// What a command did, beyond the state change.
#[derive(Debug, Clone, Default)]
struct Effects {
    emitted: Vec<Message>,
    touched: BTreeSet<ItemKey>,
    erased: Option<BTreeSet<ItemKey>>,
    sar: Option<SarReport>,
    drained: Option<Vec<Message>>,
}

#[derive(Debug, Clone, Default)]
struct RefEffects {
    emitted: Vec<RefMessage>,
    erased: Option<BTreeSet<ItemKey>>,
    sar: Option<Vec<RefSarEntry>>,
    drained: Option<Vec<RefMessage>>,
}

/// Trace-level properties: I4, I5, I6 (right after a sweep), I10.
#[derive(Debug, Clone, Default)]
struct TraceMonitor {
    copied: BTreeMap<ActorId, u64>,
    notices: BTreeMap<ActorId, BTreeSet<(u64, ItemKey)>>,
}

impl TraceMonitor {
    fn after_delete(state: &SystemState, key: &ItemKey) -> Option<Violation> {
        let held = state.locations_of(key);
        (!held.is_empty()).then(|| {
            Violation::new(
                InvariantId::I4,
                format!("{key} still held at {held:?} after delete"),
            )
        })
    }

    fn after_sweep(state: &SystemState) -> Option<Violation> {
        state.tables().find_map(|(node, t)| {
            t.iter()
                .find(|(_, m)| m.expiry < state.clock)
                .map(|(k, m)| {
                    Violation::new(
                        InvariantId::I6,
                        format!(
                            "{node} keeps {k} (expiry {}) after sweep at {}",
                            m.expiry, state.clock
                        ),
                    )
                })
        })
    }

    fn after_download(
        &mut self,
        owner: &ActorId,
        restricted_before: &BTreeSet<ItemKey>,
        effects: &Effects,
    ) -> Option<Violation> {
        if let Some(k) = effects.touched.intersection(restricted_before).next() {
            return Some(Violation::new(
                InvariantId::I10,
                format!("restricted {k} was copied"),
            ));
        }
        *self.copied.entry(owner.clone()).or_default() += effects.touched.len() as u64;
        for m in effects
            .emitted
            .iter()
            .filter(|m| m.kind == MessageKind::Access)
        {
            for k in &m.items {
                self.notices
                    .entry(k.owner().clone())
                    .or_default()
                    .insert((m.op_seq, k.clone()));
            }
        }
        let copied = self.copied.get(owner).copied().unwrap_or(0);
        let noticed = self.notices.get(owner).map_or(0, |s| s.len() as u64);
        (copied != noticed).then(|| {
            Violation::new(
                InvariantId::I5,
                format!("{owner}: {copied} items copied but {noticed} access notices"),
            )
        })
    }
}

pub struct Runner {
    state: SystemState,
    reference: Option<ReferenceModel>,
    replayer: Option<Replayer>,
    opts: RunOptions,
    monitor: TraceMonitor,
    trace: String,
    expect: Option<(usize, OpError)>,
    tolerate_errors: bool,
    steps: usize,
}

fn table_set(t: &Table) -> BTreeSet<(ItemKey, Meta)> {
    t.iter().map(|(k, m)| (k.clone(), m.clone())).collect()
}

fn strip(m: &Message) -> RefMessage {
    RefMessage {
        kind: m.kind,
        recipient: m.recipient.clone(),
        items: m.items.clone(),
    }
}

fn sorted<T: Ord>(mut v: Vec<T>) -> Vec<T> {
    v.sort();
    v
}

fn describe_messages(ms: &[Message]) -> String {
    ms.iter()
        .map(|m| format!("{}->{}", m.kind, m.recipient))
        .collect::<Vec<_>>()
        .join(",")
}

impl Runner {
    pub fn new(opts: RunOptions) -> Self {
        Self {
            state: SystemState::new(),
            reference: opts.diff.then(ReferenceModel::new),
            replayer: opts.check_each.then(Replayer::new),
            opts,
            monitor: TraceMonitor::default(),
            trace: String::new(),
            expect: None,
            tolerate_errors: false,
            steps: 0,
        }
    }

    /// Operation errors are part of normal traffic (fuzzing) rather than
    /// failures.
    pub fn tolerate_errors(mut self, yes: bool) -> Self {
        self.tolerate_errors = yes;
        self
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn trace(&self) -> &str {
        &self.trace
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn into_parts(self) -> (SystemState, String) {
        (self.state, self.trace)
    }

    /// Executes one command. Returns the operation's refusal, if any.
    pub fn step(&mut self, line: usize, command: &Command) -> Result<Option<OpError>, RunFailure> {
        self.steps += 1;
        match command {
            Command::ExpectError(code) => {
                let _ = writeln!(self.trace, "{line}\t{command}");
                self.expect = Some((line, *code));
                return Ok(None);
            }
            Command::AssertInvariants => {
                let _ = writeln!(self.trace, "{line}\t{command}");
                return self.assert_invariants(line).map(|_| None);
            }
            _ => {}
        }

        let clock_before = self.state.clock;
        let outcome = self.execute(line, command)?;
        let expected = self.expect.take();
        match (&outcome, expected) {
            (Err(e), Some((_, want))) if *e == want => {
                let _ = writeln!(self.trace, "{line}\t{command}\t=> error {e} (expected)");
            }
            (Err(e), Some((_, want))) => {
                return Err(RunFailure::Expectation {
                    line,
                    message: format!("expected {want}, got {e}"),
                })
            }
            (Ok(_), Some((_, want))) => {
                return Err(RunFailure::Expectation {
                    line,
                    message: format!("expected {want}, but the command succeeded"),
                })
            }
            (Err(e), None) if !self.tolerate_errors => {
                return Err(RunFailure::Expectation {
                    line,
                    message: format!("unexpected error {e}"),
                })
            }
            (Err(e), None) => {
                let _ = writeln!(self.trace, "{line}\t{command}\t=> error {e}");
            }
            (Ok(fx), None) => self.trace_ok(line, &command.to_string(), fx),
        }
        self.check_step(line)?;

        if let (Command::Tick(_), Some(every)) = (command, self.opts.sweep_every) {
            if self.state.clock / every.get() > clock_before / every.get() {
                self.execute(line, &Command::Sweep)?
                    .map(|fx| self.trace_ok(line, "auto SWEEP", &fx))
                    .expect("sweep cannot fail");
                self.check_step(line)?;
            }
        }
        Ok(outcome.err())
    }

    fn trace_ok(&mut self, line: usize, what: &str, fx: &Effects) {
        let mut s = format!("{line}\t{what}\t=> ok");
        if !fx.emitted.is_empty() {
            let _ = write!(s, "\tsent {}", describe_messages(&fx.emitted));
        }
        if let Some(erased) = &fx.erased {
            let _ = write!(s, "\terased {}", codec::format_items(erased));
        }
        if let Some(drained) = &fx.drained {
            let list: Vec<String> = drained
                .iter()
                .map(|m| format!("{}[{}]", m.kind, codec::format_items(&m.items)))
                .collect();
            let _ = write!(
                s,
                "\tdrained {}",
                if list.is_empty() {
                    "-".into()
                } else {
                    list.join(",")
                }
            );
        }
        s.push('\n');
        if let Some(report) = &fx.sar {
            for e in &report.entries {
                let places: Vec<String> = e.locations.iter().map(Node::to_string).collect();
                let _ = writeln!(
                    s,
                    "\t  item {}\tpurpose {}\texpiry {}\trestricted {}\tat {}\thistory {}",
                    codec::format_item(&e.key),
                    codec::encode_text(&e.meta.purpose),
                    e.meta.expiry,
                    e.meta.restricted,
                    places.join(","),
                    e.history.len()
                );
            }
        }
        self.trace.push_str(&s);
    }

    fn execute(
        &mut self,
        line: usize,
        command: &Command,
    ) -> Result<Result<Effects, OpError>, RunFailure> {
        let restricted_before: BTreeSet<ItemKey> = match command {
            Command::Download { owner, .. } => self
                .state
                .db
                .table
                .owned_by(owner)
                .filter(|(_, m)| m.restricted)
                .map(|(k, _)| k.clone())
                .collect(),
            _ => BTreeSet::new(),
        };
        let engine = self.run_engine(command);
        if let Some(mut reference) = self.reference.take() {
            let theirs = Self::run_reference(&mut reference, command, self.opts.strict_delete);
            let verdict = self.compare(&engine, &theirs, &reference);
            self.reference = Some(reference);
            if let Err(message) = verdict {
                return Err(RunFailure::Divergence { line, message });
            }
        }

        if let Ok(fx) = &engine {
            let violation = match command {
                Command::Delete { label, payload, .. } => TraceMonitor::after_delete(
                    &self.state,
                    &ItemKey::new(label.clone(), payload.clone()),
                ),
                Command::Sweep => TraceMonitor::after_sweep(&self.state),
                Command::Download { owner, .. } => {
                    self.monitor.after_download(owner, &restricted_before, fx)
                }
                _ => None,
            };
            if let Some(violation) = violation {
                return Err(RunFailure::Invariant { line, violation });
            }
        }
        Ok(engine)
    }

    fn resolve(state_has_device: bool, target: &DrainTarget) -> Recipient {
        match target {
            DrainTarget::Explicit(r) => r.clone(),
            DrainTarget::Bare(tok) if state_has_device => {
                Recipient::Device(tok.parse().expect("validated when parsed"))
            }
            DrainTarget::Bare(tok) => Recipient::Actor(tok.parse().expect("validated when parsed")),
        }
    }

    fn run_engine(&mut self, command: &Command) -> Result<Effects, OpError> {
        let s = &mut self.state;
        let mode = if self.opts.strict_delete {
            DeleteMode::Strict
        } else {
            DeleteMode::Lenient
        };
        let from = |r: crate::ops::OpResult| Effects {
            emitted: r.emitted,
            touched: r.touched,
            ..Effects::default()
        };
        match command {
            Command::RegisterPatient(a) => {
                s.register_patient(a.clone()).map(|_| Effects::default())
            }
            Command::RegisterUser(a) => s.register_user(a.clone()).map(|_| Effects::default()),
            Command::AddHospital { hospital, staff } => s
                .add_hospital(hospital.clone(), staff.iter().cloned())
                .map(|_| Effects::default()),
            Command::BindDevice {
                device,
                kind,
                actor,
                credential,
            } => s
                .bind_device(device.clone(), *kind, actor.clone(), credential.clone())
                .map(|_| Effects::default()),
            Command::Upload {
                device,
                claimed,
                label,
                purpose,
                expiry,
                payload,
            } => s
                .upload(device, payload, label, purpose, *expiry, claimed)
                .map(from),
            Command::Delete {
                device,
                claimed,
                label,
                payload,
            } => s.delete(device, payload, label, claimed, mode).map(from),
            Command::Download {
                hospital,
                doctor,
                owner,
            } => s.download(hospital, doctor, owner).map(from),
            Command::Restrict {
                device,
                claimed,
                label,
                payload,
                flag,
            } => s.restrict(device, payload, label, claimed, *flag).map(from),
            Command::Tick(n) => {
                s.tick(*n);
                Ok(Effects::default())
            }
            Command::Sweep => Ok(Effects {
                erased: Some(s.sweep()),
                ..Effects::default()
            }),
            Command::Sar { device, claimed } => {
                s.subject_access_request(device, claimed).map(|r| Effects {
                    sar: Some(r),
                    ..Effects::default()
                })
            }
            Command::Drain(target) => {
                let has = matches!(target, DrainTarget::Bare(t) if s.devices.keys().any(|d| d.as_str() == t));
                let to = Self::resolve(has, target);
                Ok(Effects {
                    drained: Some(s.drain(&to)),
                    ..Effects::default()
                })
            }
            Command::ExpectError(_) | Command::AssertInvariants => Ok(Effects::default()),
        }
    }

    fn run_reference(
        m: &mut ReferenceModel,
        command: &Command,
        strict: bool,
    ) -> Result<RefEffects, OpError> {
        let sent = |v: Vec<RefMessage>| RefEffects {
            emitted: v,
            ..RefEffects::default()
        };
        match command {
            Command::RegisterPatient(a) => m.register_patient(a).map(|_| RefEffects::default()),
            Command::RegisterUser(a) => m.register_user(a).map(|_| RefEffects::default()),
            Command::AddHospital { hospital, staff } => m
                .add_hospital(hospital, staff)
                .map(|_| RefEffects::default()),
            Command::BindDevice {
                device,
                kind,
                actor,
                ..
            } => m
                .bind_device(device, *kind, actor)
                .map(|_| RefEffects::default()),
            Command::Upload {
                device,
                claimed,
                label,
                purpose,
                expiry,
                payload,
            } => m
                .upload(device, claimed, label, purpose, *expiry, payload)
                .map(sent),
            Command::Delete {
                device,
                claimed,
                label,
                payload,
            } => m.delete(device, claimed, label, payload, strict).map(sent),
            Command::Download {
                hospital,
                doctor,
                owner,
            } => m.download(hospital, doctor, owner).map(sent),
            Command::Restrict {
                device,
                claimed,
                label,
                payload,
                flag,
            } => m
                .restrict(device, claimed, label, payload, *flag)
                .map(|_| RefEffects::default()),
            Command::Tick(n) => {
                m.tick(n.get());
                Ok(RefEffects::default())
            }
            Command::Sweep => Ok(RefEffects {
                erased: Some(m.sweep()),
                ..RefEffects::default()
            }),
            Command::Sar { device, claimed } => m.sar(device, claimed).map(|e| RefEffects {
                sar: Some(e),
                ..RefEffects::default()
            }),
            Command::Drain(target) => {
                let has = matches!(target, DrainTarget::Bare(t) if m.is_device(t));
                let to = Self::resolve(has, target);
                Ok(RefEffects {
                    drained: Some(m.drain(&to)),
                    ..RefEffects::default()
                })
            }
            Command::ExpectError(_) | Command::AssertInvariants => Ok(RefEffects::default()),
        }
    }

    fn compare(
        &self,
        engine: &Result<Effects, OpError>,
        reference: &Result<RefEffects, OpError>,
        model: &ReferenceModel,
    ) -> Result<(), String> {
        match (engine, reference) {
            (Err(a), Err(b)) if a == b => {}
            (Err(a), Err(b)) => return Err(format!("outcome: engine {a}, reference {b}")),
            (Err(a), Ok(_)) => return Err(format!("outcome: engine {a}, reference ok")),
            (Ok(_), Err(b)) => return Err(format!("outcome: engine ok, reference {b}")),
            (Ok(e), Ok(r)) => {
                let mine = sorted(e.emitted.iter().map(strip).collect());
                if mine != sorted(r.emitted.clone()) {
                    return Err(format!(
                        "emitted messages: engine {mine:?}, reference {:?}",
                        r.emitted
                    ));
                }
                if e.erased != r.erased {
                    return Err(format!(
                        "erased: engine {:?}, reference {:?}",
                        e.erased, r.erased
                    ));
                }
                let drained = e
                    .drained
                    .as_ref()
                    .map(|d| sorted(d.iter().map(strip).collect()));
                if drained != r.drained.clone().map(sorted) {
                    return Err(format!(
                        "drained: engine {drained:?}, reference {:?}",
                        r.drained
                    ));
                }
                if let (Some(report), Some(entries)) = (&e.sar, &r.sar) {
                    let mine: Vec<(ItemKey, Meta, BTreeSet<Node>)> = report
                        .entries
                        .iter()
                        .map(|x| (x.key.clone(), x.meta.clone(), x.locations.clone()))
                        .collect();
                    let theirs: Vec<(ItemKey, Meta, BTreeSet<Node>)> = sorted(
                        entries
                            .iter()
                            .map(|x| {
                                let mut at: BTreeSet<Node> =
                                    x.hospitals.iter().cloned().map(Node::Hospital).collect();
                                if x.db {
                                    at.insert(Node::Db);
                                }
                                (x.key.clone(), x.meta.clone(), at)
                            })
                            .collect(),
                    );
                    if mine != theirs {
                        return Err(format!("SAR report: engine {mine:?}, reference {theirs:?}"));
                    }
                }
            }
        }
        self.compare_state(model)
    }

    fn compare_state(&self, m: &ReferenceModel) -> Result<(), String> {
        let s = &self.state;
        if s.clock != m.clock {
            return Err(format!("clock: engine {}, reference {}", s.clock, m.clock));
        }
        let patients: BTreeSet<ActorId> = m.patients.iter().cloned().collect();
        let users: BTreeSet<ActorId> = m.users.iter().cloned().collect();
        if s.auth.patients != patients || s.auth.reg_usrs != users {
            return Err("auth registry differs".into());
        }
        let theirs_db: BTreeSet<(ItemKey, Meta)> =
            m.db.iter().map(|i| (i.key(), i.meta())).collect();
        if theirs_db.len() != m.db.len() {
            return Err("reference db holds duplicate items".into());
        }
        if table_set(&s.db.table) != theirs_db {
            return Err(format!(
                "db table: engine {:?}, reference {:?}",
                table_set(&s.db.table),
                theirs_db
            ));
        }
        if s.hospitals.len() != m.hospitals.len() {
            return Err("hospital count differs".into());
        }
        for h in &m.hospitals {
            let Some(mine) = s.hospitals.get(&h.id) else {
                return Err(format!("hospital {} missing in engine", h.id));
            };
            let staff: BTreeSet<ActorId> = h.staff.iter().cloned().collect();
            if mine.staff != staff {
                return Err(format!("{} staff differs", h.id));
            }
            let theirs: BTreeSet<(ItemKey, Meta)> =
                h.table.iter().map(|i| (i.key(), i.meta())).collect();
            if theirs.len() != h.table.len() || table_set(&mine.table) != theirs {
                return Err(format!(
                    "{} table: engine {:?}, reference {:?}",
                    h.id,
                    table_set(&mine.table),
                    theirs
                ));
            }
        }
        if s.devices.len() != m.devices.len()
            || m.devices.iter().any(|d| {
                s.devices
                    .get(&d.id)
                    .is_none_or(|x| x.kind != d.kind || x.bound_actor != d.actor)
            })
        {
            return Err("device sessions differ".into());
        }
        // emitted and drained messages are compared per command, so the
        // queues can only drift apart in size
        if s.outbox.len() != m.outbox.len() {
            return Err(format!(
                "outbox size: engine {}, reference {}",
                s.outbox.len(),
                m.outbox.len()
            ));
        }
        Ok(())
    }

    fn check_step(&mut self, line: usize) -> Result<(), RunFailure> {
        if !self.opts.check_each {
            return Ok(());
        }
        if let Some(violation) = invariants::check_structure(&self.state).into_iter().next() {
            return Err(RunFailure::Invariant { line, violation });
        }
        let replayer = self.replayer.get_or_insert_with(Replayer::new);
        let start = replayer.fed();
        if let Err(e) = replayer.feed_all(self.state.audit.since(start)) {
            return Err(RunFailure::Invariant {
                line,
                violation: Violation::new(InvariantId::I8, e.to_string()),
            });
        }
        if let Some(v) = replayer.violations().first() {
            return Err(RunFailure::Invariant {
                line,
                violation: v.clone(),
            });
        }
        let r = replayer.state();
        let s = &self.state;
        let same = r.auth == s.auth
            && r.db == s.db
            && r.hospitals == s.hospitals
            && r.devices == s.devices
            && r.clock == s.clock;
        if !same {
            return Err(RunFailure::Invariant {
                line,
                violation: Violation::new(InvariantId::I8, invariants::describe_mismatch(r, s)),
            });
        }
        Ok(())
    }

    /// Full invariant suite on the current state. Trace-level properties
    /// (I5, I9 and the per-command checks) have held so far, otherwise the
    /// run would already have stopped.
    pub fn invariant_report(&self) -> InvariantReport {
        let mut report = invariants::check_invariants(&self.state);
        for (id, status) in &mut report.results {
            let traced = *id == InvariantId::I5 || (*id == InvariantId::I9 && self.opts.diff);
            if traced {
                *status = invariants::Status::Pass;
            }
        }
        report
    }

    fn assert_invariants(&mut self, line: usize) -> Result<(), RunFailure> {
        match self.invariant_report().first_failure() {
            Some(violation) => Err(RunFailure::Invariant { line, violation }),
            None => Ok(()),
        }
    }

    /// Final checks once the script is exhausted.
    pub fn finish(&mut self, last_line: usize) -> Result<(), RunFailure> {
        if let Some((line, code)) = self.expect.take() {
            return Err(RunFailure::Expectation {
                line,
                message: format!("EXPECT-ERROR {code} has no command to apply to"),
            });
        }
        if self.opts.check_on_exit {
            self.assert_invariants(last_line)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub state: SystemState,
    pub trace: String,
    pub failure: Option<RunFailure>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.failure.is_some() {
            1
        } else {
            0
        }
    }
}

/// Parses and runs a scenario script.
pub fn run_scenario(script: &str, opts: &RunOptions) -> Result<RunReport, ParseError> {
    let steps = parse_script(script)?;
    let mut runner = Runner::new(opts.clone());
    let mut failure = None;
    let mut last_line = 0;
    for step in &steps {
        last_line = step.line;
        if let Err(f) = runner.step(step.line, &step.command) {
            failure = Some(f);
            break;
        }
    }
    if failure.is_none() {
        failure = runner.finish(last_line).err();
    }
    if let Some(f) = &failure {
        let _ = writeln!(runner.trace, "FAIL\t{f}");
    }
    let (state, trace) = runner.into_parts();
    Ok(RunReport {
        state,
        trace,
        failure,
    })
}
