//! Seeded random scenario generation.
//!
//! The universe is fixed at ten actors: patients `p0..p3` (p3 starts
//! unregistered), doctors `dr0..dr2`, hospitals `h0..h2` (h2 is not a
//! registered user). About 70% of generated operations are built to satisfy
//! their preconditions; the rest perturb one argument to probe an error
//! path.

use std::num::NonZeroU64;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::runner::{RunFailure, RunOptions, Runner};
use crate::harness::script::{Command, DrainTarget};
use crate::label::{ActorId, DeviceId, DlmLabel, ItemKey};
use crate::state::{DeviceKind, SystemState};

const PAYLOADS: [&str; 6] = [
    "hr=72",
    "hr=90",
    "bp=120/80",
    "spo2=97",
    "ecg:raw",
    "temp=37.2",
];
const PURPOSES: [&str; 3] = ["care", "research", "billing"];
const VALID_BIAS: f64 = 0.7;

fn a(s: &str) -> ActorId {
    ActorId::new(s).expect("fixed universe token")
}

fn d(s: &str) -> DeviceId {
    DeviceId::new(s).expect("fixed universe token")
}

/// Registrations, hospitals and device bindings every trace starts with.
pub fn setup_commands() -> Vec<Command> {
    let mut out = Vec::new();
    for p in ["p0", "p1", "p2"] {
        out.push(Command::RegisterPatient(a(p)));
    }
    for u in ["h0", "h1", "dr0", "dr1", "dr2"] {
        out.push(Command::RegisterUser(a(u)));
    }
    for (h, staff) in [
        ("h0", &["dr0", "dr1"][..]),
        ("h1", &["dr2"]),
        ("h2", &["dr0"]),
    ] {
        out.push(Command::AddHospital {
            hospital: a(h),
            staff: staff.iter().map(|s| a(s)).collect(),
        });
    }
    for (dev, kind, actor) in [
        ("ph0", DeviceKind::Sphone, "p0"),
        ("ph0b", DeviceKind::Sphone, "p0"),
        ("ph1", DeviceKind::Sphone, "p1"),
        ("hm1", DeviceKind::Home, "p1"),
        ("hm2", DeviceKind::Home, "p2"),
        ("ph3", DeviceKind::Sphone, "p3"),
    ] {
        out.push(Command::BindDevice {
            device: d(dev),
            kind,
            actor: a(actor),
            credential: format!("pin-{dev}"),
        });
    }
    out
}

pub struct Generator {
    rng: ChaCha8Rng,
    actors: Vec<ActorId>,
    devices: Vec<DeviceId>,
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            actors: [
                "p0", "p1", "p2", "p3", "dr0", "dr1", "dr2", "h0", "h1", "h2",
            ]
            .into_iter()
            .map(a)
            .collect(),
            devices: ["ph0", "ph0b", "ph1", "hm1", "hm2", "ph3", "ghost"]
                .into_iter()
                .map(d)
                .collect(),
        }
    }

    fn pick<T: Clone>(&mut self, xs: &[T]) -> T {
        xs.choose(&mut self.rng).expect("non-empty choice").clone()
    }

    fn any_actor(&mut self) -> ActorId {
        let xs = self.actors.clone();
        self.pick(&xs)
    }

    fn any_device(&mut self) -> DeviceId {
        let xs = self.devices.clone();
        self.pick(&xs)
    }

    fn valid(&mut self) -> bool {
        self.rng.gen_bool(VALID_BIAS)
    }

    fn devices_of(state: &SystemState, actor: &ActorId, phone_only: bool) -> Vec<DeviceId> {
        state
            .devices
            .values()
            .filter(|s| &s.bound_actor == actor && (!phone_only || s.kind == DeviceKind::Sphone))
            .map(|s| s.device_id.clone())
            .collect()
    }

    fn db_item(&mut self, state: &SystemState) -> Option<ItemKey> {
        let keys: Vec<&ItemKey> = state.db.table.keys().collect();
        keys.choose(&mut self.rng).map(|k| (*k).clone())
    }

    pub fn next(&mut self, state: &SystemState) -> Command {
        let roll = self.rng.gen_range(0..100);
        match roll {
            0..=27 => self.upload(state),
            28..=45 => self.download(state),
            46..=57 => self.delete(state),
            58..=67 => self.restrict(state),
            68..=77 => Command::Tick(NonZeroU64::new(self.rng.gen_range(1..=5)).expect("positive")),
            78..=83 => self.sar(state),
            84..=93 => {
                let tok = if self.rng.gen_bool(0.5) {
                    self.any_device().to_string()
                } else {
                    self.any_actor().to_string()
                };
                Command::Drain(DrainTarget::Bare(tok))
            }
            94..=96 => Command::Sweep,
            _ => self.register(),
        }
    }

    fn register(&mut self) -> Command {
        let who = self.any_actor();
        match self.rng.gen_range(0..3) {
            0 => Command::RegisterPatient(who),
            1 => Command::RegisterUser(who),
            // hospitals are all added at setup, so this probes duplicates
            _ => Command::AddHospital {
                hospital: self.pick(&[a("h0"), a("h1"), a("h2")]),
                staff: vec![who],
            },
        }
    }

    fn readers(&mut self, state: &SystemState) -> Vec<ActorId> {
        let pool: Vec<ActorId> = state.auth.reg_usrs.iter().cloned().collect();
        let n = self.rng.gen_range(0..=3).min(pool.len());
        pool.choose_multiple(&mut self.rng, n).cloned().collect()
    }

    fn upload(&mut self, state: &SystemState) -> Command {
        let payload = self.pick(&PAYLOADS).to_string();
        let purpose = self.pick(&PURPOSES).to_string();
        let expiry = state.clock + self.rng.gen_range(0..40);
        let owners: Vec<ActorId> = state
            .auth
            .patients
            .iter()
            .filter(|p| !Self::devices_of(state, p, false).is_empty())
            .cloned()
            .collect();
        let mut readers = self.readers(state);
        if self.valid() && !owners.is_empty() {
            let owner = self.pick(&owners);
            let device = self.pick(&Self::devices_of(state, &owner, false));
            return Command::Upload {
                device,
                claimed: owner.clone(),
                label: DlmLabel::new(owner, readers),
                purpose,
                expiry,
                payload,
            };
        }
        let (device, claimed, owner) = match self.rng.gen_range(0..4) {
            0 => (self.any_device(), self.any_actor(), self.any_actor()),
            1 => {
                let o = self.any_actor();
                (self.any_device(), o.clone(), o)
            }
            2 => {
                readers.push(a("h2"));
                (d("ph0"), a("p0"), a("p0"))
            }
            _ => (d("ph3"), a("p3"), a("p3")),
        };
        Command::Upload {
            device,
            claimed,
            label: DlmLabel::new(owner, readers),
            purpose,
            expiry,
            payload,
        }
    }

    fn delete(&mut self, state: &SystemState) -> Command {
        let Some(key) = self.db_item(state).filter(|_| self.valid()) else {
            let owner = self.any_actor();
            let readers = self.readers(state);
            return Command::Delete {
                device: self.any_device(),
                claimed: if self.rng.gen_bool(0.5) {
                    owner.clone()
                } else {
                    self.any_actor()
                },
                label: DlmLabel::new(owner, readers),
                payload: self.pick(&PAYLOADS).to_string(),
            };
        };
        let owner = key.owner().clone();
        let phones = Self::devices_of(state, &owner, true);
        let device = if phones.is_empty() {
            self.any_device()
        } else {
            self.pick(&phones)
        };
        Command::Delete {
            device,
            claimed: owner,
            label: key.label,
            payload: key.payload,
        }
    }

    fn restrict(&mut self, state: &SystemState) -> Command {
        let flag = self.rng.gen_bool(0.6);
        let Some(key) = self.db_item(state).filter(|_| self.valid()) else {
            let owner = self.any_actor();
            let readers = self.readers(state);
            return Command::Restrict {
                device: self.any_device(),
                claimed: owner.clone(),
                label: DlmLabel::new(owner, readers),
                payload: self.pick(&PAYLOADS).to_string(),
                flag,
            };
        };
        let owner = key.owner().clone();
        let phones = Self::devices_of(state, &owner, true);
        let device = if phones.is_empty() {
            self.any_device()
        } else {
            self.pick(&phones)
        };
        Command::Restrict {
            device,
            claimed: owner,
            label: key.label,
            payload: key.payload,
            flag,
        }
    }

    fn download(&mut self, state: &SystemState) -> Command {
        let candidates: Vec<(ActorId, ActorId)> = state
            .db
            .table
            .keys()
            .flat_map(|k| {
                k.label
                    .readers()
                    .iter()
                    .filter(|r| state.hospitals.contains_key(*r))
                    .map(move |h| (h.clone(), k.owner().clone()))
            })
            .collect();
        if self.valid() && !candidates.is_empty() {
            let (hospital, owner) = self.pick(&candidates);
            let staff: Vec<ActorId> = state.hospitals[&hospital].staff.iter().cloned().collect();
            let doctor = if staff.is_empty() {
                self.any_actor()
            } else {
                self.pick(&staff)
            };
            return Command::Download {
                hospital,
                doctor,
                owner,
            };
        }
        Command::Download {
            hospital: self.any_actor(),
            doctor: self.any_actor(),
            owner: self.any_actor(),
        }
    }

    fn sar(&mut self, state: &SystemState) -> Command {
        if self.valid() {
            let sessions: Vec<(DeviceId, ActorId)> = state
                .devices
                .values()
                .map(|s| (s.device_id.clone(), s.bound_actor.clone()))
                .collect();
            if !sessions.is_empty() {
                let (device, claimed) = self.pick(&sessions);
                return Command::Sar { device, claimed };
            }
        }
        Command::Sar {
            device: self.any_device(),
            claimed: self.any_actor(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuzzReport {
    pub state: SystemState,
    /// The executed trace as a replayable script (refusals are announced
    /// with EXPECT-ERROR).
    pub script: Vec<Command>,
    pub trace: String,
    pub failure: Option<RunFailure>,
    /// Operation commands executed (setup excluded), and how many of them
    /// were refused.
    pub generated: usize,
    pub refused: usize,
}

/// Runs the setup then `steps` generated commands. Line numbers in the
/// trace count executed commands (setup included), starting at 1.
pub fn fuzz(seed: u64, steps: usize, opts: &RunOptions) -> FuzzReport {
    let mut runner = Runner::new(opts.clone()).tolerate_errors(true);
    let mut generator = Generator::new(seed);
    let mut script = Vec::new();
    let mut failure = None;
    let mut refused = 0;

    let setup = setup_commands();
    let total = setup.len() + steps;
    for i in 0..total {
        let command = match setup.get(i) {
            Some(c) => c.clone(),
            None => generator.next(runner.state()),
        };
        match runner.step(i + 1, &command) {
            Ok(Some(e)) => {
                if i >= setup.len() {
                    refused += 1;
                }
                script.push(Command::ExpectError(e));
                script.push(command);
            }
            Ok(None) => script.push(command),
            Err(f) => {
                script.push(command);
                failure = Some(f);
                break;
            }
        }
    }
    if failure.is_none() {
        failure = runner.finish(total).err();
    }
    let (state, trace) = runner.into_parts();
    FuzzReport {
        state,
        script,
        trace,
        failure,
        generated: steps,
        refused,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universe_has_ten_actors() {
        let g = Generator::new(0);
        assert_eq!(g.actors.len(), 10);
    }

    #[test]
    fn same_seed_same_commands() {
        let mut s = SystemState::new();
        for c in setup_commands() {
            if let Command::RegisterPatient(p) = c {
                s.register_patient(p).unwrap();
            }
        }
        let mut g1 = Generator::new(7);
        let mut g2 = Generator::new(7);
        for _ in 0..50 {
            assert_eq!(g1.next(&s), g2.next(&s));
        }
    }
}
