//! Simulated perimeter firewall and its controller.
//!
//! The firewall is default-deny for proxy-bound requests. ALLOW rules are
//! installed one at a time (real-time controller) or in periodic batches
//! (batched controller). Every update operation costs time that grows with
//! the size of the installed rule set, see [`LatencyModel`]. Operations are
//! serialized: one rule or one batch is processed at a time.

mod latency;

pub use latency::{
    calibrate, table1, Calibration, CalibrationError, CapacityMode, CapacityRow, CapacityTable,
    RealTimeCeiling, Residual,
};

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::engine::{derive_key, KeyStrategy, PinholeKey, RuleView};
use crate::sip::SipMessage;
use crate::Seconds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleOp {
    Install,
    Remove,
}

impl fmt::Display for RuleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleOp::Install => "install",
            RuleOp::Remove => "remove",
        })
    }
}

/// A rule change requested by the engine at `requested_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleUpdate {
    pub op: RuleOp,
    pub key: PinholeKey,
    pub requested_at: Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControllerMode {
    #[serde(rename = "realtime")]
    RealTime,
    Batched {
        #[serde(rename = "interval_s", default = "default_interval")]
        interval: Seconds,
    },
}

fn default_interval() -> Seconds {
    1.0
}

impl ControllerMode {
    pub fn batched() -> Self {
        ControllerMode::Batched {
            interval: default_interval(),
        }
    }

    pub fn interval(&self) -> Option<Seconds> {
        match *self {
            ControllerMode::RealTime => None,
            ControllerMode::Batched { interval } => Some(interval),
        }
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerMode::RealTime => f.write_str("realtime"),
            ControllerMode::Batched { interval } => write!(f, "batched-{interval}s"),
        }
    }
}

/// Affine copy-cost model of a firewall that rewrites its whole rule set
/// on every update.
///
/// A real-time update costs `per_rule_base + per_existing_rule * n`, a
/// batch costs `per_batch_base + per_batch_per_existing_rule * n`, where
/// `n` is the number of installed rules when the operation starts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    #[serde(rename = "per_rule_base_s")]
    pub per_rule_base: Seconds,
    #[serde(rename = "per_existing_rule_s")]
    pub per_existing_rule: Seconds,
    #[serde(rename = "per_batch_base_s")]
    pub per_batch_base: Seconds,
    #[serde(rename = "per_batch_per_existing_rule_s")]
    pub per_batch_per_existing_rule: Seconds,
}

impl LatencyModel {
    /// Every update takes effect instantly.
    pub const ZERO: LatencyModel = LatencyModel {
        per_rule_base: 0.0,
        per_existing_rule: 0.0,
        per_batch_base: 0.0,
        per_batch_per_existing_rule: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        [
            self.per_rule_base,
            self.per_existing_rule,
            self.per_batch_base,
            self.per_batch_per_existing_rule,
        ]
        .iter()
        .all(|c| c.is_finite() && *c >= 0.0)
    }

    pub fn rule_cost(&self, installed: usize) -> Seconds {
        self.per_rule_base + self.per_existing_rule * installed as f64
    }

    pub fn batch_cost(&self, installed: usize) -> Seconds {
        self.per_batch_base + self.per_batch_per_existing_rule * installed as f64
    }

    /// Installed-rule count above which one batch takes longer than
    /// `interval`, i.e. periodic pushes stop keeping up.
    pub fn batch_ceiling(&self, interval: Seconds) -> Option<f64> {
        (self.per_batch_per_existing_rule > 0.0)
            .then(|| (interval - self.per_batch_base) / self.per_batch_per_existing_rule)
    }
}

/// One entry of the installed-rule log.
#[derive(Debug, Clone, PartialEq)]
pub struct InstallRecord {
    pub key: PinholeKey,
    pub requested_at: Seconds,
    pub installed_at: Seconds,
}

/// A rule update that became effective.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedUpdate {
    pub op: RuleOp,
    pub key: PinholeKey,
    pub requested_at: Seconds,
    pub applied_at: Seconds,
}

/// One firewall operation: a single rule (real-time) or one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobRecord {
    pub submitted_at: Seconds,
    pub started_at: Seconds,
    pub completed_at: Seconds,
    pub size: usize,
    pub installed_before: usize,
}

#[derive(Debug)]
struct Job {
    submitted_at: Seconds,
    updates: Vec<RuleUpdate>,
}

#[derive(Debug)]
struct InFlight {
    job: Job,
    started_at: Seconds,
    completes_at: Seconds,
    installed_before: usize,
}

#[derive(Debug)]
pub struct Firewall {
    mode: ControllerMode,
    latency: LatencyModel,
    installed: HashMap<PinholeKey, Seconds>,
    pending_install: HashSet<PinholeKey>,
    pending_remove: HashSet<PinholeKey>,
    accumulated: Vec<RuleUpdate>,
    queue: VecDeque<Job>,
    in_flight: Option<InFlight>,
    busy_until: Seconds,
    installed_log: Vec<InstallRecord>,
    job_log: Vec<JobRecord>,
}

impl Firewall {
    pub fn new(mode: ControllerMode, latency: LatencyModel) -> Self {
        assert!(latency.is_valid(), "latency coefficients must be >= 0");
        if let ControllerMode::Batched { interval } = mode {
            assert!(interval > 0.0, "batch interval must be positive");
        }
        Self {
            mode,
            latency,
            installed: HashMap::new(),
            pending_install: HashSet::new(),
            pending_remove: HashSet::new(),
            accumulated: Vec::new(),
            queue: VecDeque::new(),
            in_flight: None,
            busy_until: 0.0,
            installed_log: Vec::new(),
            job_log: Vec::new(),
        }
    }

    pub fn mode(&self) -> ControllerMode {
        self.mode
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn installed_count(&self) -> usize {
        self.installed.len()
    }

    pub fn busy_until(&self) -> Seconds {
        self.busy_until
    }

    pub fn installed_log(&self) -> &[InstallRecord] {
        &self.installed_log
    }

    pub fn job_log(&self) -> &[JobRecord] {
        &self.job_log
    }

    pub fn is_pending(&self, key: &PinholeKey) -> bool {
        self.pending_install.contains(key)
    }

    /// True while updates are accumulated, queued or being processed.
    pub fn has_work(&self) -> bool {
        self.in_flight.is_some() || !self.queue.is_empty() || !self.accumulated.is_empty()
    }

    /// Completion time of the operation in progress.
    pub fn next_completion(&self) -> Option<Seconds> {
        self.in_flight.as_ref().map(|f| f.completes_at)
    }

    /// Hands an update to the controller. Returns `false` when it was
    /// ignored as a duplicate.
    pub fn submit(&mut self, update: RuleUpdate, now: Seconds) -> bool {
        let key = &update.key;
        let accept = match update.op {
            RuleOp::Install => {
                !self.pending_install.contains(key)
                    && (!self.installed.contains_key(key) || self.pending_remove.contains(key))
            }
            RuleOp::Remove => {
                !self.pending_remove.contains(key)
                    && (self.installed.contains_key(key) || self.pending_install.contains(key))
            }
        };
        if !accept {
            return false;
        }
        match update.op {
            RuleOp::Install => self.pending_install.insert(key.clone()),
            RuleOp::Remove => self.pending_remove.insert(key.clone()),
        };
        match self.mode {
            ControllerMode::RealTime => {
                self.queue.push_back(Job {
                    submitted_at: now,
                    updates: vec![update],
                });
                self.start_next();
            }
            ControllerMode::Batched { .. } => self.accumulated.push(update),
        }
        true
    }

    /// Pushes everything accumulated since the previous tick as one batch.
    /// A no-op in real-time mode or when nothing accumulated.
    pub fn tick(&mut self, now: Seconds) -> bool {
        if self.accumulated.is_empty() || self.mode == ControllerMode::RealTime {
            return false;
        }
        let updates = std::mem::take(&mut self.accumulated);
        self.queue.push_back(Job {
            submitted_at: now,
            updates,
        });
        self.start_next();
        true
    }

    /// Applies every operation that completed at or before `now`, chaining
    /// queued operations back to back.
    pub fn process_queue(&mut self, now: Seconds) -> Vec<AppliedUpdate> {
        let mut applied = Vec::new();
        while let Some(flight) = self.in_flight.take_if(|f| f.completes_at <= now) {
            let at = flight.completes_at;
            self.job_log.push(JobRecord {
                submitted_at: flight.job.submitted_at,
                started_at: flight.started_at,
                completed_at: at,
                size: flight.job.updates.len(),
                installed_before: flight.installed_before,
            });
            for update in flight.job.updates {
                self.apply(&update, at);
                applied.push(AppliedUpdate {
                    op: update.op,
                    key: update.key,
                    requested_at: update.requested_at,
                    applied_at: at,
                });
            }
            self.start_next();
        }
        applied
    }

    fn apply(&mut self, update: &RuleUpdate, at: Seconds) {
        match update.op {
            RuleOp::Install => {
                self.pending_install.remove(&update.key);
                if self.installed.insert(update.key.clone(), at).is_none() {
                    self.installed_log.push(InstallRecord {
                        key: update.key.clone(),
                        requested_at: update.requested_at,
                        installed_at: at,
                    });
                }
            }
            RuleOp::Remove => {
                self.pending_remove.remove(&update.key);
                self.installed.remove(&update.key);
            }
        }
    }

    fn start_next(&mut self) {
        if self.in_flight.is_some() {
            return;
        }
        let Some(job) = self.queue.pop_front() else {
            return;
        };
        let n = self.installed.len();
        let cost = match self.mode {
            ControllerMode::RealTime => self.latency.rule_cost(n) * job.updates.len() as f64,
            ControllerMode::Batched { .. } => self.latency.batch_cost(n),
        };
        let started_at = job.submitted_at.max(self.busy_until);
        let completes_at = started_at + cost;
        self.busy_until = completes_at;
        self.in_flight = Some(InFlight {
            job,
            started_at,
            completes_at,
            installed_before: n,
        });
    }

    /// Default-deny check for a proxy-bound request.
    pub fn permits(&self, msg: &SipMessage, strategy: KeyStrategy, now: Seconds) -> bool {
        self.is_effective(&derive_key(msg, strategy), now)
    }

    /// Writes the installed-rule log as CSV
    /// (`key_digest,requested_at_s,installed_at_s`).
    pub fn write_installed_log<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["key_digest", "requested_at_s", "installed_at_s"])?;
        for rec in &self.installed_log {
            w.write_record([
                rec.key.digest(),
                format!("{:.6}", rec.requested_at),
                format!("{:.6}", rec.installed_at),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl RuleView for Firewall {
    fn is_effective(&self, key: &PinholeKey, now: Seconds) -> bool {
        self.installed.get(key).is_some_and(|&at| at <= now)
    }
}
