use std::fmt;
use std::io;

use crate::engine::{Action, EngineStats, PinholeKey};
use crate::firewall::{ControllerMode, JobRecord, RuleOp};
use crate::sip::{Endpoint, Method};
use crate::Seconds;

/// Index of a user-agent transaction within one run.
pub type TxnId = u32;

/// Who generated a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Ua(u32),
    Attacker(u32),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Ua(i) => write!(f, "ua{i}"),
            Origin::Attacker(i) => write!(f, "attacker{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogEntry {
    /// A request reached the firewall.
    Packet {
        time: Seconds,
        origin: Origin,
        src: Endpoint,
        dst: Endpoint,
        /// `None` for unparseable datagrams.
        method: Option<Method>,
        key: Option<PinholeKey>,
        action: Action,
        txn: Option<TxnId>,
        /// 0 for the original send, k for the k-th retransmission.
        attempt: u32,
        emergency: bool,
    },
    /// The proxy's answer reached the requester.
    Reply {
        time: Seconds,
        origin: Origin,
        src: Endpoint,
        dst: Endpoint,
        method: Method,
        txn: Option<TxnId>,
    },
    /// A user-agent transaction gave up without an answer.
    TxnFailed {
        time: Seconds,
        origin: Origin,
        txn: TxnId,
    },
    RuleRequested {
        time: Seconds,
        op: RuleOp,
        key: PinholeKey,
    },
    RuleApplied {
        time: Seconds,
        op: RuleOp,
        key: PinholeKey,
        requested_at: Seconds,
    },
    FirewallJob(JobRecord),
    /// The horizon cut the run short with live events pending.
    Truncated {
        time: Seconds,
        pending: usize,
    },
}

impl LogEntry {
    pub fn time(&self) -> Seconds {
        match self {
            LogEntry::Packet { time, .. }
            | LogEntry::Reply { time, .. }
            | LogEntry::TxnFailed { time, .. }
            | LogEntry::RuleRequested { time, .. }
            | LogEntry::RuleApplied { time, .. }
            | LogEntry::Truncated { time, .. } => *time,
            LogEntry::FirewallJob(job) => job.completed_at,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LogEntry::Packet { .. } => "request",
            LogEntry::Reply { .. } => "reply",
            LogEntry::TxnFailed { .. } => "txn-failed",
            LogEntry::RuleRequested { .. } => "rule-requested",
            LogEntry::RuleApplied { .. } => "rule-applied",
            LogEntry::FirewallJob(_) => "firewall-job",
            LogEntry::Truncated { .. } => "truncated",
        }
    }
}

/// Proxy-side load counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProxyCounters {
    pub requests: u64,
    pub transactions: u64,
    pub emergency_requests: u64,
}

/// Everything a run produced, in dispatch order.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub scenario: String,
    pub seed: u64,
    pub controller: ControllerMode,
    pub entries: Vec<LogEntry>,
    pub proxy: ProxyCounters,
    pub engine: EngineStats,
    /// Simulated time of the last dispatched event.
    pub end_time: Seconds,
}

impl EventLog {
    pub fn is_truncated(&self) -> bool {
        self.entries
            .iter()
            .any(|e| matches!(e, LogEntry::Truncated { .. }))
    }

    /// Writes the log as CSV with columns
    /// `time_s,kind,src,dst,method,key_digest,action`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "time_s",
            "kind",
            "src",
            "dst",
            "method",
            "key_digest",
            "action",
        ])?;
        for entry in &self.entries {
            let time = format!("{:.6}", entry.time());
            let kind = entry.kind();
            let row: [String; 5] = match entry {
                LogEntry::Packet {
                    src,
                    dst,
                    method,
                    key,
                    action,
                    ..
                } => [
                    src.to_string(),
                    dst.to_string(),
                    method.as_ref().map(ToString::to_string).unwrap_or_default(),
                    key.as_ref().map(PinholeKey::digest).unwrap_or_default(),
                    if method.is_some() {
                        action.to_string()
                    } else {
                        "drop-malformed".into()
                    },
                ],
                LogEntry::Reply {
                    src, dst, method, ..
                } => [
                    src.to_string(),
                    dst.to_string(),
                    method.to_string(),
                    String::new(),
                    "deliver".into(),
                ],
                LogEntry::TxnFailed { origin, .. } => [
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("give-up {origin}"),
                ],
                LogEntry::RuleRequested { op, key, .. } | LogEntry::RuleApplied { op, key, .. } => {
                    [
                        String::new(),
                        String::new(),
                        String::new(),
                        key.digest(),
                        op.to_string(),
                    ]
                }
                LogEntry::FirewallJob(job) => [
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("size={}", job.size),
                ],
                LogEntry::Truncated { pending, .. } => [
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("pending={pending}"),
                ],
            };
            w.write_record(
                [time.as_str(), kind]
                    .into_iter()
                    .chain(row.iter().map(String::as_str)),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}
