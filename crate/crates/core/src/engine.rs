//! Greylisting pinhole engine.
//!
//! Every inbound request is looked up in the pinhole database by a key
//! derived from the message. Unknown senders are dropped and remembered;
//! a sender that retransmits gets an ALLOW rule installed at the firewall,
//! and traffic matching an installed rule passes.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::firewall::{RuleOp, RuleUpdate};
use crate::sip::SipMessage;
use crate::Seconds;

/// Which message fields form the pinhole match parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyStrategy {
    #[default]
    SourceIp,
    Transaction,
    Session,
}

impl fmt::Display for KeyStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyStrategy::SourceIp => "source-ip",
            KeyStrategy::Transaction => "transaction",
            KeyStrategy::Session => "session",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PinholeKey {
    SourceIp {
        ip: Ipv4Addr,
    },
    Transaction {
        ip: Ipv4Addr,
        branch: String,
        cseq_method: String,
    },
    Session {
        call_id: String,
        from_tag: String,
    },
}

impl PinholeKey {
    pub fn strategy(&self) -> KeyStrategy {
        match self {
            PinholeKey::SourceIp { .. } => KeyStrategy::SourceIp,
            PinholeKey::Transaction { .. } => KeyStrategy::Transaction,
            PinholeKey::Session { .. } => KeyStrategy::Session,
        }
    }

    /// Stable 16-hex-digit digest used in exported logs.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_string().as_bytes());
        hex::encode(&hash[..8])
    }
}

impl fmt::Display for PinholeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PinholeKey::SourceIp { ip } => write!(f, "ip:{ip}"),
            PinholeKey::Transaction {
                ip,
                branch,
                cseq_method,
            } => write!(f, "txn:{ip}|{branch}|{cseq_method}"),
            PinholeKey::Session { call_id, from_tag } => write!(f, "session:{call_id}|{from_tag}"),
        }
    }
}

/// Projects a request onto its pinhole key.
///
/// Retransmissions carry identical Via, Call-ID, From and CSeq values, so
/// they always map to the key of the original. ACK and CANCEL reuse their
/// INVITE's branch and therefore differ from it only in the CSeq method
/// under the transaction strategy.
pub fn derive_key(msg: &SipMessage, strategy: KeyStrategy) -> PinholeKey {
    match strategy {
        KeyStrategy::SourceIp => PinholeKey::SourceIp { ip: msg.src.ip },
        KeyStrategy::Transaction => PinholeKey::Transaction {
            ip: msg.src.ip,
            branch: msg.via_branch.clone(),
            cseq_method: transaction_method(msg).to_string(),
        },
        KeyStrategy::Session => PinholeKey::Session {
            call_id: msg.call_id.clone(),
            from_tag: msg.from_tag.clone(),
        },
    }
}

// ACK and CANCEL share the INVITE's transaction.
fn transaction_method(msg: &SipMessage) -> &str {
    use crate::sip::Method;
    match msg.cseq_method {
        Method::Ack | Method::Cancel => Method::Invite.as_str(),
        ref m => m.as_str(),
    }
}

/// When the pinhole for a new key gets requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpeningPolicy {
    /// On the first sighting.
    #[default]
    Immediate,
    /// On the first retransmission (second sighting).
    Deferred,
}

impl OpeningPolicy {
    fn sightings_to_open(self) -> u32 {
        match self {
            OpeningPolicy::Immediate => 1,
            OpeningPolicy::Deferred => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinholeState {
    Greylisted,
    Open,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinholeRecord {
    pub key: PinholeKey,
    pub sightings: u32,
    pub state: PinholeState,
    pub first_seen: Seconds,
    pub last_hit: Seconds,
    pub opened_at: Option<Seconds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub strategy: KeyStrategy,
    #[serde(default)]
    pub policy: OpeningPolicy,
    #[serde(default = "default_expiry", rename = "expiry_after_idle_s")]
    pub expiry_after_idle: Seconds,
}

fn default_expiry() -> Seconds {
    3600.0
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strategy: KeyStrategy::default(),
            policy: OpeningPolicy::default(),
            expiry_after_idle: default_expiry(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Drop,
    Pass,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Drop => "drop",
            Action::Pass => "pass",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub rule_request: Option<RuleUpdate>,
}

/// Read access to the rules that are effective at the firewall.
pub trait RuleView {
    fn is_effective(&self, key: &PinholeKey, now: Seconds) -> bool;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub records: usize,
    pub open: usize,
    pub greylisted: usize,
    pub installs_requested: u64,
    pub removals_requested: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expired {
    pub keys: Vec<PinholeKey>,
    pub removals: Vec<RuleUpdate>,
}

#[derive(Debug, Clone)]
pub struct PinholeEngine {
    config: EngineConfig,
    records: HashMap<PinholeKey, PinholeRecord>,
    open: usize,
    installs_requested: u64,
    removals_requested: u64,
}

impl PinholeEngine {
    pub fn new(config: EngineConfig) -> Self {
        assert!(
            config.expiry_after_idle > 0.0,
            "expiry_after_idle must be positive"
        );
        Self {
            config,
            records: HashMap::new(),
            open: 0,
            installs_requested: 0,
            removals_requested: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn record(&self, key: &PinholeKey) -> Option<&PinholeRecord> {
        self.records.get(key)
    }

    /// Classifies one inbound request. Responses must not be fed here.
    pub fn process_packet(
        &mut self,
        msg: &SipMessage,
        now: Seconds,
        rules: &impl RuleView,
    ) -> Decision {
        debug_assert!(msg.is_request());
        let key = derive_key(msg, self.config.strategy);
        let threshold = self.config.policy.sightings_to_open();

        let record = self
            .records
            .entry(key.clone())
            .or_insert_with(|| PinholeRecord {
                key: key.clone(),
                sightings: 0,
                state: PinholeState::Greylisted,
                first_seen: now,
                last_hit: now,
                opened_at: None,
            });
        record.sightings = record.sightings.saturating_add(1);
        record.last_hit = record.last_hit.max(now);

        match record.state {
            PinholeState::Open => {
                let action = if rules.is_effective(&key, now) {
                    Action::Pass
                } else {
                    Action::Drop
                };
                Decision {
                    action,
                    rule_request: None,
                }
            }
            PinholeState::Greylisted if record.sightings >= threshold => {
                record.state = PinholeState::Open;
                record.opened_at = Some(now);
                self.open += 1;
                self.installs_requested += 1;
                Decision {
                    action: Action::Drop,
                    rule_request: Some(RuleUpdate {
                        op: RuleOp::Install,
                        key,
                        requested_at: now,
                    }),
                }
            }
            PinholeState::Greylisted => Decision {
                action: Action::Drop,
                rule_request: None,
            },
        }
    }

    /// Forgets every record idle for strictly longer than the configured
    /// expiry and requests removal of the rules of open ones. Keys are
    /// returned in sorted order.
    pub fn expire(&mut self, now: Seconds) -> Expired {
        let limit = self.config.expiry_after_idle;
        let mut stale: Vec<PinholeKey> = self
            .records
            .values()
            .filter(|r| now - r.last_hit > limit)
            .map(|r| r.key.clone())
            .collect();
        stale.sort();

        let mut removals = Vec::new();
        for key in &stale {
            let record = self.records.remove(key).expect("stale key present");
            if record.state == PinholeState::Open {
                self.open -= 1;
                self.removals_requested += 1;
                removals.push(RuleUpdate {
                    op: RuleOp::Remove,
                    key: key.clone(),
                    requested_at: now,
                });
            }
        }
        Expired {
            keys: stale,
            removals,
        }
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            records: self.records.len(),
            open: self.open,
            greylisted: self.records.len() - self.open,
            installs_requested: self.installs_requested,
            removals_requested: self.removals_requested,
        }
    }
}
