use serde::{Deserialize, Serialize};

use crate::Seconds;

/// What a group of user agents does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UaBehavior {
    Register,
    Call,
    EmergencyCall,
}

impl UaBehavior {
    pub fn is_emergency(self) -> bool {
        self == UaBehavior::EmergencyCall
    }
}

/// A group of identical, conforming user agents. Each UA gets its own
/// source address and runs `transactions` request transactions, the first
/// starting at `start_s` plus a seeded uniform jitter in `[0, jitter_s)`,
/// later ones spaced by `interval_s` scaled by a seeded factor in
/// `[0.5, 1.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UaGroup {
    pub count: u32,
    pub behavior: UaBehavior,
    /// Send a REGISTER before the first call.
    #[serde(default)]
    pub register_first: bool,
    #[serde(default = "default_transactions")]
    pub transactions: u32,
    #[serde(default)]
    pub start_s: Seconds,
    #[serde(default)]
    pub jitter_s: Seconds,
    #[serde(default = "default_ua_interval")]
    pub interval_s: Seconds,
    #[serde(default = "default_t1")]
    pub t1_s: Seconds,
    #[serde(default = "default_give_up")]
    pub give_up_after_s: Seconds,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_transactions() -> u32 {
    1
}

fn default_ua_interval() -> Seconds {
    5.0
}

pub(crate) fn default_t1() -> Seconds {
    0.5
}

fn default_give_up() -> Seconds {
    64.0 * default_t1()
}

impl UaGroup {
    pub fn new(count: u32, behavior: UaBehavior) -> Self {
        Self {
            count,
            behavior,
            register_first: false,
            transactions: default_transactions(),
            start_s: 0.0,
            jitter_s: 0.0,
            interval_s: default_ua_interval(),
            t1_s: default_t1(),
            give_up_after_s: default_give_up(),
            rng_seed: 0,
        }
    }
}

/// Attack traffic sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackerModel {
    /// Every request from a fresh, never repeated spoofed address; no
    /// retransmissions.
    SpoofFlood {
        rate: f64,
        total: u64,
        #[serde(default)]
        start_s: Seconds,
        #[serde(default)]
        emergency: bool,
        #[serde(default)]
        rng_seed: u64,
    },
    /// Fresh transactions from a fixed pool of spoofed addresses.
    FixedSpoofSet {
        rate: f64,
        total: u64,
        pool_size: u32,
        #[serde(default)]
        start_s: Seconds,
        #[serde(default)]
        emergency: bool,
        #[serde(default)]
        rng_seed: u64,
    },
    /// Sends each distinct request `repeats + 1` times, `t1_s` apart, out of
    /// the same message budget `rate`.
    ConformingFlood {
        rate: f64,
        total: u64,
        repeats: u32,
        #[serde(default = "default_t1")]
        t1_s: Seconds,
        #[serde(default)]
        start_s: Seconds,
        #[serde(default)]
        emergency: bool,
        #[serde(default)]
        rng_seed: u64,
    },
}

impl AttackerModel {
    pub fn spoof_flood(rate: f64, total: u64) -> Self {
        AttackerModel::SpoofFlood {
            rate,
            total,
            start_s: 0.0,
            emergency: false,
            rng_seed: 0,
        }
    }

    pub fn rate(&self) -> f64 {
        match *self {
            AttackerModel::SpoofFlood { rate, .. }
            | AttackerModel::FixedSpoofSet { rate, .. }
            | AttackerModel::ConformingFlood { rate, .. } => rate,
        }
    }

    pub fn total(&self) -> u64 {
        match *self {
            AttackerModel::SpoofFlood { total, .. }
            | AttackerModel::FixedSpoofSet { total, .. }
            | AttackerModel::ConformingFlood { total, .. } => total,
        }
    }

    pub fn start_s(&self) -> Seconds {
        match *self {
            AttackerModel::SpoofFlood { start_s, .. }
            | AttackerModel::FixedSpoofSet { start_s, .. }
            | AttackerModel::ConformingFlood { start_s, .. } => start_s,
        }
    }

    pub fn emergency(&self) -> bool {
        match *self {
            AttackerModel::SpoofFlood { emergency, .. }
            | AttackerModel::FixedSpoofSet { emergency, .. }
            | AttackerModel::ConformingFlood { emergency, .. } => emergency,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        match *self {
            AttackerModel::SpoofFlood { rng_seed, .. }
            | AttackerModel::FixedSpoofSet { rng_seed, .. }
            | AttackerModel::ConformingFlood { rng_seed, .. } => rng_seed,
        }
    }

    /// Number of distinct requests and how many times each is sent.
    pub(crate) fn distinct_schedule(&self) -> (u64, u64) {
        match *self {
            AttackerModel::ConformingFlood { total, repeats, .. } => {
                let copies = u64::from(repeats) + 1;
                (total.div_ceil(copies), copies)
            }
            _ => (self.total(), 1),
        }
    }
}

/// The protected proxy: a fixed processing delay, longer for emergency
/// requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyModel {
    #[serde(rename = "delay_normal_s", default = "default_delay_normal")]
    pub delay_normal: Seconds,
    #[serde(rename = "delay_emergency_s", default = "default_delay_emergency")]
    pub delay_emergency: Seconds,
}

fn default_delay_normal() -> Seconds {
    0.14
}

fn default_delay_emergency() -> Seconds {
    0.21
}

impl Default for ProxyModel {
    fn default() -> Self {
        Self {
            delay_normal: default_delay_normal(),
            delay_emergency: default_delay_emergency(),
        }
    }
}

impl ProxyModel {
    pub fn delay(&self, emergency: bool) -> Seconds {
        if emergency {
            self.delay_emergency
        } else {
            self.delay_normal
        }
    }
}
