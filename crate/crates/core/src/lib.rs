//! Greylisting firewall pinholes as a DDoS defense for SIP proxies, with a
//! deterministic discrete-event harness to evaluate it.

pub mod engine;
pub mod firewall;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod sip;

/// Simulated time in seconds.
pub type Seconds = f64;
