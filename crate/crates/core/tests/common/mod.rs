#![allow(dead_code)]

use std::collections::HashSet;
use std::net::Ipv4Addr;

use pinhole_core::engine::{PinholeKey, RuleView};
use pinhole_core::sip::{Endpoint, MessageKind, Method, SipMessage};
use pinhole_core::Seconds;

pub fn proxy() -> Endpoint {
    Endpoint::sip(Ipv4Addr::new(172, 16, 0, 1))
}

/// A request from `ip` in transaction `txn`.
pub fn request(ip: Ipv4Addr, txn: u32, method: Method) -> SipMessage {
    SipMessage {
        kind: MessageKind::Request,
        method: method.clone(),
        status_code: None,
        call_id: format!("call{txn}@{ip}"),
        via_branch: format!("z9hG4bKt{txn}"),
        from_tag: format!("tag{txn}"),
        to_tag: None,
        cseq_number: 1,
        cseq_method: method,
        request_uri: Some("sip:bob@ims.example".into()),
        is_emergency: false,
        src: Endpoint::sip(ip),
        dst: proxy(),
        length_bytes: 0,
    }
}

pub fn host(i: u32) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(Ipv4Addr::new(192, 168, 0, 1)) + i)
}

/// A firewall whose installs are effective the moment they are requested.
#[derive(Default)]
pub struct Instant(pub HashSet<PinholeKey>);

impl RuleView for Instant {
    fn is_effective(&self, key: &PinholeKey, _now: Seconds) -> bool {
        self.0.contains(key)
    }
}
