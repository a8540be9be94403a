mod common;

use std::collections::{HashMap, HashSet};

use common::{host, request, Instant};
use pinhole_core::engine::{
    derive_key, Action, EngineConfig, KeyStrategy, OpeningPolicy, PinholeEngine, PinholeKey,
};
use pinhole_core::firewall::RuleOp;
use pinhole_core::sip::{Method, SipMessage};
use proptest::prelude::*;

fn engine(strategy: KeyStrategy, policy: OpeningPolicy) -> PinholeEngine {
    PinholeEngine::new(EngineConfig {
        strategy,
        policy,
        ..EngineConfig::default()
    })
}

/// Feeds `msgs` one per second through `engine` with instant installs.
fn replay(engine: &mut PinholeEngine, msgs: &[SipMessage]) -> Vec<Action> {
    let mut fw = Instant::default();
    msgs.iter()
        .enumerate()
        .map(|(i, m)| {
            let d = engine.process_packet(m, i as f64, &fw);
            if let Some(req) = d.rule_request {
                assert_eq!(req.op, RuleOp::Install);
                fw.0.insert(req.key);
            }
            d.action
        })
        .collect()
}

fn strategy() -> impl Strategy<Value = KeyStrategy> {
    prop_oneof![
        Just(KeyStrategy::SourceIp),
        Just(KeyStrategy::Transaction),
        Just(KeyStrategy::Session),
    ]
}

fn policy() -> impl Strategy<Value = OpeningPolicy> {
    prop_oneof![
        Just(OpeningPolicy::Immediate),
        Just(OpeningPolicy::Deferred)
    ]
}

/// Packets from a handful of hosts and transactions so keys collide often.
fn traffic() -> impl Strategy<Value = Vec<SipMessage>> {
    prop::collection::vec(
        (
            0u32..4,
            0u32..6,
            prop_oneof![
                Just(Method::Invite),
                Just(Method::Ack),
                Just(Method::Register)
            ],
        ),
        0..120,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(h, t, m)| request(host(h), t, m))
            .collect()
    })
}

fn threshold(policy: OpeningPolicy) -> usize {
    match policy {
        OpeningPolicy::Immediate => 1,
        OpeningPolicy::Deferred => 2,
    }
}

proptest! {
    #[test]
    fn one_install_per_distinct_key(msgs in traffic(), s in strategy(), p in policy()) {
        let mut e = engine(s, p);
        let mut fw = Instant::default();
        let mut installs: HashMap<PinholeKey, usize> = HashMap::new();
        for (i, m) in msgs.iter().enumerate() {
            if let Some(req) = e.process_packet(m, i as f64, &fw).rule_request {
                *installs.entry(req.key.clone()).or_default() += 1;
                fw.0.insert(req.key);
            }
        }
        prop_assert!(installs.values().all(|&n| n == 1));
        let mut seen: HashMap<PinholeKey, usize> = HashMap::new();
        for m in &msgs {
            *seen.entry(derive_key(m, s)).or_default() += 1;
        }
        let expected = seen.values().filter(|&&n| n >= threshold(p)).count();
        prop_assert_eq!(installs.len(), expected);
        prop_assert_eq!(e.stats().installs_requested, expected as u64);
    }

    #[test]
    fn greylist_matches_replay_oracle(msgs in traffic(), s in strategy(), p in policy()) {
        let actions = replay(&mut engine(s, p), &msgs);
        // Brute force: a packet passes iff its key was sighted at least
        // `threshold` times before it.
        for (i, m) in msgs.iter().enumerate() {
            let key = derive_key(m, s);
            let prior = msgs[..i].iter().filter(|o| derive_key(o, s) == key).count();
            let expected = if prior >= threshold(p) { Action::Pass } else { Action::Drop };
            prop_assert_eq!(actions[i], expected, "packet {}", i);
        }
    }

    #[test]
    fn retransmitting_sender_eventually_passes(
        noise in traffic(),
        s in strategy(),
        p in policy(),
        slots in prop::collection::btree_set(0usize..200, 3),
    ) {
        // A conforming sender's original plus two retransmissions, spread
        // among unrelated traffic.
        let me = request(host(99), 99, Method::Invite);
        let mut msgs = noise;
        for &slot in &slots {
            msgs.insert(slot.min(msgs.len()), me.clone());
        }
        let actions = replay(&mut engine(s, p), &msgs);
        let mine: Vec<_> = msgs.iter().zip(&actions).filter(|(m, _)| **m == me).map(|(_, a)| *a).collect();
        prop_assert_eq!(mine.len(), 3);
        prop_assert_eq!(*mine.last().unwrap(), Action::Pass);
    }

    #[test]
    fn single_shots_never_pass(n in 1u32..300, s in strategy(), p in policy()) {
        let msgs: Vec<_> = (0..n).map(|i| request(host(i), i, Method::Invite)).collect();
        let actions = replay(&mut engine(s, p), &msgs);
        prop_assert!(actions.iter().all(|a| *a == Action::Drop));
    }

    #[test]
    fn source_ip_passes_at_least_what_transaction_passes(msgs in traffic(), p in policy()) {
        let by_txn = replay(&mut engine(KeyStrategy::Transaction, p), &msgs);
        let by_ip = replay(&mut engine(KeyStrategy::SourceIp, p), &msgs);
        for (t, i) in by_txn.iter().zip(&by_ip) {
            prop_assert!(!(*t == Action::Pass && *i == Action::Drop));
        }
    }
}

#[test]
fn sending_twice_halves_the_distinct_pass_rate() {
    let mut msgs = Vec::new();
    for i in 0..1000 {
        let m = request(host(i), i, Method::Invite);
        msgs.push(m.clone());
        msgs.push(m);
    }
    let actions = replay(
        &mut engine(KeyStrategy::Transaction, OpeningPolicy::Immediate),
        &msgs,
    );
    let passed = actions.iter().filter(|a| **a == Action::Pass).count();
    assert_eq!(passed, msgs.len() / 2);
}

#[test]
fn ack_and_cancel_share_the_invite_pinhole() {
    let invite = request(host(0), 0, Method::Invite);
    let ack = request(host(0), 0, Method::Ack);
    let cancel = request(host(0), 0, Method::Cancel);
    let actions = replay(
        &mut engine(KeyStrategy::Transaction, OpeningPolicy::Immediate),
        &[invite, ack, cancel],
    );
    assert_eq!(actions, vec![Action::Drop, Action::Pass, Action::Pass]);
}

#[test]
fn fixed_source_under_source_ip_only_first_dropped() {
    let msgs: Vec<_> = (0..50)
        .map(|i| request(host(7), i, Method::Invite))
        .collect();
    let actions = replay(
        &mut engine(KeyStrategy::SourceIp, OpeningPolicy::Immediate),
        &msgs,
    );
    assert_eq!(actions[0], Action::Drop);
    assert!(actions[1..].iter().all(|a| *a == Action::Pass));
}

#[test]
fn deferred_needs_two_sightings_before_opening() {
    let m = request(host(0), 0, Method::Invite);
    let mut e = engine(KeyStrategy::Transaction, OpeningPolicy::Deferred);
    let fw = Instant::default();
    assert!(e.process_packet(&m, 0.0, &fw).rule_request.is_none());
    assert!(e.process_packet(&m, 0.5, &fw).rule_request.is_some());
}

#[test]
fn open_pinhole_waits_for_the_rule() {
    let m = request(host(0), 0, Method::Invite);
    let mut e = engine(KeyStrategy::SourceIp, OpeningPolicy::Immediate);
    let mut fw = Instant::default();
    let req = e.process_packet(&m, 0.0, &fw).rule_request.unwrap();
    // Not yet installed: still dropped.
    assert_eq!(e.process_packet(&m, 0.5, &fw).action, Action::Drop);
    fw.0.insert(req.key);
    assert_eq!(e.process_packet(&m, 1.0, &fw).action, Action::Pass);
}

#[test]
fn expiry_is_strictly_after_the_idle_limit() {
    let m = request(host(0), 0, Method::Register);
    let mut e = engine(KeyStrategy::SourceIp, OpeningPolicy::Immediate);
    e.process_packet(&m, 0.0, &Instant::default());
    assert!(e.expire(3600.0).keys.is_empty());
    let gone = e.expire(3600.0 + 1e-9);
    assert_eq!(gone.keys.len(), 1);
    assert_eq!(gone.removals.len(), 1);
    assert_eq!(gone.removals[0].op, RuleOp::Remove);
    assert!(e.record(&gone.keys[0]).is_none());
}

#[test]
fn greylisted_records_expire_without_removal() {
    let m = request(host(0), 0, Method::Invite);
    let mut e = engine(KeyStrategy::Transaction, OpeningPolicy::Deferred);
    e.process_packet(&m, 0.0, &Instant::default());
    let gone = e.expire(4000.0);
    assert_eq!(gone.keys.len(), 1);
    assert!(gone.removals.is_empty());
}

#[test]
fn register_refresh_keeps_pinhole_alive() {
    // REGISTER refreshed every 1800 s for a day, then silence. Sweep every
    // 60 s and compare with a replay oracle of the last sighting.
    let m = request(host(0), 0, Method::Register);
    let mut e = engine(KeyStrategy::SourceIp, OpeningPolicy::Immediate);
    let mut fw = Instant::default();
    let refreshes: Vec<f64> = (0..=48).map(|k| k as f64 * 1800.0).collect();
    let mut next = 0;
    let mut removed_at = None;
    for sweep in (1..=3000).map(|k| k as f64 * 60.0) {
        while next < refreshes.len() && refreshes[next] <= sweep {
            if let Some(r) = e.process_packet(&m, refreshes[next], &fw).rule_request {
                fw.0.insert(r.key);
            }
            next += 1;
        }
        let last = refreshes[..next].last().copied().unwrap();
        let oracle_expired = sweep - last > 3600.0;
        let expired = e.expire(sweep);
        assert_eq!(
            !expired.keys.is_empty(),
            oracle_expired && removed_at.is_none(),
            "sweep {sweep}"
        );
        if oracle_expired && removed_at.is_none() {
            removed_at = Some(sweep);
        }
    }
    // Last refresh at 86400; first sweep strictly beyond 90000 is 90060.
    assert_eq!(removed_at, Some(90060.0));
    let installs: HashSet<_> = fw.0.iter().collect();
    assert_eq!(installs.len(), 1);
}
