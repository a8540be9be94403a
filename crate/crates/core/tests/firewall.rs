use std::collections::HashSet;
use std::net::Ipv4Addr;

use pinhole_core::engine::{PinholeKey, RuleView};
use pinhole_core::firewall::{ControllerMode, Firewall, LatencyModel, RuleOp, RuleUpdate};
use proptest::prelude::*;

fn key(i: u8) -> PinholeKey {
    PinholeKey::SourceIp {
        ip: Ipv4Addr::new(10, 0, 0, i),
    }
}

fn latency() -> impl Strategy<Value = LatencyModel> {
    (0.0..0.01f64, 0.0..1e-4f64, 0.0..0.5f64, 0.0..1e-3f64).prop_map(|(a, b, c0, c1)| {
        LatencyModel {
            per_rule_base: a,
            per_existing_rule: b,
            per_batch_base: c0,
            per_batch_per_existing_rule: c1,
        }
    })
}

fn mode() -> impl Strategy<Value = ControllerMode> {
    prop_oneof![
        Just(ControllerMode::RealTime),
        (0.1..2.0f64).prop_map(|interval| ControllerMode::Batched { interval }),
    ]
}

/// Drives a firewall the way the simulator does: updates at their times,
/// ticks on the interval grid, lazy completion.
fn drive(fw: &mut Firewall, ops: &[(f64, RuleOp, u8)]) -> (usize, Vec<(RuleOp, PinholeKey)>) {
    let mut accepted = 0;
    let mut applied = Vec::new();
    let mut next_tick = fw.mode().interval();
    for &(t, op, k) in ops {
        while let Some(tick) = next_tick.filter(|&tick| tick <= t) {
            applied.extend(fw.process_queue(tick).into_iter().map(|a| (a.op, a.key)));
            fw.tick(tick);
            next_tick = Some(tick + fw.mode().interval().unwrap());
        }
        applied.extend(fw.process_queue(t).into_iter().map(|a| (a.op, a.key)));
        if fw.submit(
            RuleUpdate {
                op,
                key: key(k),
                requested_at: t,
            },
            t,
        ) {
            accepted += 1;
        }
    }
    let mut t = ops.last().map_or(0.0, |o| o.0);
    while fw.has_work() {
        t = next_tick.map_or(t, |tick| tick.max(t));
        applied.extend(fw.process_queue(t).into_iter().map(|a| (a.op, a.key)));
        fw.tick(t);
        applied.extend(
            fw.process_queue(f64::MAX / 4.0)
                .into_iter()
                .map(|a| (a.op, a.key)),
        );
        next_tick = next_tick.map(|tick| tick + fw.mode().interval().unwrap());
    }
    (accepted, applied)
}

fn ops() -> impl Strategy<Value = Vec<(f64, RuleOp, u8)>> {
    prop::collection::vec(
        (
            0.0..0.5f64,
            prop_oneof![3 => Just(RuleOp::Install), 1 => Just(RuleOp::Remove)],
            0u8..20,
        ),
        0..150,
    )
    .prop_map(|v| {
        let mut t = 0.0;
        v.into_iter()
            .map(|(dt, op, k)| {
                t += dt;
                (t, op, k)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn every_accepted_update_is_applied_once(ops in ops(), mode in mode(), lat in latency()) {
        let mut fw = Firewall::new(mode, lat);
        let (accepted, applied) = drive(&mut fw, &ops);
        prop_assert_eq!(applied.len(), accepted);
        // Replaying the applied sequence gives the installed set.
        let mut set = HashSet::new();
        for (op, k) in &applied {
            match op {
                RuleOp::Install => prop_assert!(set.insert(k.clone())),
                RuleOp::Remove => prop_assert!(set.remove(k)),
            }
        }
        prop_assert_eq!(fw.installed_count(), set.len());
        for k in &set {
            prop_assert!(fw.is_effective(k, f64::MAX));
        }
    }

    #[test]
    fn operations_never_overlap(ops in ops(), mode in mode(), lat in latency()) {
        let mut fw = Firewall::new(mode, lat);
        drive(&mut fw, &ops);
        for w in fw.job_log().windows(2) {
            prop_assert!(w[1].started_at >= w[0].completed_at);
        }
        for j in fw.job_log() {
            prop_assert!(j.started_at >= j.submitted_at && j.completed_at >= j.started_at);
            if mode == ControllerMode::RealTime {
                prop_assert_eq!(j.size, 1);
            }
        }
    }

    #[test]
    fn at_most_one_batch_per_tick(ops in ops(), interval in 0.1..2.0f64, lat in latency()) {
        let mut fw = Firewall::new(ControllerMode::Batched { interval }, lat);
        drive(&mut fw, &ops);
        let last = ops.last().map_or(0.0, |o| o.0);
        let ticks = (last / interval).floor() as usize + 1;
        prop_assert!(fw.job_log().len() <= ticks);
        let mut submitted: Vec<_> = fw.job_log().iter().map(|j| j.submitted_at).collect();
        submitted.dedup();
        prop_assert_eq!(submitted.len(), fw.job_log().len());
    }
}

#[test]
fn real_time_costs_accumulate_with_rule_count() {
    let lat = LatencyModel {
        per_rule_base: 0.01,
        per_existing_rule: 0.001,
        ..LatencyModel::ZERO
    };
    let mut fw = Firewall::new(ControllerMode::RealTime, lat);
    for i in 0..3 {
        fw.submit(
            RuleUpdate {
                op: RuleOp::Install,
                key: key(i),
                requested_at: 0.0,
            },
            0.0,
        );
    }
    let applied = fw.process_queue(1.0);
    let times: Vec<f64> = applied.iter().map(|a| a.applied_at).collect();
    // 0.010, then 0.011 with one rule, then 0.012 with two.
    let expected = [0.010, 0.021, 0.033];
    for (t, e) in times.iter().zip(expected) {
        assert!((t - e).abs() < 1e-12, "{times:?}");
    }
}

#[test]
fn batch_becomes_visible_atomically() {
    let lat = LatencyModel {
        per_batch_base: 0.2,
        ..LatencyModel::ZERO
    };
    let mut fw = Firewall::new(ControllerMode::batched(), lat);
    for i in 0..5 {
        fw.submit(
            RuleUpdate {
                op: RuleOp::Install,
                key: key(i),
                requested_at: 0.1,
            },
            0.1,
        );
    }
    assert!(fw.tick(0.5));
    assert_eq!(fw.next_completion(), Some(0.5 + 0.2));
    assert!(fw.process_queue(0.69).is_empty());
    assert!((0..5).all(|i| !fw.is_effective(&key(i), 0.69)));
    assert_eq!(fw.process_queue(0.5 + 0.2).len(), 5);
    assert!((0..5).all(|i| fw.is_effective(&key(i), 0.5 + 0.2)));
}

#[test]
fn duplicate_submissions_are_ignored() {
    let mut fw = Firewall::new(ControllerMode::RealTime, LatencyModel::ZERO);
    let install = RuleUpdate {
        op: RuleOp::Install,
        key: key(1),
        requested_at: 0.0,
    };
    assert!(fw.submit(install.clone(), 0.0));
    assert!(!fw.submit(install.clone(), 0.0));
    fw.process_queue(0.0);
    assert!(!fw.submit(install, 0.0));
    assert!(!fw.submit(
        RuleUpdate {
            op: RuleOp::Remove,
            key: key(2),
            requested_at: 0.0
        },
        0.0
    ));
}

#[test]
fn installed_log_csv() {
    let mut fw = Firewall::new(
        ControllerMode::RealTime,
        LatencyModel {
            per_rule_base: 0.5,
            ..LatencyModel::ZERO
        },
    );
    fw.submit(
        RuleUpdate {
            op: RuleOp::Install,
            key: key(1),
            requested_at: 1.0,
        },
        1.0,
    );
    fw.process_queue(2.0);
    let mut out = Vec::new();
    fw.write_installed_log(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("key_digest,requested_at_s,installed_at_s")
    );
    assert!(lines.next().unwrap().ends_with(",1.000000,1.500000"));
}
