//! Deterministic discrete-event testbed.
//!
//! User agents, attackers and the proxy exchange UDP datagrams through the
//! firewall and the pinhole engine. There is no network delay, loss or
//! jitter; every delay in a run comes from the proxy, the retransmission
//! timers or rule installation.
//!
//! All randomness is drawn from ChaCha streams seeded from the run seed, so
//! equal scenarios and seeds give identical logs.

mod log;
mod models;
mod queue;

pub use log::{EventLog, LogEntry, Origin, ProxyCounters, TxnId};
pub use models::{AttackerModel, ProxyModel, UaBehavior, UaGroup};
pub use queue::EventQueue;

use std::collections::HashSet;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{derive_key, Action, KeyStrategy, PinholeEngine};
use crate::firewall::{Firewall, LatencyModel};
use crate::scenario::{Scenario, ScenarioError};
use crate::sip::{
    detect_emergency, render_datagram, Endpoint, MessageKind, Method, SipMessage, SipParser,
};
use crate::Seconds;

/// Address of the protected proxy.
pub const PROXY_ADDR: Ipv4Addr = Ipv4Addr::new(172, 16, 0, 1);

pub fn proxy_endpoint() -> Endpoint {
    Endpoint::sip(PROXY_ADDR)
}

/// Source address of the `index`-th user agent (192.168.0.0/16).
pub fn ua_address(index: u32) -> Ipv4Addr {
    Ipv4Addr::from(0xC0A8_0001 + index)
}

/// The `counter`-th spoofed source address (10.0.0.0/8).
pub fn spoofed_address(counter: u32) -> Ipv4Addr {
    Ipv4Addr::from(0x0A00_0001 + counter % 0x00FF_FFFE)
}

/// Runs `scenario` with one seed to quiescence or the horizon.
pub fn run(scenario: &Scenario, seed: u64) -> Result<EventLog, ScenarioError> {
    scenario.validate()?;
    let latency = scenario.latency.resolve()?;
    Ok(Simulation::new(scenario, seed, latency).run())
}

/// Retransmission instants (offsets from the original send) of a request
/// that never gets an answer: gaps start at `t1` and double until
/// `give_up_after`.
pub fn retransmission_offsets(t1: Seconds, give_up_after: Seconds) -> Vec<Seconds> {
    let mut out = Vec::new();
    let (mut at, mut gap) = (t1, t1);
    while at < give_up_after {
        out.push(at);
        gap *= 2.0;
        at += gap;
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(salt ^ splitmix64(index))))
}

fn token(rng: &mut ChaCha8Rng) -> String {
    format!("{:016x}", rng.gen::<u64>())
}

struct Datagram {
    payload: Vec<u8>,
    src: Endpoint,
    origin: Origin,
    txn: Option<TxnId>,
    attempt: u32,
}

enum Event {
    UaStart {
        ua: usize,
        n: u32,
    },
    Deliver(Datagram),
    Retransmit {
        txn: TxnId,
    },
    Timeout {
        txn: TxnId,
    },
    Reply {
        origin: Origin,
        txn: Option<TxnId>,
        response: Box<SipMessage>,
    },
    AttackerEmit {
        attacker: usize,
        index: u64,
    },
    BatchTick,
    ExpirySweep,
    FirewallWake,
}

struct UserAgent {
    address: Endpoint,
    group: UaGroup,
    rng: ChaCha8Rng,
}

struct Transaction {
    origin: Origin,
    payload: Vec<u8>,
    src: Endpoint,
    started: Seconds,
    gap: Seconds,
    give_up_after: Seconds,
    attempts: u32,
    replied: bool,
    failed: bool,
    timers: u32,
}

struct Attacker {
    model: AttackerModel,
    rng: ChaCha8Rng,
    pool: Vec<Ipv4Addr>,
}

#[derive(Default)]
struct Proxy {
    seen: HashSet<(String, String)>,
    counters: ProxyCounters,
}

struct Simulation<'a> {
    scenario: &'a Scenario,
    seed: u64,
    now: Seconds,
    queue: EventQueue<Event>,
    /// Scheduled events that still matter for quiescence.
    live: usize,
    parser: SipParser,
    engine: PinholeEngine,
    firewall: Firewall,
    jobs_logged: usize,
    wake_at: Option<Seconds>,
    proxy: Proxy,
    uas: Vec<UserAgent>,
    txns: Vec<Transaction>,
    attackers: Vec<Attacker>,
    spoof_counter: u32,
    entries: Vec<LogEntry>,
}

impl<'a> Simulation<'a> {
    fn new(scenario: &'a Scenario, seed: u64, latency: LatencyModel) -> Self {
        let mut uas = Vec::new();
        for (g, group) in scenario.uas.iter().enumerate() {
            for _ in 0..group.count {
                let index = uas.len() as u32;
                uas.push(UserAgent {
                    address: Endpoint::sip(ua_address(index)),
                    group: group.clone(),
                    rng: stream(seed, group.rng_seed ^ ((g as u64) << 32), u64::from(index)),
                });
            }
        }
        let attackers = scenario
            .attackers
            .iter()
            .enumerate()
            .map(|(i, model)| Attacker {
                model: model.clone(),
                rng: stream(seed, model.rng_seed() ^ 0xA77A_C4E5, i as u64),
                pool: Vec::new(),
            })
            .collect();
        Self {
            scenario,
            seed,
            now: 0.0,
            queue: EventQueue::default(),
            live: 0,
            parser: SipParser::default(),
            engine: PinholeEngine::new(scenario.engine),
            firewall: Firewall::new(scenario.controller, latency),
            jobs_logged: 0,
            wake_at: None,
            proxy: Proxy::default(),
            uas,
            txns: Vec::new(),
            attackers,
            spoof_counter: 0,
            entries: Vec::new(),
        }
    }

    fn run(mut self) -> EventLog {
        self.bootstrap();
        let horizon = self.scenario.horizon_s;
        while let Some(t) = self.queue.peek_time() {
            if t > horizon {
                if self.live > 0 {
                    self.entries.push(LogEntry::Truncated {
                        time: horizon,
                        pending: self.live,
                    });
                }
                break;
            }
            let (t, _, event) = self.queue.pop().expect("peeked");
            debug_assert!(t >= self.now);
            self.now = t;
            self.dispatch(event);
        }
        EventLog {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            controller: self.scenario.controller,
            entries: self.entries,
            proxy: self.proxy.counters,
            engine: self.engine.stats(),
            end_time: self.now,
        }
    }

    fn schedule_live(&mut self, time: Seconds, event: Event) {
        self.live += 1;
        self.queue.schedule(time, event);
    }

    fn bootstrap(&mut self) {
        for ua in 0..self.uas.len() {
            let agent = &mut self.uas[ua];
            let jitter = agent.group.jitter_s * agent.rng.gen::<f64>();
            let at = agent.group.start_s + jitter;
            if agent.group.transactions > 0 {
                self.schedule_live(at, Event::UaStart { ua, n: 0 });
            }
        }
        for attacker in 0..self.attackers.len() {
            let model = &self.attackers[attacker].model;
            if let AttackerModel::FixedSpoofSet { pool_size, .. } = *model {
                let pool = (0..pool_size).map(|_| self.next_spoofed()).collect();
                self.attackers[attacker].pool = pool;
            }
            let start = self.attackers[attacker].model.start_s();
            self.schedule_live(start, Event::AttackerEmit { attacker, index: 0 });
        }
        if let Some(interval) = self.scenario.controller.interval() {
            self.queue.schedule(interval, Event::BatchTick);
        }
        self.queue
            .schedule(self.scenario.expiry_sweep_s, Event::ExpirySweep);
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::UaStart { ua, n } => {
                self.live -= 1;
                self.start_transaction(ua, n);
            }
            Event::Deliver(dg) => {
                self.live -= 1;
                self.deliver(dg);
            }
            Event::Retransmit { txn } => {
                if self.settle_timer(txn) {
                    self.retransmit(txn);
                }
            }
            Event::Timeout { txn } => {
                if self.settle_timer(txn) {
                    let t = &mut self.txns[txn as usize];
                    t.failed = true;
                    let origin = t.origin;
                    self.entries.push(LogEntry::TxnFailed {
                        time: self.now,
                        origin,
                        txn,
                    });
                }
            }
            Event::Reply {
                origin,
                txn,
                response,
            } => {
                self.live -= 1;
                self.receive_reply(origin, txn, *response);
            }
            Event::AttackerEmit { attacker, index } => {
                self.live -= 1;
                self.attacker_emit(attacker, index);
            }
            Event::BatchTick => {
                self.flush_firewall();
                self.firewall.tick(self.now);
                self.sync_wake();
                if self.live > 0 || self.firewall.has_work() {
                    let interval = self.scenario.controller.interval().expect("batched");
                    self.queue.schedule(self.now + interval, Event::BatchTick);
                }
            }
            Event::ExpirySweep => {
                self.flush_firewall();
                let expired = self.engine.expire(self.now);
                for removal in expired.removals {
                    self.entries.push(LogEntry::RuleRequested {
                        time: self.now,
                        op: removal.op,
                        key: removal.key.clone(),
                    });
                    self.firewall.submit(removal, self.now);
                }
                self.sync_wake();
                if self.live > 0 {
                    self.queue
                        .schedule(self.now + self.scenario.expiry_sweep_s, Event::ExpirySweep);
                }
            }
            Event::FirewallWake => {
                self.live -= 1;
                self.wake_at = None;
                self.flush_firewall();
                self.sync_wake();
            }
        }
    }

    /// Accounts for a dispatched transaction timer. Returns false when the
    /// transaction already finished and the timer is moot.
    fn settle_timer(&mut self, txn: TxnId) -> bool {
        let t = &mut self.txns[txn as usize];
        if t.replied || t.failed {
            return false;
        }
        t.timers -= 1;
        self.live -= 1;
        true
    }

    fn flush_firewall(&mut self) {
        let applied = self.firewall.process_queue(self.now);
        for a in applied {
            self.entries.push(LogEntry::RuleApplied {
                time: a.applied_at,
                op: a.op,
                key: a.key,
                requested_at: a.requested_at,
            });
        }
        let jobs = self.firewall.job_log();
        for job in &jobs[self.jobs_logged..] {
            self.entries.push(LogEntry::FirewallJob(*job));
        }
        self.jobs_logged = jobs.len();
    }

    fn sync_wake(&mut self) {
        if let Some(at) = self.firewall.next_completion() {
            if self.wake_at != Some(at) {
                self.wake_at = Some(at);
                self.schedule_live(at.max(self.now), Event::FirewallWake);
            }
        }
    }

    /// A datagram hits the perimeter: parse, filter, forward.
    fn deliver(&mut self, dg: Datagram) {
        let dst = proxy_endpoint();
        self.flush_firewall();
        let msg = match self.parser.parse(&dg.payload, dg.src, dst) {
            Ok(msg) => msg,
            Err(_) => {
                self.entries.push(LogEntry::Packet {
                    time: self.now,
                    origin: dg.origin,
                    src: dg.src,
                    dst,
                    method: None,
                    key: None,
                    action: Action::Drop,
                    txn: dg.txn,
                    attempt: dg.attempt,
                    emergency: false,
                });
                return;
            }
        };
        if !msg.is_request() {
            return;
        }
        let strategy: KeyStrategy = self.scenario.engine.strategy;
        let decision = self.engine.process_packet(&msg, self.now, &self.firewall);
        self.entries.push(LogEntry::Packet {
            time: self.now,
            origin: dg.origin,
            src: dg.src,
            dst,
            method: Some(msg.method.clone()),
            key: Some(derive_key(&msg, strategy)),
            action: decision.action,
            txn: dg.txn,
            attempt: dg.attempt,
            emergency: msg.is_emergency,
        });
        if let Some(request) = decision.rule_request {
            self.entries.push(LogEntry::RuleRequested {
                time: self.now,
                op: request.op,
                key: request.key.clone(),
            });
            self.firewall.submit(request, self.now);
            self.sync_wake();
        }
        if decision.action == Action::Pass {
            self.proxy_handle(&msg, dg.origin, dg.txn);
        }
    }

    fn proxy_handle(&mut self, msg: &SipMessage, origin: Origin, txn: Option<TxnId>) {
        let counters = &mut self.proxy.counters;
        counters.requests += 1;
        if msg.is_emergency {
            counters.emergency_requests += 1;
        }
        if self
            .proxy
            .seen
            .insert((msg.call_id.clone(), msg.via_branch.clone()))
        {
            self.proxy.counters.transactions += 1;
        }
        let delay = self.scenario.proxy.delay(msg.is_emergency);
        let response = SipMessage::response_to(msg, 200, Some("proxy".into()));
        self.schedule_live(
            self.now + delay,
            Event::Reply {
                origin,
                txn,
                response: Box::new(response),
            },
        );
    }

    fn receive_reply(&mut self, origin: Origin, txn: Option<TxnId>, response: SipMessage) {
        self.entries.push(LogEntry::Reply {
            time: self.now,
            origin,
            src: response.src,
            dst: response.dst,
            method: response.cseq_method.clone(),
            txn,
        });
        if let Some(id) = txn {
            let t = &mut self.txns[id as usize];
            if !t.replied && !t.failed {
                t.replied = true;
                self.live -= t.timers as usize;
                t.timers = 0;
            }
        }
    }

    fn start_transaction(&mut self, ua: usize, n: u32) {
        let agent = &mut self.uas[ua];
        let group = agent.group.clone();
        let (method, uri) =
            if group.behavior == UaBehavior::Register || (group.register_first && n == 0) {
                (Method::Register, "sip:ims.example".to_string())
            } else if group.behavior.is_emergency() {
                (Method::Invite, "urn:service:sos".to_string())
            } else {
                let callee = agent.rng.gen_range(1000..10_000);
                (Method::Invite, format!("sip:user{callee}@ims.example"))
            };
        let src = agent.address;
        let id = token(&mut agent.rng);
        let tag = token(&mut agent.rng);
        let msg = self.build_request(method, uri, src, &id, &tag, n + 1);
        let payload = render_datagram(&msg);

        let txn = self.txns.len() as TxnId;
        self.txns.push(Transaction {
            origin: Origin::Ua(ua as u32),
            payload: payload.clone(),
            src,
            started: self.now,
            gap: group.t1_s,
            give_up_after: group.give_up_after_s,
            attempts: 0,
            replied: false,
            failed: false,
            timers: 0,
        });
        self.deliver(Datagram {
            payload,
            src,
            origin: Origin::Ua(ua as u32),
            txn: Some(txn),
            attempt: 0,
        });
        // The proxy delay is positive, so no reply has arrived yet.
        let retransmits = group.t1_s < group.give_up_after_s;
        self.txns[txn as usize].timers = 1 + u32::from(retransmits);
        if retransmits {
            self.schedule_live(self.now + group.t1_s, Event::Retransmit { txn });
        }
        self.schedule_live(self.now + group.give_up_after_s, Event::Timeout { txn });

        if n + 1 < group.transactions {
            let agent = &mut self.uas[ua];
            let gap = group.interval_s * (0.5 + agent.rng.gen::<f64>());
            self.schedule_live(self.now + gap, Event::UaStart { ua, n: n + 1 });
        }
    }

    fn retransmit(&mut self, txn: TxnId) {
        let t = &mut self.txns[txn as usize];
        t.attempts += 1;
        let dg = Datagram {
            payload: t.payload.clone(),
            src: t.src,
            origin: t.origin,
            txn: Some(txn),
            attempt: t.attempts,
        };
        t.gap *= 2.0;
        let next = self.now + t.gap;
        let schedule_next = next - t.started < t.give_up_after;
        if schedule_next {
            t.timers += 1;
        }
        self.deliver(dg);
        // A reply cannot arrive inside deliver (proxy delay is positive), so
        // the timer bookkeeping above still holds.
        if schedule_next {
            self.schedule_live(next, Event::Retransmit { txn });
        }
    }

    fn attacker_emit(&mut self, attacker: usize, index: u64) {
        let (distinct, copies) = self.attackers[attacker].model.distinct_schedule();
        let model = self.attackers[attacker].model.clone();
        let src_ip = match &model {
            AttackerModel::FixedSpoofSet { .. } => {
                let a = &mut self.attackers[attacker];
                a.pool[a.rng.gen_range(0..a.pool.len())]
            }
            _ => self.next_spoofed(),
        };
        let src = Endpoint::sip(src_ip);
        let a = &mut self.attackers[attacker];
        let uri = if model.emergency() {
            "urn:service:sos".to_string()
        } else {
            format!("sip:user{}@ims.example", a.rng.gen_range(1000..10_000))
        };
        let id = token(&mut a.rng);
        let tag = token(&mut a.rng);
        let msg = self.build_request(Method::Invite, uri, src, &id, &tag, 1);
        let payload = render_datagram(&msg);
        let origin = Origin::Attacker(attacker as u32);

        if let AttackerModel::ConformingFlood {
            total,
            repeats,
            t1_s,
            ..
        } = model
        {
            let copies_per = u64::from(repeats) + 1;
            let remaining = total - index * copies_per - 1;
            for k in 1..=remaining.min(u64::from(repeats)) {
                self.schedule_live(
                    self.now + k as f64 * t1_s,
                    Event::Deliver(Datagram {
                        payload: payload.clone(),
                        src,
                        origin,
                        txn: None,
                        attempt: k as u32,
                    }),
                );
            }
        }
        self.deliver(Datagram {
            payload,
            src,
            origin,
            txn: None,
            attempt: 0,
        });

        if index + 1 < distinct {
            let at = model.start_s() + (index + 1) as f64 * copies as f64 / model.rate();
            self.schedule_live(
                at,
                Event::AttackerEmit {
                    attacker,
                    index: index + 1,
                },
            );
        }
    }

    fn next_spoofed(&mut self) -> Ipv4Addr {
        let ip = spoofed_address(self.spoof_counter);
        self.spoof_counter += 1;
        ip
    }

    fn build_request(
        &self,
        method: Method,
        uri: String,
        src: Endpoint,
        id: &str,
        tag: &str,
        cseq: u32,
    ) -> SipMessage {
        let mut msg = SipMessage {
            kind: MessageKind::Request,
            cseq_method: method.clone(),
            method,
            status_code: None,
            call_id: format!("{id}@{}", src.ip),
            via_branch: format!("z9hG4bK{id}"),
            from_tag: tag[..8].to_string(),
            to_tag: None,
            cseq_number: cseq,
            is_emergency: detect_emergency(&uri, self.parser.markers()),
            request_uri: Some(uri),
            src,
            dst: proxy_endpoint(),
            length_bytes: 0,
        };
        msg.length_bytes = render_datagram(&msg).len();
        msg
    }
}
