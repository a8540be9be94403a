//! Turns event logs into the quantities the evaluation reports: false
//! positives and negatives, call setup delay, rule installation timelines and
//! rule-adding capacity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::Action;
use crate::firewall::{ControllerMode, RuleOp};
use crate::sim::{EventLog, LogEntry, Origin, TxnId};
use crate::sip::Method;
use crate::Seconds;

/// Installs per capacity window.
pub const DEFAULT_WINDOW: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DelayStats {
    pub count: usize,
    pub mean: Seconds,
    pub p95: Seconds,
    pub max: Seconds,
}

impl DelayStats {
    pub fn from_samples(samples: &[Seconds]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        // Nearest-rank percentile.
        let rank = (0.95 * sorted.len() as f64).ceil() as usize;
        Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p95: sorted[rank.clamp(1, sorted.len()) - 1],
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Setup delay of answered INVITE transactions, from first send to first
/// reply.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SetupDelay {
    pub normal: DelayStats,
    pub emergency: DelayStats,
}

/// Rule-adding speed at the start and the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Capacity {
    pub initial_speed: f64,
    pub final_speed: f64,
    pub window: usize,
    /// Fewer than two windows of installs: both speeds cover all installs.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub controller: Option<ControllerMode>,
    pub entries: usize,
    pub truncated: bool,
    /// UA transactions abandoned after the give-up timer.
    pub false_positives: usize,
    /// Attack packets that reached the proxy.
    pub false_negatives: usize,
    pub ua_transactions: usize,
    pub ua_answered: usize,
    pub attack_packets: usize,
    /// Distinct pinhole keys among attack packets that passed.
    pub attack_distinct_passed: usize,
    pub setup_delay: SetupDelay,
    pub rules_requested: usize,
    pub rules_installed: usize,
    pub rules_removed: usize,
    /// `(elapsed_s, cumulative_installed)` per distinct install time.
    pub install_timeline: Vec<(Seconds, usize)>,
    pub capacity: Option<Capacity>,
    pub worst_case_install_lag: Seconds,
    /// Installed rule count when firewall work first had to wait for the
    /// controller.
    pub backlog_onset_rules: Option<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzeError {
    #[error("entry {index}: time {time} precedes previous entry at {previous}")]
    TimeReversal {
        index: usize,
        time: Seconds,
        previous: Seconds,
    },
    #[error("entry {index}: transaction {txn} has no first send")]
    UnknownTransaction { index: usize, txn: TxnId },
    #[error("entry {index}: rule applied before it was requested")]
    AppliedBeforeRequest { index: usize },
    #[error("capacity window must be positive")]
    ZeroWindow,
}

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct EmitError {
    pub path: PathBuf,
    #[source]
    pub source: csv::Error,
}

pub fn analyze(log: &EventLog) -> Result<RunReport, AnalyzeError> {
    analyze_with(log, DEFAULT_WINDOW)
}

struct Txn {
    start: Seconds,
    emergency: bool,
    invite: bool,
    answered: Option<Seconds>,
}

pub fn analyze_with(log: &EventLog, window: usize) -> Result<RunReport, AnalyzeError> {
    if window == 0 {
        return Err(AnalyzeError::ZeroWindow);
    }
    let mut report = RunReport {
        scenario: log.scenario.clone(),
        seed: log.seed,
        controller: Some(log.controller),
        entries: log.entries.len(),
        ..RunReport::default()
    };
    let mut txns: HashMap<TxnId, Txn> = HashMap::new();
    let mut passed_keys = HashSet::new();
    let mut installs: Vec<(Seconds, Seconds)> = Vec::new();
    let mut previous = f64::NEG_INFINITY;

    for (index, entry) in log.entries.iter().enumerate() {
        let time = entry.time();
        if time < previous {
            return Err(AnalyzeError::TimeReversal {
                index,
                time,
                previous,
            });
        }
        previous = time;
        match entry {
            LogEntry::Packet {
                time,
                origin,
                method,
                key,
                action,
                txn,
                attempt,
                emergency,
                ..
            } => match origin {
                Origin::Ua(_) => {
                    let Some(txn) = txn else { continue };
                    if *attempt == 0 {
                        report.ua_transactions += 1;
                        txns.insert(
                            *txn,
                            Txn {
                                start: *time,
                                emergency: *emergency,
                                invite: *method == Some(Method::Invite),
                                answered: None,
                            },
                        );
                    } else if !txns.contains_key(txn) {
                        return Err(AnalyzeError::UnknownTransaction { index, txn: *txn });
                    }
                }
                Origin::Attacker(_) => {
                    report.attack_packets += 1;
                    if *action == Action::Pass {
                        report.false_negatives += 1;
                        if let Some(key) = key {
                            passed_keys.insert(key.clone());
                        }
                    }
                }
            },
            LogEntry::Reply {
                time,
                origin: Origin::Ua(_),
                txn: Some(txn),
                ..
            } => {
                let t = txns
                    .get_mut(txn)
                    .ok_or(AnalyzeError::UnknownTransaction { index, txn: *txn })?;
                t.answered.get_or_insert(*time);
            }
            LogEntry::Reply { .. } => {}
            LogEntry::TxnFailed { txn, .. } => {
                if !txns.contains_key(txn) {
                    return Err(AnalyzeError::UnknownTransaction { index, txn: *txn });
                }
                report.false_positives += 1;
            }
            LogEntry::RuleRequested { op, .. } => {
                if *op == RuleOp::Install {
                    report.rules_requested += 1;
                }
            }
            LogEntry::RuleApplied {
                time,
                op,
                requested_at,
                ..
            } => {
                if requested_at > time {
                    return Err(AnalyzeError::AppliedBeforeRequest { index });
                }
                match op {
                    RuleOp::Install => installs.push((*requested_at, *time)),
                    RuleOp::Remove => report.rules_removed += 1,
                }
            }
            LogEntry::FirewallJob(job) => {
                if report.backlog_onset_rules.is_none() && job.started_at > job.submitted_at {
                    report.backlog_onset_rules = Some(job.installed_before);
                }
            }
            LogEntry::Truncated { .. } => report.truncated = true,
        }
    }

    report.attack_distinct_passed = passed_keys.len();
    let mut normal = Vec::new();
    let mut emergency = Vec::new();
    for t in txns.values() {
        if let Some(at) = t.answered {
            report.ua_answered += 1;
            if t.invite {
                let bucket = if t.emergency {
                    &mut emergency
                } else {
                    &mut normal
                };
                bucket.push(at - t.start);
            }
        }
    }
    // HashMap order is arbitrary; sort so summation order is fixed.
    normal.sort_by(f64::total_cmp);
    emergency.sort_by(f64::total_cmp);
    report.setup_delay = SetupDelay {
        normal: DelayStats::from_samples(&normal),
        emergency: DelayStats::from_samples(&emergency),
    };

    report.rules_installed = installs.len();
    report.worst_case_install_lag = installs
        .iter()
        .map(|(requested, applied)| applied - requested)
        .fold(0.0, f64::max);
    for (i, &(_, applied)) in installs.iter().enumerate() {
        match report.install_timeline.last_mut() {
            Some(last) if last.0 == applied => last.1 = i + 1,
            _ => report.install_timeline.push((applied, i + 1)),
        }
    }
    report.capacity = capacity(&installs, window);
    Ok(report)
}

fn capacity(installs: &[(Seconds, Seconds)], window: usize) -> Option<Capacity> {
    let n = installs.len();
    let first_request = installs.first()?.0;
    let last = installs[n - 1].1;
    let speed = |count: usize, span: Seconds| {
        if span > 0.0 {
            count as f64 / span
        } else {
            f64::INFINITY
        }
    };
    if n < 2 * window {
        let s = speed(n, last - first_request);
        return Some(Capacity {
            initial_speed: s,
            final_speed: s,
            window,
            flagged: true,
        });
    }
    Some(Capacity {
        initial_speed: speed(window, installs[window - 1].1 - first_request),
        final_speed: speed(window, last - installs[n - window - 1].1),
        window,
        flagged: false,
    })
}

/// Point-wise mean of several install timelines, each read as a step
/// function, sampled at the union of their step times.
pub fn mean_timeline(reports: &[RunReport]) -> Vec<(Seconds, f64)> {
    if reports.is_empty() {
        return Vec::new();
    }
    let mut times: Vec<Seconds> = reports
        .iter()
        .flat_map(|r| r.install_timeline.iter().map(|p| p.0))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .into_iter()
        .map(|t| {
            let sum: usize = reports
                .iter()
                .map(|r| {
                    let i = r.install_timeline.partition_point(|p| p.0 <= t);
                    if i == 0 {
                        0
                    } else {
                        r.install_timeline[i - 1].1
                    }
                })
                .sum();
            (t, sum as f64 / reports.len() as f64)
        })
        .collect()
}

fn mode_label(mode: Option<ControllerMode>) -> &'static str {
    match mode {
        Some(ControllerMode::RealTime) => "real-time",
        Some(ControllerMode::Batched { .. }) => "batched",
        None => "",
    }
}

/// `(metric, value)` rows of the summary.
pub fn summary_rows(report: &RunReport) -> Vec<(String, String)> {
    if report.entries == 0 {
        return Vec::new();
    }
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| rows.push((k.to_string(), v));
    push("scenario", report.scenario.clone());
    push("seed", report.seed.to_string());
    push("controller", mode_label(report.controller).into());
    push("truncated", report.truncated.to_string());
    push("false_positives", report.false_positives.to_string());
    push("false_negatives", report.false_negatives.to_string());
    push("ua_transactions", report.ua_transactions.to_string());
    push("ua_answered", report.ua_answered.to_string());
    push("attack_packets", report.attack_packets.to_string());
    push(
        "attack_distinct_passed",
        report.attack_distinct_passed.to_string(),
    );
    for (label, s) in [
        ("normal", report.setup_delay.normal),
        ("emergency", report.setup_delay.emergency),
    ] {
        push(&format!("setup_delay_{label}_count"), s.count.to_string());
        push(
            &format!("setup_delay_{label}_mean_s"),
            format!("{:.6}", s.mean),
        );
        push(
            &format!("setup_delay_{label}_p95_s"),
            format!("{:.6}", s.p95),
        );
        push(
            &format!("setup_delay_{label}_max_s"),
            format!("{:.6}", s.max),
        );
    }
    push("rules_requested", report.rules_requested.to_string());
    push("rules_installed", report.rules_installed.to_string());
    push("rules_removed", report.rules_removed.to_string());
    if let Some(&(t, _)) = report.install_timeline.last() {
        push("last_install_s", format!("{t:.6}"));
    }
    push(
        "worst_case_install_lag_s",
        format!("{:.6}", report.worst_case_install_lag),
    );
    if let Some(c) = report.capacity {
        push("capacity_window", c.window.to_string());
        push("initial_speed_rps", format!("{:.3}", c.initial_speed));
        push("final_speed_rps", format!("{:.3}", c.final_speed));
        push("capacity_flagged", c.flagged.to_string());
    }
    if let Some(n) = report.backlog_onset_rules {
        push("backlog_onset_rules", n.to_string());
    }
    rows
}

fn write_csv<F>(path: &Path, fill: F) -> Result<(), EmitError>
where
    F: FnOnce(&mut csv::Writer<File>) -> csv::Result<()>,
{
    let wrap = |source: csv::Error| EmitError {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|e| wrap(e.into()))?;
    let mut w = csv::Writer::from_writer(file);
    fill(&mut w).map_err(wrap)?;
    w.flush().map_err(|e| wrap(e.into()))
}

/// Writes the install timeline and the metric summary.
pub fn emit_csv(
    report: &RunReport,
    timeline_path: impl AsRef<Path>,
    summary_path: impl AsRef<Path>,
) -> Result<(), EmitError> {
    write_csv(timeline_path.as_ref(), |w| {
        w.write_record(["elapsed_s", "cumulative_installed"])?;
        for (t, n) in &report.install_timeline {
            w.write_record([format!("{t:.6}"), n.to_string()])?;
        }
        Ok(())
    })?;
    write_csv(summary_path.as_ref(), |w| {
        w.write_record(["metric", "value"])?;
        for (k, v) in summary_rows(report) {
            w.write_record([k, v])?;
        }
        Ok(())
    })
}

/// Writes a point-wise mean timeline.
pub fn emit_mean_timeline(
    timeline: &[(Seconds, f64)],
    path: impl AsRef<Path>,
) -> Result<(), EmitError> {
    write_csv(path.as_ref(), |w| {
        w.write_record(["elapsed_s", "mean_cumulative_installed"])?;
        for (t, n) in timeline {
            w.write_record([format!("{t:.6}"), format!("{n:.3}")])?;
        }
        Ok(())
    })
}

/// Writes one capacity row per report, laid out as
/// `mode,rules,init_speed,fin_speed`.
pub fn emit_capacity_csv(reports: &[RunReport], path: impl AsRef<Path>) -> Result<(), EmitError> {
    write_csv(path.as_ref(), |w| {
        w.write_record(["mode", "rules", "init_speed", "fin_speed"])?;
        for r in reports {
            if let Some(c) = r.capacity {
                w.write_record([
                    mode_label(r.controller).to_string(),
                    r.rules_installed.to_string(),
                    format!("{:.1}", c.initial_speed),
                    format!("{:.1}", c.final_speed),
                ])?;
            }
        }
        Ok(())
    })
}

/// Human-readable summary, one metric per line, seeds as columns.
pub fn render_table(reports: &[RunReport]) -> String {
    let mut rows: BTreeMap<usize, (String, Vec<String>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (col, report) in reports.iter().enumerate() {
        for (k, v) in summary_rows(report) {
            let slot = match order.iter().position(|o| *o == k) {
                Some(i) => i,
                None => {
                    order.push(k.clone());
                    order.len() - 1
                }
            };
            let row = rows.entry(slot).or_insert_with(|| (k, Vec::new()));
            row.1.resize(col, String::new());
            row.1.push(v);
        }
    }
    let key_width = order.iter().map(String::len).max().unwrap_or(0);
    let mut widths = vec![0usize; reports.len()];
    for (_, values) in rows.values() {
        for (i, v) in values.iter().enumerate() {
            widths[i] = widths[i].max(v.len());
        }
    }
    let mut out = String::new();
    for (key, values) in rows.values() {
        let _ = write!(out, "{key:<key_width$}");
        for (i, w) in widths.iter().enumerate() {
            let v = values.get(i).map(String::as_str).unwrap_or("");
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}
