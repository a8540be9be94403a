//! Fitting [`LatencyModel`] coefficients to measured rule-adding capacities.
//!
//! A capacity row reports the rule-adding speed at the start and at the end
//! of a run. Speeds are window averages, so each is placed at the middle of
//! its window: `window / 2` installed rules for the initial speed and
//! `rules - window / 2` for the final one.
//!
//! Real-time rows turn directly into per-rule costs (`1 / speed`) and the
//! affine model is an ordinary least-squares line through them.
//!
//! Batched rows are harder: while the firewall keeps up, the observed speed
//! is the arrival rate and says nothing about the batch cost except that it
//! fits in one interval. The batched fit therefore predicts the effective
//! speed as `rate * min(1, interval / batch_cost(n))` and minimises the
//! squared relative speed error over all rows, optionally together with a
//! ceiling observation (the rule count at which one batch starts taking a
//! full interval).

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;
use thiserror::Error;

use super::LatencyModel;
use crate::Seconds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapacityMode {
    RealTime,
    Batched { interval: Seconds },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityRow {
    pub label: String,
    pub mode: CapacityMode,
    /// Rules installed over the whole run.
    pub rules: u64,
    /// Offered install requests per second.
    pub arrival_rate: f64,
    pub initial_speed: f64,
    pub final_speed: f64,
}

/// Installed-rule count at which periodic batches stop keeping up with the
/// arrival rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealTimeCeiling {
    pub rules: u64,
    pub interval: Seconds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityTable {
    pub rows: Vec<CapacityRow>,
    pub ceiling: Option<RealTimeCeiling>,
    /// Number of installs each speed was averaged over.
    pub window: u64,
}

/// The measured worst-case capacities of an iptables-backed deployment
/// pushing 500 install requests per second.
pub fn table1() -> CapacityTable {
    let rate = 500.0;
    let batched = CapacityMode::Batched { interval: 1.0 };
    CapacityTable {
        rows: vec![
            CapacityRow {
                label: "r/t rule addition, 10000 rules".into(),
                mode: CapacityMode::RealTime,
                rules: 10_000,
                arrival_rate: rate,
                initial_speed: 191.0,
                final_speed: 28.0,
            },
            CapacityRow {
                label: "1 s delay addition, 10000 rules".into(),
                mode: batched,
                rules: 10_000,
                arrival_rate: rate,
                initial_speed: 500.0,
                final_speed: 433.0,
            },
            CapacityRow {
                label: "1 s delay addition, 50000 rules".into(),
                mode: batched,
                rules: 50_000,
                arrival_rate: rate,
                initial_speed: 499.0,
                final_speed: 184.0,
            },
        ],
        ceiling: Some(RealTimeCeiling {
            rules: 18_000,
            interval: 1.0,
        }),
        window: 1000,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub label: String,
    pub observed: f64,
    pub predicted: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        (self.predicted - self.observed) / self.observed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: LatencyModel,
    pub residuals: Vec<Residual>,
}

impl Calibration {
    pub fn rms_relative_residual(&self) -> f64 {
        if self.residuals.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.residuals.iter().map(|r| r.relative().powi(2)).sum();
        (sum / self.residuals.len() as f64).sqrt()
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("capacity table has no {0} rows")]
    NoRows(&'static str),
    #[error("invalid capacity row {label:?}: {reason}")]
    InvalidRow { label: String, reason: &'static str },
    #[error("fitted {name} = {value:e} is negative; the affine model does not fit these rows")]
    NegativeCoefficient { name: &'static str, value: f64 },
    #[error("batched fit failed: {0}")]
    Solver(String),
}

pub fn calibrate(table: &CapacityTable) -> Result<Calibration, CalibrationError> {
    for row in &table.rows {
        let reason = if row.rules < 2 {
            Some("needs at least two rules")
        } else if !(row.initial_speed > 0.0 && row.final_speed > 0.0 && row.arrival_rate > 0.0) {
            Some("speeds and arrival rate must be positive")
        } else if matches!(row.mode, CapacityMode::Batched { interval } if interval <= 0.0) {
            Some("batch interval must be positive")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(CalibrationError::InvalidRow {
                label: row.label.clone(),
                reason,
            });
        }
    }
    let half_window = (table.window as f64 / 2.0).max(0.0);
    let observations = |row: &CapacityRow| {
        let start = half_window.min(row.rules as f64 / 2.0);
        let end = (row.rules as f64 - half_window).max(start);
        [
            (format!("{} (initial)", row.label), start, row.initial_speed),
            (format!("{} (final)", row.label), end, row.final_speed),
        ]
    };

    let realtime: Vec<_> = table
        .rows
        .iter()
        .filter(|r| r.mode == CapacityMode::RealTime)
        .flat_map(observations)
        .collect();
    let batched: Vec<_> = table
        .rows
        .iter()
        .filter_map(|r| match r.mode {
            CapacityMode::Batched { interval } => Some((r, interval)),
            CapacityMode::RealTime => None,
        })
        .flat_map(|(r, interval)| {
            observations(r).map(|(label, n, speed)| BatchedObservation {
                label,
                installed: n,
                speed,
                rate: r.arrival_rate,
                interval,
            })
        })
        .collect();
    if realtime.is_empty() {
        return Err(CalibrationError::NoRows("real-time"));
    }
    if batched.is_empty() {
        return Err(CalibrationError::NoRows("batched"));
    }

    let points: Vec<(f64, f64)> = realtime.iter().map(|(_, n, s)| (*n, 1.0 / s)).collect();
    let (per_rule_base, per_existing_rule) = least_squares_line(&points);
    check_non_negative("per_rule_base", per_rule_base)?;
    check_non_negative("per_existing_rule", per_existing_rule)?;

    let (per_batch_base, per_batch_per_existing_rule) = fit_batched(&batched, table.ceiling)?;
    check_non_negative("per_batch_base", per_batch_base)?;
    check_non_negative("per_batch_per_existing_rule", per_batch_per_existing_rule)?;

    let model = LatencyModel {
        per_rule_base,
        per_existing_rule,
        per_batch_base,
        per_batch_per_existing_rule,
    };

    let mut residuals: Vec<Residual> = realtime
        .into_iter()
        .map(|(label, n, speed)| Residual {
            label,
            observed: speed,
            predicted: 1.0 / (per_rule_base + per_existing_rule * n),
        })
        .collect();
    residuals.extend(batched.iter().map(|o| Residual {
        label: o.label.clone(),
        observed: o.speed,
        predicted: o.predict(per_batch_base, per_batch_per_existing_rule),
    }));
    if let Some(ceiling) = table.ceiling {
        if let Some(predicted) = model.batch_ceiling(ceiling.interval) {
            residuals.push(Residual {
                label: "batched real-time ceiling (rules)".into(),
                observed: ceiling.rules as f64,
                predicted,
            });
        }
    }
    Ok(Calibration { model, residuals })
}

fn check_non_negative(name: &'static str, value: f64) -> Result<(), CalibrationError> {
    // Round-off of a zero coefficient is tolerated.
    if value < -1e-12 || !value.is_finite() {
        Err(CalibrationError::NegativeCoefficient { name, value })
    } else {
        Ok(())
    }
}

/// Intercept and slope of the least-squares line through `points`. A single
/// distinct abscissa yields a flat line through the mean.
fn least_squares_line(points: &[(f64, f64)]) -> (f64, f64) {
    let len = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / len;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / len;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return (mean_y, 0.0);
    }
    let slope = sxy / sxx;
    (mean_y - slope * mean_x, slope)
}

struct BatchedObservation {
    label: String,
    installed: f64,
    speed: f64,
    rate: f64,
    interval: Seconds,
}

impl BatchedObservation {
    fn predict(&self, base: f64, slope: f64) -> f64 {
        let cost = base + slope * self.installed;
        if cost <= self.interval {
            self.rate
        } else {
            self.rate * self.interval / cost
        }
    }
}

// The slope is optimised in seconds per 10^4 rules so both parameters have
// comparable magnitude.
const SLOPE_SCALE: f64 = 1e-4;

struct BatchedObjective<'a> {
    observations: &'a [BatchedObservation],
    ceiling: Option<RealTimeCeiling>,
}

impl CostFunction for BatchedObjective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, ArgminError> {
        let (base, slope) = (p[0], p[1] * SLOPE_SCALE);
        let mut sum: f64 = self
            .observations
            .iter()
            .map(|o| ((o.predict(base, slope) - o.speed) / o.speed).powi(2))
            .sum();
        if let Some(c) = self.ceiling {
            let cost = base + slope * c.rules as f64;
            sum += ((cost - c.interval) / c.interval).powi(2);
        }
        // Keep the simplex in the physically meaningful quadrant.
        let negative = base.min(0.0).powi(2) + p[1].min(0.0).powi(2);
        Ok(sum + 1e6 * negative)
    }
}

fn fit_batched(
    observations: &[BatchedObservation],
    ceiling: Option<RealTimeCeiling>,
) -> Result<(f64, f64), CalibrationError> {
    let interval = observations[0].interval;
    let max_rules = observations
        .iter()
        .map(|o| o.installed)
        .fold(1.0_f64, f64::max);
    let slope_guess = interval / max_rules / SLOPE_SCALE;

    // The objective is flat wherever the firewall keeps up, so start from a
    // few simplices spread over the plausible range and keep the best.
    let mut best: Option<(f64, Vec<f64>)> = None;
    for base_frac in [0.05, 0.35, 0.65, 0.95] {
        for slope_frac in [0.5, 1.0, 2.0] {
            let b = base_frac * interval;
            let s = slope_frac * slope_guess;
            let simplex = vec![vec![b, s], vec![b + 0.1 * interval, s], vec![b, s * 1.25]];
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(1e-14)
                .map_err(|e| CalibrationError::Solver(e.to_string()))?;
            let problem = BatchedObjective {
                observations,
                ceiling,
            };
            let result = Executor::new(problem, solver)
                .configure(|state| state.max_iters(4000))
                .run()
                .map_err(|e| CalibrationError::Solver(e.to_string()))?;
            let state = result.state();
            let Some(param) = state.best_param.clone() else {
                continue;
            };
            let cost = state.best_cost;
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, param));
            }
        }
    }
    let (_, p) = best.ok_or_else(|| CalibrationError::Solver("no solution".into()))?;
    Ok((p[0], p[1] * SLOPE_SCALE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn realtime_fit_reproduces_window_speeds() {
        let cal = calibrate(&table1()).unwrap();
        let m = cal.model;
        // Two real-time observations determine the line exactly.
        assert!((1.0 / m.rule_cost(500) - 191.0).abs() < 1e-9);
        assert!((1.0 / m.rule_cost(9500) - 28.0).abs() < 1e-9);
        assert!(
            (m.per_rule_base - 3.5424e-3).abs() < 1e-6,
            "{}",
            m.per_rule_base
        );
        assert!(
            (m.per_existing_rule - 3.3865e-6).abs() < 1e-9,
            "{}",
            m.per_existing_rule
        );
    }

    #[test]
    fn batched_fit_is_non_negative_and_reports_residuals() {
        let cal = calibrate(&table1()).unwrap();
        assert!(cal.model.is_valid());
        // 2 real-time + 4 batched observations + ceiling.
        assert_eq!(cal.residuals.len(), 7);
        let ceiling = cal.model.batch_ceiling(1.0).unwrap();
        assert!((14_000.0..=22_000.0).contains(&ceiling), "{ceiling}");
    }

    #[test]
    fn line_fit_on_exact_points() {
        let (a, b) = least_squares_line(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn improving_speed_is_a_misfit() {
        let mut table = table1();
        table.rows[0].final_speed = 400.0;
        assert!(matches!(
            calibrate(&table),
            Err(CalibrationError::NegativeCoefficient {
                name: "per_existing_rule",
                ..
            })
        ));
    }

    #[test]
    fn missing_rows_rejected() {
        let mut table = table1();
        table.rows.retain(|r| r.mode != CapacityMode::RealTime);
        assert!(matches!(
            calibrate(&table),
            Err(CalibrationError::NoRows("real-time"))
        ));
    }
}
