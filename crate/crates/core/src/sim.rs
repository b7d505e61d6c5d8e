//! Discrete-event serving simulation.
//!
//! A single server drains the FIFO queue in work-conserving batches of up
//! to `max_batch` requests. A batch occupies the server for the whole model
//! plus every active ramp at that batch size, since all inputs run to the
//! end even after their result has been released. Each response leaves at
//! batch start plus its own serve time. Adaptation runs between batches in
//! zero simulated time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controller::{AdaptationEvent, Controller, ControllerParams};
use crate::error::{Error, Result};
use crate::exit::{evaluate_record, optimal_exit, ConfigSnapshot, EEConfig};
use crate::graph::{find_feasible_sites, initial_placement_capped, ModelProfile, ProfiledRampCosts, RampBudget, RampSite};
use crate::stats::{summarize, PercentileSummary};
use crate::trace::Workload;
use crate::tuner::TunerParams;

pub const REPORT_SCHEMA: &str = "exitsim.sim-report/v1";
pub const COMPARISON_SCHEMA: &str = "exitsim.comparison/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The original model, no ramps.
    Vanilla,
    /// Ramps with adaptive thresholds and ramp placement.
    Apparate,
    /// Every input leaves at the first site that agrees with the model, at
    /// no ramp cost.
    Optimal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Apparate => "apparate",
            Mode::Optimal => "optimal",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "apparate" => Ok(Mode::Apparate),
            "optimal" => Ok(Mode::Optimal),
            other => Err(Error::param("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServingParams {
    pub mode: Mode,
    pub slo_ms: f64,
    pub max_batch: u32,
    /// Minimum accuracy of a monitoring window before tuning is triggered.
    pub acc_constraint: f64,
    pub budget: RampBudget,
    pub tuner: TunerParams,
    pub ramp_period: usize,
    pub adaptation_enabled: bool,
    /// Leading records used to tune the initial thresholds before serving
    /// starts; 0 starts every ramp at threshold 0.
    pub bootstrap: usize,
    pub score_window: usize,
    pub max_ramps: Option<usize>,
    /// Drop requests that have already waited longer than the SLO when
    /// their batch forms, instead of serving them late.
    pub drop_late: bool,
}

impl Default for ServingParams {
    fn default() -> Self {
        Self {
            mode: Mode::Apparate,
            slo_ms: 100.0,
            max_batch: 16,
            acc_constraint: 0.99,
            budget: RampBudget::default(),
            tuner: TunerParams::default(),
            ramp_period: 128,
            adaptation_enabled: true,
            bootstrap: 128,
            score_window: 1,
            max_ramps: None,
            drop_late: false,
        }
    }
}

impl ServingParams {
    pub fn validate(&self) -> Result<()> {
        if self.slo_ms.is_nan() || self.slo_ms <= 0.0 {
            return Err(Error::param("slo_ms", "must be positive"));
        }
        if self.max_batch == 0 {
            return Err(Error::param("max_batch", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.acc_constraint) {
            return Err(Error::param("acc_constraint", "must lie in [0, 1]"));
        }
        if self.ramp_period == 0 {
            return Err(Error::param("ramp_period", "must be at least 1"));
        }
        if self.score_window == 0 {
            return Err(Error::param("score_window", "must be at least 1"));
        }
        self.tuner.validate()
    }

    fn controller(&self) -> ControllerParams {
        ControllerParams {
            acc_constraint: self.acc_constraint,
            tuner: self.tuner,
            budget: self.budget,
            ramp_period: self.ramp_period,
            tune_thresholds: self.adaptation_enabled,
            adjust_ramps: self.adaptation_enabled,
            max_ramps: self.max_ramps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub id: u64,
    pub arrival_ms: f64,
    pub batch_size: u32,
    pub queue_ms: f64,
    pub serve_ms: f64,
    pub total_ms: f64,
    pub exit_site: Option<String>,
    pub correct: bool,
    pub slo_violated: bool,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub requests: usize,
    pub served: usize,
    pub dropped: usize,
    pub batches: usize,
    pub mean_batch: f64,
    pub accuracy: f64,
    /// Served requests per second of simulated wall time.
    pub throughput_rps: f64,
    /// Served requests per second of server busy time.
    pub capacity_rps: f64,
    pub busy_ms: f64,
    pub makespan_ms: f64,
    pub slo_violations: usize,
    pub latency_ms: PercentileSummary,
    pub serve_ms: PercentileSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema: String,
    pub params: ServingParams,
    pub summary: SimSummary,
    /// Accuracy of consecutive non-overlapping monitoring windows, in
    /// arrival order.
    pub accuracy_windows: Vec<f64>,
    pub initial_config: ConfigSnapshot,
    pub final_config: ConfigSnapshot,
    pub events: Vec<AdaptationEvent>,
    pub rows: Vec<RequestRow>,
    /// Wall-clock time spent adapting; not part of the serialized report so
    /// that reports stay reproducible.
    #[serde(skip)]
    pub tuning_wall_ms: f64,
}

impl SimReport {
    pub fn latencies(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| !r.dropped).map(|r| r.total_ms).collect()
    }
}

/// Feasible ramp sites of `profile`, priced from its own ramp latencies.
pub fn profile_sites(profile: &ModelProfile) -> Result<Vec<RampSite>> {
    find_feasible_sites(profile, &ProfiledRampCosts)
}

struct Served {
    idx: usize,
    serve_ms: f64,
    exit_site: Option<String>,
    correct: bool,
}

pub fn run(workload: &Workload, profile: &ModelProfile, params: &ServingParams) -> Result<SimReport> {
    params.validate()?;
    let records = &workload.records;
    let (sites, config) = match params.mode {
        Mode::Vanilla => (Vec::new(), EEConfig::empty()),
        Mode::Apparate => {
            let sites = profile_sites(profile)?;
            let cfg = initial_placement_capped(&sites, params.budget, profile, params.max_ramps.unwrap_or(usize::MAX))
                .with_score_window(params.score_window)?;
            (sites, cfg)
        }
        Mode::Optimal => (profile_sites(profile)?, EEConfig::empty()),
    };
    let mut controller = Controller::new(config, sites.clone(), params.controller());
    if params.mode == Mode::Apparate && params.bootstrap > 0 {
        controller.bootstrap(&records[..params.bootstrap.min(records.len())], profile);
    }
    let initial_config = controller.config().snapshot();

    let n = records.len();
    let mut rows: Vec<Option<RequestRow>> = vec![None; n];
    let mut queue = std::collections::VecDeque::new();
    let mut next = 0;
    let mut t = 0.0_f64;
    let mut busy_ms = 0.0;
    let mut batches = 0;
    let mut served_in_batches = 0;
    let mut end = 0.0_f64;

    loop {
        while next < n && records[next].arrival_ms <= t {
            queue.push_back(next);
            next += 1;
        }
        if queue.is_empty() {
            if next >= n {
                break;
            }
            t = t.max(records[next].arrival_ms);
            continue;
        }
        let mut batch = Vec::with_capacity(params.max_batch as usize);
        while batch.len() < params.max_batch as usize {
            let Some(i) = queue.pop_front() else { break };
            let r = &records[i];
            if params.drop_late && t - r.arrival_ms > params.slo_ms {
                rows[i] = Some(RequestRow {
                    id: r.id,
                    arrival_ms: r.arrival_ms,
                    batch_size: 0,
                    queue_ms: t - r.arrival_ms,
                    serve_ms: 0.0,
                    total_ms: t - r.arrival_ms,
                    exit_site: None,
                    correct: false,
                    slo_violated: true,
                    dropped: true,
                });
                continue;
            }
            batch.push(i);
        }
        if batch.is_empty() {
            continue;
        }
        let b = batch.len() as u32;
        let config = controller.config();
        let busy = profile.total_latency(b) + config.ramp_cost_ms(b);
        let mut served: Vec<Served> = batch
            .iter()
            .map(|&i| {
                let r = &records[i];
                match params.mode {
                    Mode::Optimal => {
                        let site = optimal_exit(r, &sites);
                        Served {
                            idx: i,
                            serve_ms: site.map_or(profile.total_latency(b), |s| s.prefix_ms(b)),
                            exit_site: site.map(|s| s.layer.clone()),
                            correct: true,
                        }
                    }
                    _ => {
                        let out = evaluate_record(r, config, profile, b);
                        Served {
                            idx: i,
                            serve_ms: out.serve_ms,
                            exit_site: out.exit_site,
                            correct: out.correct,
                        }
                    }
                }
            })
            .collect();
        // responses are fed back in release order
        served.sort_by(|a, b| a.serve_ms.total_cmp(&b.serve_ms));
        for s in served {
            let r = &records[s.idx];
            let release = t + s.serve_ms;
            let total = release - r.arrival_ms;
            if params.mode == Mode::Apparate {
                controller.observe(r, s.correct, release, profile);
            }
            rows[s.idx] = Some(RequestRow {
                id: r.id,
                arrival_ms: r.arrival_ms,
                batch_size: b,
                queue_ms: t - r.arrival_ms,
                serve_ms: s.serve_ms,
                total_ms: total,
                exit_site: s.exit_site,
                correct: s.correct,
                slo_violated: total > params.slo_ms,
                dropped: false,
            });
        }
        batches += 1;
        served_in_batches += batch.len();
        busy_ms += busy;
        t += busy;
        end = t;
    }

    let rows: Vec<RequestRow> = rows.into_iter().map(|r| r.expect("every request is answered")).collect();
    let live: Vec<&RequestRow> = rows.iter().filter(|r| !r.dropped).collect();
    let served = live.len();
    let correct = live.iter().filter(|r| r.correct).count();
    let first_arrival = records.first().map_or(0.0, |r| r.arrival_ms);
    let makespan_ms = (end - first_arrival).max(0.0);
    let per_sec = |ms: f64| if ms > 0.0 { served as f64 * 1e3 / ms } else { 0.0 };
    let window = params.tuner.accuracy_window;
    let accuracy_windows = live
        .chunks_exact(window)
        .map(|w| w.iter().filter(|r| r.correct).count() as f64 / window as f64)
        .collect();

    let summary = SimSummary {
        requests: n,
        served,
        dropped: n - served,
        batches,
        mean_batch: if batches > 0 {
            served_in_batches as f64 / batches as f64
        } else {
            0.0
        },
        accuracy: if served > 0 { correct as f64 / served as f64 } else { 1.0 },
        throughput_rps: per_sec(makespan_ms),
        capacity_rps: per_sec(busy_ms),
        busy_ms,
        makespan_ms,
        slo_violations: rows.iter().filter(|r| r.slo_violated).count(),
        latency_ms: summarize(&live.iter().map(|r| r.total_ms).collect::<Vec<_>>()),
        serve_ms: summarize(&live.iter().map(|r| r.serve_ms).collect::<Vec<_>>()),
    };
    let tuning_wall_ms = controller.tuning_wall_ms();
    let final_config = controller.config().snapshot();
    Ok(SimReport {
        schema: REPORT_SCHEMA.to_string(),
        params: *params,
        summary,
        accuracy_windows,
        initial_config,
        final_config,
        events: controller.into_events(),
        rows,
        tuning_wall_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    /// Vanilla minus this mode, per percentile of response latency.
    pub p25_savings_ms: f64,
    pub p50_savings_ms: f64,
    pub p95_savings_ms: f64,
    /// Median savings relative to the vanilla median.
    pub p50_savings_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema: String,
    pub vanilla: SimReport,
    pub apparate: SimReport,
    pub optimal: SimReport,
    pub apparate_delta: ModeDelta,
    pub optimal_delta: ModeDelta,
    /// Fraction of the optimal median savings that adaptive exiting misses.
    pub median_gap_to_optimal: f64,
}

fn delta(vanilla: &PercentileSummary, other: &PercentileSummary) -> ModeDelta {
    ModeDelta {
        p25_savings_ms: vanilla.p25 - other.p25,
        p50_savings_ms: vanilla.p50 - other.p50,
        p95_savings_ms: vanilla.p95 - other.p95,
        p50_savings_frac: if vanilla.p50 > 0.0 {
            (vanilla.p50 - other.p50) / vanilla.p50
        } else {
            0.0
        },
    }
}

/// Runs vanilla, adaptive and optimal serving on the same arrivals. The
/// `mode` field of `params` is ignored.
pub fn compare_baselines(workload: &Workload, profile: &ModelProfile, params: &ServingParams) -> Result<Comparison> {
    let with = |mode| ServingParams { mode, ..*params };
    let vanilla = run(workload, profile, &with(Mode::Vanilla))?;
    let apparate = run(workload, profile, &with(Mode::Apparate))?;
    let optimal = run(workload, profile, &with(Mode::Optimal))?;
    let apparate_delta = delta(&vanilla.summary.latency_ms, &apparate.summary.latency_ms);
    let optimal_delta = delta(&vanilla.summary.latency_ms, &optimal.summary.latency_ms);
    let median_gap_to_optimal = if optimal_delta.p50_savings_ms > 0.0 {
        1.0 - apparate_delta.p50_savings_ms / optimal_delta.p50_savings_ms
    } else {
        0.0
    };
    Ok(Comparison {
        schema: COMPARISON_SCHEMA.to_string(),
        vanilla,
        apparate,
        optimal,
        apparate_delta,
        optimal_delta,
        median_gap_to_optimal,
    })
}
