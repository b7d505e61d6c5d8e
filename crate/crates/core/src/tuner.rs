//! Accuracy-triggered threshold tuning.
//!
//! [`tune`] is a greedy hill climb over per-ramp thresholds with per-ramp
//! multiplicative step sizes: each round tries raising every ramp's threshold
//! by its own step, applies the single raise with the best savings gained per
//! unit of accuracy lost, doubles that ramp's step, and halves the step of
//! every ramp whose raise broke the accuracy budget. It stops once nothing
//! can be raised and every step has shrunk to the floor.
//!
//! [`grid_oracle`] enumerates a threshold lattice exhaustively and serves as
//! the reference optimum in tests.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::{CompiledWindow, EEConfig};
use crate::graph::{ModelProfile, RampSite};
use crate::trace::RequestRecord;

/// Default cap on the number of lattice points [`grid_oracle`] will visit.
pub const DEFAULT_GRID_CAP: u64 = 50_000_000;

const LOSS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunerParams {
    /// Largest tolerated fraction of released results that differ from the
    /// model's own output.
    pub acc_loss_budget: f64,
    pub init_step: f64,
    pub min_step: f64,
    /// Length of the accuracy window that triggers tuning.
    pub accuracy_window: usize,
    /// Number of most recent records tuning runs over.
    pub tuning_history: usize,
}

impl Default for TunerParams {
    fn default() -> Self {
        Self {
            acc_loss_budget: 0.01,
            init_step: 0.1,
            min_step: 0.01,
            accuracy_window: 16,
            tuning_history: 128,
        }
    }
}

impl TunerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.acc_loss_budget) {
            return Err(Error::param("acc_loss_budget", "must lie in [0, 1]"));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.init_step && self.init_step <= 1.0) {
            return Err(Error::param("init_step/min_step", "need 0 < min_step <= init_step <= 1"));
        }
        if self.accuracy_window == 0 || self.tuning_history == 0 {
            return Err(Error::param("accuracy_window/tuning_history", "windows must hold at least one record"));
        }
        Ok(())
    }
}

/// Sliding window of correctness bits for recently released results.
#[derive(Debug, Clone)]
pub struct AccuracyMonitor {
    window: VecDeque<bool>,
    capacity: usize,
    correct: usize,
}

impl AccuracyMonitor {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "accuracy window must be non-empty");
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            correct: 0,
        }
    }

    pub fn push(&mut self, correct: bool) {
        if self.window.len() == self.capacity && self.window.pop_front() == Some(true) {
            self.correct -= 1;
        }
        self.window.push_back(correct);
        if correct {
            self.correct += 1;
        }
    }

    /// Mean of the buffered bits; 1.0 while empty.
    pub fn accuracy(&self) -> f64 {
        if self.window.is_empty() {
            1.0
        } else {
            self.correct as f64 / self.window.len() as f64
        }
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn clear(&mut self) {
        self.window.clear();
        self.correct = 0;
    }
}

/// True once the window is full and its accuracy is strictly below `constraint`.
pub fn should_trigger(monitor: &AccuracyMonitor, constraint: f64) -> bool {
    monitor.is_full() && monitor.accuracy() < constraint
}

/// One exploration round of [`tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRound {
    /// Step sizes in force when the round started.
    pub steps: Vec<f64>,
    pub chosen: Option<usize>,
    pub overstepped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub thresholds: Vec<f64>,
    /// Mean savings per record against vanilla serving, batch size 1.
    pub latency_savings_ms: f64,
    pub accuracy: f64,
    pub evaluations: usize,
    pub rounds: Vec<TuneRound>,
}

fn within_budget(errors: usize, n: usize, budget: f64) -> bool {
    errors as f64 / n as f64 <= budget + LOSS_EPS
}

/// Hill-climbs thresholds for `sites` (single-score exits).
pub fn tune(history: &[RequestRecord], sites: &[RampSite], params: &TunerParams, profile: &ModelProfile) -> TuneResult {
    let config = EEConfig::at_zero(sites).expect("tuning sites must be strictly ordered");
    tune_config(history, &config, params, profile)
}

/// Hill-climbs thresholds for the ramp set of `config`, honouring its score
/// window. The config's current thresholds are ignored: the climb always
/// starts from all zeros.
pub fn tune_config(history: &[RequestRecord], config: &EEConfig, params: &TunerParams, profile: &ModelProfile) -> TuneResult {
    let ramps = config.len();
    if ramps == 0 || history.is_empty() {
        return TuneResult {
            thresholds: vec![0.0; ramps],
            latency_savings_ms: 0.0,
            accuracy: 1.0,
            evaluations: 0,
            rounds: Vec::new(),
        };
    }
    let window = CompiledWindow::new(history, config, profile, 1);
    let n = history.len();
    let budget = params.acc_loss_budget;

    let mut thresholds = vec![0.0; ramps];
    let mut steps = vec![params.init_step; ramps];
    let (mut cur_errors, mut cur_savings) = window.errors_and_savings(&thresholds);
    let mut evaluations = 1;
    let mut rounds = Vec::new();
    let mut trial = thresholds.clone();

    loop {
        let mut best: Option<(usize, f64, f64, usize, f64)> = None; // (ramp, ratio, dsav, errors, savings)
        let mut overstepped = Vec::new();
        for i in 0..ramps {
            if thresholds[i] >= 1.0 {
                continue;
            }
            trial.copy_from_slice(&thresholds);
            trial[i] = (thresholds[i] + steps[i]).min(1.0);
            let (errors, savings) = window.errors_and_savings(&trial);
            evaluations += 1;
            if !within_budget(errors, n, budget) {
                overstepped.push(i);
                continue;
            }
            let d_savings = savings - cur_savings;
            let d_loss = (errors as f64 - cur_errors as f64) / n as f64;
            let ratio = if d_loss <= 0.0 {
                f64::INFINITY
            } else {
                d_savings / d_loss
            };
            let better = match best {
                None => true,
                Some((_, r, ds, _, _)) => ratio > r || (ratio == r && d_savings > ds),
            };
            if better {
                best = Some((i, ratio, d_savings, errors, savings));
            }
        }
        rounds.push(TuneRound {
            steps: steps.clone(),
            chosen: best.map(|b| b.0),
            overstepped: overstepped.clone(),
        });
        match best {
            Some((i, _, _, errors, savings)) => {
                thresholds[i] = (thresholds[i] + steps[i]).min(1.0);
                steps[i] *= 2.0;
                cur_errors = errors;
                cur_savings = savings;
            }
            None => {
                let settled = (0..ramps).all(|i| thresholds[i] >= 1.0 || steps[i] <= params.min_step);
                if settled {
                    break;
                }
            }
        }
        for i in overstepped {
            steps[i] = (steps[i] / 2.0).max(params.min_step);
        }
    }

    TuneResult {
        thresholds,
        latency_savings_ms: cur_savings / n as f64,
        accuracy: 1.0 - cur_errors as f64 / n as f64,
        evaluations,
        rounds,
    }
}

/// Values of the lattice `{0, step, 2*step, ..., 1}`.
pub fn lattice(step: f64) -> Vec<f64> {
    let m = (1.0 / step).round() as usize;
    (0..=m).map(|i| if i == m { 1.0 } else { i as f64 * step }).collect()
}

/// Exhaustive search over the threshold lattice; returns the feasible point
/// with the largest savings, ties going to the lexicographically smallest
/// thresholds.
pub fn grid_oracle(
    history: &[RequestRecord],
    sites: &[RampSite],
    acc_loss_budget: f64,
    step: f64,
    profile: &ModelProfile,
    cap: u64,
) -> Result<TuneResult> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::param("step", "must lie in (0, 1]"));
    }
    let values = lattice(step);
    let ramps = sites.len();
    let points = (values.len() as f64).powi(ramps as i32);
    if points > cap as f64 {
        return Err(Error::ExplosionCap { points, cap });
    }
    if history.is_empty() || ramps == 0 {
        return Ok(TuneResult {
            thresholds: vec![0.0; ramps],
            latency_savings_ms: 0.0,
            accuracy: 1.0,
            evaluations: 0,
            rounds: Vec::new(),
        });
    }
    let config = EEConfig::at_zero(sites)?;
    let window = CompiledWindow::new(history, &config, profile, 1);
    let n = history.len();

    let mut idx = vec![0usize; ramps];
    let mut thresholds = vec![0.0; ramps];
    let mut best: Option<(Vec<f64>, usize, f64)> = None;
    let mut evaluations = 0;
    loop {
        let (errors, savings) = window.errors_and_savings(&thresholds);
        evaluations += 1;
        if within_budget(errors, n, acc_loss_budget) && best.as_ref().is_none_or(|b| savings > b.2) {
            best = Some((thresholds.clone(), errors, savings));
        }
        // odometer, last ramp fastest: visits points in lexicographic order
        let mut d = ramps;
        loop {
            if d == 0 {
                let (thresholds, errors, savings) = best.expect("all-zero point is always feasible");
                return Ok(TuneResult {
                    thresholds,
                    latency_savings_ms: savings / n as f64,
                    accuracy: 1.0 - errors as f64 / n as f64,
                    evaluations,
                    rounds: Vec::new(),
                });
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < values.len() {
                thresholds[d] = values[idx[d]];
                break;
            }
            idx[d] = 0;
            thresholds[d] = values[0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::evaluate_window;
    use crate::exit::fixtures::{chain, config, record};
    use proptest::prelude::*;

    fn monitor_with(correct: usize, total: usize) -> AccuracyMonitor {
        let mut m = AccuracyMonitor::new(16);
        for i in 0..total {
            m.push(i < correct);
        }
        m
    }

    #[test]
    fn trigger_rules() {
        assert!(!should_trigger(&monitor_with(16, 16), 0.99));
        assert!(should_trigger(&monitor_with(15, 16), 0.99));
        assert!(!should_trigger(&monitor_with(16, 16), 1.0));
        // warm-up: never trigger on a partial window
        assert!(!should_trigger(&monitor_with(0, 15), 0.99));
    }

    #[test]
    fn monitor_slides() {
        let mut m = AccuracyMonitor::new(4);
        for b in [false, true, true, true] {
            m.push(b);
        }
        assert_eq!(m.accuracy(), 0.75);
        m.push(true);
        assert_eq!(m.accuracy(), 1.0);
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn zero_budget_with_wrong_exits_stays_at_zero() {
        let (p, sites) = chain(3, 1.0, 0.1);
        // every record is wrong at every ramp with the minimum possible score
        let hist: Vec<_> = (0..10).map(|i| record(i, &sites, &[(0.0, false); 3])).collect();
        let params = TunerParams {
            acc_loss_budget: 0.0,
            ..Default::default()
        };
        let res = tune(&hist, &sites, &params, &p);
        assert_eq!(res.thresholds, vec![0.0; 3]);
        assert_eq!(res.accuracy, 1.0);
    }

    #[test]
    fn agreeing_history_drives_thresholds_past_every_score() {
        let (p, sites) = chain(3, 1.0, 0.1);
        let hist: Vec<_> = (0..20)
            .map(|i| {
                let e = i as f64 / 20.0;
                record(i, &sites, &[(e, true), (e * 0.5, true), (0.95 - e * 0.1, true)])
            })
            .collect();
        let res = tune(&hist, &sites, &TunerParams::default(), &p);
        let max_err = 0.95;
        assert!(res.thresholds.iter().all(|&t| t >= max_err), "{:?}", res.thresholds);
        assert_eq!(res.accuracy, 1.0);
    }

    #[test]
    fn empty_ramp_set_is_a_no_op() {
        let (p, sites) = chain(3, 1.0, 0.1);
        let hist = vec![record(0, &sites, &[(0.1, true); 3])];
        let res = tune(&hist, &[], &TunerParams::default(), &p);
        assert!(res.thresholds.is_empty());
        assert_eq!(res.latency_savings_ms, 0.0);
    }

    #[test]
    fn grid_oracle_single_ramp_refuses_inaccurate_points() {
        let (p, sites) = chain(1, 1.0, 0.1);
        // score 0.2 is wrong: any threshold above 0.2 errs; lattice {0, 0.5, 1}
        let hist = vec![record(0, &sites, &[(0.2, false)]), record(1, &sites, &[(0.7, true)])];
        let res = grid_oracle(&hist, &sites, 0.0, 0.5, &p, DEFAULT_GRID_CAP).unwrap();
        assert_eq!(res.thresholds, vec![0.0]);
    }

    #[test]
    fn grid_oracle_refuses_explosions() {
        let (p, sites) = chain(4, 1.0, 0.1);
        let hist = vec![record(0, &sites, &[(0.2, true); 4])];
        let err = grid_oracle(&hist, &sites, 0.0, 0.01, &p, 1_000_000).unwrap_err();
        assert!(matches!(err, Error::ExplosionCap { .. }));
    }

    /// Brute-force reference for the 2-ramp, 8-record lattice argmax,
    /// written independently of the compiled evaluator: plain loops over
    /// the 121 lattice points and direct exit-rule arithmetic.
    #[test]
    fn grid_oracle_matches_hand_enumeration() {
        let (p, sites) = chain(4, 1.0, 0.2);
        let two = [sites[1].clone(), sites[3].clone()];
        let rows: [[(f64, bool); 2]; 8] = [
            [(0.05, true), (0.30, true)],
            [(0.45, false), (0.10, true)],
            [(0.25, true), (0.62, true)],
            [(0.80, false), (0.55, false)],
            [(0.33, true), (0.05, true)],
            [(0.91, false), (0.71, true)],
            [(0.12, false), (0.22, true)],
            [(0.58, true), (0.44, true)],
        ];
        let hist: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut full = [(1.0, true); 4];
                full[1] = r[0];
                full[3] = r[1];
                record(i as u64, &sites, &full)
            })
            .collect();
        // prefix through L1 = 2, through L3 = 4, model = 5, ramps 0.2 each
        let serve = |t0: f64, t1: f64, r: &[(f64, bool); 2]| -> (f64, bool) {
            if r[0].0 < t0 {
                (2.0 + 0.2, r[0].1)
            } else if r[1].0 < t1 {
                (4.0 + 0.4, r[1].1)
            } else {
                (5.0 + 0.4, true)
            }
        };
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for a in 0..=10 {
            for b in 0..=10 {
                let (t0, t1) = (a as f64 / 10.0, b as f64 / 10.0);
                let mut wrong = 0;
                let mut saved = 0.0;
                for r in &rows {
                    let (ms, ok) = serve(t0, t1, r);
                    saved += 5.0 - ms;
                    wrong += usize::from(!ok);
                }
                // budget 1/8: at most one wrong answer
                if wrong <= 1 && saved > best.0 {
                    best = (saved, t0, t1);
                }
            }
        }
        let res = grid_oracle(&hist, &two, 0.125, 0.1, &p, DEFAULT_GRID_CAP).unwrap();
        assert!((res.thresholds[0] - best.1).abs() < 1e-12, "{:?} vs {best:?}", res.thresholds);
        assert!((res.thresholds[1] - best.2).abs() < 1e-12, "{:?} vs {best:?}", res.thresholds);
        assert!((res.latency_savings_ms * 8.0 - best.0).abs() < 1e-9);
        // Frozen from the enumeration above.
        assert_eq!((best.1, best.2), (0.4, 0.5));
    }

    fn arb_history() -> impl Strategy<Value = (Vec<(Vec<f64>, usize)>, f64)> {
        (
            prop::collection::vec((prop::collection::vec(0.0..=1.0f64, 3), 0usize..=3), 1..48),
            prop_oneof![Just(0.0), Just(0.01), Just(0.05), Just(0.1)],
        )
    }

    fn build(rows: &[(Vec<f64>, usize)], sites: &[RampSite]) -> Vec<RequestRecord> {
        rows.iter()
            .enumerate()
            .map(|(i, (errs, first))| {
                let sig: Vec<(f64, bool)> = errs.iter().enumerate().map(|(j, &e)| (e, j >= *first)).collect();
                record(i as u64, sites, &sig)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn tune_respects_budget_and_is_deterministic((rows, budget) in arb_history()) {
            let (p, sites) = chain(3, 1.0, 0.05);
            let hist = build(&rows, &sites);
            let params = TunerParams { acc_loss_budget: budget, ..Default::default() };
            let a = tune(&hist, &sites, &params, &p);
            let b = tune(&hist, &sites, &params, &p);
            prop_assert_eq!(&a, &b);
            let cfg = config(&sites, &[(0, a.thresholds[0]), (1, a.thresholds[1]), (2, a.thresholds[2])]);
            let ev = evaluate_window(&hist, &cfg, &p).unwrap();
            prop_assert!(1.0 - ev.accuracy <= budget + 1e-12);
            prop_assert!((ev.mean_savings_ms - a.latency_savings_ms).abs() < 1e-9);
        }

        #[test]
        fn step_sizes_follow_the_mimd_rule((rows, budget) in arb_history()) {
            let (p, sites) = chain(3, 1.0, 0.05);
            let hist = build(&rows, &sites);
            let params = TunerParams { acc_loss_budget: budget, ..Default::default() };
            let res = tune(&hist, &sites, &params, &p);
            for pair in res.rounds.windows(2) {
                let (prev, next) = (&pair[0], &pair[1]);
                for i in 0..3 {
                    let expected = if prev.chosen == Some(i) {
                        prev.steps[i] * 2.0
                    } else if prev.overstepped.contains(&i) {
                        (prev.steps[i] / 2.0).max(params.min_step)
                    } else {
                        prev.steps[i]
                    };
                    prop_assert_eq!(next.steps[i], expected);
                    if prev.overstepped.contains(&i) && prev.steps[i] > params.min_step {
                        prop_assert!(next.steps[i] < prev.steps[i]);
                    }
                    prop_assert!(next.steps[i] >= params.min_step);
                }
            }
        }

        #[test]
        fn lattice_snapped_tune_never_beats_the_grid((rows, budget) in arb_history()) {
            let (p, sites) = chain(3, 1.0, 0.05);
            let hist = build(&rows, &sites);
            let params = TunerParams { acc_loss_budget: budget, ..Default::default() };
            let res = tune(&hist, &sites, &params, &p);
            let grid = grid_oracle(&hist, &sites, budget, 0.1, &p, DEFAULT_GRID_CAP).unwrap();
            let snapped: Vec<f64> = res.thresholds.iter().map(|t| (t * 10.0 + 1e-9).floor() / 10.0).collect();
            let cfg = config(&sites, &[(0, snapped[0]), (1, snapped[1]), (2, snapped[2])]);
            let ev = evaluate_window(&hist, &cfg, &p).unwrap();
            prop_assert!(1.0 - ev.accuracy <= budget + 1e-12);
            prop_assert!(grid.latency_savings_ms >= ev.mean_savings_ms - 1e-9);
        }
    }
}
