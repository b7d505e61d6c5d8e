//! Periodic ramp-set adjustment.
//!
//! Every period the active ramps are scored by utility: the latency saved by
//! inputs leaving at a ramp minus the latency the ramp adds to inputs that
//! run past it. Negative ramps are deactivated (after one attempt to rescue
//! them by retuning thresholds) and a single replacement is trialed at the
//! candidate site with the best optimistic utility. When every ramp pays for
//! itself the manager probes for more: it adds a ramp just before the best
//! one while the budget allows, and otherwise slides the worst one earlier.

use serde::{Deserialize, Serialize};

use crate::exit::{evaluate_record, ActiveRamp, EEConfig};
use crate::graph::{ModelProfile, RampBudget, RampSite};
use crate::trace::RequestRecord;
use crate::tuner::{tune_config, TunerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampUtility {
    pub layer: String,
    pub position: usize,
    pub savings_ms: f64,
    pub overheads_ms: f64,
    pub exit_rate: f64,
    pub utility_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub ramps: Vec<RampUtility>,
    pub period_len: usize,
}

impl UtilityReport {
    pub fn total_utility_ms(&self) -> f64 {
        self.ramps.iter().map(|r| r.utility_ms).sum()
    }

    pub fn all_non_negative(&self) -> bool {
        self.ramps.iter().all(|r| r.utility_ms >= 0.0)
    }
}

/// Scores every active ramp of `config` over `period` at batch size 1.
///
/// Savings credit a ramp with `vanilla - serve` for each input leaving
/// there; overheads charge it its own latency for each input that leaves
/// later or not at all. Inputs leaving earlier never reach it.
pub fn score_utilities(period: &[RequestRecord], config: &EEConfig, profile: &ModelProfile) -> UtilityReport {
    let n = config.len();
    let vanilla = profile.total_latency(1);
    let mut savings = vec![0.0; n];
    let mut overheads = vec![0.0; n];
    let mut exits = vec![0usize; n];
    for rec in period {
        let out = evaluate_record(rec, config, profile, 1);
        let passed = match out.exit_index {
            Some(j) => {
                savings[j] += vanilla - out.serve_ms;
                exits[j] += 1;
                j
            }
            None => n,
        };
        for (i, r) in config.ramps()[..passed].iter().enumerate() {
            overheads[i] += r.site.ramp_ms(1);
        }
    }
    let len = period.len();
    UtilityReport {
        ramps: config
            .ramps()
            .iter()
            .enumerate()
            .map(|(i, r)| RampUtility {
                layer: r.site.layer.clone(),
                position: r.site.position,
                savings_ms: savings[i],
                overheads_ms: overheads[i],
                exit_rate: if len == 0 { 0.0 } else { exits[i] as f64 / len as f64 },
                utility_ms: savings[i] - overheads[i],
            })
            .collect(),
        period_len: len,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub site: RampSite,
    pub exit_rate: f64,
}

/// Ramps deactivated in the current round, in site order, with the exit
/// rate each had when it was switched off.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeactivationLedger {
    entries: Vec<LedgerEntry>,
}

impl DeactivationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, site: RampSite, exit_rate: f64) {
        let at = self.entries.partition_point(|e| e.site.position < site.position);
        self.entries.insert(at, LedgerEntry { site, exit_rate });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Optimistic exit rate for a ramp at `position`: the rate of the first
    /// deactivated ramp at or after it plus the rates of every deactivated
    /// ramp before that one, capped at 1. `None` past the last deactivation.
    pub fn upper_bound_exit_rate(&self, position: usize) -> Option<f64> {
        let k = self.entries.iter().position(|e| e.site.position >= position)?;
        let rate: f64 = self.entries[..=k].iter().map(|e| e.exit_rate).sum();
        Some(rate.min(1.0))
    }
}

/// Optimistic utility of trialing a ramp at `site` for `period_len` inputs
/// when a fraction `rate` of them would leave there.
pub fn upper_bound_utility(site: &RampSite, rate: f64, profile: &ModelProfile, period_len: usize) -> f64 {
    let n = period_len as f64;
    let cost = site.ramp_ms(1);
    let per_exit = profile.total_latency(1) - site.prefix_ms(1) - cost;
    rate * n * per_exit - (1.0 - rate) * n * cost
}

/// Picks a ramp to trial after deactivations, or `None`.
///
/// Only sites after `latest_positive` are considered (every site when it is
/// `None`). Deactivated positions split that range into intervals; each
/// interval first offers its median site, and when no interval yields a
/// positive optimistic utility, each candidate is pushed halfway towards the
/// interval's end and the search repeats until the intervals run out.
/// `sites` should list only sites that may be trialed; deactivated and
/// active positions are never returned.
pub fn propose_candidate(
    ledger: &DeactivationLedger,
    latest_positive: Option<&RampSite>,
    sites: &[RampSite],
    profile: &ModelProfile,
    period_len: usize,
) -> Option<RampSite> {
    let start = latest_positive.map(|p| p.position);
    let after = |pos: usize| start.is_none_or(|s| pos > s);
    let delims: Vec<&LedgerEntry> = ledger.entries().iter().filter(|e| after(e.site.position)).collect();

    // (members, first still-eligible index, bound)
    let mut intervals: Vec<(Vec<&RampSite>, usize, f64)> = Vec::new();
    let mut lo = start;
    for d in &delims {
        let hi = d.site.position;
        let members: Vec<&RampSite> = sites
            .iter()
            .filter(|s| lo.is_none_or(|l| s.position > l) && s.position < hi)
            .collect();
        lo = Some(hi);
        if members.is_empty() {
            continue;
        }
        let bound = ledger.upper_bound_exit_rate(hi).expect("delimiter is in the ledger");
        intervals.push((members, 0, bound));
    }

    while intervals.iter().any(|iv| iv.1 < iv.0.len()) {
        let mut best: Option<(&RampSite, f64)> = None;
        for (members, from, bound) in &intervals {
            if *from >= members.len() {
                continue;
            }
            let cand = members[from + (members.len() - from - 1) / 2];
            let u = upper_bound_utility(cand, *bound, profile, period_len);
            if u > 0.0 && best.is_none_or(|(_, b)| u > b) {
                best = Some((cand, u));
            }
        }
        if let Some((site, _)) = best {
            return Some(site.clone());
        }
        for (members, from, _) in &mut intervals {
            if *from < members.len() {
                *from += (members.len() - *from - 1) / 2 + 1;
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustParams {
    pub budget: RampBudget,
    pub tuner: TunerParams,
    /// Hard cap on the number of active ramps, on top of the latency budget.
    pub max_ramps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AdjustAction {
    /// No legal move.
    Unchanged,
    /// Retuning fixed every negative ramp; only thresholds changed.
    Retuned,
    Deactivated {
        removed: Vec<String>,
        trial: Option<String>,
    },
    Added {
        layer: String,
    },
    Shifted {
        from: String,
        to: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    pub config: EEConfig,
    pub action: AdjustAction,
    pub ledger: DeactivationLedger,
}

impl Adjustment {
    fn unchanged(config: &EEConfig) -> Self {
        Self {
            config: config.clone(),
            action: AdjustAction::Unchanged,
            ledger: DeactivationLedger::new(),
        }
    }
}

fn admits(ramps: &[ActiveRamp], params: &AdjustParams, profile: &ModelProfile) -> bool {
    params.max_ramps.is_none_or(|m| ramps.len() <= m) && params.budget.admits(ramps.iter().map(|r| &r.site), profile)
}

fn rebuild(mut ramps: Vec<ActiveRamp>, score_window: usize) -> EEConfig {
    ramps.sort_by_key(|r| r.site.position);
    EEConfig::new(ramps)
        .and_then(|c| c.with_score_window(score_window))
        .expect("adjusted ramps keep distinct ordered sites")
}

/// One round of ramp adjustment. `report` must describe `config`; `history`
/// feeds the rescue retune in the negative-utility branch.
pub fn adjust(
    report: &UtilityReport,
    config: &EEConfig,
    sites: &[RampSite],
    history: &[RequestRecord],
    params: &AdjustParams,
    profile: &ModelProfile,
) -> Adjustment {
    if config.is_empty() || report.ramps.len() != config.len() {
        return Adjustment::unchanged(config);
    }
    if report.all_non_negative() {
        probe(report, config, sites, params, profile)
    } else {
        prune(report, config, sites, history, params, profile)
    }
}

fn prune(
    report: &UtilityReport,
    config: &EEConfig,
    sites: &[RampSite],
    history: &[RequestRecord],
    params: &AdjustParams,
    profile: &ModelProfile,
) -> Adjustment {
    if !history.is_empty() {
        let tuned = tune_config(history, config, &params.tuner, profile);
        let retuned = config.clone().with_thresholds(&tuned.thresholds).expect("tuned thresholds lie in [0, 1]");
        let rescored = score_utilities(history, &retuned, profile);
        let before = report.total_utility_ms() / report.period_len.max(1) as f64;
        let after = rescored.total_utility_ms() / history.len() as f64;
        if rescored.all_non_negative() && after >= before {
            return Adjustment {
                config: retuned,
                action: AdjustAction::Retuned,
                ledger: DeactivationLedger::new(),
            };
        }
    }

    let mut ledger = DeactivationLedger::new();
    let mut survivors = Vec::new();
    let mut removed = Vec::new();
    for (ramp, u) in config.ramps().iter().zip(&report.ramps) {
        if u.utility_ms < 0.0 {
            ledger.record(ramp.site.clone(), u.exit_rate);
            removed.push(ramp.site.layer.clone());
        } else {
            survivors.push(ramp.clone());
        }
    }

    let latest_positive = survivors.last().map(|r| r.site.clone());
    let eligible: Vec<RampSite> = sites
        .iter()
        .filter(|s| {
            !survivors.iter().any(|r| r.site.position == s.position)
                && !ledger.entries().iter().any(|e| e.site.position == s.position)
        })
        .filter(|s| {
            let mut trial = survivors.clone();
            trial.push(ActiveRamp {
                site: (*s).clone(),
                threshold: 0.0,
            });
            admits(&trial, params, profile)
        })
        .cloned()
        .collect();
    let trial = propose_candidate(&ledger, latest_positive.as_ref(), &eligible, profile, report.period_len);
    if let Some(site) = &trial {
        survivors.push(ActiveRamp {
            site: site.clone(),
            threshold: 0.0,
        });
    }
    Adjustment {
        config: rebuild(survivors, config.score_window()),
        action: AdjustAction::Deactivated {
            removed,
            trial: trial.map(|s| s.layer),
        },
        ledger,
    }
}

fn site_index(sites: &[RampSite], position: usize) -> Option<usize> {
    sites.iter().position(|s| s.position == position)
}

fn probe(
    report: &UtilityReport,
    config: &EEConfig,
    sites: &[RampSite],
    params: &AdjustParams,
    profile: &ModelProfile,
) -> Adjustment {
    let ramps = config.ramps();
    let mut best = 0;
    let mut worst: Option<usize> = None;
    for (i, u) in report.ramps.iter().enumerate() {
        if u.utility_ms > report.ramps[best].utility_ms {
            best = i;
        }
    }
    for (i, u) in report.ramps.iter().enumerate() {
        if i != best && worst.is_none_or(|w| u.utility_ms < report.ramps[w].utility_ms) {
            worst = Some(i);
        }
    }

    // add just before the best ramp
    if let Some(prev) = site_index(sites, ramps[best].site.position)
        .and_then(|k| k.checked_sub(1))
        .map(|k| &sites[k])
    {
        if !config.contains_position(prev.position) {
            let mut trial = ramps.to_vec();
            trial.push(ActiveRamp {
                site: prev.clone(),
                threshold: 0.0,
            });
            if admits(&trial, params, profile) {
                return Adjustment {
                    config: rebuild(trial, config.score_window()),
                    action: AdjustAction::Added {
                        layer: prev.layer.clone(),
                    },
                    ledger: DeactivationLedger::new(),
                };
            }
        }
    }

    // otherwise slide the worst ramp one site earlier
    let Some(w) = worst else {
        return Adjustment::unchanged(config);
    };
    let Some(prev) = site_index(sites, ramps[w].site.position)
        .and_then(|k| k.checked_sub(1))
        .map(|k| &sites[k])
    else {
        return Adjustment::unchanged(config);
    };
    if config.contains_position(prev.position) {
        return Adjustment::unchanged(config);
    }
    let mut trial = ramps.to_vec();
    let from = std::mem::replace(
        &mut trial[w],
        ActiveRamp {
            site: prev.clone(),
            threshold: 0.0,
        },
    );
    if !admits(&trial, params, profile) {
        return Adjustment::unchanged(config);
    }
    Adjustment {
        config: rebuild(trial, config.score_window()),
        action: AdjustAction::Shifted {
            from: from.site.layer,
            to: prev.layer.clone(),
        },
        ledger: DeactivationLedger::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::fixtures::{chain, config, record};
    use proptest::prelude::*;

    fn report_for(cfg: &EEConfig, utilities: &[(f64, f64)]) -> UtilityReport {
        UtilityReport {
            ramps: cfg
                .ramps()
                .iter()
                .zip(utilities)
                .map(|(r, &(u, rate))| RampUtility {
                    layer: r.site.layer.clone(),
                    position: r.site.position,
                    savings_ms: u.max(0.0),
                    overheads_ms: (-u).max(0.0),
                    exit_rate: rate,
                    utility_ms: u,
                })
                .collect(),
            period_len: 128,
        }
    }

    fn params(budget: f64) -> AdjustParams {
        AdjustParams {
            budget: RampBudget::new(budget).unwrap(),
            tuner: TunerParams::default(),
            max_ramps: None,
        }
    }

    fn layers(cfg: &EEConfig) -> Vec<String> {
        cfg.ramps().iter().map(|r| r.site.layer.clone()).collect()
    }

    #[test]
    fn idle_ramp_is_pure_overhead() {
        let (p, sites) = chain(3, 1.0, 0.5);
        let cfg = config(&sites, &[(1, 0.0)]);
        let period: Vec<_> = (0..128).map(|i| record(i, &sites, &[(0.5, true); 3])).collect();
        let rep = score_utilities(&period, &cfg, &p);
        assert_eq!(rep.ramps[0].utility_ms, -64.0);
        assert_eq!(rep.ramps[0].exit_rate, 0.0);
    }

    #[test]
    fn ramp_taking_everything_has_no_overhead() {
        let (p, sites) = chain(3, 1.0, 0.5);
        let cfg = config(&sites, &[(1, 1.0)]);
        let period: Vec<_> = (0..10).map(|i| record(i, &sites, &[(0.5, true); 3])).collect();
        let rep = score_utilities(&period, &cfg, &p);
        assert_eq!(rep.ramps[0].overheads_ms, 0.0);
        // vanilla 4, served at prefix 2 + 0.5
        assert_eq!(rep.ramps[0].utility_ms, 15.0);
    }

    /// Eight records, two ramps, accounted by hand.
    #[test]
    fn eight_record_utilities_match_hand_accounting() {
        // Layers 1 ms each, model 5 ms, ramps 0.25 ms. Exit at L1 serves in
        // 2 + 0.25 (saves 2.75); exit at L3 serves in 4 + 0.5 (saves 0.5).
        let (p, sites) = chain(4, 1.0, 0.25);
        let cfg = config(&sites, &[(1, 0.4), (3, 0.6)]);
        let pairs = [
            (0.1, 0.9),  // L1
            (0.5, 0.5),  // L3
            (0.9, 0.9),  // none
            (0.3, 0.1),  // L1
            (0.7, 0.2),  // L3
            (0.6, 0.7),  // none
            (0.2, 0.8),  // L1
            (0.4, 0.59), // L3 (0.4 is not below 0.4)
        ];
        let period: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| record(i as u64, &sites, &[(1.0, true), (a, true), (1.0, true), (b, true)]))
            .collect();
        let rep = score_utilities(&period, &cfg, &p);
        let l1 = &rep.ramps[0];
        let l3 = &rep.ramps[1];
        assert_eq!((l1.savings_ms, l1.overheads_ms, l1.utility_ms), (8.25, 1.25, 7.0));
        assert_eq!((l3.savings_ms, l3.overheads_ms, l3.utility_ms), (1.5, 0.5, 1.0));
        assert_eq!((l1.exit_rate, l3.exit_rate), (0.375, 0.375));
    }

    #[test]
    fn ledger_bound_sums_earlier_deactivations() {
        let (_, sites) = chain(10, 1.0, 0.1);
        let mut ledger = DeactivationLedger::new();
        ledger.record(sites[8].clone(), 0.25);
        ledger.record(sites[5].clone(), 0.125);
        assert_eq!(ledger.upper_bound_exit_rate(3), Some(0.125));
        assert_eq!(ledger.upper_bound_exit_rate(5), Some(0.125));
        assert_eq!(ledger.upper_bound_exit_rate(6), Some(0.375));
        assert_eq!(ledger.upper_bound_exit_rate(9), None);
    }

    #[test]
    fn no_deactivations_means_no_candidate() {
        let (p, sites) = chain(10, 1.0, 0.1);
        assert!(propose_candidate(&DeactivationLedger::new(), Some(&sites[9]), &sites, &p, 128).is_none());
        assert!(propose_candidate(&DeactivationLedger::new(), None, &sites, &p, 128).is_none());
    }

    #[test]
    fn zero_rate_deactivation_yields_nothing() {
        let (p, sites) = chain(10, 1.0, 0.1);
        let mut ledger = DeactivationLedger::new();
        ledger.record(sites[6].clone(), 0.0);
        assert!(propose_candidate(&ledger, Some(&sites[1]), &sites, &p, 128).is_none());
    }

    #[test]
    fn candidate_trialed_iff_bound_is_positive() {
        // One deactivated ramp at site 8 with exit rate 0.3; P at site 2.
        // Interval {3..7}, median 5: prefix 6 ms of an 11 ms model.
        for (cost, expect) in [(0.1, true), (3.0, false)] {
            let (p, sites) = chain(10, 1.0, cost);
            let mut ledger = DeactivationLedger::new();
            ledger.record(sites[8].clone(), 0.3);
            let cand = &sites[5];
            let s = 11.0 - 6.0 - cost;
            let bound = 0.3 * s * 128.0 - 0.7 * cost * 128.0;
            assert_eq!(bound > 0.0, expect);
            let got = propose_candidate(&ledger, Some(&sites[2]), &sites, &p, 128);
            if expect {
                assert_eq!(got.as_ref().map(|s| s.position), Some(cand.position));
            } else {
                // bisection walks towards site 7 where savings shrink further
                assert!(got.is_none());
            }
        }
    }

    #[test]
    fn shift_lowest_when_budget_is_full() {
        // 11 ms model, 0.1 ms ramps, 3% budget: three ramps fit, four do not.
        let (p, sites) = chain(10, 1.0, 0.1);
        let cfg = config(&sites, &[(2, 0.3), (5, 0.4), (8, 0.5)]);
        let rep = report_for(&cfg, &[(5.0, 0.1), (1.0, 0.1), (9.0, 0.1)]);
        let adj = adjust(&rep, &cfg, &sites, &[], &params(0.03), &p);
        assert_eq!(layers(&adj.config), ["L2", "L4", "L8"]);
        assert_eq!(adj.config.thresholds(), [0.3, 0.0, 0.5]);
        assert_eq!(
            adj.action,
            AdjustAction::Shifted {
                from: "L5".into(),
                to: "L4".into()
            }
        );
    }

    #[test]
    fn add_before_highest_when_budget_allows() {
        let (p, sites) = chain(10, 1.0, 0.1);
        let cfg = config(&sites, &[(2, 0.3), (5, 0.4), (8, 0.5)]);
        let rep = report_for(&cfg, &[(5.0, 0.1), (1.0, 0.1), (9.0, 0.1)]);
        let adj = adjust(&rep, &cfg, &sites, &[], &params(0.05), &p);
        assert_eq!(layers(&adj.config), ["L2", "L5", "L7", "L8"]);
        assert_eq!(adj.config.thresholds(), [0.3, 0.4, 0.0, 0.5]);
    }

    #[test]
    fn single_positive_ramp_with_full_budget_is_left_alone() {
        let (p, sites) = chain(10, 1.0, 0.1);
        let cfg = config(&sites, &[(5, 0.4)]);
        let rep = report_for(&cfg, &[(3.0, 0.2)]);
        let adj = adjust(&rep, &cfg, &sites, &[], &params(0.01), &p);
        assert_eq!(adj.action, AdjustAction::Unchanged);
        assert_eq!(adj.config, cfg);
    }

    #[test]
    fn negative_ramps_are_replaced_by_one_trial() {
        let (p, sites) = chain(10, 1.0, 0.1);
        let cfg = config(&sites, &[(2, 0.3), (5, 0.4), (8, 0.5)]);
        let rep = report_for(&cfg, &[(2.0, 0.1), (-1.0, 0.3), (-2.0, 0.4)]);
        // every ramp is wrong on every input, so retuning cannot help
        let history: Vec<_> = (0..32).map(|i| record(i, &sites, &[(0.0, false); 10])).collect();
        let adj = adjust(&rep, &cfg, &sites, &history, &params(0.05), &p);
        // intervals after L2: {3,4} bounded by 0.3 and {6,7} by 0.3 + 0.4;
        // medians 3 and 6 score 0.3*6.9 - 0.7*0.1 = 2.0 and 0.7*3.9 - 0.3*0.1 = 2.7
        assert_eq!(layers(&adj.config), ["L2", "L6"]);
        assert_eq!(adj.config.thresholds(), [0.3, 0.0]);
        assert_eq!(adj.ledger.entries().len(), 2);
        assert_eq!(
            adj.action,
            AdjustAction::Deactivated {
                removed: vec!["L5".into(), "L8".into()],
                trial: Some("L6".into())
            }
        );
    }

    #[test]
    fn retune_rescues_negative_ramps() {
        let (p, sites) = chain(4, 1.0, 0.1);
        let cfg = config(&sites, &[(1, 0.0)]);
        let history: Vec<_> = (0..64).map(|i| record(i, &sites, &[(0.2, true); 4])).collect();
        let rep = score_utilities(&history, &cfg, &p);
        assert!(rep.ramps[0].utility_ms < 0.0);
        let adj = adjust(&rep, &cfg, &sites, &history, &params(0.05), &p);
        assert_eq!(adj.action, AdjustAction::Retuned);
        assert_eq!(layers(&adj.config), ["L1"]);
        assert!(adj.config.thresholds()[0] > 0.2);
    }

    #[test]
    fn all_negative_leaves_at_most_one_ramp() {
        let (p, sites) = chain(10, 1.0, 0.1);
        let cfg = config(&sites, &[(1, 0.0), (4, 0.0), (7, 0.0)]);
        let rep = report_for(&cfg, &[(-1.0, 0.2), (-1.0, 0.2), (-1.0, 0.2)]);
        let history: Vec<_> = (0..32).map(|i| record(i, &sites, &[(0.0, false); 10])).collect();
        let adj = adjust(&rep, &cfg, &sites, &history, &params(0.05), &p);
        assert!(adj.config.len() <= 1);
        for r in adj.config.ramps() {
            assert!(![1, 4, 7].contains(&r.site.position));
            assert_eq!(r.threshold, 0.0);
        }
    }

    #[allow(clippy::type_complexity)]
    fn arb_round() -> impl Strategy<Value = (Vec<usize>, Vec<(f64, f64)>, f64, Option<usize>)> {
        prop::collection::btree_set(0usize..12, 1..6).prop_flat_map(|set| {
            let picks: Vec<usize> = set.into_iter().collect();
            let n = picks.len();
            (
                Just(picks),
                prop::collection::vec((-5.0..5.0f64, 0.0..0.2f64), n),
                0.0..0.06f64,
                prop_oneof![Just(None), (1usize..4).prop_map(Some)],
            )
        })
    }

    proptest! {
        #[test]
        fn adjust_respects_budget_order_and_move_limits((picks, utils, budget, max_ramps) in arb_round()) {
            let (p, sites) = chain(12, 1.0, 0.05);
            let cfg = config(&sites, &picks.iter().map(|&i| (i, 0.5)).collect::<Vec<_>>());
            let rep = report_for(&cfg, &utils);
            let history: Vec<_> = (0..16).map(|i| record(i, &sites, &[(0.0, false); 12])).collect();
            let params = AdjustParams { budget: RampBudget::new(budget).unwrap(), tuner: TunerParams::default(), max_ramps };
            let adj = adjust(&rep, &cfg, &sites, &history, &params, &p);
            let out = &adj.config;
            let positions: Vec<usize> = out.ramps().iter().map(|r| r.site.position).collect();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            let was_admitted = params.budget.admits(cfg.ramps().iter().map(|r| &r.site), &p)
                && max_ramps.is_none_or(|m| cfg.len() <= m);
            if was_admitted {
                prop_assert!(params.budget.admits(out.ramps().iter().map(|r| &r.site), &p));
            }
            let old: Vec<usize> = cfg.ramps().iter().map(|r| r.site.position).collect();
            let added: Vec<&ActiveRamp> = out.ramps().iter().filter(|r| !old.contains(&r.site.position)).collect();
            let removed = old.iter().filter(|o| !positions.contains(o)).count();
            let negatives = utils.iter().filter(|u| u.0 < 0.0).count();
            prop_assert!(added.len() <= 1);
            prop_assert!(added.iter().all(|r| r.threshold == 0.0));
            if negatives > 0 {
                prop_assert!(removed <= negatives);
            } else {
                prop_assert!(removed <= 1);
                let best = utils.iter().enumerate().fold(0, |b, (i, u)| if u.0 > utils[b].0 { i } else { b });
                prop_assert!(positions.contains(&old[best]));
                let kept = out.ramps().iter().find(|r| r.site.position == old[best]).unwrap();
                prop_assert_eq!(kept.threshold, 0.5);
            }
        }
    }
}
