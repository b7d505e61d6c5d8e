//! The adaptation loop shared by the serving and generative simulators:
//! an accuracy monitor that triggers threshold tuning, and a period counter
//! that triggers ramp adjustment.
//!
//! Every decision takes effect through [`Controller::config`], which callers
//! read only between batches, so a batch never sees a half-applied change.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::exit::{ConfigSnapshot, EEConfig};
use crate::graph::{ModelProfile, RampBudget, RampSite};
use crate::ramps::{adjust, score_utilities, AdjustAction, AdjustParams, UtilityReport};
use crate::trace::RequestRecord;
use crate::tuner::{should_trigger, tune_config, AccuracyMonitor, TunerParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Minimum accuracy an accuracy window may show before tuning runs.
    pub acc_constraint: f64,
    pub tuner: TunerParams,
    pub budget: RampBudget,
    /// Requests per ramp-adjustment period.
    pub ramp_period: usize,
    pub tune_thresholds: bool,
    pub adjust_ramps: bool,
    pub max_ramps: Option<usize>,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            acc_constraint: 0.99,
            tuner: TunerParams::default(),
            budget: RampBudget::default(),
            ramp_period: 128,
            tune_thresholds: true,
            adjust_ramps: true,
            max_ramps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ThresholdTune,
    RampAdjust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Initial tuning on the leading records before serving starts.
    Bootstrap,
    /// An accuracy window fell below the constraint.
    Accuracy,
    /// The ramp set changed and the new set needs thresholds.
    RampChange,
    /// A ramp-adjustment period ended.
    Period,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub time_ms: f64,
    pub kind: EventKind,
    pub trigger: Trigger,
    pub old: ConfigSnapshot,
    pub new: ConfigSnapshot,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub utilities: Option<UtilityReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub action: Option<AdjustAction>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    config: EEConfig,
    sites: Vec<RampSite>,
    params: ControllerParams,
    monitor: AccuracyMonitor,
    history: VecDeque<RequestRecord>,
    period: Vec<RequestRecord>,
    events: Vec<AdaptationEvent>,
    tuning_wall_ms: f64,
}

impl Controller {
    pub fn new(config: EEConfig, sites: Vec<RampSite>, params: ControllerParams) -> Self {
        Self {
            config,
            sites,
            monitor: AccuracyMonitor::new(params.tuner.accuracy_window),
            history: VecDeque::with_capacity(params.tuner.tuning_history),
            period: Vec::with_capacity(params.ramp_period),
            params,
            events: Vec::new(),
            tuning_wall_ms: 0.0,
        }
    }

    pub fn config(&self) -> &EEConfig {
        &self.config
    }

    pub fn events(&self) -> &[AdaptationEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<AdaptationEvent> {
        self.events
    }

    /// Wall-clock time spent inside the tuner and ramp manager.
    pub fn tuning_wall_ms(&self) -> f64 {
        self.tuning_wall_ms
    }

    /// Tunes thresholds once on `records` before any request is served.
    pub fn bootstrap(&mut self, records: &[RequestRecord], profile: &ModelProfile) {
        if records.is_empty() || self.config.is_empty() {
            return;
        }
        self.retune(records, 0.0, Trigger::Bootstrap, profile);
    }

    /// Feeds one released result back into the loop.
    pub fn observe(&mut self, record: &RequestRecord, correct: bool, now_ms: f64, profile: &ModelProfile) {
        if self.history.len() == self.params.tuner.tuning_history {
            self.history.pop_front();
        }
        self.history.push_back(record.clone());
        self.period.push(record.clone());
        self.monitor.push(correct);

        if self.params.tune_thresholds
            && !self.config.is_empty()
            && should_trigger(&self.monitor, self.params.acc_constraint)
        {
            let history: Vec<RequestRecord> = self.history.iter().cloned().collect();
            self.retune(&history, now_ms, Trigger::Accuracy, profile);
        }

        if self.period.len() >= self.params.ramp_period {
            let period = std::mem::take(&mut self.period);
            if self.params.adjust_ramps && !self.config.is_empty() {
                self.adjust_ramps(&period, now_ms, profile);
            }
        }
    }

    fn retune(&mut self, history: &[RequestRecord], now_ms: f64, trigger: Trigger, profile: &ModelProfile) {
        let started = Instant::now();
        let tuned = tune_config(history, &self.config, &self.params.tuner, profile);
        self.tuning_wall_ms += started.elapsed().as_secs_f64() * 1e3;
        let old = self.config.snapshot();
        self.config
            .set_thresholds(&tuned.thresholds)
            .expect("tuned thresholds lie in [0, 1]");
        self.events.push(AdaptationEvent {
            time_ms: now_ms,
            kind: EventKind::ThresholdTune,
            trigger,
            old,
            new: self.config.snapshot(),
            utilities: None,
            action: None,
        });
        self.monitor.clear();
    }

    fn adjust_ramps(&mut self, period: &[RequestRecord], now_ms: f64, profile: &ModelProfile) {
        let started = Instant::now();
        let report = score_utilities(period, &self.config, profile);
        let history: Vec<RequestRecord> = self.history.iter().cloned().collect();
        let params = AdjustParams {
            budget: self.params.budget,
            tuner: self.params.tuner,
            max_ramps: self.params.max_ramps,
        };
        let adj = adjust(&report, &self.config, &self.sites, &history, &params, profile);
        self.tuning_wall_ms += started.elapsed().as_secs_f64() * 1e3;
        if adj.action == AdjustAction::Unchanged {
            return;
        }
        let old = self.config.snapshot();
        let ramp_set_changed = !adj.config.same_sites(&self.config);
        self.config = adj.config;
        self.events.push(AdaptationEvent {
            time_ms: now_ms,
            kind: EventKind::RampAdjust,
            trigger: Trigger::Period,
            old,
            new: self.config.snapshot(),
            utilities: Some(report),
            action: Some(adj.action),
        });
        self.monitor.clear();
        if ramp_set_changed && !self.config.is_empty() {
            self.retune(&history, now_ms, Trigger::RampChange, profile);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::evaluate_record;
    use crate::exit::fixtures::{chain, config, record};

    #[test]
    fn accuracy_drop_triggers_one_tune_and_resets_the_window() {
        let (p, sites) = chain(4, 1.0, 0.05);
        let cfg = config(&sites, &[(1, 0.9)]);
        let params = ControllerParams {
            adjust_ramps: false,
            ..Default::default()
        };
        let mut c = Controller::new(cfg, sites.clone(), params);
        for i in 0..16 {
            // every input leaves at L1 with a wrong label
            let rec = record(i, &sites, &[(0.5, true), (0.5, false), (0.5, true), (0.5, true)]);
            let out = evaluate_record(&rec, c.config(), &p, 1);
            c.observe(&rec, out.correct, i as f64, &p);
        }
        assert_eq!(c.events().len(), 1);
        assert_eq!(c.events()[0].trigger, Trigger::Accuracy);
        // no input may leave at L1 any more: every score there is 0.5
        assert!(c.config().thresholds()[0] <= 0.5);
    }

    #[test]
    fn warm_up_never_triggers() {
        let (p, sites) = chain(4, 1.0, 0.05);
        let mut c = Controller::new(config(&sites, &[(1, 0.9)]), sites.clone(), ControllerParams::default());
        for i in 0..15 {
            let rec = record(i, &sites, &[(0.5, false); 4]);
            c.observe(&rec, false, 0.0, &p);
        }
        assert!(c.events().is_empty());
    }

    #[test]
    fn period_end_runs_adjustment() {
        let (p, sites) = chain(10, 1.0, 0.01);
        let params = ControllerParams {
            ramp_period: 32,
            ..Default::default()
        };
        let mut c = Controller::new(config(&sites, &[(2, 0.0)]), sites.clone(), params);
        for i in 0..32 {
            let rec = record(i, &sites, &[(0.3, true); 10]);
            let out = evaluate_record(&rec, c.config(), &p, 1);
            c.observe(&rec, out.correct, i as f64, &p);
        }
        let adjust = c.events().iter().find(|e| e.kind == EventKind::RampAdjust).expect("adjust event");
        assert_eq!(adjust.action, Some(AdjustAction::Retuned));
        assert!(c.config().thresholds()[0] > 0.3);
    }
}
