//! Exit decisions, accuracy, and latency savings for a configuration,
//! computed purely from recorded ramp signals.
//!
//! An input exits at the earliest active ramp whose score is strictly below
//! that ramp's threshold, so a threshold of 0 never exits. The score is the
//! ramp's own error score, or with `score_window = k > 1` the arithmetic mean
//! of the error scores seen at the last `k` active ramps up to and including
//! this one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelProfile, RampSite};
use crate::trace::RequestRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRamp {
    pub site: RampSite,
    pub threshold: f64,
}

/// The active ramp set with per-ramp thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct EEConfig {
    ramps: Vec<ActiveRamp>,
    score_window: usize,
}

/// Compact, serializable view of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub ramps: Vec<RampSetting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampSetting {
    pub layer: String,
    pub threshold: f64,
}

impl EEConfig {
    pub fn new(ramps: Vec<ActiveRamp>) -> Result<Self> {
        for w in ramps.windows(2) {
            if w[0].site.position >= w[1].site.position {
                return Err(Error::param("config", "ramp sites must be strictly increasing"));
            }
        }
        for r in &ramps {
            check_threshold(r.threshold)?;
        }
        Ok(Self { ramps, score_window: 1 })
    }

    pub fn empty() -> Self {
        Self {
            ramps: Vec::new(),
            score_window: 1,
        }
    }

    /// Every site with threshold 0.
    pub fn at_zero(sites: &[RampSite]) -> Result<Self> {
        Self::new(
            sites
                .iter()
                .map(|s| ActiveRamp {
                    site: s.clone(),
                    threshold: 0.0,
                })
                .collect(),
        )
    }

    pub fn with_score_window(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("score_window", "must be at least 1"));
        }
        self.score_window = k;
        Ok(self)
    }

    pub fn score_window(&self) -> usize {
        self.score_window
    }

    pub fn ramps(&self) -> &[ActiveRamp] {
        &self.ramps
    }

    pub fn len(&self) -> usize {
        self.ramps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ramps.is_empty()
    }

    pub fn sites(&self) -> Vec<RampSite> {
        self.ramps.iter().map(|r| r.site.clone()).collect()
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.ramps.iter().map(|r| r.threshold).collect()
    }

    pub fn set_thresholds(&mut self, thresholds: &[f64]) -> Result<()> {
        if thresholds.len() != self.ramps.len() {
            return Err(Error::param("thresholds", "length differs from ramp count"));
        }
        for &t in thresholds {
            check_threshold(t)?;
        }
        for (r, &t) in self.ramps.iter_mut().zip(thresholds) {
            r.threshold = t;
        }
        Ok(())
    }

    pub fn with_thresholds(mut self, thresholds: &[f64]) -> Result<Self> {
        self.set_thresholds(thresholds)?;
        Ok(self)
    }

    /// Total ramp overhead paid by an input that passes every active ramp.
    pub fn ramp_cost_ms(&self, batch: u32) -> f64 {
        self.ramps.iter().map(|r| r.site.ramp_ms(batch)).sum()
    }

    pub fn contains_position(&self, position: usize) -> bool {
        self.ramps.iter().any(|r| r.site.position == position)
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            ramps: self
                .ramps
                .iter()
                .map(|r| RampSetting {
                    layer: r.site.layer.clone(),
                    threshold: r.threshold,
                })
                .collect(),
        }
    }

    /// Same ramp set (positions), ignoring thresholds.
    pub fn same_sites(&self, other: &EEConfig) -> bool {
        self.ramps.len() == other.ramps.len()
            && self
                .ramps
                .iter()
                .zip(&other.ramps)
                .all(|(a, b)| a.site.position == b.site.position)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::param("threshold", format!("{t} is outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitOutcome {
    /// Layer of the ramp the result left from, `None` when it ran to the end.
    pub exit_site: Option<String>,
    /// Index of that ramp within the configuration.
    #[serde(skip)]
    pub exit_index: Option<usize>,
    pub released_label: i64,
    pub correct: bool,
    /// Model time until the result is released; excludes queuing.
    pub serve_ms: f64,
}

/// Effective exit scores at each configured ramp for one record. Missing
/// signals score `+inf` and never exit.
fn effective_scores(record: &RequestRecord, config: &EEConfig) -> Vec<f64> {
    let raw: Vec<f64> = config
        .ramps
        .iter()
        .map(|r| record.signal(&r.site.layer).map_or(f64::INFINITY, |s| s.err))
        .collect();
    smooth_scores(&raw, config.score_window)
}

fn smooth_scores(raw: &[f64], k: usize) -> Vec<f64> {
    if k <= 1 {
        return raw.to_vec();
    }
    (0..raw.len())
        .map(|j| {
            let lo = (j + 1).saturating_sub(k);
            let span = &raw[lo..=j];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect()
}

/// Model time until release if an input exits at ramp `j`: the prefix through
/// the ramp's layer plus every active ramp up to and including `j`.
fn exit_serve_ms(config: &EEConfig, j: usize, batch: u32) -> f64 {
    let overhead: f64 = config.ramps[..=j].iter().map(|r| r.site.ramp_ms(batch)).sum();
    config.ramps[j].site.prefix_ms(batch) + overhead
}

fn no_exit_serve_ms(config: &EEConfig, profile: &ModelProfile, batch: u32) -> f64 {
    profile.total_latency(batch) + config.ramp_cost_ms(batch)
}

pub fn evaluate_record(record: &RequestRecord, config: &EEConfig, profile: &ModelProfile, batch: u32) -> ExitOutcome {
    let scores = effective_scores(record, config);
    let exit = config
        .ramps
        .iter()
        .zip(&scores)
        .position(|(r, &s)| s < r.threshold);
    match exit {
        Some(j) => {
            let layer = &config.ramps[j].site.layer;
            let label = record.signal(layer).map_or(record.final_label, |s| s.label);
            ExitOutcome {
                exit_site: Some(layer.clone()),
                exit_index: Some(j),
                released_label: label,
                correct: label == record.final_label,
                serve_ms: exit_serve_ms(config, j, batch),
            }
        }
        None => ExitOutcome {
            exit_site: None,
            exit_index: None,
            released_label: record.final_label,
            correct: true,
            serve_ms: no_exit_serve_ms(config, profile, batch),
        },
    }
}

/// Aggregate exit behaviour of a configuration over a window of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEval {
    pub accuracy: f64,
    pub mean_savings_ms: f64,
    pub exit_rates: BTreeMap<String, f64>,
}

/// Accuracy, mean savings against vanilla serving, and per-ramp exit rates,
/// all at batch size 1.
pub fn evaluate_window(records: &[RequestRecord], config: &EEConfig, profile: &ModelProfile) -> Result<WindowEval> {
    evaluate_window_at(records, config, profile, 1)
}

pub fn evaluate_window_at(
    records: &[RequestRecord],
    config: &EEConfig,
    profile: &ModelProfile,
    batch: u32,
) -> Result<WindowEval> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation window"));
    }
    let window = CompiledWindow::new(records, config, profile, batch);
    let stats = window.evaluate(&config.thresholds());
    let n = records.len() as f64;
    Ok(WindowEval {
        accuracy: stats.correct as f64 / n,
        mean_savings_ms: stats.savings_ms / n,
        exit_rates: config
            .ramps
            .iter()
            .zip(&stats.exits)
            .map(|(r, &c)| (r.site.layer.clone(), c as f64 / n))
            .collect(),
    })
}

/// Earliest site whose label matches the model's, ignoring thresholds and
/// ramp overheads.
pub fn optimal_exit<'a>(record: &RequestRecord, sites: &'a [RampSite]) -> Option<&'a RampSite> {
    sites.iter().find(|s| {
        record
            .signal(&s.layer)
            .is_some_and(|sig| sig.label == record.final_label)
    })
}

/// Aggregates produced by [`CompiledWindow::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub correct: usize,
    /// Sum over records of vanilla latency minus serve time.
    pub savings_ms: f64,
    /// Exit counts per configured ramp.
    pub exits: Vec<usize>,
}

/// A window of records pre-resolved against a fixed ramp set, so that
/// threshold assignments can be evaluated without map lookups.
#[derive(Debug, Clone)]
pub struct CompiledWindow {
    ramps: usize,
    records: usize,
    scores: Vec<f64>,
    agrees: Vec<bool>,
    exit_savings: Vec<f64>,
    no_exit_savings: f64,
}

impl CompiledWindow {
    pub fn new(records: &[RequestRecord], config: &EEConfig, profile: &ModelProfile, batch: u32) -> Self {
        let ramps = config.len();
        let mut scores = Vec::with_capacity(ramps * records.len());
        let mut agrees = Vec::with_capacity(ramps * records.len());
        for r in records {
            scores.extend(effective_scores(r, config));
            agrees.extend(config.ramps.iter().map(|a| {
                r.signal(&a.site.layer)
                    .is_some_and(|s| s.label == r.final_label)
            }));
        }
        let vanilla = profile.total_latency(batch);
        Self {
            ramps,
            records: records.len(),
            scores,
            agrees,
            exit_savings: (0..ramps).map(|j| vanilla - exit_serve_ms(config, j, batch)).collect(),
            no_exit_savings: vanilla - no_exit_serve_ms(config, profile, batch),
        }
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    pub fn ramps(&self) -> usize {
        self.ramps
    }

    #[inline]
    pub fn exit_index(&self, record: usize, thresholds: &[f64]) -> Option<usize> {
        let row = &self.scores[record * self.ramps..(record + 1) * self.ramps];
        row.iter().zip(thresholds).position(|(&s, &t)| s < t)
    }

    /// Error count and summed savings only; the hot path of the searches.
    #[inline]
    pub fn errors_and_savings(&self, thresholds: &[f64]) -> (usize, f64) {
        let mut errors = 0;
        let mut savings = 0.0;
        for i in 0..self.records {
            match self.exit_index(i, thresholds) {
                Some(j) => {
                    if !self.agrees[i * self.ramps + j] {
                        errors += 1;
                    }
                    savings += self.exit_savings[j];
                }
                None => savings += self.no_exit_savings,
            }
        }
        (errors, savings)
    }

    pub fn evaluate(&self, thresholds: &[f64]) -> WindowStats {
        let mut exits = vec![0; self.ramps];
        let mut correct = 0;
        let mut savings_ms = 0.0;
        for i in 0..self.records {
            match self.exit_index(i, thresholds) {
                Some(j) => {
                    exits[j] += 1;
                    if self.agrees[i * self.ramps + j] {
                        correct += 1;
                    }
                    savings_ms += self.exit_savings[j];
                }
                None => {
                    correct += 1;
                    savings_ms += self.no_exit_savings;
                }
            }
        }
        WindowStats {
            correct,
            savings_ms,
            exits,
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::graph::{find_feasible_sites, LatencyCurve, ModelProfile};
    use crate::trace::Signal;

    /// Chain `L0 -> ... -> L{n}` where the last node is the output; every
    /// layer costs `layer_ms` and every ramp `ramp_ms`.
    pub fn chain(n_sites: usize, layer_ms: f64, ramp_ms: f64) -> (ModelProfile, Vec<RampSite>) {
        let names: Vec<String> = (0..=n_sites).map(|i| format!("L{i}")).collect();
        let out = names[n_sites].clone();
        let profile = ModelProfile::new(
            "chain",
            names.clone(),
            names.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect(),
            vec![LatencyCurve::constant(layer_ms); n_sites + 1],
            vec![Some(LatencyCurve::constant(ramp_ms)); n_sites + 1],
            &out,
        )
        .unwrap();
        let sites = find_feasible_sites(&profile, &crate::graph::ProfiledRampCosts).unwrap();
        (profile, sites)
    }

    /// Record with `(err, agrees)` per site, in site order.
    pub fn record(id: u64, sites: &[RampSite], signals: &[(f64, bool)]) -> RequestRecord {
        RequestRecord {
            id,
            arrival_ms: 0.0,
            ramps: sites
                .iter()
                .zip(signals)
                .map(|(s, &(err, ok))| (s.layer.clone(), Signal { err, label: if ok { 1 } else { 2 } }))
                .collect(),
            final_label: 1,
        }
    }

    pub fn config(sites: &[RampSite], picks: &[(usize, f64)]) -> EEConfig {
        EEConfig::new(
            picks
                .iter()
                .map(|&(i, t)| ActiveRamp {
                    site: sites[i].clone(),
                    threshold: t,
                })
                .collect(),
        )
        .unwrap()
    }
}
