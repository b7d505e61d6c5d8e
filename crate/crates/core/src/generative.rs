//! Token-level simulation of early exits in autoregressive decoding.
//!
//! A token that exits at a ramp is released right away, but the layers after
//! that ramp still have to run for it, since later tokens attend to its
//! hidden states. That remaining work is parked at the ramp and carried by
//! the next token that runs past the ramp, which executes the rest of the
//! model as a small batch. A ramp holding `flush_cap` parked tokens flushes
//! them on its own before the next token starts, and whatever is still
//! parked when a sequence ends is flushed then.
//!
//! Every active ramp keeps its own queue; a token running past several
//! ramps carries, for each segment of the model, every token parked at or
//! before that segment.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{AdaptationEvent, Controller, ControllerParams};
use crate::error::{Error, Result};
use crate::exit::{evaluate_record, ConfigSnapshot, EEConfig};
use crate::graph::{find_feasible_sites, ModelProfile, ProfiledRampCosts};
use crate::stats::{summarize, PercentileSummary};
use crate::trace::{parse_jsonl, required_layers, to_jsonl, validate_signals, RequestRecord, Signal};

pub const TPT_SCHEMA: &str = "exitsim.tpt-report/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub seq: u64,
    pub idx: u32,
    pub ramps: BTreeMap<String, Signal>,
    #[serde(rename = "final")]
    pub final_token: i64,
}

impl TokenRecord {
    fn as_request(&self, id: u64, at_ms: f64) -> RequestRecord {
        RequestRecord {
            id,
            arrival_ms: at_ms,
            ramps: self.ramps.clone(),
            final_label: self.final_token,
        }
    }
}

/// Token records grouped into sequences, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub sequences: Vec<Vec<TokenRecord>>,
}

impl TokenTrace {
    /// Groups and validates `tokens`: indices must run 0.. without gaps or
    /// repeats within each sequence, and signals must cover every feasible
    /// site of `profile`.
    pub fn new(tokens: Vec<TokenRecord>, profile: &ModelProfile) -> Result<Self> {
        let required = required_layers(profile);
        let mut order: Vec<u64> = Vec::new();
        let mut groups: BTreeMap<u64, Vec<TokenRecord>> = BTreeMap::new();
        for t in tokens {
            validate_signals(t.seq, &t.ramps, &required, profile)?;
            let g = groups.entry(t.seq).or_insert_with(|| {
                order.push(t.seq);
                Vec::new()
            });
            g.push(t);
        }
        let mut sequences = Vec::with_capacity(order.len());
        for seq in order {
            let mut g = groups.remove(&seq).expect("grouped above");
            g.sort_by_key(|t| t.idx);
            for (i, t) in g.iter().enumerate() {
                if t.idx as usize != i {
                    return Err(Error::validation(seq, "idx", format!("token indices are not contiguous at {}", t.idx)));
                }
            }
            sequences.push(g);
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.sequences.iter().flatten()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.tokens().collect::<Vec<_>>())
    }
}

pub fn load_token_trace(path: &Path, profile: &ModelProfile) -> Result<TokenTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TokenTrace::new(parse_jsonl(&text, &path.display().to_string())?, profile)
}

/// Converts a request trace into a token trace, cutting it into sequences
/// of `seq_len` consecutive records.
pub fn tokens_from_requests(records: &[RequestRecord], seq_len: usize) -> Vec<TokenRecord> {
    let seq_len = seq_len.max(1);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| TokenRecord {
            seq: (i / seq_len) as u64,
            idx: (i % seq_len) as u32,
            ramps: r.ramps.clone(),
            final_token: r.final_label,
        })
        .collect()
}

fn default_penalty() -> BTreeMap<u32, f64> {
    (1..=4).map(|b| (b, 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub flush_cap: usize,
    /// Latency multiplier for running a model segment on a batch of the
    /// given size. Sizes between entries use the entry below; sizes past
    /// the table use its last entry. A single token always runs at 1.0.
    pub batch_penalty: BTreeMap<u32, f64>,
    pub adaptation_enabled: bool,
    pub controller: ControllerParams,
    /// Leading tokens used to tune the initial thresholds.
    pub bootstrap: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            flush_cap: 4,
            batch_penalty: default_penalty(),
            adaptation_enabled: true,
            controller: ControllerParams {
                max_ramps: Some(1),
                ..ControllerParams::default()
            },
            bootstrap: 128,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.flush_cap == 0 {
            return Err(Error::param("flush_cap", "must be at least 1"));
        }
        if self.batch_penalty.contains_key(&0) {
            return Err(Error::param("batch_penalty", "batch size 0 is meaningless"));
        }
        if self.batch_penalty.values().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::param("batch_penalty", "multipliers must be positive"));
        }
        self.controller.tuner.validate()
    }

    pub fn penalty(&self, batch: usize) -> f64 {
        if batch <= 1 {
            return 1.0;
        }
        let b = u32::try_from(batch).unwrap_or(u32::MAX);
        self.batch_penalty
            .range(..=b)
            .next_back()
            .or_else(|| self.batch_penalty.iter().next())
            .map_or(1.0, |(_, &m)| m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushTrigger {
    /// Parked tokens rode along with a token that did not exit.
    Carried,
    /// The ramp reached its flush cap.
    Cap,
    /// The sequence ended.
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferredEvent {
    pub seq: u64,
    pub idx: u32,
    pub ramp: String,
    pub tokens: usize,
    pub penalty: f64,
    pub trigger: FlushTrigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub seq: u64,
    pub idx: u32,
    /// Time from the previous token's release (or sequence start) to this
    /// token's release.
    pub tpt_ms: f64,
    pub exit_site: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub seq: u64,
    pub tokens: usize,
    pub mean_tpt_ms: f64,
    /// Until the sequence's last parked work has run.
    pub total_ms: f64,
    pub vanilla_total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TptSummary {
    pub sequences: usize,
    pub tokens: usize,
    pub exit_rate: f64,
    pub accuracy: f64,
    pub vanilla_tpt_ms: f64,
    pub tpt_ms: PercentileSummary,
    /// Model work executed, counting every layer once per token without
    /// batch penalties.
    pub layer_work_ms: f64,
    pub vanilla_work_ms: f64,
    pub feedback_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TptReport {
    pub schema: String,
    pub params: GenParams,
    pub summary: TptSummary,
    pub initial_config: ConfigSnapshot,
    pub final_config: ConfigSnapshot,
    pub sequences: Vec<SequenceRow>,
    pub tokens: Vec<TokenRow>,
    pub deferred: Vec<DeferredEvent>,
    pub events: Vec<AdaptationEvent>,
    #[serde(skip)]
    pub tuning_wall_ms: f64,
}

impl TptReport {
    pub fn latencies(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.tpt_ms).collect()
    }
}

/// Exit decision of one token, as needed for feedback truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenOutcome {
    pub idx: u32,
    pub exited: bool,
    pub correct: bool,
    /// Parked work was settled after this token, closing its
    /// parallel-decoding instance.
    pub closes_instance: bool,
}

/// Indices of the outcomes usable as tuning feedback. Within each
/// parallel-decoding instance only the tokens up to and including the first
/// wrong one are kept: everything decoded after it was conditioned on a
/// token the original model would not have produced.
pub fn token_feedback(outcomes: &[TokenOutcome]) -> Vec<usize> {
    let mut keep = Vec::with_capacity(outcomes.len());
    let mut poisoned = false;
    for (i, o) in outcomes.iter().enumerate() {
        if !poisoned {
            keep.push(i);
            poisoned = !o.correct;
        }
        if o.closes_instance {
            poisoned = false;
        }
    }
    keep
}

struct SeqState {
    parked: Vec<usize>,
}

/// Per-active-ramp layer geometry at batch size 1.
struct Geometry {
    total: f64,
    prefix: Vec<f64>,
    /// Cumulative ramp overhead through ramp `i`.
    ramp_cum: Vec<f64>,
    /// Segment after ramp `i`, up to the next ramp or the model end.
    segment: Vec<f64>,
}

impl Geometry {
    fn new(config: &EEConfig, profile: &ModelProfile) -> Self {
        let total = profile.total_latency(1);
        let prefix: Vec<f64> = config.ramps().iter().map(|r| r.site.prefix_ms(1)).collect();
        let mut ramp_cum = Vec::with_capacity(prefix.len());
        let mut acc = 0.0;
        for r in config.ramps() {
            acc += r.site.ramp_ms(1);
            ramp_cum.push(acc);
        }
        let segment = (0..prefix.len())
            .map(|i| prefix.get(i + 1).copied().unwrap_or(total) - prefix[i])
            .collect();
        Self {
            total,
            prefix,
            ramp_cum,
            segment,
        }
    }

    fn all_ramps_ms(&self) -> f64 {
        self.ramp_cum.last().copied().unwrap_or(0.0)
    }
}

/// Simulates decoding every sequence of `trace` one after another, starting
/// from `config`. Configuration changes from adaptation take effect at
/// sequence boundaries, so parked work never outlives its ramp.
pub fn run_generative(trace: &TokenTrace, profile: &ModelProfile, config: &EEConfig, params: &GenParams) -> Result<TptReport> {
    params.validate()?;
    let sites = find_feasible_sites(profile, &ProfiledRampCosts)?;
    let controller_params = ControllerParams {
        tune_thresholds: params.adaptation_enabled && params.controller.tune_thresholds,
        adjust_ramps: params.adaptation_enabled && params.controller.adjust_ramps,
        ..params.controller
    };
    let mut controller = Controller::new(config.clone(), sites, controller_params);
    let mut next_id = 0u64;
    if params.bootstrap > 0 {
        let boot: Vec<RequestRecord> = trace
            .tokens()
            .take(params.bootstrap)
            .map(|t| {
                next_id += 1;
                t.as_request(next_id - 1, 0.0)
            })
            .collect();
        controller.bootstrap(&boot, profile);
    }
    let initial_config = controller.config().snapshot();

    let vanilla_tpt = profile.total_latency(1);
    let mut token_rows = Vec::with_capacity(trace.len());
    let mut seq_rows = Vec::with_capacity(trace.sequences.len());
    let mut deferred = Vec::new();
    let mut layer_work = 0.0;
    let mut feedback_tokens = 0;
    let mut clock_base = 0.0;

    for seq in &trace.sequences {
        let config = controller.config().clone();
        let geo = Geometry::new(&config, profile);
        let mut state = SeqState {
            parked: vec![0; config.len()],
        };
        let mut clock = 0.0;
        let mut last_release = 0.0;
        let mut outcomes = Vec::with_capacity(seq.len());
        let seq_id = seq.first().map_or(0, |t| t.seq);

        for tok in seq {
            let req = tok.as_request(0, 0.0);
            let out = evaluate_record(&req, &config, profile, 1);
            let mut closes = false;
            let release = match out.exit_index {
                Some(j) => {
                    let release = clock + geo.prefix[j] + geo.ramp_cum[j];
                    clock = release;
                    layer_work += geo.prefix[j];
                    state.parked[j] += 1;
                    if state.parked[j] >= params.flush_cap {
                        let c = state.parked[j];
                        let m = params.penalty(c);
                        clock += m * (geo.total - geo.prefix[j]);
                        layer_work += c as f64 * (geo.total - geo.prefix[j]);
                        deferred.push(DeferredEvent {
                            seq: tok.seq,
                            idx: tok.idx,
                            ramp: config.ramps()[j].site.layer.clone(),
                            tokens: c,
                            penalty: m,
                            trigger: FlushTrigger::Cap,
                        });
                        state.parked[j] = 0;
                        closes = true;
                    }
                    release
                }
                None => {
                    // segments after each ramp carry every token parked at or before it
                    let mut extra = 0.0;
                    let mut carried = 0;
                    for i in 0..config.len() {
                        carried += state.parked[i];
                        if carried > 0 {
                            extra += (params.penalty(1 + carried) - 1.0) * geo.segment[i];
                            layer_work += carried as f64 * geo.segment[i];
                        }
                    }
                    for (i, n) in state.parked.iter_mut().enumerate() {
                        if *n > 0 {
                            deferred.push(DeferredEvent {
                                seq: tok.seq,
                                idx: tok.idx,
                                ramp: config.ramps()[i].site.layer.clone(),
                                tokens: *n,
                                penalty: params.penalty(1 + *n),
                                trigger: FlushTrigger::Carried,
                            });
                            *n = 0;
                        }
                    }
                    layer_work += geo.total;
                    closes = true;
                    let release = clock + geo.total + geo.all_ramps_ms() + extra;
                    clock = release;
                    release
                }
            };
            token_rows.push(TokenRow {
                seq: tok.seq,
                idx: tok.idx,
                tpt_ms: release - last_release,
                exit_site: out.exit_site,
                correct: out.correct,
            });
            last_release = release;
            outcomes.push(TokenOutcome {
                idx: tok.idx,
                exited: out.exit_index.is_some(),
                correct: out.correct,
                closes_instance: closes,
            });
        }

        // settle whatever is still parked
        let mut carried = 0;
        let mut tail = 0.0;
        for i in 0..config.len() {
            carried += state.parked[i];
            if carried > 0 {
                tail += params.penalty(carried) * geo.segment[i];
                layer_work += carried as f64 * geo.segment[i];
            }
        }
        for (i, &n) in state.parked.iter().enumerate() {
            if n > 0 {
                deferred.push(DeferredEvent {
                    seq: seq_id,
                    idx: seq.last().map_or(0, |t| t.idx),
                    ramp: config.ramps()[i].site.layer.clone(),
                    tokens: n,
                    penalty: params.penalty(n),
                    trigger: FlushTrigger::End,
                });
            }
        }
        clock += tail;

        seq_rows.push(SequenceRow {
            seq: seq_id,
            tokens: seq.len(),
            mean_tpt_ms: if seq.is_empty() { 0.0 } else { last_release / seq.len() as f64 },
            total_ms: clock,
            vanilla_total_ms: vanilla_tpt * seq.len() as f64,
        });

        for k in token_feedback(&outcomes) {
            let tok = &seq[k];
            let rec = tok.as_request(next_id, clock_base);
            next_id += 1;
            controller.observe(&rec, outcomes[k].correct, clock_base, profile);
            feedback_tokens += 1;
        }
        clock_base += clock;
    }

    let tokens = token_rows.len();
    let exits = token_rows.iter().filter(|t| t.exit_site.is_some()).count();
    let correct = token_rows.iter().filter(|t| t.correct).count();
    let frac = |k: usize| if tokens == 0 { 0.0 } else { k as f64 / tokens as f64 };
    let summary = TptSummary {
        sequences: seq_rows.len(),
        tokens,
        exit_rate: frac(exits),
        accuracy: if tokens == 0 { 1.0 } else { frac(correct) },
        vanilla_tpt_ms: vanilla_tpt,
        tpt_ms: summarize(&token_rows.iter().map(|t| t.tpt_ms).collect::<Vec<_>>()),
        layer_work_ms: layer_work,
        vanilla_work_ms: vanilla_tpt * tokens as f64,
        feedback_tokens,
    };
    let tuning_wall_ms = controller.tuning_wall_ms();
    let final_config = controller.config().snapshot();
    Ok(TptReport {
        schema: TPT_SCHEMA.to_string(),
        params: params.clone(),
        summary,
        initial_config,
        final_config,
        sequences: seq_rows,
        tokens: token_rows,
        deferred,
        events: controller.into_events(),
        tuning_wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::fixtures::{chain, config};
    use crate::graph::RampSite;

    fn tokens(sites: &[RampSite], seq: u64, exits: &[bool], at: usize) -> Vec<TokenRecord> {
        exits
            .iter()
            .enumerate()
            .map(|(i, &e)| TokenRecord {
                seq,
                idx: i as u32,
                ramps: sites
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let err = if e && j == at { 0.1 } else { 0.9 };
                        (s.layer.clone(), Signal { err, label: 7 })
                    })
                    .collect(),
                final_token: 7,
            })
            .collect()
    }

    fn fixed(flush_cap: usize, penalty: &[(u32, f64)]) -> GenParams {
        GenParams {
            flush_cap,
            batch_penalty: penalty.iter().copied().collect(),
            adaptation_enabled: false,
            bootstrap: 0,
            ..Default::default()
        }
    }

    #[test]
    fn no_exit_gives_vanilla_tpt() {
        let (p, sites) = chain(8, 1.25, 0.0);
        let cfg = config(&sites, &[(4, 0.0)]);
        let trace = TokenTrace::new(tokens(&sites, 0, &[true; 10], 4), &p).unwrap();
        let rep = run_generative(&trace, &p, &cfg, &fixed(4, &[(2, 1.3)])).unwrap();
        assert!(rep.tokens.iter().all(|t| t.tpt_ms == p.total_latency(1)));
        assert!(rep.deferred.is_empty());
    }

    #[test]
    fn unit_penalty_alternation() {
        // 9 layers of 1 ms; ramp after L4: prefix 5, suffix 4
        let (p, sites) = chain(8, 1.0, 0.0);
        let cfg = config(&sites, &[(4, 0.5)]);
        let exits: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        let trace = TokenTrace::new(tokens(&sites, 0, &exits, 4), &p).unwrap();
        let rep = run_generative(&trace, &p, &cfg, &fixed(4, &[(2, 1.0)])).unwrap();
        for t in &rep.tokens {
            let want = if t.idx % 2 == 0 { 5.0 } else { 9.0 };
            assert_eq!(t.tpt_ms, want, "token {}", t.idx);
        }
        assert_eq!(rep.summary.layer_work_ms, rep.summary.vanilla_work_ms);
    }

    #[test]
    fn mild_penalty_worked_example() {
        let (p, sites) = chain(8, 1.0, 0.0);
        let cfg = config(&sites, &[(4, 0.5)]);
        let trace = TokenTrace::new(tokens(&sites, 0, &[true, false], 4), &p).unwrap();
        let rep = run_generative(&trace, &p, &cfg, &fixed(4, &[(2, 1.1)])).unwrap();
        assert_eq!(rep.tokens[0].tpt_ms, 5.0);
        assert!((rep.tokens[1].tpt_ms - (5.0 + 1.1 * 4.0)).abs() < 1e-12);
        assert_eq!(rep.deferred.len(), 1);
        assert_eq!(rep.deferred[0].trigger, FlushTrigger::Carried);
    }

    #[test]
    fn flush_cap_bounds_parked_tokens() {
        let (p, sites) = chain(8, 1.0, 0.0);
        let cfg = config(&sites, &[(4, 0.5)]);
        let trace = TokenTrace::new(tokens(&sites, 0, &[true; 7], 4), &p).unwrap();
        let rep = run_generative(&trace, &p, &cfg, &fixed(3, &[(2, 1.0)])).unwrap();
        let caps: Vec<_> = rep.deferred.iter().filter(|e| e.trigger == FlushTrigger::Cap).collect();
        assert_eq!(caps.len(), 2);
        assert!(rep.deferred.iter().all(|e| e.tokens <= 3));
        // the seventh token is flushed at sequence end
        assert_eq!(rep.deferred.last().unwrap().trigger, FlushTrigger::End);
        assert_eq!(rep.deferred.last().unwrap().tokens, 1);
        // the token after a cap flush waits for it
        assert_eq!(rep.tokens[3].tpt_ms, 4.0 + 5.0);
        assert_eq!(rep.summary.layer_work_ms, rep.summary.vanilla_work_ms);
    }

    #[test]
    fn gaps_in_indices_are_rejected() {
        let (p, sites) = chain(4, 1.0, 0.0);
        let mut toks = tokens(&sites, 3, &[false; 3], 0);
        toks[2].idx = 5;
        assert!(matches!(TokenTrace::new(toks, &p), Err(Error::Validation { id: 3, .. })));
    }

    fn outcome(idx: u32, correct: bool, closes: bool) -> TokenOutcome {
        TokenOutcome {
            idx,
            exited: !closes,
            correct,
            closes_instance: closes,
        }
    }

    #[test]
    fn feedback_keeps_all_agreeing_tokens() {
        let o: Vec<_> = (0..6).map(|i| outcome(i, true, i % 3 == 2)).collect();
        assert_eq!(token_feedback(&o), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn feedback_stops_at_first_deviation() {
        let mut o: Vec<_> = (0..5).map(|i| outcome(i, true, false)).collect();
        o[0].correct = false;
        assert_eq!(token_feedback(&o), vec![0]);
    }

    #[test]
    fn feedback_truncates_within_the_instance() {
        let mut o: Vec<_> = (0..8).map(|i| outcome(i, true, false)).collect();
        o[3].correct = false;
        o[5].correct = false;
        assert_eq!(token_feedback(&o), vec![0, 1, 2, 3]);
        // a later instance starts clean
        let mut two = o.clone();
        two[4].closes_instance = true;
        assert_eq!(token_feedback(&two), vec![0, 1, 2, 3, 5]);
    }

    #[test]
    fn penalty_lookup() {
        let p = fixed(4, &[(2, 1.1), (4, 1.3)]);
        assert_eq!(p.penalty(1), 1.0);
        assert_eq!(p.penalty(2), 1.1);
        assert_eq!(p.penalty(3), 1.1);
        assert_eq!(p.penalty(9), 1.3);
    }
}
