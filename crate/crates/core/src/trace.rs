//! Workload traces: per-request ramp signals recorded once, replayed against
//! any exit configuration without re-running the model.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::graph::{feasible_positions, ModelProfile};

/// A ramp's top prediction for one input and the error score attached to it
/// (lower is more confident).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub err: f64,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub ramps: BTreeMap<String, Signal>,
    #[serde(rename = "final")]
    pub final_label: i64,
}

impl RequestRecord {
    pub fn signal(&self, layer: &str) -> Option<&Signal> {
        self.ramps.get(layer)
    }
}

/// Arrival-ordered request records bound to a model profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub records: Vec<RequestRecord>,
    pub profile_ref: String,
}

impl Workload {
    /// Validates `records` against `profile` and wraps them.
    pub fn new(records: Vec<RequestRecord>, profile: &ModelProfile) -> Result<Self> {
        validate_records(&records, profile)?;
        Ok(Self {
            records,
            profile_ref: profile.name().to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Canonical JSON Lines text: one record per line, keys in schema order,
    /// ramp maps sorted by layer id.
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        let line = serde_json::to_string(item).expect("trace records serialize");
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Parses JSON Lines, skipping blank lines.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                source: e,
            })
        })
        .collect()
}

pub fn load_workload(path: &Path, profile: &ModelProfile) -> Result<Workload> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_jsonl(&text, &path.display().to_string())?;
    Workload::new(records, profile)
}

/// Checks one record's ramp signals against the profile's feasible sites.
pub(crate) fn validate_signals(
    id: u64,
    ramps: &BTreeMap<String, Signal>,
    required: &[&str],
    profile: &ModelProfile,
) -> Result<()> {
    for layer in required {
        if !ramps.contains_key(*layer) {
            return Err(Error::validation(id, format!("ramps.{layer}"), "missing signal for feasible site"));
        }
    }
    for (layer, sig) in ramps {
        if profile.index_of(layer).is_none() {
            return Err(Error::validation(id, format!("ramps.{layer}"), "unknown layer"));
        }
        if !(0.0..=1.0).contains(&sig.err) {
            return Err(Error::validation(
                id,
                format!("ramps.{layer}.err"),
                format!("error score {} is outside [0, 1]", sig.err),
            ));
        }
    }
    Ok(())
}

pub(crate) fn required_layers(profile: &ModelProfile) -> Vec<&str> {
    feasible_positions(profile).into_iter().map(|v| profile.node(v)).collect()
}

pub fn validate_records(records: &[RequestRecord], profile: &ModelProfile) -> Result<()> {
    let required = required_layers(profile);
    let mut ids = HashSet::with_capacity(records.len());
    let mut last_arrival = f64::NEG_INFINITY;
    for r in records {
        if !ids.insert(r.id) {
            return Err(Error::validation(r.id, "id", "duplicate id"));
        }
        if !r.arrival_ms.is_finite() || r.arrival_ms < 0.0 {
            return Err(Error::validation(r.id, "arrival_ms", "must be a non-negative number"));
        }
        if r.arrival_ms < last_arrival {
            return Err(Error::validation(r.id, "arrival_ms", "arrivals are not non-decreasing"));
        }
        last_arrival = r.arrival_ms;
        validate_signals(r.id, &r.ramps, &required, profile)?;
    }
    Ok(())
}

/// Switches the agreement curve partway through a synthesized trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub at: usize,
    pub agreement: BTreeMap<String, f64>,
}

/// Parameters of the synthetic workload generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    /// AR(1) coefficient of the latent difficulty process; 0 gives i.i.d.
    /// inputs, values near 1 give long runs of similar inputs.
    pub continuity: f64,
    /// Probability that each feasible site's ramp agrees with the model.
    pub agreement: BTreeMap<String, f64>,
    pub seed: u64,
    /// Mean of the exponential inter-arrival gap; 0 puts every arrival at t=0.
    pub mean_interarrival_ms: f64,
    pub classes: u32,
    /// Standard deviation of per-ramp noise on the error score.
    pub score_noise: f64,
    /// Extra error score reported by ramps that disagree with the model.
    #[serde(default)]
    pub separation: f64,
    pub drift: Option<Drift>,
}

impl SynthParams {
    pub fn new(n: usize, continuity: f64, agreement: BTreeMap<String, f64>, seed: u64) -> Self {
        Self {
            n,
            continuity,
            agreement,
            seed,
            mean_interarrival_ms: 0.0,
            classes: 10,
            score_noise: 0.05,
            separation: 0.1,
            drift: None,
        }
    }
}

/// Output of [`synthesize_detailed`]: the workload plus the latent
/// per-request difficulty in [0, 1].
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub workload: Workload,
    pub difficulty: Vec<f64>,
}

/// Agreement curve rising linearly from `lo` at the first feasible site to
/// `hi` at the last.
pub fn linear_agreement(profile: &ModelProfile, lo: f64, hi: f64) -> BTreeMap<String, f64> {
    let layers = required_layers(profile);
    let n = layers.len();
    layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
            (l.to_string(), lo + frac * (hi - lo))
        })
        .collect()
}

fn check_curve(name: &str, curve: &BTreeMap<String, f64>, layers: &[&str]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let a = *curve
            .get(*layer)
            .ok_or_else(|| Error::param(name, format!("no agreement value for feasible site `{layer}`")))?;
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::param(name, format!("agreement {a} at `{layer}` is outside [0, 1]")));
        }
        if out.last().is_some_and(|&prev| a < prev) {
            return Err(Error::param(name, format!("agreement decreases at `{layer}`")));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn synthesize_workload(profile: &ModelProfile, params: &SynthParams) -> Result<Workload> {
    synthesize_detailed(profile, params).map(|s| s.workload)
}

/// Generates a trace whose inputs carry a latent difficulty following a
/// Gaussian AR(1) process mapped through the normal CDF (so each difficulty
/// is marginally uniform). A ramp agrees with the model exactly when the
/// difficulty is below that ramp's agreement level, and reports an error
/// score equal to the difficulty plus noise.
pub fn synthesize_detailed(profile: &ModelProfile, params: &SynthParams) -> Result<Synthesized> {
    if !(0.0..=1.0).contains(&params.continuity) {
        return Err(Error::param("continuity", "must lie in [0, 1]"));
    }
    if params.classes < 2 {
        return Err(Error::param("classes", "need at least two classes"));
    }
    if !(params.score_noise >= 0.0 && params.score_noise.is_finite()) {
        return Err(Error::param("score_noise", "must be a non-negative number"));
    }
    if !(params.separation >= 0.0 && params.separation.is_finite()) {
        return Err(Error::param("separation", "must be a non-negative number"));
    }
    if !(params.mean_interarrival_ms >= 0.0 && params.mean_interarrival_ms.is_finite()) {
        return Err(Error::param("mean_interarrival_ms", "must be a non-negative number"));
    }
    let layers = required_layers(profile);
    let before = check_curve("agreement", &params.agreement, &layers)?;
    let after = match &params.drift {
        Some(d) => check_curve("drift.agreement", &d.agreement, &layers)?,
        None => before.clone(),
    };
    let drift_at = params.drift.as_ref().map_or(usize::MAX, |d| d.at);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gaps = (params.mean_interarrival_ms > 0.0)
        .then(|| Exp::new(1.0 / params.mean_interarrival_ms).expect("positive rate"));
    let phi = params.continuity;
    let innovation = (1.0 - phi * phi).sqrt();

    let mut records = Vec::with_capacity(params.n);
    let mut difficulty = Vec::with_capacity(params.n);
    let mut latent: f64 = rng.sample(StandardNormal);
    let mut clock = 0.0;
    for t in 0..params.n {
        if t > 0 {
            let eps: f64 = rng.sample(StandardNormal);
            latent = phi * latent + innovation * eps;
            if let Some(g) = &gaps {
                clock += g.sample(&mut rng);
            }
        }
        let d = std_normal.cdf(latent);
        let curve = if t >= drift_at { &after } else { &before };
        let final_label = i64::from(rng.random_range(0..params.classes));
        let mut ramps = BTreeMap::new();
        for (layer, &a) in layers.iter().zip(curve) {
            let agrees = a >= 1.0 || d < a;
            let label = if agrees {
                final_label
            } else {
                let shift = i64::from(rng.random_range(1..params.classes));
                (final_label + shift) % i64::from(params.classes)
            };
            let eps: f64 = rng.sample(StandardNormal);
            let shift = if agrees { 0.0 } else { params.separation };
            let err = (d + shift + params.score_noise * eps).clamp(0.0, 1.0);
            ramps.insert(layer.to_string(), Signal { err, label });
        }
        records.push(RequestRecord {
            id: t as u64,
            arrival_ms: clock,
            ramps,
            final_label,
        });
        difficulty.push(d);
    }
    Ok(Synthesized {
        workload: Workload::new(records, profile)?,
        difficulty,
    })
}
