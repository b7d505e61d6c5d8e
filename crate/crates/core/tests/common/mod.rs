#![allow(dead_code)]

use std::collections::BTreeMap;

use exitsim::graph::{find_feasible_sites, LatencyCurve, ModelProfile, ProfiledRampCosts, RampSite};
use exitsim::trace::{Signal, RequestRecord, Workload};

/// Batch-16 latency is four times batch-1 latency for every layer and ramp.
pub fn curve(ms: f64) -> LatencyCurve {
    LatencyCurve::new(BTreeMap::from([(1, ms), (16, ms * 4.0)])).unwrap()
}

/// Chain `l0 -> ... -> l{n-1}`; the last node is the output.
pub fn chain(n: usize, layer_ms: f64, ramp_ms: f64) -> ModelProfile {
    let names: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
    let edges = names.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    ModelProfile::new(
        "chain",
        names.clone(),
        edges,
        vec![curve(layer_ms); n],
        vec![Some(curve(ramp_ms)); n],
        &names[n - 1],
    )
    .unwrap()
}

/// Stem, `blocks` residual blocks (two convs plus a skip into an add), head.
pub fn residual(blocks: usize, ramp_ms: f64) -> ModelProfile {
    let mut nodes = vec!["stem".to_string()];
    let mut edges = Vec::new();
    let mut layers = vec![curve(0.8)];
    let mut prev = "stem".to_string();
    for b in 0..blocks {
        let (c1, c2, add) = (format!("b{b}.c1"), format!("b{b}.c2"), format!("b{b}.add"));
        edges.extend([
            (prev.clone(), c1.clone()),
            (c1.clone(), c2.clone()),
            (c2.clone(), add.clone()),
            (prev.clone(), add.clone()),
        ]);
        nodes.extend([c1, c2, add.clone()]);
        layers.extend([curve(0.5), curve(0.5), curve(0.05)]);
        prev = add;
    }
    edges.push((prev, "head".to_string()));
    nodes.push("head".to_string());
    layers.push(curve(0.3));
    let ramps = vec![Some(curve(ramp_ms)); nodes.len()];
    ModelProfile::new("residual", nodes, edges, layers, ramps, "head").unwrap()
}

pub fn sites(profile: &ModelProfile) -> Vec<RampSite> {
    find_feasible_sites(profile, &ProfiledRampCosts).unwrap()
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

pub fn spaced(profile: &ModelProfile, mut records: Vec<RequestRecord>, gap_ms: f64) -> Workload {
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i as u64;
        r.arrival_ms = i as f64 * gap_ms;
    }
    Workload::new(records, profile).unwrap()
}

pub fn constant_agreement(profile: &ModelProfile, a: f64) -> BTreeMap<String, f64> {
    sites(profile).into_iter().map(|s| (s.layer, a)).collect()
}
