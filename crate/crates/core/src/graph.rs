//! Layer-graph model profiles, feasible ramp positions, and initial ramp
//! placement under a latency budget.
//!
//! A ramp may only attach after a layer that every source-to-output path
//! flows through: such a layer sees the whole of the model's intermediate
//! state at that depth. In a DAG with a single output this is exactly the
//! set of non-output nodes that dominate the output from a virtual root
//! joined to every source.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::{ActiveRamp, EEConfig};

/// Schema tag written into, and required from, every profile file.
pub const PROFILE_SCHEMA: &str = "exitsim.profile/v1";

/// Relative slack used when comparing summed ramp costs against the budget.
const BUDGET_EPS: f64 = 1e-9;

/// Latency as a function of batch size, piecewise linear between profiled
/// batch sizes and clamped beyond the profiled range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u32, f64>", into = "BTreeMap<u32, f64>")]
pub struct LatencyCurve {
    points: Vec<(u32, f64)>,
}

impl LatencyCurve {
    pub fn new(points: BTreeMap<u32, f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Profile("latency curve has no points".into()));
        }
        if !points.contains_key(&1) {
            return Err(Error::Profile("latency curve lacks a batch-size-1 entry".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for (&batch, &ms) in &points {
            if batch == 0 {
                return Err(Error::Profile("batch size 0 is not a valid profile key".into()));
            }
            if !ms.is_finite() || ms < 0.0 {
                return Err(Error::Profile(format!("latency {ms} at batch {batch} is not a non-negative number")));
            }
            if ms < prev {
                return Err(Error::Profile(format!("latency decreases at batch {batch}")));
            }
            prev = ms;
        }
        Ok(Self {
            points: points.into_iter().collect(),
        })
    }

    /// A batch-independent latency.
    pub fn constant(ms: f64) -> Self {
        Self {
            points: vec![(1, ms)],
        }
    }

    pub fn at(&self, batch: u32) -> f64 {
        let pts = &self.points;
        let (first_b, first_ms) = pts[0];
        if batch <= first_b {
            return first_ms;
        }
        let (last_b, last_ms) = pts[pts.len() - 1];
        if batch >= last_b {
            return last_ms;
        }
        let hi = pts.partition_point(|&(b, _)| b < batch);
        let (b1, m1) = pts[hi];
        if b1 == batch {
            return m1;
        }
        let (b0, m0) = pts[hi - 1];
        let frac = f64::from(batch - b0) / f64::from(b1 - b0);
        m0 + frac * (m1 - m0)
    }

    pub fn batches(&self) -> impl Iterator<Item = u32> + '_ {
        self.points.iter().map(|&(b, _)| b)
    }
}

impl TryFrom<BTreeMap<u32, f64>> for LatencyCurve {
    type Error = Error;
    fn try_from(value: BTreeMap<u32, f64>) -> Result<Self> {
        LatencyCurve::new(value)
    }
}

impl From<LatencyCurve> for BTreeMap<u32, f64> {
    fn from(value: LatencyCurve) -> Self {
        value.points.into_iter().collect()
    }
}

/// On-disk representation of a [`ModelProfile`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileFile {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub latencies: BTreeMap<String, BTreeMap<u32, f64>>,
    #[serde(default)]
    pub ramp_latency: BTreeMap<String, BTreeMap<u32, f64>>,
    pub output: String,
}

/// A model as a layer DAG with per-layer latency profiles.
///
/// Nodes are stored in the (validated) topological order given by the
/// caller; node indices double as topological positions.
#[derive(Debug, Clone)]
pub struct ModelProfile {
    name: String,
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<(usize, usize)>,
    preds: Vec<Vec<usize>>,
    layers: Vec<LatencyCurve>,
    ramps: Vec<Option<LatencyCurve>>,
    prefix: Vec<LatencyCurve>,
    output: usize,
}

impl ModelProfile {
    pub fn from_file_format(file: ProfileFile) -> Result<Self> {
        if file.schema != PROFILE_SCHEMA {
            return Err(Error::Profile(format!(
                "unsupported schema `{}` (expected `{PROFILE_SCHEMA}`)",
                file.schema
            )));
        }
        let mut index = HashMap::with_capacity(file.nodes.len());
        for (i, node) in file.nodes.iter().enumerate() {
            if index.insert(node.clone(), i).is_some() {
                return Err(Error::Structural(format!("duplicate node `{node}`")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Structural(format!("unknown node `{name}`")))
        };
        let edges = file
            .edges
            .iter()
            .map(|(a, b)| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>>>()?;
        let output = lookup(&file.output)?;

        let mut layers = Vec::with_capacity(file.nodes.len());
        for node in &file.nodes {
            let pts = file
                .latencies
                .get(node)
                .ok_or_else(|| Error::Profile(format!("layer `{node}` has no latency entry")))?;
            layers.push(
                LatencyCurve::new(pts.clone()).map_err(|e| Error::Profile(format!("layer `{node}`: {e}")))?,
            );
        }
        for key in file.latencies.keys().chain(file.ramp_latency.keys()) {
            lookup(key)?;
        }
        let mut ramps = vec![None; file.nodes.len()];
        for (node, pts) in &file.ramp_latency {
            let curve = LatencyCurve::new(pts.clone()).map_err(|e| Error::Profile(format!("ramp at `{node}`: {e}")))?;
            ramps[index[node]] = Some(curve);
        }
        Self::build(file.name, file.nodes, index, edges, layers, ramps, output)
    }

    /// Builds a profile from in-memory parts. `nodes` must be in topological order.
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<String>,
        edges: Vec<(String, String)>,
        layer_latency: Vec<LatencyCurve>,
        ramp_latency: Vec<Option<LatencyCurve>>,
        output: &str,
    ) -> Result<Self> {
        if layer_latency.len() != nodes.len() || ramp_latency.len() != nodes.len() {
            return Err(Error::Profile("latency tables must have one entry per node".into()));
        }
        let file = ProfileFile {
            schema: PROFILE_SCHEMA.to_string(),
            name: name.into(),
            latencies: nodes
                .iter()
                .cloned()
                .zip(layer_latency.into_iter().map(BTreeMap::from))
                .collect(),
            ramp_latency: nodes
                .iter()
                .cloned()
                .zip(ramp_latency)
                .filter_map(|(n, c)| c.map(|c| (n, BTreeMap::from(c))))
                .collect(),
            nodes,
            edges,
            output: output.to_string(),
        };
        Self::from_file_format(file)
    }

    fn build(
        name: String,
        nodes: Vec<String>,
        index: HashMap<String, usize>,
        edges: Vec<(usize, usize)>,
        layers: Vec<LatencyCurve>,
        ramps: Vec<Option<LatencyCurve>>,
        output: usize,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Structural("graph has no nodes".into()));
        }
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for &(a, b) in &edges {
            succs[a].push(b);
            preds[b].push(a);
        }

        // Kahn's algorithm: anything left unvisited sits on a cycle.
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop_front() {
            seen += 1;
            for &w in &succs[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push_back(w);
                }
            }
        }
        if seen != n {
            return Err(Error::Structural("graph contains a cycle".into()));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= b) {
            return Err(Error::Structural(format!(
                "node order is not topological: edge `{}` -> `{}` points backwards",
                nodes[a], nodes[b]
            )));
        }

        let mut reaches = vec![false; n];
        reaches[output] = true;
        let mut stack = vec![output];
        while let Some(v) = stack.pop() {
            for &u in &preds[v] {
                if !reaches[u] {
                    reaches[u] = true;
                    stack.push(u);
                }
            }
        }
        if let Some(v) = (0..n).find(|&v| !reaches[v]) {
            return Err(Error::Structural(format!(
                "output `{}` is unreachable from `{}`",
                nodes[output], nodes[v]
            )));
        }

        let batches: BTreeSet<u32> = layers.iter().flat_map(|c| c.batches()).collect();
        let mut running: BTreeMap<u32, f64> = batches.iter().map(|&b| (b, 0.0)).collect();
        let mut prefix = Vec::with_capacity(n);
        for layer in &layers {
            for (b, acc) in running.iter_mut() {
                *acc += layer.at(*b);
            }
            prefix.push(LatencyCurve::new(running.clone())?);
        }

        Ok(Self {
            name,
            nodes,
            index,
            edges,
            preds,
            layers,
            ramps,
            prefix,
            output,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: ProfileFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.line(),
            source: e,
        })?;
        Self::from_file_format(file)
    }

    pub fn to_file_format(&self) -> ProfileFile {
        ProfileFile {
            schema: PROFILE_SCHEMA.to_string(),
            name: self.name.clone(),
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| (self.nodes[a].clone(), self.nodes[b].clone()))
                .collect(),
            latencies: self
                .nodes
                .iter()
                .cloned()
                .zip(self.layers.iter().cloned().map(BTreeMap::from))
                .collect(),
            ramp_latency: self
                .nodes
                .iter()
                .zip(&self.ramps)
                .filter_map(|(n, c)| c.clone().map(|c| (n.clone(), BTreeMap::from(c))))
                .collect(),
            output: self.nodes[self.output].clone(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, idx: usize) -> &str {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn index_of(&self, layer: &str) -> Option<usize> {
        self.index.get(layer).copied()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn predecessors(&self, idx: usize) -> &[usize] {
        &self.preds[idx]
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.preds[v].is_empty()).collect()
    }

    pub fn layer_latency(&self, idx: usize, batch: u32) -> f64 {
        self.layers[idx].at(batch)
    }

    pub fn ramp_latency(&self, idx: usize) -> Option<&LatencyCurve> {
        self.ramps[idx].as_ref()
    }

    /// Cumulative model time through layer `idx` (inclusive) along the
    /// topological order.
    pub fn prefix_latency(&self, idx: usize, batch: u32) -> f64 {
        self.prefix[idx].at(batch)
    }

    pub fn prefix_curve(&self, idx: usize) -> &LatencyCurve {
        &self.prefix[idx]
    }

    /// Full model latency with no ramps attached.
    pub fn total_latency(&self, batch: u32) -> f64 {
        self.prefix[self.len() - 1].at(batch)
    }
}

/// A feasible ramp location with its cost profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampSite {
    pub layer: String,
    /// Topological position of `layer` in the profile.
    pub position: usize,
    pub ramp_latency: LatencyCurve,
    pub prefix_latency: LatencyCurve,
}

impl RampSite {
    pub fn ramp_ms(&self, batch: u32) -> f64 {
        self.ramp_latency.at(batch)
    }

    pub fn prefix_ms(&self, batch: u32) -> f64 {
        self.prefix_latency.at(batch)
    }
}

/// Supplies the latency of a ramp attached after a given layer.
pub trait RampCostModel {
    fn ramp_latency(&self, profile: &ModelProfile, node: usize) -> Option<LatencyCurve>;
}

/// Reads ramp costs from the profile's own `ramp_latency` table.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProfiledRampCosts;

impl RampCostModel for ProfiledRampCosts {
    fn ramp_latency(&self, profile: &ModelProfile, node: usize) -> Option<LatencyCurve> {
        profile.ramp_latency(node).cloned()
    }
}

impl<F> RampCostModel for F
where
    F: Fn(&ModelProfile, usize) -> Option<LatencyCurve>,
{
    fn ramp_latency(&self, profile: &ModelProfile, node: usize) -> Option<LatencyCurve> {
        self(profile, node)
    }
}

/// Nodes (other than the output) that lie on every source-to-output path,
/// in topological order.
pub fn cut_vertices(profile: &ModelProfile) -> Vec<usize> {
    let n = profile.len();
    // Slot 0 is a virtual root feeding every source; node v lives at slot v + 1.
    // Slot order is topological, so a dominator always has a smaller slot and
    // one forward pass settles every immediate dominator.
    let mut idom = vec![usize::MAX; n + 1];
    idom[0] = 0;
    for v in 0..n {
        let preds = profile.predecessors(v);
        let mut dom: Option<usize> = None;
        let slots = if preds.is_empty() {
            vec![0]
        } else {
            preds.iter().map(|&p| p + 1).collect()
        };
        for slot in slots {
            dom = Some(match dom {
                None => slot,
                Some(mut a) => {
                    let mut b = slot;
                    while a != b {
                        if a > b {
                            a = idom[a];
                        } else {
                            b = idom[b];
                        }
                    }
                    a
                }
            });
        }
        idom[v + 1] = dom.unwrap_or(0);
    }

    let mut chain = Vec::new();
    let mut cur = idom[profile.output() + 1];
    while cur != 0 {
        chain.push(cur - 1);
        cur = idom[cur];
    }
    chain.reverse();
    chain
}

/// Topological positions of feasible ramp sites, without cost data.
pub fn feasible_positions(profile: &ModelProfile) -> Vec<usize> {
    let last = profile.len() - 1;
    cut_vertices(profile)
        .into_iter()
        .filter(|&v| v != profile.output() && v != last)
        .collect()
}

/// Feasible ramp positions with costs attached from `costs`.
pub fn find_feasible_sites(profile: &ModelProfile, costs: &impl RampCostModel) -> Result<Vec<RampSite>> {
    feasible_positions(profile)
        .into_iter()
        .map(|v| {
            let ramp_latency = costs.ramp_latency(profile, v).ok_or_else(|| {
                Error::Profile(format!("feasible site `{}` has no ramp latency entry", profile.node(v)))
            })?;
            Ok(RampSite {
                layer: profile.node(v).to_string(),
                position: v,
                ramp_latency,
                prefix_latency: profile.prefix_curve(v).clone(),
            })
        })
        .collect()
}

/// Cap on total active-ramp latency, as a fraction of the no-exit model
/// latency at batch size 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampBudget {
    pub fraction: f64,
}

impl RampBudget {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::param("budget", format!("{fraction} is outside [0, 1]")));
        }
        Ok(Self { fraction })
    }

    pub fn cap_ms(&self, profile: &ModelProfile) -> f64 {
        self.fraction * profile.total_latency(1)
    }

    pub fn admits_cost(&self, cost_ms: f64, profile: &ModelProfile) -> bool {
        let cap = self.cap_ms(profile);
        cost_ms <= cap + BUDGET_EPS * cap.max(1.0)
    }

    pub fn admits<'a>(&self, sites: impl IntoIterator<Item = &'a RampSite>, profile: &ModelProfile) -> bool {
        self.admits_cost(sites.into_iter().map(|s| s.ramp_ms(1)).sum(), profile)
    }
}

impl Default for RampBudget {
    fn default() -> Self {
        Self { fraction: 0.02 }
    }
}

/// Indices of `k` evenly spaced picks over `n` items.
pub fn even_spacing(n: usize, k: usize) -> Vec<usize> {
    match k {
        0 => Vec::new(),
        1 => vec![((n - 1) as f64 / 2.0).round() as usize],
        _ => (0..k)
            .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Places the largest number of evenly spaced ramps the budget admits, all
/// starting at threshold 0.
pub fn initial_placement(sites: &[RampSite], budget: RampBudget, profile: &ModelProfile) -> EEConfig {
    initial_placement_capped(sites, budget, profile, usize::MAX)
}

/// [`initial_placement`] with an additional cap on the ramp count.
pub fn initial_placement_capped(
    sites: &[RampSite],
    budget: RampBudget,
    profile: &ModelProfile,
    max_ramps: usize,
) -> EEConfig {
    let n = sites.len();
    for k in (1..=n.min(max_ramps)).rev() {
        let picks = even_spacing(n, k);
        if budget.admits(picks.iter().map(|&i| &sites[i]), profile) {
            let ramps = picks
                .into_iter()
                .map(|i| ActiveRamp {
                    site: sites[i].clone(),
                    threshold: 0.0,
                })
                .collect();
            return EEConfig::new(ramps).expect("even spacing yields ordered sites");
        }
    }
    EEConfig::empty()
}
