//! Event anomaly scores: node reconstruction error, surprise at observed
//! links, surprise at missing links through ghost events, percentile
//! calibration and agent-level aggregation.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    pad_batch, AgentId, CollectiveSample, DistanceMetric, EventSequence, EventStore, History,
    SampleBuilder, SampleConfig, StayEvent, FEATURES,
};
use crate::error::{Error, Result};
use crate::model::{forward_two_phase, mask_with_neighbors, ModelState, Network, N_NUMERIC};
use crate::tensor::Tape;

pub const N_NODE_TERMS: usize = FEATURES.len();

/// A placeholder event for a frequent partner not seen with the target.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostNode {
    pub agent: AgentId,
    pub event: StayEvent,
    pub row: usize,
    pub pos: usize,
}

/// Inserts one ghost per frequent partner of the target that has no event
/// among the neighbors of target event `pos`. Members without a row get a
/// ghost-only row. The graph is rebuilt afterwards.
pub fn add_ghosts(
    sample: &mut CollectiveSample,
    pos: usize,
    delta: f64,
    metric: DistanceMetric,
) -> Vec<GhostNode> {
    let e = sample.target.events[pos].clone();
    let node = sample.graph.node_id(0, pos);
    let present: Vec<AgentId> = sample
        .graph
        .neighbors(node)
        .iter()
        .map(|&n| sample.rows()[sample.graph.node(n).0].agent)
        .collect();
    let mut added = Vec::new();
    for &m in &sample.frequent {
        if m == sample.target.agent || present.contains(&m) {
            continue;
        }
        let ghost = StayEvent {
            agent: m,
            x: 0.0,
            y: 0.0,
            poi: 0,
            ..e.clone()
        };
        match sample.others.iter().position(|r| r.agent == m) {
            Some(i) => {
                let p = sample.others[i].insert_ghost(ghost.clone());
                added.push((m, ghost, p));
            }
            None => {
                let at = sample.others.partition_point(|r| r.agent < m);
                sample.others.insert(
                    at,
                    EventSequence {
                        agent: m,
                        window: sample.window,
                        events: vec![ghost.clone()],
                        indices: vec![None],
                    },
                );
                added.push((m, ghost, 0));
            }
        }
    }
    sample.rebuild_graph(delta, metric);
    added
        .into_iter()
        .map(|(agent, event, pos)| GhostNode {
            agent,
            event,
            row: 1 + sample.others.iter().position(|r| r.agent == agent).expect("row"),
            pos,
        })
        .collect()
}

/// Uncalibrated terms for one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub agent_id: AgentId,
    pub event_index: usize,
    /// Per-feature reconstruction errors, in `FEATURES` order.
    pub node: [f64; N_NODE_TERMS],
    /// `(agent, S_link)` for each observed neighbor event.
    pub neighbors: Vec<(AgentId, f64)>,
    /// `(agent, S_link)` for each ghost.
    pub ghosts: Vec<(AgentId, f64)>,
}

impl RawScores {
    /// `max(1 − S_link)` over neighbors; 0 without neighbors.
    pub fn obs_raw(&self) -> f64 {
        self.neighbors.iter().map(|n| 1.0 - n.1).fold(0.0, f64::max)
    }

    /// `max S_link` over ghosts; 0 without ghosts.
    pub fn notobs_raw(&self) -> f64 {
        self.ghosts.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

/// Link likelihood from cosine similarity, mapped to `[0, 1]`.
pub fn link_likelihood(cosine: f64) -> f64 {
    ((cosine + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Adds ghosts, masks target event `pos` with its neighbors and reads every
/// term off one forward pass.
pub fn raw_event_scores(
    state: &ModelState,
    sample: &CollectiveSample,
    pos: usize,
    delta: f64,
    metric: DistanceMetric,
) -> Result<RawScores> {
    let index = sample.target.indices.get(pos).copied().flatten().ok_or_else(|| {
        Error::Validation(format!("position {pos} is not an observed target event"))
    })?;
    let mut sample = sample.clone();
    let ghosts = add_ghosts(&mut sample, pos, delta, metric);
    let batch = pad_batch(&sample)?;
    let l = batch.max_len;
    let cell = batch.cell(0, pos);
    let inst = mask_with_neighbors(batch, cell)?;
    let row = inst.masked.binary_search(&cell).expect("target is masked");
    let mut tape = Tape::new();
    let net = Network::new(&mut tape, state, false);
    let out = forward_two_phase(&mut tape, &net, &inst)?;
    let dec = out.decoded.expect("target is masked");
    let z = tape.value(out.z_link);
    let s_link = |other: usize| link_likelihood(cosine(z.row(cell), z.row(other)));

    let b = &inst.batch;
    let f = |i| b.feature(cell, i);
    let truth = crate::model::numeric_features(f(0) as i64, f(1) as i64, f(2), f(3));
    let pred_z: [f64; N_NUMERIC] = std::array::from_fn(|j| tape.value(dec.numeric).at(row, j));
    let pred = state.stats.destandardize(pred_z);
    let mut node = [0.0; N_NODE_TERMS];
    for j in 0..N_NUMERIC {
        node[j] = (truth[j] - pred[j]).abs();
    }
    node[4] = 1.0 - tape.value(dec.poi).at(row, f(4) as usize).exp();
    node[5] = 1.0 - tape.value(dec.dow).at(row, f(5) as usize).exp();

    let neighbors = inst
        .neighbors(cell)
        .into_iter()
        .map(|n| (b.agents[n / l], s_link(n)))
        .collect();
    let ghosts = ghosts
        .iter()
        .map(|g| (g.agent, s_link(g.row * l + g.pos)))
        .collect();
    Ok(RawScores {
        agent_id: sample.target.agent,
        event_index: index,
        node,
        neighbors,
        ghosts,
    })
}

/// Raw scores for every event of every agent in `[day_start, day_end)`,
/// each scored in the window that contains it, ordered by agent then event.
pub fn score_period(
    state: &ModelState,
    store: &EventStore,
    history: &History,
    cfg: &SampleConfig,
    day_start: i64,
    day_end: i64,
) -> Result<Vec<RawScores>> {
    let builder = SampleBuilder::new(store, history, cfg.clone());
    let windows = builder.windows(day_start, day_end);
    let samples: Vec<CollectiveSample> = windows
        .iter()
        .flat_map(|w| builder.window_samples(*w))
        .collect();
    let per_sample: Vec<Vec<RawScores>> = samples
        .par_iter()
        .map(|s| {
            let w = s.window;
            let owned_end = windows
                .iter()
                .find(|o| o.day_start > w.day_start)
                .map_or(w.day_end, |next| next.day_start.min(w.day_end));
            (0..s.target.len())
                .filter(|&p| s.target.events[p].day() < owned_end)
                .map(|p| raw_event_scores(state, s, p, cfg.delta_km, cfg.metric))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<RawScores> = per_sample.into_iter().flatten().collect();
    all.sort_by_key(|r| (r.agent_id, r.event_index));
    Ok(all)
}

/// Sorted reference scores from the anomaly-free validation period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub node: Vec<Vec<f64>>,
    /// Only events with at least one neighbor.
    pub obs: Vec<f64>,
    /// Only events with at least one ghost.
    pub notobs: Vec<f64>,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

impl ScoreCalibration {
    pub fn fit(reference: &[RawScores]) -> Result<Self> {
        let node: Vec<Vec<f64>> = (0..N_NODE_TERMS)
            .map(|j| sorted(reference.iter().map(|r| r.node[j]).collect()))
            .collect();
        let obs = sorted(
            reference
                .iter()
                .filter(|r| !r.neighbors.is_empty())
                .map(RawScores::obs_raw)
                .collect(),
        );
        let notobs = sorted(
            reference
                .iter()
                .filter(|r| !r.ghosts.is_empty())
                .map(RawScores::notobs_raw)
                .collect(),
        );
        let cal = Self { node, obs, notobs };
        cal.check()?;
        Ok(cal)
    }

    pub fn check(&self) -> Result<()> {
        let empty = |name: &str| Err(Error::Calibration(format!("empty {name} reference")));
        if self.node.len() != N_NODE_TERMS || self.node.iter().any(Vec::is_empty) {
            return empty("node");
        }
        if self.obs.is_empty() {
            return empty("observed-link");
        }
        if self.notobs.is_empty() {
            return empty("missing-link");
        }
        let ascending = |v: &Vec<f64>| v.windows(2).all(|w| w[0] <= w[1]);
        if !self.node.iter().all(ascending) || !ascending(&self.obs) || !ascending(&self.notobs) {
            return Err(Error::Calibration("reference arrays must be sorted".into()));
        }
        Ok(())
    }
}

/// Right-continuous ECDF: the fraction of `reference` values `≤ raw`.
pub fn percentile(raw: f64, reference: &[f64]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Calibration("empty reference".into()));
    }
    let n = reference.partition_point(|&r| r <= raw);
    Ok(n as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Node,
    Obs,
    Notobs,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::Node => "node",
            Term::Obs => "obs",
            Term::Notobs => "notobs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub raw: RawScores,
    pub node_pct: [f64; N_NODE_TERMS],
    pub node: f64,
    pub obs: f64,
    pub notobs: f64,
    pub combined: f64,
    pub argmax: Term,
}

/// Percentile-transforms each term and combines them by max. Events with
/// no neighbors (no ghosts) get 0 for the observed (missing) link term.
pub fn calibrate(raw: RawScores, cal: &ScoreCalibration) -> Result<AnomalyReport> {
    let mut node_pct = [0.0; N_NODE_TERMS];
    for (j, slot) in node_pct.iter_mut().enumerate() {
        *slot = percentile(raw.node[j], &cal.node[j])?;
    }
    let node = node_pct.iter().copied().fold(0.0, f64::max);
    let obs = if raw.neighbors.is_empty() {
        0.0
    } else {
        percentile(raw.obs_raw(), &cal.obs)?
    };
    let notobs = if raw.ghosts.is_empty() {
        0.0
    } else {
        percentile(raw.notobs_raw(), &cal.notobs)?
    };
    let (argmax, combined) = [(Term::Node, node), (Term::Obs, obs), (Term::Notobs, notobs)]
        .into_iter()
        .fold((Term::Node, f64::NEG_INFINITY), |best, t| if t.1 > best.1 { t } else { best });
    Ok(AnomalyReport {
        raw,
        node_pct,
        node,
        obs,
        notobs,
        combined,
        argmax,
    })
}

/// One line of the event report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub agent_id: AgentId,
    pub event_index: usize,
    pub node_pct: f64,
    pub obs_pct: f64,
    pub notobs_pct: f64,
    pub combined: f64,
    pub argmax_term: Term,
}

impl From<&AnomalyReport> for ReportRow {
    fn from(r: &AnomalyReport) -> Self {
        Self {
            agent_id: r.raw.agent_id,
            event_index: r.raw.event_index,
            node_pct: r.node,
            obs_pct: r.obs,
            notobs_pct: r.notobs,
            combined: r.combined,
            argmax_term: r.argmax,
        }
    }
}

/// Score combinations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Node,
    NodeObs,
    NodeNotobs,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Node, Variant::NodeObs, Variant::NodeNotobs, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Node => "node",
            Variant::NodeObs => "node+obs",
            Variant::NodeNotobs => "node+notobs",
            Variant::Full => "full",
        }
    }

    pub fn score(self, r: &ReportRow) -> f64 {
        match self {
            Variant::Node => r.node_pct,
            Variant::NodeObs => r.node_pct.max(r.obs_pct),
            Variant::NodeNotobs => r.node_pct.max(r.notobs_pct),
            Variant::Full => r.node_pct.max(r.obs_pct).max(r.notobs_pct),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub agent_id: AgentId,
    pub agent_score: f64,
}

/// Maximum event score per agent under a variant.
pub fn agent_scores(rows: &[ReportRow], variant: Variant) -> BTreeMap<AgentId, f64> {
    let mut out: BTreeMap<AgentId, f64> = BTreeMap::new();
    for r in rows {
        let s = variant.score(r);
        out.entry(r.agent_id)
            .and_modify(|v| *v = v.max(s))
            .or_insert(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        let r = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(0.5, &r).unwrap(), 0.0);
        assert_eq!(percentile(4.0, &r).unwrap(), 1.0);
        assert_eq!(percentile(2.0, &r).unwrap(), 0.5);
        assert!(matches!(percentile(1.0, &[]), Err(Error::Calibration(_))));
    }

    fn raw(neighbors: Vec<f64>, ghosts: Vec<f64>) -> RawScores {
        RawScores {
            agent_id: 1,
            event_index: 0,
            node: [0.0; N_NODE_TERMS],
            neighbors: neighbors.into_iter().map(|s| (2, s)).collect(),
            ghosts: ghosts.into_iter().map(|s| (3, s)).collect(),
        }
    }

    #[test]
    fn empty_candidate_sets_give_zero_raw() {
        let r = raw(vec![], vec![]);
        assert_eq!(r.obs_raw(), 0.0);
        assert_eq!(r.notobs_raw(), 0.0);
        assert_eq!(raw(vec![link_likelihood(1.0)], vec![]).obs_raw(), 0.0);
        assert_eq!(raw(vec![link_likelihood(-1.0)], vec![]).obs_raw(), 1.0);
        assert_eq!(raw(vec![], vec![link_likelihood(1.0)]).notobs_raw(), 1.0);
    }

    #[test]
    fn combined_is_max_of_terms() {
        let cal = ScoreCalibration {
            node: vec![vec![0.0, 1.0]; N_NODE_TERMS],
            obs: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            notobs: vec![0.5, 1.0],
        };
        let rep = calibrate(raw(vec![0.11], vec![0.7]), &cal).unwrap();
        assert_eq!(rep.node, 0.5);
        assert!((rep.obs - 0.8).abs() < 1e-12);
        assert_eq!(rep.notobs, 0.5);
        assert_eq!(rep.combined, rep.obs);
        assert_eq!(rep.argmax, Term::Obs);
        let none = calibrate(raw(vec![], vec![]), &cal).unwrap();
        assert_eq!((none.obs, none.notobs), (0.0, 0.0));
    }

    #[test]
    fn agent_score_is_max() {
        let row = |e, s| ReportRow {
            agent_id: 4,
            event_index: e,
            node_pct: s,
            obs_pct: 0.0,
            notobs_pct: 0.0,
            combined: s,
            argmax_term: Term::Node,
        };
        let rows = [row(0, 0.1), row(1, 0.7), row(2, 0.3)];
        assert_eq!(agent_scores(&rows, Variant::Full)[&4], 0.7);
    }
}
