use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::cooccur::{sweep_pairs, History};
use super::{
    co_occurs, overlap_minutes, AgentId, DistanceMetric, EventStore, StayEvent, DEFAULT_DELTA_KM,
    MINUTES_PER_DAY,
};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub id: usize,
    pub day_start: i64,
    pub day_end: i64,
}

impl Window {
    pub fn contains_day(&self, day: i64) -> bool {
        (self.day_start..self.day_end).contains(&day)
    }
}

/// Windows of `w_days` starting every `stride` days over `[day_start, day_end)`.
/// A trailing window shorter than `w_days` is kept.
pub fn tile_windows(day_start: i64, day_end: i64, w_days: i64, stride: i64) -> Vec<Window> {
    assert!(w_days > 0 && stride > 0, "window length and stride must be positive");
    let mut out = Vec::new();
    let mut s = day_start;
    while s < day_end {
        out.push(Window {
            id: out.len(),
            day_start: s,
            day_end: (s + w_days).min(day_end),
        });
        s += stride;
    }
    out
}

/// One agent's chronological events inside a window. `indices[i]` is the
/// event's position in the agent's full list, or `None` for a ghost event
/// inserted at scoring time.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    pub agent: AgentId,
    pub window: Window,
    pub events: Vec<StayEvent>,
    pub indices: Vec<Option<usize>>,
}

impl EventSequence {
    pub fn from_store(store: &EventStore, agent: AgentId, window: Window) -> Result<Self> {
        let list = store.events(agent)?;
        let range = store.index_range(agent, window.day_start, window.day_end);
        Ok(Self {
            agent,
            window,
            events: list[range.clone()].to_vec(),
            indices: range.map(Some).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_ghost(&self, pos: usize) -> bool {
        self.indices[pos].is_none()
    }

    /// Inserts a ghost event after every event starting no later than it and
    /// returns its position.
    pub fn insert_ghost(&mut self, event: StayEvent) -> usize {
        let pos = self.events.partition_point(|e| e.start <= event.start);
        self.events.insert(pos, event);
        self.indices.insert(pos, None);
        pos
    }

    /// `(seq_pos, within_day_pos, day_index)` for every position.
    pub fn positions(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut prev_day = None;
        let mut within = 0;
        for (i, e) in self.events.iter().enumerate() {
            let day = e.day();
            within = if prev_day == Some(day) { within + 1 } else { 0 };
            prev_day = Some(day);
            out.push((i, within, (day - self.window.day_start).max(0) as usize));
        }
        out
    }
}

pub fn positional_indices(seq: &EventSequence, pos: usize) -> (usize, usize, usize) {
    seq.positions()[pos]
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelatedIndividuals {
    pub co_occurring: BTreeSet<AgentId>,
    pub frequent: BTreeSet<AgentId>,
    pub union: BTreeSet<AgentId>,
}

impl RelatedIndividuals {
    fn new(target: AgentId, mut co: BTreeSet<AgentId>, mut fm: BTreeSet<AgentId>) -> Self {
        co.remove(&target);
        fm.remove(&target);
        let union = co.union(&fm).copied().collect();
        Self {
            co_occurring: co,
            frequent: fm,
            union,
        }
    }
}

/// CO from the window's co-occurrences, FM from the training history.
pub fn related_individuals(
    target: AgentId,
    window: Window,
    store: &EventStore,
    history: &History,
    delta: f64,
    metric: DistanceMetric,
) -> Result<RelatedIndividuals> {
    let own = EventSequence::from_store(store, target, window)?;
    let mut co = BTreeSet::new();
    for (agent, list) in store.iter() {
        if agent == target {
            continue;
        }
        let range = store.index_range(agent, window.day_start, window.day_end);
        if list[range]
            .iter()
            .any(|e| own.events.iter().any(|t| co_occurs(t, e, delta, metric)))
        {
            co.insert(agent);
        }
    }
    Ok(RelatedIndividuals::new(
        target,
        co,
        history.frequent_partners(target),
    ))
}

/// Events of a collective sample as graph nodes, numbered row-major, with
/// undirected co-occurrence edges between different rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGraph {
    offsets: Vec<usize>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl EventGraph {
    pub fn from_edges(row_lengths: &[usize], mut edges: Vec<(usize, usize)>) -> Self {
        let mut offsets = vec![0];
        for len in row_lengths {
            offsets.push(offsets.last().unwrap() + len);
        }
        let n = *offsets.last().unwrap();
        for e in edges.iter_mut() {
            *e = (e.0.min(e.1), e.0.max(e.1));
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in adjacency.iter_mut() {
            list.sort_unstable();
        }
        Self {
            offsets,
            edges,
            adjacency,
        }
    }

    pub fn n_nodes(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_id(&self, row: usize, pos: usize) -> usize {
        self.offsets[row] + pos
    }

    pub fn node(&self, id: usize) -> (usize, usize) {
        let row = self.offsets.partition_point(|&o| o <= id) - 1;
        (row, id - self.offsets[row])
    }

    pub fn neighbors(&self, id: usize) -> &[usize] {
        &self.adjacency[id]
    }

    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }
}

/// Co-occurrence graph over all events of `rows`; ghost events get no edges.
pub fn build_event_graph(
    rows: &[&EventSequence],
    delta: f64,
    metric: DistanceMetric,
) -> EventGraph {
    let lengths: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    let mut flat = Vec::new();
    let mut ids = Vec::new();
    let mut id = 0;
    for (r, seq) in rows.iter().enumerate() {
        for (p, e) in seq.events.iter().enumerate() {
            if !seq.is_ghost(p) {
                flat.push((r, e));
                ids.push(id);
            }
            id += 1;
        }
    }
    let edges = sweep_pairs(&flat, delta, metric)
        .into_iter()
        .map(|(i, j)| (ids[i], ids[j]))
        .collect();
    EventGraph::from_edges(&lengths, edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectiveSample {
    pub window: Window,
    pub target: EventSequence,
    /// Related individuals with at least one event in the window, by agent id.
    pub others: Vec<EventSequence>,
    pub graph: EventGraph,
    /// The target's frequent partners (frozen from the training period).
    pub frequent: Vec<AgentId>,
}

impl CollectiveSample {
    /// Target first, then others.
    pub fn rows(&self) -> Vec<&EventSequence> {
        std::iter::once(&self.target).chain(&self.others).collect()
    }

    pub fn n_rows(&self) -> usize {
        1 + self.others.len()
    }

    pub fn rebuild_graph(&mut self, delta: f64, metric: DistanceMetric) {
        self.graph = build_event_graph(&self.rows(), delta, metric);
    }
}

/// A regular sample of `n_rows` sequences of `len` hourly events, used for
/// timing. Rows pair up (0 with 1, 2 with 3, ...) and share every stay, so
/// each event has at most one neighbor.
pub fn synthetic_sample(n_rows: usize, len: usize) -> CollectiveSample {
    let days = ((len as i64 * 60 + MINUTES_PER_DAY - 1) / MINUTES_PER_DAY).max(1);
    let window = Window {
        id: 0,
        day_start: 0,
        day_end: days,
    };
    let rows: Vec<EventSequence> = (0..n_rows)
        .map(|r| {
            let events: Vec<StayEvent> = (0..len)
                .map(|p| {
                    let x = (r / 2) as f64;
                    let y = p as f64 * 0.1;
                    StayEvent::new(r as AgentId, p as i64 * 60, 50, x, y, (p % 14) as u16)
                })
                .collect();
            EventSequence {
                agent: r as AgentId,
                window,
                indices: (0..len).map(Some).collect(),
                events,
            }
        })
        .collect();
    let mut rows = rows.into_iter();
    let mut sample = CollectiveSample {
        window,
        target: rows.next().expect("at least one row"),
        others: rows.collect(),
        graph: EventGraph::from_edges(&[], Vec::new()),
        frequent: Vec::new(),
    };
    sample.rebuild_graph(DEFAULT_DELTA_KM, DistanceMetric::Euclidean);
    sample
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub delta_km: f64,
    pub metric: DistanceMetric,
    pub window_days: i64,
    pub stride_days: i64,
    pub max_others: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            delta_km: DEFAULT_DELTA_KM,
            metric: DistanceMetric::Euclidean,
            window_days: 3,
            stride_days: 3,
            max_others: 20,
        }
    }
}

/// Builds collective samples from a store and a frozen interaction history.
pub struct SampleBuilder<'a> {
    pub store: &'a EventStore,
    pub history: &'a History,
    pub cfg: SampleConfig,
}

impl<'a> SampleBuilder<'a> {
    pub fn new(store: &'a EventStore, history: &'a History, cfg: SampleConfig) -> Self {
        Self {
            store,
            history,
            cfg,
        }
    }

    pub fn windows(&self, day_start: i64, day_end: i64) -> Vec<Window> {
        tile_windows(day_start, day_end, self.cfg.window_days, self.cfg.stride_days)
    }

    /// One sample per agent with at least one event, for every window tiling
    /// `[day_start, day_end)`.
    pub fn samples(&self, day_start: i64, day_end: i64) -> Vec<CollectiveSample> {
        self.windows(day_start, day_end)
            .into_iter()
            .flat_map(|w| self.window_samples(w))
            .collect()
    }

    /// Per-agent co-occurrence totals `(pairs, minutes)` inside a window.
    fn window_contacts(&self, window: Window) -> BTreeMap<AgentId, BTreeMap<AgentId, (u32, i64)>> {
        let mut flat = Vec::new();
        for (agent, list) in self.store.iter() {
            let range = self.store.index_range(agent, window.day_start, window.day_end);
            flat.extend(list[range].iter().map(|e| (agent as usize, e)));
        }
        let mut contacts: BTreeMap<AgentId, BTreeMap<AgentId, (u32, i64)>> = BTreeMap::new();
        for (i, j) in sweep_pairs(&flat, self.cfg.delta_km, self.cfg.metric) {
            let (a, b) = (flat[i].1, flat[j].1);
            let m = overlap_minutes(a, b);
            for (x, y) in [(a.agent, b.agent), (b.agent, a.agent)] {
                let c = contacts.entry(x).or_default().entry(y).or_default();
                c.0 += 1;
                c.1 += m;
            }
        }
        contacts
    }

    pub fn window_samples(&self, window: Window) -> Vec<CollectiveSample> {
        let contacts = self.window_contacts(window);
        let empty = BTreeMap::new();
        let mut out = Vec::new();
        for agent in self.store.agent_ids() {
            let target = EventSequence::from_store(self.store, agent, window)
                .expect("agent id comes from the store");
            if target.is_empty() {
                continue;
            }
            let mine = contacts.get(&agent).unwrap_or(&empty);
            let related = RelatedIndividuals::new(
                agent,
                mine.keys().copied().collect(),
                self.history.frequent_partners(agent),
            );
            out.push(self.assemble(target, &related, mine));
        }
        out
    }

    /// The sample for one target, or `None` when it has no events in `window`.
    pub fn sample(&self, agent: AgentId, window: Window) -> Result<Option<CollectiveSample>> {
        let target = EventSequence::from_store(self.store, agent, window)?;
        if target.is_empty() {
            return Ok(None);
        }
        let related = related_individuals(
            agent,
            window,
            self.store,
            self.history,
            self.cfg.delta_km,
            self.cfg.metric,
        )?;
        let mut mine = BTreeMap::new();
        for &other in &related.co_occurring {
            let seq = EventSequence::from_store(self.store, other, window)?;
            let mut c = (0u32, 0i64);
            for t in &target.events {
                for e in &seq.events {
                    if co_occurs(t, e, self.cfg.delta_km, self.cfg.metric) {
                        c.0 += 1;
                        c.1 += overlap_minutes(t, e);
                    }
                }
            }
            mine.insert(other, c);
        }
        Ok(Some(self.assemble(target, &related, &mine)))
    }

    fn assemble(
        &self,
        target: EventSequence,
        related: &RelatedIndividuals,
        contacts: &BTreeMap<AgentId, (u32, i64)>,
    ) -> CollectiveSample {
        let window = target.window;
        let mut present: Vec<(i64, AgentId, EventSequence)> = related
            .union
            .iter()
            .filter_map(|&a| {
                let seq = EventSequence::from_store(self.store, a, window).ok()?;
                if seq.is_empty() {
                    return None;
                }
                let minutes = contacts.get(&a).map_or(0, |c| c.1)
                    + self.history.stats(target.agent, a).minutes;
                Some((minutes, a, seq))
            })
            .collect();
        // Longest combined interaction first; ties by id.
        present.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        present.truncate(self.cfg.max_others);
        present.sort_by_key(|p| p.1);
        let others: Vec<EventSequence> = present.into_iter().map(|p| p.2).collect();
        let rows: Vec<&EventSequence> = std::iter::once(&target).chain(&others).collect();
        let graph = build_event_graph(&rows, self.cfg.delta_km, self.cfg.metric);
        CollectiveSample {
            window,
            frequent: related.frequent.iter().copied().collect(),
            target,
            others,
            graph,
        }
    }
}
