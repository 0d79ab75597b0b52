use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentId, StayEvent, DEFAULT_POI_VOCAB, DOW_VOCAB};
use crate::error::{Error, Result};
use crate::io;

/// All stay events, grouped per agent in chronological order. An event is
/// addressed by `(agent, index)` where `index` is its position in the agent's
/// list; label files use the same addressing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStore {
    agents: BTreeMap<AgentId, Vec<StayEvent>>,
}

impl EventStore {
    pub fn from_events(events: impl IntoIterator<Item = StayEvent>) -> Self {
        let mut agents: BTreeMap<AgentId, Vec<StayEvent>> = BTreeMap::new();
        for e in events {
            agents.entry(e.agent).or_default().push(e);
        }
        for list in agents.values_mut() {
            list.sort_by_key(|e| e.start);
        }
        Self { agents }
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_events(&self) -> usize {
        self.agents.values().map(Vec::len).sum()
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.keys().copied().collect()
    }

    pub fn contains(&self, agent: AgentId) -> bool {
        self.agents.contains_key(&agent)
    }

    pub fn events(&self, agent: AgentId) -> Result<&[StayEvent]> {
        self.agents
            .get(&agent)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownAgent(agent))
    }

    pub fn event(&self, agent: AgentId, index: usize) -> Option<&StayEvent> {
        self.agents.get(&agent).and_then(|l| l.get(index))
    }

    /// Mutable access for location rewrites. Start times must not change, so
    /// chronological indices stay valid.
    pub(crate) fn event_mut(&mut self, agent: AgentId, index: usize) -> Option<&mut StayEvent> {
        self.agents.get_mut(&agent).and_then(|l| l.get_mut(index))
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentId, &[StayEvent])> {
        self.agents.iter().map(|(a, l)| (*a, l.as_slice()))
    }

    /// Every event with its address, ordered by agent then time.
    pub fn iter_events(&self) -> impl Iterator<Item = (AgentId, usize, &StayEvent)> {
        self.agents
            .iter()
            .flat_map(|(a, l)| l.iter().enumerate().map(move |(i, e)| (*a, i, e)))
    }

    /// Half-open range of days covered by the store.
    pub fn day_span(&self) -> Option<(i64, i64)> {
        let first = self.iter_events().map(|(_, _, e)| e.day()).min()?;
        let last = self.iter_events().map(|(_, _, e)| e.day()).max()?;
        Some((first, last + 1))
    }

    /// Indices of `agent`'s events whose start day lies in `[day_start, day_end)`.
    pub fn index_range(&self, agent: AgentId, day_start: i64, day_end: i64) -> std::ops::Range<usize> {
        let list = self.agents.get(&agent).map_or(&[][..], Vec::as_slice);
        let lo = list.partition_point(|e| e.day() < day_start);
        let hi = list.partition_point(|e| e.day() < day_end);
        lo..hi
    }

    pub fn validate(&self, n_poi: usize) -> Result<()> {
        for (a, i, e) in self.iter_events() {
            e.validate(n_poi)
                .map_err(|m| Error::Validation(format!("agent {a} event {i}: {m}")))?;
        }
        Ok(())
    }
}

pub fn load_events(path: &Path, n_poi: usize) -> Result<EventStore> {
    let rows: Vec<(usize, StayEvent)> = io::read_csv(path)?;
    for (line, e) in &rows {
        e.validate(n_poi)
            .map_err(|m| Error::Validation(format!("{}:{line}: {m}", path.display())))?;
    }
    Ok(EventStore::from_events(rows.into_iter().map(|(_, e)| e)))
}

pub fn write_events(path: &Path, store: &EventStore) -> Result<()> {
    io::write_atomic(path, &io::csv_bytes(store.iter_events().map(|(_, _, e)| e))?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub agent_id: AgentId,
    pub event_index: usize,
    pub is_anomalous: u8,
    pub anomaly_type: String,
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let rows: Vec<(usize, LabelRecord)> = io::read_csv(path)?;
    for (line, r) in &rows {
        if r.is_anomalous > 1 {
            return Err(Error::Validation(format!(
                "{}:{line}: is_anomalous must be 0 or 1",
                path.display()
            )));
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    io::write_atomic(path, &io::csv_bytes(labels)?)
}

/// Dataset metadata written next to the event file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_poi: usize,
    pub n_dow: usize,
    /// Human-readable description of minute 0.
    pub epoch: String,
    pub n_days: i64,
    pub n_agents: usize,
    pub n_events: usize,
    #[serde(default)]
    pub n_labels: usize,
    #[serde(default)]
    pub poi_names: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Manifest {
    pub fn describe(store: &EventStore, n_days: i64, poi_names: Vec<String>, seed: u64) -> Self {
        Self {
            n_poi: if poi_names.is_empty() {
                DEFAULT_POI_VOCAB
            } else {
                poi_names.len()
            },
            n_dow: DOW_VOCAB,
            epoch: "minute 0 = Monday 00:00 local time".into(),
            n_days,
            n_agents: store.n_agents(),
            n_events: store.n_events(),
            n_labels: 0,
            poi_names,
            seed,
        }
    }

    pub fn check(&self, store: &EventStore) -> Result<()> {
        if self.n_events != store.n_events() || self.n_agents != store.n_agents() {
            return Err(Error::Validation(format!(
                "manifest lists {} events / {} agents, store holds {} / {}",
                self.n_events,
                self.n_agents,
                store.n_events(),
                store.n_agents()
            )));
        }
        Ok(())
    }
}
