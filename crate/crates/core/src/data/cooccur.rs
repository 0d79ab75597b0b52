use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{co_occurs, overlap_minutes, AgentId, DistanceMetric, EventStore, StayEvent};

/// Co-occurring pairs `(i, j)`, `i < j`, between events of different groups,
/// found with a sweep over start times. Sorted ascending.
pub fn sweep_pairs(
    events: &[(usize, &StayEvent)],
    delta: f64,
    metric: DistanceMetric,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| (events[i].1.start, i));
    let mut active: Vec<usize> = Vec::new();
    let mut pairs = Vec::new();
    for i in order {
        let (gi, ei) = events[i];
        active.retain(|&j| events[j].1.end() >= ei.start);
        for &j in &active {
            let (gj, ej) = events[j];
            if gi != gj && metric.distance(ei, ej) < delta {
                pairs.push((i.min(j), i.max(j)));
            }
        }
        active.push(i);
    }
    pairs.sort_unstable();
    pairs
}

/// Exhaustive pairwise reference for [`sweep_pairs`].
pub fn brute_force_pairs(
    events: &[(usize, &StayEvent)],
    delta: f64,
    metric: DistanceMetric,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..events.len() {
        for j in i + 1..events.len() {
            if events[i].0 != events[j].0 && co_occurs(events[i].1, events[j].1, delta, metric) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Interaction totals for one pair of agents. One interaction is one
/// co-occurring event pair; its duration is the interval intersection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub count: u32,
    pub minutes: i64,
}

/// Pairwise interaction history over a fixed day range (the training period).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub day_start: i64,
    pub day_end: i64,
    partners: BTreeMap<AgentId, BTreeMap<AgentId, PairStats>>,
}

/// Frequent-meeting rule: at least this many interactions ...
pub const FM_MIN_COUNT: u32 = 2;
/// ... and strictly more than this many minutes in total.
pub const FM_MIN_MINUTES: i64 = 120;

impl History {
    pub fn build(
        store: &EventStore,
        day_start: i64,
        day_end: i64,
        delta: f64,
        metric: DistanceMetric,
    ) -> Self {
        let mut events = Vec::new();
        for (agent, list) in store.iter() {
            let range = store.index_range(agent, day_start, day_end);
            events.extend(list[range].iter().map(|e| (agent as usize, e)));
        }
        let mut partners: BTreeMap<AgentId, BTreeMap<AgentId, PairStats>> = BTreeMap::new();
        for (i, j) in sweep_pairs(&events, delta, metric) {
            let (a, b) = (events[i].1, events[j].1);
            let minutes = overlap_minutes(a, b);
            for (x, y) in [(a.agent, b.agent), (b.agent, a.agent)] {
                let s = partners.entry(x).or_default().entry(y).or_default();
                s.count += 1;
                s.minutes += minutes;
            }
        }
        Self {
            day_start,
            day_end,
            partners,
        }
    }

    pub fn stats(&self, a: AgentId, b: AgentId) -> PairStats {
        self.partners
            .get(&a)
            .and_then(|m| m.get(&b))
            .copied()
            .unwrap_or_default()
    }

    /// Everyone `a` interacted with at least once, with totals.
    pub fn partners(&self, a: AgentId) -> impl Iterator<Item = (AgentId, PairStats)> + '_ {
        self.partners
            .get(&a)
            .into_iter()
            .flat_map(|m| m.iter().map(|(b, s)| (*b, *s)))
    }

    pub fn frequent_partners(&self, a: AgentId) -> BTreeSet<AgentId> {
        self.partners(a)
            .filter(|(_, s)| s.count >= FM_MIN_COUNT && s.minutes > FM_MIN_MINUTES)
            .map(|(b, _)| b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MINUTES_PER_DAY;

    #[test]
    fn history_counts_pairs_and_fm_threshold() {
        let d = MINUTES_PER_DAY;
        let mut events = vec![];
        // 1 and 2: three 60-minute overlaps on different days -> FM.
        // 1 and 3: two 45-minute overlaps -> not FM (90 min).
        for day in 0..3 {
            events.push(StayEvent::new(1, day * d + 600, 60, 0.0, 0.0, 1));
            events.push(StayEvent::new(2, day * d + 600, 60, 0.0, 0.0, 1));
        }
        for day in 0..2 {
            events.push(StayEvent::new(1, day * d + 900, 45, 5.0, 5.0, 4));
            events.push(StayEvent::new(3, day * d + 900, 45, 5.0, 5.0, 4));
        }
        let store = EventStore::from_events(events);
        let h = History::build(&store, 0, 3, 0.04, DistanceMetric::Euclidean);
        assert_eq!(h.stats(1, 2), PairStats { count: 3, minutes: 180 });
        assert_eq!(h.stats(3, 1), PairStats { count: 2, minutes: 90 });
        assert_eq!(h.frequent_partners(1), BTreeSet::from([2]));
        assert!(h.frequent_partners(3).is_empty());

        let limited = History::build(&store, 0, 1, 0.04, DistanceMetric::Euclidean);
        assert_eq!(limited.stats(1, 2).count, 1);
    }
}
