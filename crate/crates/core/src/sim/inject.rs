use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{poi, LEISURE_POIS};
use crate::data::{
    sweep_pairs, AgentId, DaySplit, DistanceMetric, EventStore, History, LabelRecord, StayEvent,
};
use crate::error::{Error, Result};

pub const TAG_NORMAL: &str = "normal";
pub const TAG_UNEXPECTED: &str = "unexpected_occurrence";
pub const TAG_ABSENCE: &str = "absence";
/// The partner event moved away by an absence injection; not itself anomalous.
pub const TAG_ABSENCE_SOURCE: &str = "absence_source";
pub const TAG_COORDINATION: &str = "synthetic_coordination";
pub const TAG_LOCATION_OUTLIER: &str = "location_outlier";

/// Anomaly types in reporting order.
pub const ANOMALY_TYPES: [&str; 3] = [TAG_UNEXPECTED, TAG_ABSENCE, TAG_COORDINATION];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Target fraction of test-period events labeled with each type.
    pub unexpected_occurrence_rate: f64,
    pub absence_rate: f64,
    pub synthetic_coordination_rate: f64,
    pub location_outlier_rate: f64,
    pub coordination_group_size: usize,
    pub seed: u64,
    /// Window length used for the "not already at that place" check.
    pub window_days: i64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            unexpected_occurrence_rate: 0.0017,
            absence_rate: 0.0017,
            synthetic_coordination_rate: 0.0017,
            location_outlier_rate: 0.0,
            coordination_group_size: 3,
            seed: 11,
            window_days: 3,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.unexpected_occurrence_rate,
            self.absence_rate,
            self.synthetic_coordination_rate,
            self.location_outlier_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("injection rates must lie in [0, 1]".into()));
        }
        if self.coordination_group_size < 2 || self.window_days <= 0 {
            return Err(Error::Config(
                "coordination groups need >= 2 agents and windows >= 1 day".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Injection {
    pub store: EventStore,
    /// One record per test-period event.
    pub labels: Vec<LabelRecord>,
    /// Labeled anomalous events per type.
    pub counts: BTreeMap<String, usize>,
}

type Addr = (AgentId, usize);

/// Co-occurrence graph over the test period, rebuilt after each rewrite.
struct TestGraph {
    addrs: Vec<Addr>,
    node_of: HashMap<Addr, usize>,
    neighbors: Vec<Vec<usize>>,
}

struct Injector {
    store: EventStore,
    history: History,
    split: DaySplit,
    delta: f64,
    metric: DistanceMetric,
    window_days: i64,
    bounds: (f64, f64, f64, f64),
    touched: BTreeSet<Addr>,
    tags: BTreeMap<Addr, &'static str>,
    rng: ChaCha8Rng,
    graph: TestGraph,
}

impl Injector {
    fn event(&self, a: Addr) -> &StayEvent {
        self.store.event(a.0, a.1).expect("address from store")
    }

    fn rebuild(&mut self) {
        let mut flat = Vec::new();
        let mut addrs = Vec::new();
        for (agent, list) in self.store.iter() {
            let range = self.store.index_range(agent, self.split.test.0, self.split.test.1);
            for i in range {
                flat.push((agent as usize, &list[i]));
                addrs.push((agent, i));
            }
        }
        let mut neighbors = vec![Vec::new(); flat.len()];
        for (i, j) in sweep_pairs(&flat, self.delta, self.metric) {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        let node_of = addrs.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        self.graph = TestGraph {
            addrs,
            node_of,
            neighbors,
        };
    }

    fn degree(&self, a: Addr) -> usize {
        self.graph.neighbors[self.graph.node_of[&a]].len()
    }

    fn neighbor_addrs(&self, a: Addr) -> Vec<Addr> {
        self.graph.neighbors[self.graph.node_of[&a]]
            .iter()
            .map(|&n| self.graph.addrs[n])
            .collect()
    }

    fn shuffled_nodes(&mut self) -> Vec<Addr> {
        let mut nodes = self.graph.addrs.clone();
        nodes.shuffle(&mut self.rng);
        nodes
    }

    fn never_met(&self, a: AgentId, b: AgentId) -> bool {
        self.history.stats(a, b).count == 0
    }

    fn free(&self, a: Addr) -> bool {
        !self.touched.contains(&a)
    }

    fn window_of(&self, day: i64) -> (i64, i64) {
        let start = day.div_euclid(self.window_days) * self.window_days;
        (start, start + self.window_days)
    }

    /// Whether `agent` has any event within δ of `(x, y)` in the given days.
    fn visits(&self, agent: AgentId, x: f64, y: f64, days: (i64, i64)) -> bool {
        let probe = StayEvent::new(agent, 0, 1, x, y, 0);
        let list = self.store.events(agent).expect("agent from store");
        list[self.store.index_range(agent, days.0, days.1)]
            .iter()
            .any(|e| self.metric.distance(e, &probe) < self.delta)
    }

    fn relocate(&mut self, a: Addr, x: f64, y: f64, poi: u16) {
        let e = self.store.event_mut(a.0, a.1).expect("address from store");
        e.x = x;
        e.y = y;
        e.poi = poi;
    }

    /// Moves an event 0.3–1.5 km away to a spot where nothing overlapping in
    /// time is within δ, with a different leisure category. Returns false when
    /// no such spot was found.
    fn displace(&mut self, a: Addr, min_km: f64, max_km: f64) -> bool {
        let original = self.event(a).clone();
        let (x0, x1, y0, y1) = self.bounds;
        for _ in 0..50 {
            let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
            let dist = self.rng.random_range(min_km..max_km);
            let x = (original.x + dist * angle.cos()).clamp(x0, x1);
            let y = (original.y + dist * angle.sin()).clamp(y0, y1);
            let moved = StayEvent { x, y, ..original.clone() };
            if self.metric.distance(&moved, &original) <= self.delta {
                continue;
            }
            let crowded = self.store.iter_events().any(|(agent, _, e)| {
                agent != a.0
                    && crate::data::co_occurs(e, &moved, self.delta, self.metric)
            });
            if crowded {
                continue;
            }
            let categories: Vec<u16> = LEISURE_POIS.filter(|&p| p != original.poi).collect();
            let poi = *categories.choose(&mut self.rng).expect("categories");
            self.relocate(a, x, y, poi);
            return true;
        }
        false
    }

    fn unexpected_occurrence(&mut self, want: usize) -> usize {
        let mut done = 0;
        for c_ev in self.shuffled_nodes() {
            if done >= want {
                break;
            }
            let ec = self.event(c_ev).clone();
            if !self.free(c_ev) || self.degree(c_ev) > 0 || ec.poi < poi::RESTAURANT {
                continue;
            }
            let mid = ec.midpoint();
            let window = self.window_of(ec.day());
            let mut anchors = Vec::new();
            for (k, &anchor) in self.graph.addrs.iter().enumerate() {
                let ea = self.event(anchor);
                if anchor.0 == c_ev.0
                    || self.graph.neighbors[k].is_empty()
                    || !(ea.start <= mid && mid <= ea.end())
                    || self.metric.distance(ea, &ec) < self.delta
                {
                    continue;
                }
                let group: Vec<Addr> = std::iter::once(anchor)
                    .chain(self.neighbor_addrs(anchor))
                    .collect();
                let eligible = group
                    .iter()
                    .all(|&g| self.free(g) && g.0 != c_ev.0 && self.never_met(c_ev.0, g.0))
                    && !self.visits(c_ev.0, ea.x, ea.y, window);
                if eligible {
                    anchors.push((anchor, group));
                }
            }
            let Some((anchor, group)) = anchors.choose(&mut self.rng).cloned() else {
                continue;
            };
            let ea = self.event(anchor).clone();
            self.relocate(c_ev, ea.x, ea.y, ea.poi);
            self.tags.insert(c_ev, TAG_UNEXPECTED);
            self.touched.insert(c_ev);
            self.touched.extend(group);
            self.rebuild();
            debug_assert!(self.neighbor_addrs(c_ev).contains(&anchor));
            done += 1;
        }
        done
    }

    fn absence(&mut self, want: usize) -> usize {
        let mut done = 0;
        let fm: BTreeMap<AgentId, BTreeSet<AgentId>> = self
            .store
            .agent_ids()
            .into_iter()
            .map(|a| (a, self.history.frequent_partners(a)))
            .collect();
        for u in self.shuffled_nodes() {
            if done >= want {
                break;
            }
            if !self.free(u) {
                continue;
            }
            // u is the partner that goes missing; its frequent partners among
            // the current neighbors are the ones whose event becomes anomalous.
            let former = self.neighbor_addrs(u);
            let expecting: Vec<Addr> = former
                .iter()
                .copied()
                .filter(|n| fm[&n.0].contains(&u.0))
                .collect();
            if expecting.is_empty() || !former.iter().all(|&n| self.free(n)) {
                continue;
            }
            if !self.displace(u, 0.3, 1.5) {
                continue;
            }
            self.rebuild();
            debug_assert!(self.degree(u) == 0);
            self.tags.insert(u, TAG_ABSENCE_SOURCE);
            for &n in &expecting {
                self.tags.insert(n, TAG_ABSENCE);
            }
            done += expecting.len();
            self.touched.insert(u);
            self.touched.extend(former);
        }
        done
    }

    fn synthetic_coordination(&mut self, want: usize, group_size: usize) -> usize {
        let mut done = 0;
        for t in self.shuffled_nodes() {
            if done >= want {
                break;
            }
            if !self.free(t) || self.degree(t) > 0 {
                continue;
            }
            let et = self.event(t).clone();
            let mid = et.midpoint();
            let mut pool: Vec<Addr> = self
                .graph
                .addrs
                .iter()
                .copied()
                .filter(|&o| {
                    let eo = self.event(o);
                    o.0 != t.0
                        && self.free(o)
                        && self.degree(o) == 0
                        && eo.start <= mid
                        && mid <= eo.end()
                        && self.metric.distance(eo, &et) >= self.delta
                        && self.never_met(t.0, o.0)
                })
                .collect();
            pool.shuffle(&mut self.rng);
            let size = group_size.min((want - done).max(2));
            let mut group = vec![t];
            for o in pool {
                if group.len() == size {
                    break;
                }
                if group.iter().all(|g| g.0 != o.0 && self.never_met(g.0, o.0)) {
                    group.push(o);
                }
            }
            if group.len() < size {
                continue;
            }
            for &o in &group[1..] {
                self.relocate(o, et.x, et.y, et.poi);
            }
            for &g in &group {
                self.tags.insert(g, TAG_COORDINATION);
                self.touched.insert(g);
            }
            self.rebuild();
            done += group.len();
        }
        done
    }

    fn location_outlier(&mut self, want: usize) -> usize {
        let mut done = 0;
        for a in self.shuffled_nodes() {
            if done >= want {
                break;
            }
            if !self.free(a) || self.degree(a) > 0 || !self.displace(a, 1.5, 3.0) {
                continue;
            }
            self.tags.insert(a, TAG_LOCATION_OUTLIER);
            self.touched.insert(a);
            self.rebuild();
            done += 1;
        }
        done
    }
}

/// Injects anomalies into the test period of `store`. Earlier periods are
/// never modified; the interaction history is taken from the training period.
pub fn inject(
    store: &EventStore,
    split: &DaySplit,
    cfg: &InjectionConfig,
    delta: f64,
    metric: DistanceMetric,
) -> Result<Injection> {
    cfg.validate()?;
    let history = History::build(store, split.train.0, split.train.1, delta, metric);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (_, _, e) in store.iter_events() {
        x0 = x0.min(e.x);
        x1 = x1.max(e.x);
        y0 = y0.min(e.y);
        y1 = y1.max(e.y);
    }
    let mut inj = Injector {
        store: store.clone(),
        history,
        split: *split,
        delta,
        metric,
        window_days: cfg.window_days,
        bounds: (x0, x1, y0, y1),
        touched: BTreeSet::new(),
        tags: BTreeMap::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        graph: TestGraph {
            addrs: vec![],
            node_of: HashMap::new(),
            neighbors: vec![],
        },
    };
    inj.rebuild();
    let n_test = inj.graph.addrs.len();
    let want = |rate: f64| (rate * n_test as f64).round() as usize;

    let mut counts = BTreeMap::new();
    let plan: [(&str, usize); 4] = [
        (TAG_UNEXPECTED, want(cfg.unexpected_occurrence_rate)),
        (TAG_ABSENCE, want(cfg.absence_rate)),
        (TAG_COORDINATION, want(cfg.synthetic_coordination_rate)),
        (TAG_LOCATION_OUTLIER, want(cfg.location_outlier_rate)),
    ];
    for (tag, n) in plan {
        if n == 0 {
            continue;
        }
        let got = match tag {
            TAG_UNEXPECTED => inj.unexpected_occurrence(n),
            TAG_ABSENCE => inj.absence(n),
            TAG_COORDINATION => inj.synthetic_coordination(n, cfg.coordination_group_size),
            _ => inj.location_outlier(n),
        };
        if got < n {
            warn!("injection type={tag} requested={n} injected={got}: not enough eligible events");
        }
        counts.insert(tag.to_string(), got);
    }

    let labels = inj
        .graph
        .addrs
        .iter()
        .map(|&a| {
            let tag = inj.tags.get(&a).copied().unwrap_or(TAG_NORMAL);
            LabelRecord {
                agent_id: a.0,
                event_index: a.1,
                is_anomalous: u8::from(tag != TAG_NORMAL && tag != TAG_ABSENCE_SOURCE),
                anomaly_type: tag.to_string(),
            }
        })
        .collect();
    Ok(Injection {
        store: inj.store,
        labels,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::co_occurs;
    use crate::sim::{generate_world, WorldConfig};

    #[test]
    fn injections_touch_only_the_test_period_and_keep_times() {
        let world = generate_world(&WorldConfig {
            n_agents: 120,
            n_days: 16,
            ..WorldConfig::default()
        })
        .unwrap();
        let split = DaySplit::from_ratio(0, 16, [3, 1, 4]).unwrap();
        let cfg = InjectionConfig {
            unexpected_occurrence_rate: 0.003,
            absence_rate: 0.003,
            synthetic_coordination_rate: 0.003,
            ..InjectionConfig::default()
        };
        let inj = inject(&world.store, &split, &cfg, 0.04, DistanceMetric::Euclidean).unwrap();
        inj.store.validate(14).unwrap();
        for (a, i, e) in world.store.iter_events() {
            let after = inj.store.event(a, i).unwrap();
            assert_eq!((e.start, e.duration, e.dow), (after.start, after.duration, after.dow));
            if e.day() < split.test.0 {
                assert_eq!(e, after);
            }
        }
        for ty in ANOMALY_TYPES {
            assert!(inj.counts[ty] > 0, "{ty}: {:?}", inj.counts);
        }
        let n_pos = inj.labels.iter().filter(|l| l.is_anomalous == 1).count();
        assert_eq!(n_pos, inj.counts.values().sum::<usize>());

        let history = History::build(&world.store, 0, split.train.1, 0.04, DistanceMetric::Euclidean);
        let ev = |l: &LabelRecord| inj.store.event(l.agent_id, l.event_index).unwrap().clone();
        let coordinated: Vec<StayEvent> = inj
            .labels
            .iter()
            .filter(|l| l.anomaly_type == TAG_COORDINATION)
            .map(ev)
            .collect();
        // Every coordinated event meets its group; only the last group may be cut short.
        let mut short = 0;
        for e in &coordinated {
            let mates = coordinated
                .iter()
                .filter(|o| o.agent != e.agent && co_occurs(e, o, 0.04, DistanceMetric::Euclidean))
                .count();
            assert!(mates >= 1);
            if mates + 1 < cfg.coordination_group_size {
                short += 1;
            }
            for o in &coordinated {
                if o.agent != e.agent && co_occurs(e, o, 0.04, DistanceMetric::Euclidean) {
                    assert_eq!(history.stats(e.agent, o.agent).count, 0);
                }
            }
        }
        assert!(short < cfg.coordination_group_size, "{short} events in short groups");
        // Absence victims had the moved partner as a frequent partner.
        let sources: Vec<&LabelRecord> = inj
            .labels
            .iter()
            .filter(|l| l.anomaly_type == TAG_ABSENCE_SOURCE)
            .collect();
        assert!(!sources.is_empty());
        for s in sources {
            let before = world.store.event(s.agent_id, s.event_index).unwrap();
            let after = ev(s);
            assert!(DistanceMetric::Euclidean.distance(before, &after) > 0.04);
        }
    }
}
