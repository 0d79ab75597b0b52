use std::collections::{BTreeMap, BTreeSet};

use coact_core::data::{
    co_occurs, sweep_pairs, AgentId, DaySplit, DistanceMetric, EventStore, History, StayEvent, DEFAULT_DELTA_KM,
};
use coact_core::sim::{
    generate_world, inject, poi, Injection, InjectionConfig, World, WorldConfig, TAG_ABSENCE, TAG_ABSENCE_SOURCE,
    TAG_COORDINATION, TAG_UNEXPECTED,
};

const METRIC: DistanceMetric = DistanceMetric::Euclidean;

struct Setup {
    world: World,
    split: DaySplit,
    cfg: InjectionConfig,
    injection: Injection,
    history: History,
}

fn setup(seed: u64) -> Setup {
    let world = generate_world(&WorldConfig {
        seed,
        ..WorldConfig::default()
    })
    .unwrap();
    let split = DaySplit::from_ratio(0, 24, [3, 1, 4]).unwrap();
    let cfg = InjectionConfig {
        seed: seed + 100,
        ..InjectionConfig::default()
    };
    let injection = inject(&world.store, &split, &cfg, DEFAULT_DELTA_KM, METRIC).unwrap();
    let history = History::build(&world.store, split.train.0, split.train.1, DEFAULT_DELTA_KM, METRIC);
    Setup {
        world,
        split,
        cfg,
        injection,
        history,
    }
}

type Addr = (AgentId, usize);

/// Test-period co-occurrence adjacency of a store.
fn adjacency(store: &EventStore, split: &DaySplit) -> BTreeMap<Addr, BTreeSet<Addr>> {
    let mut addrs = Vec::new();
    let mut events: Vec<(usize, &StayEvent)> = Vec::new();
    for (agent, list) in store.iter() {
        for i in store.index_range(agent, split.test.0, split.test.1) {
            addrs.push((agent, i));
            events.push((agent as usize, &list[i]));
        }
    }
    let mut adj: BTreeMap<Addr, BTreeSet<Addr>> = addrs.iter().map(|&a| (a, BTreeSet::new())).collect();
    for (i, j) in sweep_pairs(&events, DEFAULT_DELTA_KM, METRIC) {
        adj.get_mut(&addrs[i]).unwrap().insert(addrs[j]);
        adj.get_mut(&addrs[j]).unwrap().insert(addrs[i]);
    }
    adj
}

fn tagged<'a>(s: &'a Setup, tag: &'a str) -> impl Iterator<Item = Addr> + 'a {
    s.injection
        .labels
        .iter()
        .filter(move |l| l.anomaly_type == tag)
        .map(|l| (l.agent_id, l.event_index))
}

#[test]
fn earlier_periods_are_untouched_and_labels_cover_the_test_period() {
    let s = setup(7);
    for (agent, list) in s.world.store.iter() {
        let after = s.injection.store.events(agent).unwrap();
        assert_eq!(list.len(), after.len());
        let r = s.world.store.index_range(agent, 0, s.split.test.0);
        assert_eq!(&list[r.clone()], &after[r]);
    }
    let n_test: usize = s
        .world
        .store
        .agent_ids()
        .into_iter()
        .map(|a| s.world.store.index_range(a, s.split.test.0, s.split.test.1).len())
        .sum();
    assert_eq!(s.injection.labels.len(), n_test);
}

#[test]
fn injection_ratios_match_requested_rates() {
    for seed in [7, 8] {
        let s = setup(seed);
        let n = s.injection.labels.len() as f64;
        for (tag, rate) in [
            (TAG_UNEXPECTED, s.cfg.unexpected_occurrence_rate),
            (TAG_ABSENCE, s.cfg.absence_rate),
            (TAG_COORDINATION, s.cfg.synthetic_coordination_rate),
        ] {
            let got = tagged(&s, tag).count() as f64 / n;
            assert!((got - rate).abs() <= 0.2 * rate, "seed {seed} {tag}: {got} vs {rate}");
            assert_eq!(s.injection.counts[tag], tagged(&s, tag).count());
        }
    }
}

#[test]
fn unexpected_occurrences_join_strangers() {
    let s = setup(7);
    let before = adjacency(&s.world.store, &s.split);
    let after = adjacency(&s.injection.store, &s.split);
    let mut n = 0;
    for a in tagged(&s, TAG_UNEXPECTED) {
        n += 1;
        assert!(before[&a].is_empty(), "{a:?} had company before");
        assert!(!after[&a].is_empty(), "{a:?} has no company after");
        for b in &after[&a] {
            assert_eq!(s.history.stats(a.0, b.0).count, 0, "{a:?} already knew {}", b.0);
        }
        let e = s.world.store.event(a.0, a.1).unwrap();
        let moved = s.injection.store.event(a.0, a.1).unwrap();
        assert!(e.poi >= poi::RESTAURANT);
        assert_eq!((e.start, e.duration), (moved.start, moved.duration));
    }
    assert!(n > 0);
}

#[test]
fn absences_remove_an_expected_partner() {
    let s = setup(7);
    let before = adjacency(&s.world.store, &s.split);
    let after = adjacency(&s.injection.store, &s.split);
    let sources: Vec<Addr> = tagged(&s, TAG_ABSENCE_SOURCE).collect();
    assert!(!sources.is_empty());
    for u in &sources {
        assert!(after[u].is_empty(), "source {u:?} still meets someone");
    }
    for a in tagged(&s, TAG_ABSENCE) {
        let lost: Vec<&Addr> = before[&a]
            .iter()
            .filter(|u| sources.contains(u) && !after[&a].contains(u))
            .collect();
        assert!(!lost.is_empty(), "{a:?} lost nobody");
        assert!(lost
            .iter()
            .any(|u| s.history.frequent_partners(a.0).contains(&u.0)));
    }
}

#[test]
fn coordinated_groups_are_strangers_meeting_at_once() {
    let s = setup(7);
    let after = adjacency(&s.injection.store, &s.split);
    let group: Vec<Addr> = tagged(&s, TAG_COORDINATION).collect();
    assert!(group.len() >= s.cfg.coordination_group_size);
    for &a in &group {
        let met: Vec<&Addr> = after[&a].iter().filter(|b| group.contains(b)).collect();
        assert!(!met.is_empty(), "{a:?} met nobody from its group");
        for b in met {
            assert_eq!(s.history.stats(a.0, b.0).count, 0);
        }
    }
}

#[test]
fn household_members_share_the_night_at_home() {
    let s = setup(3);
    let store = &s.world.store;
    let mut households: BTreeMap<usize, Vec<AgentId>> = BTreeMap::new();
    for a in &s.world.agents {
        households.entry(a.household).or_default().push(a.id);
    }
    let mut checked = 0;
    for members in households.values().filter(|m| m.len() >= 2) {
        let (a, b) = (members[0], members[1]);
        for day in 0..5 {
            let midnight = (day + 1) * 1440;
            let night = |agent: AgentId| {
                store
                    .events(agent)
                    .unwrap()
                    .iter()
                    .find(|e| e.start <= midnight && midnight <= e.end())
                    .cloned()
                    .expect("someone is always somewhere")
            };
            let (x, y) = (night(a), night(b));
            assert_eq!((x.poi, y.poi), (poi::HOME, poi::HOME), "night {day}");
            assert!(co_occurs(&x, &y, DEFAULT_DELTA_KM, METRIC), "household {a}/{b} apart on night {day}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}
