use coact_core::data::{DistanceMetric, EventStore, History, SampleBuilder, SampleConfig, StayEvent, Window};
use coact_core::eval::{auroc, hit_rate_at_k, RankedCandidates};
use coact_core::model::{FeatureStats, ModelConfig, ModelState};
use coact_core::scoring::{calibrate, percentile, raw_event_scores, ScoreCalibration, Term, N_NODE_TERMS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DAY: i64 = 1440;

fn stay(agent: u32, start: i64, duration: i64, x: f64, poi: u16) -> StayEvent {
    StayEvent::new(agent, start, duration, x, 0.0, poi)
}

/// Agents 0 and 1 spend three training evenings together; agent 2 is a
/// stranger. On day 3 agent 1 is either home with 0 or away.
fn town(partner_home: bool) -> EventStore {
    let mut events = Vec::new();
    for d in 0..3 {
        events.push(stay(0, d * DAY + 1080, 200, 0.0, 0));
        events.push(stay(1, d * DAY + 1090, 190, 0.0, 0));
        events.push(stay(2, d * DAY + 1080, 200, 5.0, 0));
    }
    events.push(stay(0, 3 * DAY + 1080, 200, 0.0, 0));
    events.push(stay(1, 3 * DAY + 1090, 190, if partner_home { 0.0 } else { 2.0 }, 8));
    events.push(stay(2, 3 * DAY + 1085, 150, 0.01, 4));
    EventStore::from_events(events)
}

fn scores_for(partner_home: bool) -> coact_core::scoring::RawScores {
    let store = town(partner_home);
    let history = History::build(&store, 0, 3, 0.04, DistanceMetric::Euclidean);
    let builder = SampleBuilder::new(&store, &history, SampleConfig::default());
    let window = Window {
        id: 1,
        day_start: 3,
        day_end: 4,
    };
    let sample = builder.sample(0, window).unwrap().unwrap();
    assert_eq!(sample.frequent, vec![1]);
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let state = ModelState::init(&cfg, FeatureStats::fit(&store, 0, 3)).unwrap();
    raw_event_scores(&state, &sample, 0, 0.04, DistanceMetric::Euclidean).unwrap()
}

#[test]
fn absent_frequent_partner_becomes_a_ghost() {
    let away = scores_for(false);
    assert_eq!(away.ghosts.len(), 1);
    assert_eq!(away.ghosts[0].0, 1);
    assert_eq!(away.neighbors.len(), 1, "the stranger is still a neighbor");
    assert_eq!(away.neighbors[0].0, 2);
    assert!((0.0..=1.0).contains(&away.notobs_raw()));

    let home = scores_for(true);
    assert!(home.ghosts.is_empty());
    assert_eq!(home.notobs_raw(), 0.0);
    let mut met: Vec<u32> = home.neighbors.iter().map(|n| n.0).collect();
    met.sort_unstable();
    assert_eq!(met, vec![1, 2]);
}

#[test]
fn missing_terms_calibrate_to_zero() {
    let cal = ScoreCalibration {
        node: vec![vec![0.0, 10.0]; N_NODE_TERMS],
        obs: vec![0.2, 0.4],
        notobs: vec![0.2, 0.4],
    };
    let home = calibrate(scores_for(true), &cal).unwrap();
    assert_eq!(home.notobs, 0.0);
    assert!(home.combined >= home.obs && home.combined >= home.node);
    assert_ne!(home.argmax, Term::Notobs);
}

#[test]
fn shuffled_labels_give_chance_auroc() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let scores: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
    let mut labels: Vec<bool> = (0..2000).map(|i| i < 200).collect();
    let mut total = 0.0;
    for _ in 0..20 {
        labels.shuffle(&mut rng);
        total += auroc(&labels, &scores).unwrap();
    }
    let mean = total / 20.0;
    assert!((mean - 0.5).abs() <= 0.05, "{mean}");
}

fn labeled_scores() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(-5.0f64..5.0, n),
        )
            .prop_filter("both classes", |(l, _)| l.iter().any(|x| *x) && l.iter().any(|x| !*x))
    })
}

proptest! {
    #[test]
    fn percentile_is_monotone(mut reference in proptest::collection::vec(-3.0f64..3.0, 1..50),
                              a in -4.0f64..4.0, b in -4.0f64..4.0) {
        reference.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (p, q) = (percentile(lo, &reference).unwrap(), percentile(hi, &reference).unwrap());
        prop_assert!(p <= q);
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
        prop_assert_eq!(percentile(reference[reference.len() - 1], &reference).unwrap(), 1.0);
    }

    #[test]
    fn auroc_ignores_increasing_transforms((labels, scores) in labeled_scores()) {
        let moved: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s + 7.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let base = auroc(&labels, &scores).unwrap();
        prop_assert!((base - auroc(&labels, &moved).unwrap()).abs() < 1e-12);
        prop_assert!((base - auroc(&labels, &squashed).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn hits_in_top_k_never_decrease((labels, scores) in labeled_scores()) {
        let r = RankedCandidates::new(
            scores.iter().zip(&labels).enumerate().map(|(i, (s, l))| (i as u64, *s, *l)).collect(),
        );
        let mut prev = 0.0;
        for k in 1..=r.len() {
            let hits = k as f64 * hit_rate_at_k(&r, k).unwrap();
            prop_assert!(hits + 1e-9 >= prev);
            prev = hits;
        }
        prop_assert!((prev - r.n_positive() as f64).abs() < 1e-9);
    }
}
