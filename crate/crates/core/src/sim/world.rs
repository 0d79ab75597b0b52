use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AgentId, EventStore, Manifest, StayEvent, MINUTES_PER_DAY};
use crate::error::{Error, Result};

pub const POI_NAMES: [&str; 14] = [
    "home",
    "office",
    "school",
    "child_care",
    "restaurant",
    "cafe",
    "grocery",
    "mall",
    "park",
    "gym",
    "hospital",
    "library",
    "bar",
    "worship",
];

pub mod poi {
    pub const HOME: u16 = 0;
    pub const OFFICE: u16 = 1;
    pub const SCHOOL: u16 = 2;
    pub const CHILD_CARE: u16 = 3;
    pub const RESTAURANT: u16 = 4;
    pub const CAFE: u16 = 5;
    pub const GROCERY: u16 = 6;
    pub const MALL: u16 = 7;
    pub const PARK: u16 = 8;
    pub const WORSHIP: u16 = 13;
}

/// Categories a leisure or errand trip can go to.
pub const LEISURE_POIS: std::ops::RangeInclusive<u16> = poi::RESTAURANT..=poi::WORSHIP;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_agents: usize,
    pub n_days: i64,
    pub seed: u64,
    /// Sites lie in `[-x_range_km, x_range_km] × [-y_range_km, y_range_km]`.
    pub x_range_km: f64,
    pub y_range_km: f64,
    /// Relative frequency of household sizes 1, 2, 3, ...
    pub household_size_weights: Vec<f64>,
    pub team_size_min: usize,
    pub team_size_max: usize,
    pub leisure_sites_per_category: usize,
    pub favorite_sites: usize,
    pub start_jitter_min: f64,
    pub location_jitter_km: f64,
    pub weekday_leisure_prob: f64,
    pub lunch_prob: f64,
    pub weekend_outing_prob: f64,
    pub weekend_leisure_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_agents: 200,
            n_days: 24,
            seed: 7,
            x_range_km: 4.6,
            y_range_km: 5.6,
            household_size_weights: vec![0.3, 0.3, 0.25, 0.15],
            team_size_min: 2,
            team_size_max: 4,
            leisure_sites_per_category: 6,
            favorite_sites: 3,
            start_jitter_min: 20.0,
            location_jitter_km: 0.005,
            weekday_leisure_prob: 0.35,
            lunch_prob: 0.3,
            weekend_outing_prob: 0.6,
            weekend_leisure_prob: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Generation(m.to_string()));
        if self.n_agents == 0 || self.n_days <= 0 {
            return fail("n_agents and n_days must be positive");
        }
        if !(self.x_range_km > 0.0 && self.y_range_km > 0.0) {
            return fail("coordinate ranges must be positive");
        }
        if self.household_size_weights.iter().any(|w| !(*w >= 0.0))
            || self.household_size_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("household size weights must be non-negative with a positive sum");
        }
        if self.team_size_min == 0 || self.team_size_min > self.team_size_max {
            return fail("team sizes must satisfy 1 <= min <= max");
        }
        if self.leisure_sites_per_category == 0 || self.favorite_sites == 0 {
            return fail("need at least one leisure site per category and one favorite");
        }
        if !(self.start_jitter_min >= 0.0 && self.location_jitter_km >= 0.0) {
            return fail("jitter must be non-negative");
        }
        // A workday's fixed anchors must survive the jitter.
        if self.start_jitter_min > 90.0 {
            return fail("start-time jitter over 90 minutes overfills the day template");
        }
        let probs = [
            self.weekday_leisure_prob,
            self.lunch_prob,
            self.weekend_outing_prob,
            self.weekend_leisure_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub x: f64,
    pub y: f64,
    pub poi: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Worker,
    Student,
    Child,
    Homemaker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: AgentId,
    pub household: usize,
    pub role: Role,
    pub home: usize,
    pub team: Option<usize>,
    pub lunch: Option<usize>,
    pub favorites: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub store: EventStore,
    pub manifest: Manifest,
    pub sites: Vec<Site>,
    pub agents: Vec<AgentProfile>,
}

const MIN_SITE_SEPARATION_KM: f64 = 0.1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct SitePlacer<'a> {
    cfg: &'a WorldConfig,
    sites: Vec<Site>,
}

impl SitePlacer<'_> {
    fn place(&mut self, rng: &mut ChaCha8Rng, poi: u16) -> Result<usize> {
        for _ in 0..1000 {
            let x = rng.random_range(-self.cfg.x_range_km..=self.cfg.x_range_km);
            let y = rng.random_range(-self.cfg.y_range_km..=self.cfg.y_range_km);
            let clear = self
                .sites
                .iter()
                .all(|s| (s.x - x).hypot(s.y - y) >= MIN_SITE_SEPARATION_KM);
            if clear {
                self.sites.push(Site { x, y, poi });
                return Ok(self.sites.len() - 1);
            }
        }
        Err(Error::Generation(
            "area too small to separate all sites".into(),
        ))
    }
}

/// An out-of-home activity `[start, end)` at a site, in absolute minutes.
#[derive(Clone, Copy, Debug)]
struct Activity {
    start: i64,
    end: i64,
    site: usize,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut layout_rng = rng_for(cfg.seed, 0);
    let mut placer = SitePlacer {
        cfg,
        sites: Vec::new(),
    };

    // Households and roles.
    let mut households: Vec<Vec<usize>> = Vec::new();
    let mut roles: Vec<Role> = Vec::new();
    let size_dist = rand_distr::weighted::WeightedIndex::new(&cfg.household_size_weights)
        .map_err(|e| Error::Generation(e.to_string()))?;
    while roles.len() < cfg.n_agents {
        let size = (size_dist.sample(&mut layout_rng) + 1).min(cfg.n_agents - roles.len());
        let mut members = Vec::new();
        for m in 0..size {
            let role = match (size, m) {
                (1, _) if layout_rng.random_bool(0.15) => Role::Homemaker,
                (_, 0) => Role::Worker,
                (_, 1) if layout_rng.random_bool(0.3) => Role::Homemaker,
                (_, 1) => Role::Worker,
                _ if layout_rng.random_bool(0.7) => Role::Student,
                _ => Role::Child,
            };
            members.push(roles.len());
            roles.push(role);
        }
        households.push(members);
    }
    let homes: Vec<usize> = (0..households.len())
        .map(|_| placer.place(&mut layout_rng, poi::HOME))
        .collect::<Result<_>>()?;

    // Teams: offices, school classes and child-care groups.
    let mut team_of = vec![None; cfg.n_agents];
    for (role, category) in [
        (Role::Worker, poi::OFFICE),
        (Role::Student, poi::SCHOOL),
        (Role::Child, poi::CHILD_CARE),
    ] {
        let mut pool: Vec<usize> = (0..cfg.n_agents).filter(|&a| roles[a] == role).collect();
        rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut layout_rng);
        let mut rest = pool.as_slice();
        while !rest.is_empty() {
            let size = layout_rng
                .random_range(cfg.team_size_min..=cfg.team_size_max)
                .min(rest.len());
            let site = placer.place(&mut layout_rng, category)?;
            for &a in &rest[..size] {
                team_of[a] = Some(site);
            }
            rest = &rest[size..];
        }
    }

    let mut leisure: Vec<usize> = Vec::new();
    for category in LEISURE_POIS {
        for _ in 0..cfg.leisure_sites_per_category {
            leisure.push(placer.place(&mut layout_rng, category)?);
        }
    }
    let sites = placer.sites;
    let nearest_eatery = |site: usize| {
        leisure
            .iter()
            .copied()
            .filter(|&l| matches!(sites[l].poi, poi::RESTAURANT | poi::CAFE))
            .min_by(|&a, &b| {
                let d = |l: usize| (sites[l].x - sites[site].x).hypot(sites[l].y - sites[site].y);
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            })
    };
    let outing_sites: Vec<usize> = leisure
        .iter()
        .copied()
        .filter(|&l| matches!(sites[l].poi, poi::PARK | poi::MALL | poi::RESTAURANT))
        .collect();

    let mut agents = Vec::with_capacity(cfg.n_agents);
    for (h, members) in households.iter().enumerate() {
        for &a in members {
            let favorites = (0..cfg.favorite_sites)
                .map(|_| *leisure.choose(&mut layout_rng).expect("leisure sites exist"))
                .collect();
            agents.push(AgentProfile {
                id: a as AgentId,
                household: h,
                role: roles[a],
                home: homes[h],
                team: team_of[a],
                lunch: team_of[a]
                    .filter(|_| roles[a] == Role::Worker)
                    .and_then(nearest_eatery),
                favorites,
            });
        }
    }
    let household_outing_site: Vec<usize> = households
        .iter()
        .map(|_| *outing_sites.choose(&mut layout_rng).expect("outing sites exist"))
        .collect();

    let jitter = Normal::new(0.0, cfg.start_jitter_min.max(1e-9))
        .map_err(|e| Error::Generation(e.to_string()))?;
    let loc = Normal::new(0.0, cfg.location_jitter_km.max(1e-12))
        .map_err(|e| Error::Generation(e.to_string()))?;

    // Shared weekend outings per household and day.
    let outings: Vec<Vec<Option<(i64, i64)>>> = households
        .iter()
        .enumerate()
        .map(|(h, _)| {
            let mut rng = rng_for(cfg.seed, 1 << 32 | h as u64);
            (0..cfg.n_days)
                .map(|d| {
                    let weekend = d.rem_euclid(7) >= 5;
                    let draw = rng.random_bool(cfg.weekend_outing_prob);
                    let start = 660 + jitter.sample(&mut rng).round() as i64;
                    let dur = rng.random_range(120..=180);
                    (weekend && draw).then_some((start, dur))
                })
                .collect()
        })
        .collect();

    let mut events = Vec::new();
    for profile in &agents {
        let mut rng = rng_for(cfg.seed, 2 << 32 | u64::from(profile.id));
        let j = |rng: &mut ChaCha8Rng| jitter.sample(rng).round() as i64;
        let mut acts: Vec<Activity> = Vec::new();
        for d in 0..cfg.n_days {
            let base = d * MINUTES_PER_DAY;
            let weekend = d.rem_euclid(7) >= 5;
            let mut day: Vec<Activity> = Vec::new();
            let push = |day: &mut Vec<Activity>, start: i64, end: i64, site: usize| {
                day.push(Activity {
                    start: base + start,
                    end: base + end,
                    site,
                });
            };
            if weekend {
                if let Some((start, dur)) = outings[profile.household][d as usize] {
                    let s = start + rng.random_range(-5..=5);
                    push(&mut day, s, s + dur, household_outing_site[profile.household]);
                }
                if profile.role == Role::Homemaker && rng.random_bool(0.6) {
                    let s = 570 + j(&mut rng) / 2;
                    push(&mut day, s, s + rng.random_range(40..=70), grocery(&sites, &leisure, profile, &mut rng));
                }
                if rng.random_bool(cfg.weekend_leisure_prob) {
                    let s = 930 + j(&mut rng);
                    let site = *profile.favorites.choose(&mut rng).expect("favorites");
                    push(&mut day, s, s + rng.random_range(60..=120), site);
                }
            } else {
                match (profile.role, profile.team) {
                    (Role::Homemaker, _) | (_, None) => {
                        if rng.random_bool(0.7) {
                            let s = 600 + j(&mut rng);
                            push(&mut day, s, s + rng.random_range(45..=75), grocery(&sites, &leisure, profile, &mut rng));
                        }
                        if rng.random_bool(0.5) {
                            let s = 840 + j(&mut rng);
                            let site = *profile.favorites.choose(&mut rng).expect("favorites");
                            push(&mut day, s, s + rng.random_range(60..=120), site);
                        }
                    }
                    (role, Some(team)) => {
                        let (arrive, leave) = match role {
                            Role::Student => (490, 930),
                            Role::Child => (510, 990),
                            _ => (540, 1050),
                        };
                        let a = arrive + j(&mut rng) / 2;
                        let l = leave + j(&mut rng);
                        if role == Role::Worker && rng.random_bool(cfg.lunch_prob) {
                            let noon = 720 + rng.random_range(-10..=10);
                            let back = noon + rng.random_range(40..=60);
                            push(&mut day, a, noon, team);
                            push(&mut day, noon + 5, back, profile.lunch.unwrap_or(team));
                            push(&mut day, back + 5, l, team);
                        } else {
                            push(&mut day, a, l, team);
                        }
                        let leisure_prob = if role == Role::Worker {
                            cfg.weekday_leisure_prob
                        } else {
                            cfg.weekday_leisure_prob / 2.0
                        };
                        if rng.random_bool(leisure_prob) {
                            let s = l + rng.random_range(20..=40);
                            let site = *profile.favorites.choose(&mut rng).expect("favorites");
                            push(&mut day, s, s + rng.random_range(60..=120), site);
                        }
                    }
                }
            }
            day.sort_by_key(|a| a.start);
            for act in day {
                let fits = acts.last().is_none_or(|prev| act.start >= prev.end + 10);
                if fits && act.end > act.start {
                    acts.push(act);
                }
            }
        }

        // Home stays fill the gaps between activities, minus travel time.
        let horizon = cfg.n_days * MINUTES_PER_DAY;
        let mut cursor = 0i64;
        let emit = |events: &mut Vec<StayEvent>, start: i64, end: i64, site: usize, rng: &mut ChaCha8Rng| {
            let s = &sites[site];
            events.push(StayEvent::new(
                profile.id,
                start,
                end - start,
                s.x + loc.sample(rng),
                s.y + loc.sample(rng),
                s.poi,
            ));
        };
        for act in &acts {
            let home_end = act.start - 20;
            if home_end - cursor >= 30 {
                emit(&mut events, cursor, home_end, profile.home, &mut rng);
            }
            emit(&mut events, act.start, act.end, act.site, &mut rng);
            cursor = act.end + 20;
        }
        if horizon - cursor >= 30 {
            emit(&mut events, cursor, horizon, profile.home, &mut rng);
        }
    }

    let store = EventStore::from_events(events);
    store
        .validate(POI_NAMES.len())
        .map_err(|e| Error::Generation(e.to_string()))?;
    let manifest = Manifest::describe(
        &store,
        cfg.n_days,
        POI_NAMES.iter().map(|s| s.to_string()).collect(),
        cfg.seed,
    );
    Ok(World {
        store,
        manifest,
        sites,
        agents,
    })
}

fn grocery(sites: &[Site], leisure: &[usize], profile: &AgentProfile, rng: &mut ChaCha8Rng) -> usize {
    let home = &sites[profile.home];
    let mut stores: Vec<(f64, usize)> = leisure
        .iter()
        .filter(|&&l| sites[l].poi == poi::GROCERY)
        .map(|&l| ((sites[l].x - home.x).hypot(sites[l].y - home.y), l))
        .collect();
    stores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // Usually the closest store, sometimes the second closest.
    let pick = if stores.len() > 1 && rng.random_bool(0.3) { 1 } else { 0 };
    stores[pick].1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_agents: 40,
            n_days: 7,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a.store, b.store);
        let c = generate_world(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn events_per_agent_day_in_range() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let rate = w.store.n_events() as f64 / (200.0 * 24.0);
        assert!((2.0..=6.0).contains(&rate), "{rate}");
        assert_eq!(w.manifest.n_events, w.store.n_events());
    }

    #[test]
    fn invalid_config_is_a_generation_error() {
        let bad = WorldConfig {
            team_size_min: 0,
            ..small()
        };
        assert!(matches!(generate_world(&bad), Err(Error::Generation(_))));
        let tiny = WorldConfig {
            x_range_km: 0.01,
            y_range_km: 0.01,
            ..small()
        };
        assert!(matches!(generate_world(&tiny), Err(Error::Generation(_))));
    }
}
