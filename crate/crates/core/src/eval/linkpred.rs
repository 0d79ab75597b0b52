use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{hit_rate_at_k, jaccard_at_alpha, mrr, select_alpha_best, RankedCandidates};
use crate::data::{pad_batch, AgentId, EventStore, History, SampleBuilder, SampleConfig};
use crate::error::{Error, Result};
use crate::model::{forward_two_phase, mask_single, ModelState, Network};
use crate::scoring::{cosine, link_likelihood};
use crate::tensor::Tape;

/// One masked event and the people who might have met it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkInstance {
    pub agent_id: AgentId,
    pub event_index: usize,
    /// `(agent, model score, training co-occurrence count, is neighbor)`.
    pub candidates: Vec<(AgentId, f64, u32, bool)>,
}

/// Masks every target event with at least one neighbor in
/// `[day_start, day_end)` and scores each related person by the best link
/// likelihood over their events.
pub fn link_instances(
    state: &ModelState,
    store: &EventStore,
    history: &History,
    cfg: &SampleConfig,
    day_start: i64,
    day_end: i64,
) -> Result<Vec<LinkInstance>> {
    let builder = SampleBuilder::new(store, history, cfg.clone());
    let samples = builder.samples(day_start, day_end);
    let nested: Vec<Vec<LinkInstance>> = samples
        .par_iter()
        .map(|s| {
            let batch = pad_batch(s)?;
            let l = batch.max_len;
            let mut out = Vec::new();
            for p in 0..s.target.len() {
                let cell = batch.cell(0, p);
                let inst = mask_single(batch.clone(), cell)?;
                let neighbors = inst.neighbors(cell);
                if neighbors.is_empty() {
                    continue;
                }
                let mut tape = Tape::new();
                let net = Network::new(&mut tape, state, false);
                let fwd = forward_two_phase(&mut tape, &net, &inst)?;
                let z = tape.value(fwd.z_link);
                let candidates = (1..batch.n_rows)
                    .map(|r| {
                        let cells = (0..l).map(|q| r * l + q).filter(|&c| batch.is_valid(c));
                        let score = cells
                            .map(|c| link_likelihood(cosine(z.row(cell), z.row(c))))
                            .fold(0.0, f64::max);
                        let agent = batch.agents[r];
                        let met = neighbors.iter().any(|n| n / l == r);
                        (agent, score, history.stats(s.target.agent, agent).count, met)
                    })
                    .collect();
                out.push(LinkInstance {
                    agent_id: s.target.agent,
                    event_index: s.target.indices[p].expect("observed event"),
                    candidates,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkScores {
    pub hr_at_1: f64,
    pub mrr: f64,
    pub js_at_alpha: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPredReport {
    pub n_instances: usize,
    pub model: LinkScores,
    /// Uniformly random scores: HR@1 is the exact expectation, MRR and JS
    /// are averaged over seeded draws.
    pub random: LinkScores,
    /// Ranks by co-occurrence count over the training period.
    pub history: LinkScores,
}

fn summarize(rankings: &[RankedCandidates]) -> Result<LinkScores> {
    let n = rankings.len() as f64;
    let mut hr = 0.0;
    let mut rr = 0.0;
    for r in rankings {
        hr += hit_rate_at_k(r, 1)?;
        rr += mrr(r)?;
    }
    let alpha = select_alpha_best(rankings);
    let js = rankings.iter().map(|r| jaccard_at_alpha(r, alpha)).sum::<f64>() / n;
    Ok(LinkScores {
        hr_at_1: hr / n,
        mrr: rr / n,
        js_at_alpha: js,
        alpha,
    })
}

pub const RANDOM_DRAWS: usize = 20;

pub fn evaluate_link_prediction(instances: &[LinkInstance], seed: u64) -> Result<LinkPredReport> {
    if instances.is_empty() {
        return Err(Error::UndefinedMetric("no link-prediction instances".into()));
    }
    let rank = |f: &dyn Fn(&(AgentId, f64, u32, bool), &LinkInstance) -> f64| -> Vec<RankedCandidates> {
        instances
            .iter()
            .map(|i| {
                RankedCandidates::new(
                    i.candidates
                        .iter()
                        .map(|c| (u64::from(c.0), f(c, i), c.3))
                        .collect(),
                )
            })
            .collect()
    };
    let model = summarize(&rank(&|c, _| c.1))?;
    let history = summarize(&rank(&|c, i| {
        let max = i.candidates.iter().map(|c| c.2).max().unwrap_or(0);
        if max == 0 {
            0.0
        } else {
            f64::from(c.2) / f64::from(max)
        }
    }))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = LinkScores {
        hr_at_1: 0.0,
        mrr: 0.0,
        js_at_alpha: 0.0,
        alpha: 0.0,
    };
    for _ in 0..RANDOM_DRAWS {
        let draws: Vec<Vec<f64>> = instances
            .iter()
            .map(|i| i.candidates.iter().map(|_| rng.random::<f64>()).collect())
            .collect();
        let rankings: Vec<RankedCandidates> = instances
            .iter()
            .zip(&draws)
            .map(|(i, d)| {
                RankedCandidates::new(
                    i.candidates
                        .iter()
                        .zip(d)
                        .map(|(c, s)| (u64::from(c.0), *s, c.3))
                        .collect(),
                )
            })
            .collect();
        let s = summarize(&rankings)?;
        random.mrr += s.mrr / RANDOM_DRAWS as f64;
        random.js_at_alpha += s.js_at_alpha / RANDOM_DRAWS as f64;
        random.alpha += s.alpha / RANDOM_DRAWS as f64;
    }
    random.hr_at_1 = instances
        .iter()
        .map(|i| i.candidates.iter().filter(|c| c.3).count() as f64 / i.candidates.len() as f64)
        .sum::<f64>()
        / instances.len() as f64;
    Ok(LinkPredReport {
        n_instances: instances.len(),
        model,
        random,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_model_and_analytic_random() {
        let inst = LinkInstance {
            agent_id: 0,
            event_index: 0,
            candidates: vec![(1, 0.9, 0, true), (2, 0.2, 5, false), (3, 0.1, 1, false), (4, 0.3, 0, false)],
        };
        let rep = evaluate_link_prediction(&[inst], 1).unwrap();
        assert_eq!(rep.model.hr_at_1, 1.0);
        assert_eq!(rep.model.mrr, 1.0);
        assert_eq!(rep.random.hr_at_1, 0.25);
        assert_eq!(rep.history.hr_at_1, 0.0);
        assert_eq!(rep.history.mrr, 1.0 / 3.0);
    }
}
