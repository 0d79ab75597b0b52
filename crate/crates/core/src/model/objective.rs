use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Decoded, FeatureStats, N_NUMERIC, numeric_features};
use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A padded batch with some target-row events hidden. `masked` holds flat
/// cell ids in ascending order; `masked_edges` are all edges touching them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInstance {
    pub batch: PaddedBatch,
    pub masked: Vec<usize>,
    pub masked_edges: Vec<(usize, usize)>,
    pub visible_edges: Vec<(usize, usize)>,
}

impl MaskedInstance {
    pub fn new(batch: PaddedBatch, mut masked: Vec<usize>) -> Self {
        masked.sort_unstable();
        masked.dedup();
        let hidden: BTreeSet<usize> = masked.iter().copied().collect();
        let (masked_edges, visible_edges) = batch
            .edges
            .iter()
            .partition(|(a, b)| hidden.contains(a) || hidden.contains(b));
        Self {
            batch,
            masked,
            masked_edges,
            visible_edges,
        }
    }

    /// Neighbors of a cell in the full graph, ascending.
    pub fn neighbors(&self, cell: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .batch
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == cell {
                    Some(b)
                } else if b == cell {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }
}

fn target_cells(batch: &PaddedBatch) -> Vec<usize> {
    (0..batch.max_len)
        .map(|p| batch.cell(0, p))
        .filter(|&c| batch.is_valid(c) && !batch.ghost[c])
        .collect()
}

/// Hides `max(1, ⌈ratio·L⌉)` target events drawn uniformly without
/// replacement.
pub fn mask_instance(batch: PaddedBatch, ratio: f64, rng: &mut impl Rng) -> Result<MaskedInstance> {
    let cands = target_cells(&batch);
    if cands.is_empty() {
        return Err(Error::Validation("target row has no maskable event".into()));
    }
    let k = ((ratio * cands.len() as f64).ceil() as usize).clamp(1, cands.len());
    let picked = index::sample(rng, cands.len(), k)
        .into_iter()
        .map(|i| cands[i])
        .collect();
    Ok(MaskedInstance::new(batch, picked))
}

/// Hides exactly one cell, as done when scoring an event.
pub fn mask_single(batch: PaddedBatch, cell: usize) -> Result<MaskedInstance> {
    if cell >= batch.n_cells() || !batch.is_valid(cell) || batch.ghost[cell] {
        return Err(Error::Validation(format!("cell {cell} is not an observed event")));
    }
    Ok(MaskedInstance::new(batch, vec![cell]))
}

/// Masks observed event `cell` together with its graph neighbors, hiding
/// their features and every link touching them.
pub fn mask_with_neighbors(batch: PaddedBatch, cell: usize) -> Result<MaskedInstance> {
    let single = mask_single(batch, cell)?;
    let mut masked = single.neighbors(cell);
    masked.push(cell);
    Ok(MaskedInstance::new(single.batch, masked))
}

/// Negative sources for destination `dst`: drawn uniformly from observed
/// cells that are neither `dst` nor its neighbors, without replacement when
/// the pool is large enough. An empty pool yields no negatives.
pub fn sample_negative_edges(
    inst: &MaskedInstance,
    dst: usize,
    n_neg: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let batch = &inst.batch;
    let neighbors = inst.neighbors(dst);
    let pool: Vec<usize> = (0..batch.n_cells())
        .filter(|&c| batch.is_valid(c) && !batch.ghost[c] && c != dst)
        .filter(|c| neighbors.binary_search(c).is_err())
        .collect();
    if pool.is_empty() || n_neg == 0 {
        return Vec::new();
    }
    if pool.len() >= n_neg {
        index::sample(rng, pool.len(), n_neg)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..n_neg)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// One positive edge `(pos, dst)` with its negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkTerm {
    pub dst: usize,
    pub pos: usize,
    pub negs: Vec<usize>,
}

/// Contrastive terms for every masked edge, grouped by masked destination.
pub fn link_loss_terms(inst: &MaskedInstance, n_neg: usize, rng: &mut impl Rng) -> Vec<LinkTerm> {
    let mut terms = Vec::new();
    for &dst in &inst.masked {
        for pos in inst.neighbors(dst) {
            let negs = sample_negative_edges(inst, dst, n_neg, rng);
            terms.push(LinkTerm { dst, pos, negs });
        }
    }
    terms
}

/// Per-destination mean over neighbors, then mean over destinations, of
/// `−log(e^{sim(pos)} / Σ e^{sim})` with cosine similarity.
pub(crate) fn link_loss(tape: &mut Tape, z: Var, terms: &[LinkTerm]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut dsts = Vec::new();
    let mut srcs = Vec::new();
    let mut offsets = vec![0];
    let mut pos_index = Vec::with_capacity(terms.len());
    for t in terms {
        pos_index.push(srcs.len());
        for &s in std::iter::once(&t.pos).chain(&t.negs) {
            dsts.push(t.dst);
            srcs.push(s);
        }
        offsets.push(srcs.len());
    }
    let mut degree = std::collections::BTreeMap::new();
    for t in terms {
        *degree.entry(t.dst).or_insert(0usize) += 1;
    }
    let n_dst = degree.len() as f64;
    let weights: Vec<f64> = terms
        .iter()
        .map(|t| 1.0 / (degree[&t.dst] as f64 * n_dst))
        .collect();
    let zd = tape.gather_rows(z, dsts)?;
    let zs = tape.gather_rows(z, srcs)?;
    let sims = tape.cosine_rows(zd, zs)?;
    let lse = tape.segment_log_sum_exp(sims, offsets)?;
    let pos = tape.gather_rows(sims, pos_index)?;
    let per = tape.sub(lse, pos)?;
    let w = tape.constant(Tensor::matrix(terms.len(), 1, weights)?);
    let weighted = tape.mul(per, w)?;
    tape.sum(weighted).map(Some)
}

/// `(L_num, L_cls)` averaged over the masked events.
pub(crate) fn node_loss(
    tape: &mut Tape,
    decoded: &Decoded,
    inst: &MaskedInstance,
    stats: &FeatureStats,
) -> Result<(Var, Var)> {
    let k = inst.masked.len();
    let b = &inst.batch;
    let mut truth = Vec::with_capacity(k * N_NUMERIC);
    let mut poi = Vec::with_capacity(k);
    let mut dow = Vec::with_capacity(k);
    for &c in &inst.masked {
        let f = |i| b.feature(c, i);
        truth.extend(stats.standardize(numeric_features(f(0) as i64, f(1) as i64, f(2), f(3))));
        poi.push(f(4) as usize);
        dow.push(f(5) as usize);
    }
    let truth = tape.constant(Tensor::matrix(k, N_NUMERIC, truth)?);
    let err = tape.sub(decoded.numeric, truth)?;
    let sq = tape.square(err)?;
    let s = tape.sum(sq)?;
    let l_num = tape.scale(s, 1.0 / k as f64)?;
    let lp = tape.pick_cols(decoded.poi, poi)?;
    let ld = tape.pick_cols(decoded.dow, dow)?;
    let both = tape.add(lp, ld)?;
    let s = tape.sum(both)?;
    let l_cls = tape.scale(s, -1.0 / k as f64)?;
    Ok((l_num, l_cls))
}

/// Loss components of one instance or averaged over many.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub num: f64,
    pub cls: f64,
    pub node: f64,
    pub link: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.num += weight * other.num;
        self.cls += weight * other.cls;
        self.node += weight * other.node;
        self.link += weight * other.link;
        self.total += weight * other.total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_event_graph, pad_batch, CollectiveSample, DistanceMetric, EventSequence, EventStore, StayEvent, Window};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Row 0 has `len` events; rows 1.. each have one event sharing the
    /// target's first slot, so that cell has degree `others`.
    fn batch(len: usize, others: usize) -> PaddedBatch {
        let mut events = Vec::new();
        for i in 0..len {
            events.push(StayEvent::new(0, i as i64 * 200, 60, i as f64, 0.0, 3));
        }
        for a in 1..=others {
            events.push(StayEvent::new(a as u32, 10, 30, 0.0, 0.001 * a as f64, 3));
            events.push(StayEvent::new(a as u32, 900, 30, 50.0 + a as f64, 0.0, 3));
        }
        let store = EventStore::from_events(events);
        let w = Window { id: 0, day_start: 0, day_end: 1 };
        let rows: Vec<EventSequence> = (0..=others)
            .map(|a| EventSequence::from_store(&store, a as u32, w).unwrap())
            .collect();
        let graph = build_event_graph(&rows.iter().collect::<Vec<_>>(), 0.04, DistanceMetric::Euclidean);
        pad_batch(&CollectiveSample {
            window: w,
            target: rows[0].clone(),
            others: rows[1..].to_vec(),
            graph,
            frequent: vec![],
        })
        .unwrap()
    }

    #[test]
    fn mask_count_uses_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = mask_instance(batch(7, 0), 0.05, &mut rng).unwrap();
        assert_eq!(inst.masked.len(), 1);
        let inst = mask_instance(batch(7, 0), 0.3, &mut rng).unwrap();
        assert_eq!(inst.masked.len(), 3);
        let inst = mask_instance(batch(1, 0), 0.05, &mut rng).unwrap();
        assert_eq!(inst.masked, vec![0]);
    }

    #[test]
    fn mask_is_seeded() {
        let a = mask_instance(batch(9, 2), 0.4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mask_instance(batch(9, 2), 0.4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masking_degree_three_node_hides_three_edges() {
        let b = batch(4, 3);
        let inst = mask_single(b, 0).unwrap();
        assert_eq!(inst.masked_edges.len(), 3);
        assert!(inst.visible_edges.iter().all(|&(a, c)| a != 0 && c != 0));
        assert_eq!(inst.masked_edges.len() + inst.visible_edges.len(), inst.batch.edges.len());
    }

    #[test]
    fn negatives_avoid_neighbors_and_self() {
        let inst = mask_single(batch(4, 3), 0).unwrap();
        let nb = inst.neighbors(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let negs = sample_negative_edges(&inst, 0, 5, &mut rng);
            assert_eq!(negs.len(), 5);
            assert!(negs.iter().all(|n| *n != 0 && !nb.contains(n)));
            let distinct: BTreeSet<_> = negs.iter().collect();
            assert_eq!(distinct.len(), 5);
        }
    }

    #[test]
    fn small_pool_samples_with_replacement_and_empty_pool_is_empty() {
        // Only the two target events and nothing else: pool of one.
        let inst = mask_single(batch(2, 0), 0).unwrap();
        let negs = sample_negative_edges(&inst, 0, 5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(negs, vec![1; 5]);
        let inst = mask_single(batch(1, 0), 0).unwrap();
        assert!(sample_negative_edges(&inst, 0, 5, &mut ChaCha8Rng::seed_from_u64(2)).is_empty());
    }

    fn link_value(z: Tensor, terms: &[LinkTerm]) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(z);
        let l = link_loss(&mut tape, z, terms).unwrap().unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn link_loss_equal_similarities_is_log_six() {
        let z = Tensor::from_rows(&vec![vec![1.0, 0.0]; 7]).unwrap();
        let terms = [LinkTerm { dst: 0, pos: 1, negs: vec![2, 3, 4, 5, 6] }];
        assert!((link_value(z, &terms) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn link_loss_separated_similarities() {
        let mut rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        rows.extend(vec![vec![-1.0, 0.0]; 5]);
        let z = Tensor::from_rows(&rows).unwrap();
        let terms = [LinkTerm { dst: 0, pos: 1, negs: vec![2, 3, 4, 5, 6] }];
        let expected = (1.0 + 5.0 * (-2f64).exp()).ln();
        assert!((link_value(z, &terms) - expected).abs() < 1e-12);
        assert!((expected - 0.5168).abs() < 1e-4);
    }

    #[test]
    fn link_loss_averages_per_destination_first() {
        let z = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let t = |dst, pos, negs: Vec<usize>| LinkTerm { dst, pos, negs };
        let terms = vec![t(0, 1, vec![3]), t(0, 2, vec![3]), t(4, 1, vec![])];
        let single = |term: &LinkTerm| link_value(z.clone(), std::slice::from_ref(term));
        let expected = 0.5 * (0.5 * (single(&terms[0]) + single(&terms[1])) + single(&terms[2]));
        assert!((link_value(z.clone(), &terms) - expected).abs() < 1e-12);
        assert_eq!(single(&terms[2]), 0.0);
    }
}
