use super::{AgentId, CollectiveSample, EventSequence, StayEvent, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature columns of a padded batch, in order.
pub const FEATURES: [&str; 6] = ["start_time", "duration", "x", "y", "poi", "dow"];

/// Positional indices of one cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CellPos {
    pub seq: usize,
    pub within_day: usize,
    pub day: usize,
}

/// Dense `N×L` layout of a collective sample. Row 0 is the target; cell
/// `(r, p)` has flat id `r * L + p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    /// `[N, L, 6]` raw feature values; padding cells are 0.
    pub features: Tensor,
    /// `[N, L]` with 1 at valid cells.
    pub valid_mask: Tensor,
    pub positions: Vec<CellPos>,
    pub ghost: Vec<bool>,
    pub agents: Vec<AgentId>,
    pub indices: Vec<Option<usize>>,
    pub window: Window,
    /// Co-occurrence edges between flat cell ids, `a < b`.
    pub edges: Vec<(usize, usize)>,
    pub n_rows: usize,
    pub max_len: usize,
}

impl PaddedBatch {
    pub fn cell(&self, row: usize, pos: usize) -> usize {
        row * self.max_len + pos
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.max_len
    }

    pub fn is_valid(&self, cell: usize) -> bool {
        self.valid_mask.data()[cell] != 0.0
    }

    pub fn feature(&self, cell: usize, f: usize) -> f64 {
        self.features.data()[cell * FEATURES.len() + f]
    }

    pub fn row_len(&self, row: usize) -> usize {
        (0..self.max_len)
            .filter(|&p| self.is_valid(self.cell(row, p)))
            .count()
    }
}

pub fn pad_batch(sample: &CollectiveSample) -> Result<PaddedBatch> {
    if sample.target.is_empty() {
        return Err(Error::Validation("target sequence is empty".into()));
    }
    let rows = sample.rows();
    let n = rows.len();
    let l = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let f = FEATURES.len();
    let mut features = vec![0.0; n * l * f];
    let mut valid = vec![0.0; n * l];
    let mut positions = vec![CellPos::default(); n * l];
    let mut ghost = vec![false; n * l];
    let mut indices = vec![None; n * l];
    for (r, seq) in rows.iter().enumerate() {
        for (p, (e, (s, w, d))) in seq.events.iter().zip(seq.positions()).enumerate() {
            let c = r * l + p;
            features[c * f..(c + 1) * f].copy_from_slice(&[
                e.start as f64,
                e.duration as f64,
                e.x,
                e.y,
                f64::from(e.poi),
                f64::from(e.dow),
            ]);
            valid[c] = 1.0;
            positions[c] = CellPos {
                seq: s,
                within_day: w,
                day: d,
            };
            ghost[c] = seq.is_ghost(p);
            indices[c] = seq.indices[p];
        }
    }
    let to_cell = |id: usize| {
        let (r, p) = sample.graph.node(id);
        r * l + p
    };
    let edges = sample
        .graph
        .edges()
        .iter()
        .map(|&(a, b)| (to_cell(a), to_cell(b)))
        .collect();
    Ok(PaddedBatch {
        features: Tensor::new(vec![n, l, f], features)?,
        valid_mask: Tensor::new(vec![n, l], valid)?,
        positions,
        ghost,
        agents: rows.iter().map(|r| r.agent).collect(),
        indices,
        window: sample.window,
        edges,
        n_rows: n,
        max_len: l,
    })
}

/// Recovers the per-row sequences from a padded batch.
pub fn unpad(batch: &PaddedBatch) -> Vec<EventSequence> {
    (0..batch.n_rows)
        .map(|r| {
            let mut seq = EventSequence {
                agent: batch.agents[r],
                window: batch.window,
                events: Vec::new(),
                indices: Vec::new(),
            };
            for p in 0..batch.max_len {
                let c = batch.cell(r, p);
                if !batch.is_valid(c) {
                    continue;
                }
                let v = |i| batch.feature(c, i);
                seq.events.push(StayEvent {
                    agent: batch.agents[r],
                    start: v(0) as i64,
                    duration: v(1) as i64,
                    x: v(2),
                    y: v(3),
                    poi: v(4) as u16,
                    dow: v(5) as u8,
                });
                seq.indices.push(batch.indices[c]);
            }
            seq
        })
        .collect()
}
