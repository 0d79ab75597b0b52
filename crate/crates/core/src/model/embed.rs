use super::{numeric_features, Network, N_NUMERIC};
use crate::data::{PaddedBatch, DOW_VOCAB};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Sinusoidal encoding of one position: `sin` on even dims, `cos` on odd.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let angle = pos as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn sinusoid_table(n: usize, d: usize) -> Tensor {
    let data = (0..n).flat_map(|p| sinusoid(p, d)).collect();
    Tensor::new(vec![n, d], data).expect("table shape")
}

/// What a cell of the padded grid holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum CellKind {
    Padding,
    Observed,
    Masked,
    Ghost,
}

pub(crate) fn cell_kinds(batch: &PaddedBatch, masked: &[usize]) -> Vec<CellKind> {
    let mut kinds: Vec<CellKind> = (0..batch.n_cells())
        .map(|c| match (batch.is_valid(c), batch.ghost[c]) {
            (false, _) => CellKind::Padding,
            (true, true) => CellKind::Ghost,
            (true, false) => CellKind::Observed,
        })
        .collect();
    for &c in masked {
        kinds[c] = CellKind::Masked;
    }
    kinds
}

/// Initial embeddings `[N·L × D]`: summed feature embeddings plus the
/// sequence, within-day and day encodings. Masked cells carry the mask token,
/// ghosts the ghost token with their time features, padding stays zero.
pub(crate) fn embed(tape: &mut Tape, net: &Network, batch: &PaddedBatch, kinds: &[CellKind]) -> Result<Var> {
    let cells = batch.n_cells();
    let d = net.d_model;
    let n_poi = net.n_poi;
    let mut num = vec![0.0; cells * N_NUMERIC];
    let mut bias = vec![0.0; cells * N_NUMERIC];
    let mut poi = vec![0.0; cells * n_poi];
    let mut dow = vec![0.0; cells * DOW_VOCAB];
    let mut mask = vec![0.0; cells];
    let mut ghost = vec![0.0; cells];
    let mut pe = vec![0.0; cells * d];
    for c in 0..cells {
        let kind = kinds[c];
        if kind == CellKind::Padding {
            continue;
        }
        let pos = batch.positions[c];
        let row = &mut pe[c * d..(c + 1) * d];
        for p in [pos.seq, pos.within_day, pos.day] {
            for (slot, v) in row.iter_mut().zip(sinusoid(p, d)) {
                *slot += v;
            }
        }
        if kind == CellKind::Masked {
            mask[c] = 1.0;
            continue;
        }
        let f = |i| batch.feature(c, i);
        let z = net
            .stats
            .standardize(numeric_features(f(0) as i64, f(1) as i64, f(2), f(3)));
        let dow_id = f(5) as usize;
        if dow_id >= DOW_VOCAB {
            return Err(Error::Validation(format!("dow {dow_id} outside vocabulary")));
        }
        dow[c * DOW_VOCAB + dow_id] = 1.0;
        // Ghosts keep only their time features; location and POI are unknown.
        let used = if kind == CellKind::Ghost {
            ghost[c] = 1.0;
            2
        } else {
            let poi_id = f(4) as usize;
            if poi_id >= n_poi {
                return Err(Error::Validation(format!("poi {poi_id} outside vocabulary of {n_poi}")));
            }
            poi[c * n_poi + poi_id] = 1.0;
            N_NUMERIC
        };
        for j in 0..used {
            num[c * N_NUMERIC + j] = z[j];
            bias[c * N_NUMERIC + j] = 1.0;
        }
    }
    let mut terms = Vec::with_capacity(6);
    for (design, width, table) in [
        (num, N_NUMERIC, "emb.num.w"),
        (bias, N_NUMERIC, "emb.num.b"),
        (poi, n_poi, "emb.poi"),
        (dow, DOW_VOCAB, "emb.dow"),
        (mask, 1, "emb.mask"),
        (ghost, 1, "emb.ghost"),
    ] {
        let x = tape.constant(Tensor::new(vec![cells, width], design)?);
        terms.push(tape.matmul(x, net.var(table))?);
    }
    let mut z = tape.constant(Tensor::new(vec![cells, d], pe)?);
    for t in terms {
        z = tape.add(z, t)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_origin() {
        let v = sinusoid(0, 8);
        assert_eq!(&v[..2], &[0.0, 1.0]);
        assert!(v.chunks(2).all(|p| p == [0.0, 1.0]));
    }

    #[test]
    fn sinusoid_frequencies() {
        let v = sinusoid(3, 4);
        assert!((v[0] - 3f64.sin()).abs() < 1e-15);
        assert!((v[1] - 3f64.cos()).abs() < 1e-15);
        assert!((v[2] - (3.0 / 100.0f64).sin()).abs() < 1e-15);
        assert_eq!(sinusoid_table(5, 4).row(3), v.as_slice());
    }
}
