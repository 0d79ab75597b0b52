use std::collections::BTreeMap;

use super::embed::{cell_kinds, embed, CellKind};
use super::{FeatureStats, MaskedInstance, ModelState};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Model parameters registered on a tape.
pub struct Network {
    vars: BTreeMap<String, Var>,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_poi: usize,
    pub stats: FeatureStats,
}

impl Network {
    /// Registers every parameter; with `trainable` false they are constants
    /// and the tape records no gradient bookkeeping for them.
    pub fn new(tape: &mut Tape, state: &ModelState, trainable: bool) -> Self {
        let vars = state
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self {
            vars,
            d_model: state.config.d_model,
            heads: state.config.heads,
            layers: state.config.layers,
            n_poi: state.config.n_poi,
            stats: state.stats.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        tape.linear(x, self.var(w), self.var(b))
    }

    /// Post-norm transformer block over each row's own sequence.
    pub fn cross_time(&self, tape: &mut Tape, z: Var, m: usize, seq_len: usize, valid: &[bool]) -> Result<Var> {
        let p = |s: &str| format!("layer{m}.time.{s}");
        let q = self.linear(tape, z, &p("wq"), &p("bq"))?;
        let k = self.linear(tape, z, &p("wk"), &p("bk"))?;
        let v = self.linear(tape, z, &p("wv"), &p("bv"))?;
        let a = tape.seq_attention(q, k, v, seq_len, self.heads, valid.to_vec())?;
        let o = self.linear(tape, a, &p("wo"), &p("bo"))?;
        let r = tape.add(z, o)?;
        let z1 = tape.layer_norm(r, self.var(&p("ln1.g")), self.var(&p("ln1.b")), LAYER_NORM_EPS)?;
        let h = self.linear(tape, z1, &p("mlp.w1"), &p("mlp.b1"))?;
        let h = tape.gelu(h)?;
        let f = self.linear(tape, h, &p("mlp.w2"), &p("mlp.b2"))?;
        let r = tape.add(z1, f)?;
        tape.layer_norm(r, self.var(&p("ln2.g")), self.var(&p("ln2.b")), LAYER_NORM_EPS)
    }

    /// Destination-specific attention over co-occurrence neighbors; the
    /// node's own embedding is concatenated with the aggregated heads and
    /// projected back to D. Isolated nodes pass through unchanged.
    pub fn cross_people(&self, tape: &mut Tape, z: Var, prefix: &str, edges: &[(usize, usize)]) -> Result<Var> {
        let rows = tape.value(z).rows();
        let mut directed = Vec::with_capacity(2 * edges.len());
        let mut connected = vec![false; rows];
        for &(a, b) in edges {
            directed.push((a, b));
            directed.push((b, a));
            connected[a] = true;
            connected[b] = true;
        }
        if directed.is_empty() {
            return Ok(z);
        }
        let p = |s: &str| self.var(&format!("{prefix}.{s}"));
        let q = tape.matmul(z, p("wq"))?;
        let k = tape.matmul(z, p("wk"))?;
        let v = tape.matmul(z, p("wv"))?;
        let scale = 1.0 / (self.d_model as f64).sqrt();
        let heads = tape.graph_attention(q, k, v, self.heads, scale, &directed)?;
        let cat = tape.concat_cols(z, heads)?;
        let out = tape.linear(cat, p("out.w"), p("out.b"))?;
        tape.row_blend(out, z, connected)
    }
}

/// Decoder outputs at the masked cells, in `MaskedInstance::masked` order.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[k × 4]` standardized numeric predictions.
    pub numeric: Var,
    /// `[k × |P|]` log-probabilities.
    pub poi: Var,
    /// `[k × 7]` log-probabilities.
    pub dow: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Phase-1 embeddings `[N·L × D]` on the visible graph, used for links.
    pub z_link: Var,
    /// Phase-2 embeddings after the pass over the full graph.
    pub z_full: Var,
    pub decoded: Option<Decoded>,
}

/// Zero rows for padding so they never leak into later layers.
fn clear_padding(tape: &mut Tape, z: Var, valid: &[bool]) -> Result<Var> {
    if valid.iter().all(|v| *v) {
        return Ok(z);
    }
    let shape = tape.value(z).shape().to_vec();
    let zeros = tape.constant(Tensor::zeros(&shape));
    tape.row_blend(z, zeros, valid.to_vec())
}

/// Phase 1 runs every layer on the visible graph; phase 2 restores the
/// masked edges for one more cross-people pass, and the decoders read its
/// output at the masked cells.
pub fn forward_two_phase(tape: &mut Tape, net: &Network, inst: &MaskedInstance) -> Result<ForwardOutput> {
    let batch = &inst.batch;
    let kinds = cell_kinds(batch, &inst.masked);
    let valid: Vec<bool> = kinds.iter().map(|k| *k != CellKind::Padding).collect();
    let mut z = embed(tape, net, batch, &kinds)?;
    for m in 0..net.layers {
        let zt = net.cross_time(tape, z, m, batch.max_len, &valid)?;
        let zp = net.cross_people(tape, zt, &format!("layer{m}.ppl"), &inst.visible_edges)?;
        let sum = tape.add(zt, zp)?;
        z = clear_padding(tape, sum, &valid)?;
    }
    let z_link = z;
    let z_full = net.cross_people(tape, z_link, "phase2.ppl", &batch.edges)?;
    let decoded = if inst.masked.is_empty() {
        None
    } else {
        let h = tape.gather_rows(z_full, inst.masked.clone())?;
        let numeric = tape.linear(h, net.var("dec.num.w"), net.var("dec.num.b"))?;
        let poi = tape.linear(h, net.var("dec.poi.w"), net.var("dec.poi.b"))?;
        let poi = tape.log_softmax_rows(poi)?;
        let dow = tape.linear(h, net.var("dec.dow.w"), net.var("dec.dow.b"))?;
        let dow = tape.log_softmax_rows(dow)?;
        Some(Decoded { numeric, poi, dow })
    };
    Ok(ForwardOutput {
        z_link,
        z_full,
        decoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{batches, small_config};
    use crate::model::{mask_single, ModelConfig};
    use crate::data::PaddedBatch;

    fn state(cfg: &ModelConfig) -> ModelState {
        ModelState::init(cfg, FeatureStats::default()).unwrap()
    }

    fn run(state: &ModelState, inst: &MaskedInstance) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let net = Network::new(&mut tape, state, false);
        let out = forward_two_phase(&mut tape, &net, inst).unwrap();
        (tape.value(out.z_link).clone(), tape.value(out.z_full).clone())
    }

    fn with_edges(min_rows: usize) -> PaddedBatch {
        let (bs, _) = batches(30, 3);
        bs.into_iter()
            .find(|b| b.n_rows >= min_rows && b.edges.iter().any(|&(a, _)| a < b.max_len))
            .expect("a sample whose target has a neighbor")
    }

    #[test]
    fn no_edges_means_phase_two_is_identity_and_layer_doubles() {
        let cfg = small_config();
        let st = state(&cfg);
        let mut b = with_edges(2);
        b.edges.clear();
        let inst = MaskedInstance::new(b.clone(), vec![0]);
        let (link, full) = run(&st, &inst);
        assert_eq!(link, full);

        let mut tape = Tape::new();
        let net = Network::new(&mut tape, &st, false);
        let kinds = cell_kinds(&b, &inst.masked);
        let valid: Vec<bool> = kinds.iter().map(|k| *k != CellKind::Padding).collect();
        let z = embed(&mut tape, &net, &b, &kinds).unwrap();
        let zt = net.cross_time(&mut tape, z, 0, b.max_len, &valid).unwrap();
        let zt = clear_padding(&mut tape, zt, &valid).unwrap();
        let doubled: Vec<f64> = tape.value(zt).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(link.data(), doubled.as_slice());
    }

    #[test]
    fn single_neighbor_ignores_query_and_key() {
        let cfg = small_config();
        let mut st = state(&cfg);
        let z = Tensor::from_rows(&[vec![0.3; 8], vec![-0.7; 8], vec![1.1; 8]]).unwrap();
        let eval = |st: &ModelState| {
            let mut tape = Tape::new();
            let net = Network::new(&mut tape, st, false);
            let zv = tape.constant(z.clone());
            let out = net.cross_people(&mut tape, zv, "layer0.ppl", &[(0, 1)]).unwrap();
            tape.value(out).clone()
        };
        let before = eval(&st);
        for w in ["layer0.ppl.wq", "layer0.ppl.wk"] {
            st.params.get_mut(w).unwrap().data_mut().iter_mut().for_each(|x| *x *= -3.0);
        }
        assert!(before.max_abs_diff(&eval(&st)) < 1e-14);
        assert_eq!(before.row(2), z.row(2));
    }

    #[test]
    fn masked_features_do_not_reach_link_embeddings() {
        let cfg = small_config();
        let st = state(&cfg);
        let b = with_edges(2);
        let inst = mask_single(b.clone(), 0).unwrap();
        let (link, _) = run(&st, &inst);
        let mut changed = b.clone();
        let f = changed.features.data_mut();
        f[0] += 377.0;
        f[2] += 5.0;
        f[4] = 11.0;
        let (link2, _) = run(&st, &mask_single(changed, 0).unwrap());
        assert!(link.max_abs_diff(&link2) < 1e-12);
    }

    #[test]
    fn padding_contents_are_ignored() {
        let cfg = small_config();
        let st = state(&cfg);
        let b = with_edges(2);
        let pad = (0..b.n_cells()).find(|&c| !b.is_valid(c)).expect("a padded cell");
        let inst = mask_single(b.clone(), 0).unwrap();
        let (link, full) = run(&st, &inst);
        let mut junk = b.clone();
        junk.features.data_mut()[pad * 6..pad * 6 + 6].copy_from_slice(&[9e3, 40.0, 7.0, -3.0, 13.0, 6.0]);
        let (link2, full2) = run(&st, &mask_single(junk, 0).unwrap());
        assert_eq!(link, link2);
        assert_eq!(full, full2);
    }

    #[test]
    fn non_neighbors_do_not_influence_a_node() {
        let cfg = small_config();
        let st = state(&cfg);
        let z = Tensor::from_rows(&[vec![0.3; 8], vec![-0.7; 8], vec![1.1; 8]]).unwrap();
        let eval = |z: Tensor| {
            let mut tape = Tape::new();
            let net = Network::new(&mut tape, &st, false);
            let zv = tape.constant(z);
            let out = net.cross_people(&mut tape, zv, "layer0.ppl", &[(0, 1)]).unwrap();
            tape.value(out).row(0).to_vec()
        };
        let mut z2 = z.clone();
        z2.data_mut()[16..].iter_mut().for_each(|x| *x = 42.0);
        assert_eq!(eval(z), eval(z2));
    }
}
