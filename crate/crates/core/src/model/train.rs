use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{forward_two_phase, Network};
use super::objective::{link_loss, link_loss_terms, mask_instance, node_loss, LossBreakdown};
use super::{ModelConfig, ModelState};
use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Masks one instance, runs the model and records `L_total` on the tape.
pub fn sample_loss(
    tape: &mut Tape,
    net: &Network,
    batch: &PaddedBatch,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<(Var, LossBreakdown)> {
    let inst = mask_instance(batch.clone(), cfg.mask_ratio, rng)?;
    let terms = link_loss_terms(&inst, cfg.n_neg, rng);
    let out = forward_two_phase(tape, net, &inst)?;
    let decoded = out.decoded.expect("at least one masked event");
    let (num, cls) = node_loss(tape, &decoded, &inst, &net.stats)?;
    let node = tape.add(num, cls)?;
    let link = link_loss(tape, out.z_link, &terms)?;
    let total = match link {
        Some(l) => {
            let wl = tape.scale(l, cfg.link_weight)?;
            tape.add(node, wl)?
        }
        None => node,
    };
    let v = |x: Var| tape.value(x).data()[0];
    let breakdown = LossBreakdown {
        num: v(num),
        cls: v(cls),
        node: v(node),
        link: link.map_or(0.0, v),
        total: v(total),
    };
    Ok((total, breakdown))
}

fn instance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean loss over `batches` with masks and negatives drawn from `seed`, so
/// two states can be compared on identical instances.
pub fn evaluate_loss(state: &ModelState, batches: &[PaddedBatch], seed: u64) -> Result<LossBreakdown> {
    let parts: Vec<LossBreakdown> = batches
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut tape = Tape::new();
            let net = Network::new(&mut tape, state, false);
            let mut rng = instance_rng(seed, i as u64);
            sample_loss(&mut tape, &net, b, &state.config, &mut rng).map(|(_, l)| l)
        })
        .collect::<Result<_>>()?;
    let mut mean = LossBreakdown::default();
    for p in &parts {
        mean.accumulate(p, 1.0 / parts.len().max(1) as f64);
    }
    Ok(mean)
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn update(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let (lr, wd) = (state.config.lr, state.config.weight_decay);
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (name, p) in state.params.iter_mut() {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                *w -= lr * (step + wd * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss over the epoch's instances.
    pub train: LossBreakdown,
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state: ModelState,
    pub optimizer: AdamW,
    pub next_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn fresh(state: ModelState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            state,
            optimizer: AdamW::default(),
            next_epoch: 0,
            log: Vec::new(),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    io::write_json(path, ckpt)
}

/// Loads a checkpoint; with `expected`, every hyperparameter except the
/// epoch budget must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ckpt: Checkpoint = io::read_json(path).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    if let Some(cfg) = expected {
        let found = ModelConfig {
            epochs: cfg.epochs,
            ..ckpt.state.config.clone()
        };
        if &found != cfg {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint has {:?}, requested {:?}",
                ckpt.state.config, cfg
            )));
        }
    }
    let fresh = ModelState::init(&ckpt.state.config, ckpt.state.stats.clone())?;
    for (name, t) in &fresh.params {
        match ckpt.state.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen"))),
        }
    }
    if ckpt.state.params.len() != fresh.params.len() {
        return Err(Error::Checkpoint("unexpected extra parameters".into()));
    }
    Ok(ckpt)
}

fn sample_gradients(
    state: &ModelState,
    batch: &PaddedBatch,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let net = Network::new(&mut tape, state, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (total, loss) = sample_loss(&mut tape, &net, batch, &state.config, &mut rng)?;
    let grads = tape.backward(total)?;
    let flat = net
        .vars()
        .map(|(_, v)| grads.wrt(&tape, v).into_data())
        .collect();
    Ok((flat, loss))
}

/// Minibatch AdamW on `L_node + λ·L_link`, continuing from `ckpt` until
/// `config.epochs`. `on_epoch` sees the checkpoint after every epoch.
pub fn pretrain(
    batches: &[PaddedBatch],
    mut ckpt: Checkpoint,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let cfg = ckpt.state.config.clone();
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Validation("no training instances".into()));
    }
    let names: Vec<String> = ckpt.state.params.keys().cloned().collect();
    for epoch in ckpt.next_epoch..cfg.epochs {
        let mut rng = instance_rng(cfg.seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.next_u64()).collect();
        let mut epoch_loss = LossBreakdown::default();
        let mut steps = 0;
        for (chunk, chunk_seeds) in order.chunks(cfg.batch_size).zip(seeds.chunks(cfg.batch_size)) {
            let state = &ckpt.state;
            let results: Vec<_> = chunk
                .par_iter()
                .zip(chunk_seeds)
                .map(|(&i, &s)| sample_gradients(state, &batches[i], s))
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut sum: Vec<Vec<f64>> = Vec::new();
            for r in results {
                let (g, loss) = r.map_err(|e| match e {
                    Error::NonFinite(op) => Error::Divergence {
                        epoch,
                        step: steps,
                        detail: format!("non-finite value in {op}"),
                    },
                    other => other,
                })?;
                if !loss.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step: steps,
                        detail: format!("loss {}", loss.total),
                    });
                }
                epoch_loss.accumulate(&loss, 1.0 / batches.len() as f64);
                if sum.is_empty() {
                    sum = g;
                } else {
                    for (acc, x) in sum.iter_mut().zip(g) {
                        acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let grads: BTreeMap<String, Vec<f64>> = names
                .iter()
                .cloned()
                .zip(sum.into_iter().map(|g| g.into_iter().map(|x| x * scale).collect()))
                .collect();
            ckpt.optimizer.update(&mut ckpt.state, &grads);
            steps += 1;
        }
        if ckpt.state.params.values().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                step: steps,
                detail: "non-finite parameter after update".into(),
            });
        }
        log::info!(
            "stage=pretrain epoch={epoch} steps={steps} total={:.6} num={:.6} cls={:.6} link={:.6}",
            epoch_loss.total,
            epoch_loss.num,
            epoch_loss.cls,
            epoch_loss.link
        );
        ckpt.log.push(EpochLog {
            epoch,
            steps,
            train: epoch_loss,
        });
        ckpt.next_epoch = epoch + 1;
        on_epoch(&ckpt)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{batches, small_config};

    #[test]
    fn finite_difference_matches_backward() {
        let (bs, stats) = batches(12, 3);
        let b = bs.iter().find(|b| b.n_rows >= 2 && !b.edges.is_empty()).unwrap();
        let cfg = ModelConfig { mask_ratio: 0.5, link_weight: 1.0, ..small_config() };
        let state = ModelState::init(&cfg, stats).unwrap();
        let loss_at = |st: &ModelState| {
            let mut tape = Tape::new();
            let net = Network::new(&mut tape, st, false);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_loss(&mut tape, &net, b, &cfg, &mut rng).unwrap().1.total
        };
        let mut tape = Tape::new();
        let net = Network::new(&mut tape, &state, true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (total, _) = sample_loss(&mut tape, &net, b, &cfg, &mut rng).unwrap();
        let grads = tape.backward(total).unwrap();
        let h = 1e-6;
        for (name, v) in net.vars() {
            let g = grads.wrt(&tape, v);
            for i in (0..g.len()).step_by(7).take(4) {
                let mut plus = state.clone();
                plus.params.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = state.clone();
                minus.params.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = g.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-4, "{name}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_resumable() {
        let (bs, stats) = batches(12, 3);
        let cfg = small_config();
        let st = ModelState::init(&cfg, stats).unwrap();
        let a = pretrain(&bs, Checkpoint::fresh(st.clone()), |_| Ok(())).unwrap();
        let b = pretrain(&bs, Checkpoint::fresh(st.clone()), |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 3);

        let mut saved = None;
        let short = Checkpoint::fresh(ModelState::init(&ModelConfig { epochs: 1, ..cfg.clone() }, st.stats.clone()).unwrap());
        pretrain(&bs, short, |c| {
            saved = Some(c.clone());
            Ok(())
        })
        .unwrap();
        let mut resumed = saved.unwrap();
        resumed.state.config.epochs = 3;
        let resumed = pretrain(&bs, resumed, |_| Ok(())).unwrap();
        assert_eq!(resumed.state.params, a.state.params);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = small_config();
        let ckpt = Checkpoint::fresh(ModelState::init(&cfg, Default::default()).unwrap());
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path, Some(&cfg)).unwrap(), ckpt);
        let other = ModelConfig { d_model: 16, ..cfg };
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn link_weight_zero_gives_no_link_gradient() {
        let (bs, stats) = batches(12, 3);
        let b = bs.iter().find(|b| b.edges.iter().any(|&(a, _)| a < b.max_len)).unwrap();
        let cfg = ModelConfig { link_weight: 0.0, mask_ratio: 0.9, ..small_config() };
        let st = ModelState::init(&cfg, stats).unwrap();
        let mut tape = Tape::new();
        let net = Network::new(&mut tape, &st, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (total, loss) = sample_loss(&mut tape, &net, b, &cfg, &mut rng).unwrap();
        assert!(loss.link > 0.0);
        assert!((loss.total - loss.node).abs() < 1e-15);
        let g = tape.backward(total).unwrap();
        assert!(g.wrt(&tape, net.var("dec.poi.w")).data().iter().any(|x| *x != 0.0));
    }
}
