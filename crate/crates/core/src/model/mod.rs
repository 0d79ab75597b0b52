//! The two-stage attention network: embeddings with three positional
//! encodings, cross-time then cross-people attention, masked node/link
//! reconstruction and the pretraining loop.

mod embed;
mod layers;
mod objective;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EventStore, DEFAULT_POI_VOCAB, DOW_VOCAB, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use embed::{sinusoid, sinusoid_table};
pub use layers::{forward_two_phase, Decoded, ForwardOutput, Network};
pub use objective::{
    link_loss_terms, mask_instance, mask_single, mask_with_neighbors, sample_negative_edges, LinkTerm, LossBreakdown,
    MaskedInstance,
};
pub use train::{
    evaluate_loss, load_checkpoint, pretrain, save_checkpoint, sample_loss, AdamW, Checkpoint,
    EpochLog, CHECKPOINT_VERSION,
};

/// Numeric feature columns: minute of day, duration, x, y.
pub const N_NUMERIC: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width D.
    pub d_model: usize,
    /// Number of two-stage attention layers M.
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the cross-time feed-forward block, as a multiple of D.
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Negative edges per positive edge.
    pub n_neg: usize,
    /// Weight λ of the link loss.
    pub link_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub n_poi: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            layers: 1,
            heads: 4,
            mlp_ratio: 2,
            mask_ratio: 0.05,
            n_neg: 5,
            link_weight: 0.01,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 128,
            epochs: 20,
            seed: 1,
            n_poi: DEFAULT_POI_VOCAB,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if self.layers == 0 || self.batch_size == 0 || self.mlp_ratio == 0 || self.n_poi == 0 {
            return fail("layers, batch_size, mlp_ratio and n_poi must be positive".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.link_weight < 0.0 {
            return fail("lr must be positive; weight_decay and link_weight non-negative".into());
        }
        Ok(())
    }
}

/// Per-feature mean and standard deviation of the numeric features,
/// measured on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_NUMERIC],
    pub std: [f64; N_NUMERIC],
}

impl Default for FeatureStats {
    fn default() -> Self {
        Self {
            mean: [0.0; N_NUMERIC],
            std: [1.0; N_NUMERIC],
        }
    }
}

/// Raw numeric features of an event: minute of day, duration, x, y.
pub fn numeric_features(start: i64, duration: i64, x: f64, y: f64) -> [f64; N_NUMERIC] {
    [
        start.rem_euclid(MINUTES_PER_DAY) as f64,
        duration as f64,
        x,
        y,
    ]
}

impl FeatureStats {
    pub fn fit(store: &EventStore, day_start: i64, day_end: i64) -> Self {
        let mut sum = [0.0; N_NUMERIC];
        let mut sq = [0.0; N_NUMERIC];
        let mut n = 0.0;
        for (agent, list) in store.iter() {
            for e in &list[store.index_range(agent, day_start, day_end)] {
                let f = numeric_features(e.start, e.duration, e.x, e.y);
                for j in 0..N_NUMERIC {
                    sum[j] += f[j];
                    sq[j] += f[j] * f[j];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for j in 0..N_NUMERIC {
            out.mean[j] = sum[j] / n;
            let var = (sq[j] / n - out.mean[j] * out.mean[j]).max(0.0);
            out.std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn standardize(&self, raw: [f64; N_NUMERIC]) -> [f64; N_NUMERIC] {
        std::array::from_fn(|j| (raw[j] - self.mean[j]) / self.std[j])
    }

    pub fn destandardize(&self, z: [f64; N_NUMERIC]) -> [f64; N_NUMERIC] {
        std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j])
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Learned parameters, hyperparameters and feature statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub stats: FeatureStats,
    pub params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Randomly initialized parameters.
    pub fn init(config: &ModelConfig, stats: FeatureStats) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = config.mlp_ratio * d;
        let p = config.n_poi;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let glorot = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        params.insert("emb.num.w".into(), normal(&mut rng, &[N_NUMERIC, d], 0.5));
        params.insert("emb.num.b".into(), normal(&mut rng, &[N_NUMERIC, d], 0.5));
        params.insert("emb.poi".into(), normal(&mut rng, &[p, d], 0.5));
        params.insert("emb.dow".into(), normal(&mut rng, &[DOW_VOCAB, d], 0.5));
        params.insert("emb.mask".into(), normal(&mut rng, &[1, d], 0.5));
        // Ghost events only exist at inference, so this token is never trained.
        params.insert("emb.ghost".into(), Tensor::zeros(&[1, d]));

        let people = |params: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, prefix: &str| {
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("{prefix}.{w}"), normal(rng, &[d, d], glorot(d)));
            }
            params.insert(format!("{prefix}.out.w"), normal(rng, &[2 * d, d], glorot(2 * d)));
            params.insert(format!("{prefix}.out.b"), Tensor::zeros(&[d]));
        };
        for m in 0..config.layers {
            let t = format!("layer{m}.time");
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("{t}.{w}"), normal(&mut rng, &[d, d], glorot(d)));
            }
            for b in ["bq", "bk", "bv", "bo", "ln1.b", "ln2.b", "mlp.b2"] {
                params.insert(format!("{t}.{b}"), Tensor::zeros(&[d]));
            }
            params.insert(format!("{t}.ln1.g"), Tensor::full(&[d], 1.0));
            params.insert(format!("{t}.ln2.g"), Tensor::full(&[d], 1.0));
            params.insert(format!("{t}.mlp.w1"), normal(&mut rng, &[d, hidden], glorot(d)));
            params.insert(format!("{t}.mlp.b1"), Tensor::zeros(&[hidden]));
            params.insert(format!("{t}.mlp.w2"), normal(&mut rng, &[hidden, d], glorot(hidden)));
            people(&mut params, &mut rng, &format!("layer{m}.ppl"));
        }
        people(&mut params, &mut rng, "phase2.ppl");

        params.insert("dec.num.w".into(), normal(&mut rng, &[d, N_NUMERIC], glorot(d)));
        params.insert("dec.num.b".into(), Tensor::zeros(&[N_NUMERIC]));
        params.insert("dec.poi.w".into(), normal(&mut rng, &[d, p], glorot(d)));
        params.insert("dec.poi.b".into(), Tensor::zeros(&[p]));
        params.insert("dec.dow.w".into(), normal(&mut rng, &[d, DOW_VOCAB], glorot(d)));
        params.insert("dec.dow.b".into(), Tensor::zeros(&[DOW_VOCAB]));
        Ok(Self {
            config: config.clone(),
            stats,
            params,
        })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
pub(crate) mod fixture {
    use super::*;
    use crate::data::{pad_batch, DistanceMetric, History, PaddedBatch, SampleBuilder, SampleConfig};
    use crate::sim::{generate_world, WorldConfig};

    pub fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            batch_size: 16,
            epochs: 3,
            ..ModelConfig::default()
        }
    }

    /// Padded training instances from a small simulated town.
    pub fn batches(n_agents: usize, n_days: i64) -> (Vec<PaddedBatch>, FeatureStats) {
        let world = generate_world(&WorldConfig {
            n_agents,
            n_days,
            seed: 3,
            ..WorldConfig::default()
        })
        .unwrap();
        let history = History::build(&world.store, 0, n_days, 0.04, DistanceMetric::Euclidean);
        let builder = SampleBuilder::new(&world.store, &history, SampleConfig::default());
        let batches = builder
            .samples(0, n_days)
            .iter()
            .map(|s| pad_batch(s).unwrap())
            .collect();
        (batches, FeatureStats::fit(&world.store, 0, n_days))
    }
}
