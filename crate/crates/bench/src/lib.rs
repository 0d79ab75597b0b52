//! Fixed instances for timing the model.

use coact_core::data::{pad_batch, synthetic_sample, PaddedBatch};
use coact_core::model::{sample_loss, FeatureStats, ModelConfig, ModelState, Network};
use coact_core::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default-sized model with neutral feature statistics.
pub fn default_state() -> ModelState {
    ModelState::init(&ModelConfig::default(), FeatureStats::default()).expect("default config is valid")
}

/// `n_rows` paired sequences of `len` hourly events.
pub fn instance(n_rows: usize, len: usize) -> PaddedBatch {
    pad_batch(&synthetic_sample(n_rows, len)).expect("synthetic samples are non-empty")
}

/// One masked forward pass; returns `L_total`.
pub fn forward(state: &ModelState, batch: &PaddedBatch) -> f64 {
    let mut tape = Tape::new();
    let net = Network::new(&mut tape, state, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, loss) = sample_loss(&mut tape, &net, batch, &state.config, &mut rng).expect("forward");
    loss.total
}

/// Forward pass plus backpropagation to every parameter.
pub fn forward_backward(state: &ModelState, batch: &PaddedBatch) -> usize {
    let mut tape = Tape::new();
    let net = Network::new(&mut tape, state, true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (loss, _) = sample_loss(&mut tape, &net, batch, &state.config, &mut rng).expect("forward");
    tape.backward(loss).expect("backward");
    tape.len()
}
