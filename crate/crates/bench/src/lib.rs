//! Shared fixtures for the benchmarks.

use plaid_core::corpus::Vocabulary;
use plaid_core::{DenoiserConfig, Mat, Model, TokenBatch, TokenId, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The byte-level smoke-test architecture at a given depth and width.
pub fn smoke_config(depth: usize, width: usize, seq_len: usize) -> DenoiserConfig {
    DenoiserConfig { vocab: Vocabulary::byte_level().len(), depth, width, max_len: seq_len, ..Default::default() }
}

pub fn model(cfg: DenoiserConfig, seed: u64) -> Model {
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid config")
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

pub fn random_batch(batch: usize, seq: usize, vocab: usize, seed: u64) -> TokenBatch {
    TokenBatch::from_flat(random_tokens(batch * seq, vocab, seed), seq).expect("non-empty batch")
}

pub fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    Mat::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Training state and config for timing single steps.
pub fn train_fixture(depth: usize, width: usize, batch: usize, seq: usize) -> (TrainState, TrainConfig) {
    let m = model(smoke_config(depth, width, seq), 0);
    let cfg = TrainConfig { batch_size: batch, seq_len: seq, total_steps: u64::MAX / 2, warmup_steps: 10, ..Default::default() };
    (TrainState::new(m, 0), cfg)
}
