use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Walk a fresh permutation each epoch. A batch that crosses the epoch
    /// boundary takes the tail of one permutation and the head of the next.
    #[default]
    ShuffleEpoch,
    WithReplacement,
}

/// Seeded minibatch index stream over a domain of fixed size.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    mode: SamplerMode,
    batch_size: usize,
    domain_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// Serializable snapshot of a [`BatchSampler`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub mode: SamplerMode,
    pub batch_size: usize,
    pub domain_size: usize,
    pub rng_seed: Vec<u8>,
    pub rng_stream: u64,
    /// Decimal string: the word position is a 128-bit counter.
    pub rng_word_pos: String,
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl BatchSampler {
    /// `stream` separates samplers that share a seed.
    pub fn new(
        domain_size: usize,
        batch_size: usize,
        mode: SamplerMode,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if domain_size == 0 {
            return Err(Error::Contract("cannot sample from an empty domain".into()));
        }
        if batch_size == 0 {
            return Err(Error::Validation(vec!["batch_size must be >= 1".into()]));
        }
        if mode == SamplerMode::ShuffleEpoch && batch_size > domain_size {
            return Err(Error::Validation(vec![format!(
                "batch_size {batch_size} exceeds domain size {domain_size} in shuffle-epoch mode"
            )]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut s = Self {
            mode,
            batch_size,
            domain_size,
            rng,
            order: Vec::new(),
            cursor: 0,
        };
        if mode == SamplerMode::ShuffleEpoch {
            s.reshuffle();
        }
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.domain_size).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn domain_size(&self) -> usize {
        self.domain_size
    }

    /// Indices of the next minibatch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        match self.mode {
            SamplerMode::WithReplacement => (0..self.batch_size)
                .map(|_| self.rng.random_range(0..self.domain_size))
                .collect(),
            SamplerMode::ShuffleEpoch => {
                let mut out = Vec::with_capacity(self.batch_size);
                while out.len() < self.batch_size {
                    if self.cursor == self.order.len() {
                        self.reshuffle();
                    }
                    let take = (self.batch_size - out.len()).min(self.order.len() - self.cursor);
                    out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
                    self.cursor += take;
                }
                out
            }
        }
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            mode: self.mode,
            batch_size: self.batch_size,
            domain_size: self.domain_size,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            order: self.order.clone(),
            cursor: self.cursor,
        }
    }

    pub fn from_state(state: &SamplerState) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("sampler state: {m}"));
        let seed: [u8; 32] = state
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| bad("seed must be 32 bytes"))?;
        let word_pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| bad("unreadable word position"))?;
        if state.cursor > state.order.len()
            || (state.mode == SamplerMode::ShuffleEpoch && state.order.len() != state.domain_size)
        {
            return Err(bad("inconsistent permutation"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            mode: state.mode,
            batch_size: state.batch_size,
            domain_size: state.domain_size,
            rng,
            order: state.order.clone(),
            cursor: state.cursor,
        })
    }
}
