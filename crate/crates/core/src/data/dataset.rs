use std::collections::HashMap;

use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_composite, CompositeSample, Manifest};
use crate::error::{invalid, Error, Result};
use crate::imaging::{load_mask_png, ImageTensor};
use crate::tensor::Array;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// Seeded shuffled order over `len` items. Every epoch visits each index
/// once; batches never straddle an epoch boundary.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = EpochSampler {
            len,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            len: self.len,
            order: self.order.clone(),
            cursor: self.cursor,
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_state(state: &SamplerState) -> Result<Self> {
        if state.order.len() != state.len || state.cursor > state.len {
            return Err(Error::Checkpoint("inconsistent sampler state".into()));
        }
        Ok(EpochSampler {
            len: state.len,
            order: state.order.clone(),
            cursor: state.cursor,
            epoch: state.epoch,
            rng: state.rng.restore()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub len: usize,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
    pub rng: RngState,
}

/// A batch in `NCHW` layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub composite: Array,
    pub background: Array,
    pub mask: Array,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&CompositeSample], indices: Vec<usize>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid!("empty batch"))?;
        let (h, w) = (first.composite.height(), first.composite.width());
        let b = samples.len();
        let mut batch = Batch {
            composite: Array::zeros((b, 3, h, w)),
            background: Array::zeros((b, 3, h, w)),
            mask: Array::zeros((b, 1, h, w)),
            indices,
        };
        for (i, s) in samples.iter().enumerate() {
            if (s.composite.height(), s.composite.width()) != (h, w) {
                return Err(invalid!("batch items differ in size"));
            }
            batch.composite.slice_mut(s![i..=i, .., .., ..]).assign(&s.composite.to_nchw());
            batch.background.slice_mut(s![i..=i, .., .., ..]).assign(&s.background.to_nchw());
            batch.mask.slice_mut(s![i, 0, .., ..]).assign(&s.mask);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.composite.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds and caches composites from a manifest at a fixed square size.
pub struct Dataset {
    manifest: Manifest,
    size: usize,
    cache: HashMap<usize, Option<CompositeSample>>,
}

impl Dataset {
    pub fn new(manifest: Manifest, size: usize) -> Result<Self> {
        if manifest.is_empty() {
            return Err(invalid!("manifest has no records"));
        }
        Ok(Dataset {
            manifest,
            size,
            cache: HashMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn build(&self, index: usize) -> Result<CompositeSample> {
        let rec = &self.manifest.records[index];
        let photo = ImageTensor::load_png(self.manifest.resolve(&rec.photo))?;
        let mask = load_mask_png(self.manifest.resolve(&rec.mask))?;
        let painting = ImageTensor::load_png(self.manifest.resolve(&rec.painting))?;
        Ok(build_composite(&photo, &mask, &painting, rec.seed)?.resized(self.size))
    }

    /// The sample at `index`, or `None` (with a warning, once) when its
    /// files cannot be read or it fails to build.
    pub fn get(&mut self, index: usize) -> Option<&CompositeSample> {
        if !self.cache.contains_key(&index) {
            let built = match self.build(index) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("skipping manifest record {index}: {e}");
                    None
                }
            };
            self.cache.insert(index, built);
        }
        self.cache[&index].as_ref()
    }

    /// Next batch from `sampler`, skipping unusable records. Fails when a
    /// whole epoch's worth of records yields nothing.
    pub fn next_batch(&mut self, sampler: &mut EpochSampler, batch_size: usize) -> Result<Batch> {
        let mut tried = 0;
        loop {
            let indices = sampler.next_indices(batch_size);
            tried += indices.len();
            let usable: Vec<usize> = indices.into_iter().filter(|&i| self.get(i).is_some()).collect();
            if !usable.is_empty() {
                let samples: Vec<&CompositeSample> = usable.iter().map(|i| self.cache[i].as_ref().unwrap()).collect();
                return Batch::from_samples(&samples, usable.clone());
            }
            if tried >= self.len() {
                return Err(invalid!("no manifest record could be loaded"));
            }
        }
    }
}
