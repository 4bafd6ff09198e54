//! Bounded experience replay held at the RSU.
//!
//! The buffer stores raw frames rather than features, since features change
//! as the model trains. At the end of each scene `μ` frames from it are
//! added; when that overflows capacity, random older frames are evicted and
//! every new frame is kept.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Frame, SCENARIO_SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry<T> {
    /// Curriculum position of the scene the sample came from.
    pub scene: usize,
    pub sample: T,
}

pub type ReplaySample = ReplayEntry<Frame>;

/// Uniform sample without replacement of `min(count, len)` items, kept in
/// input order.
pub fn select<T: Clone>(samples: &[T], count: usize, seed: u64) -> Vec<T> {
    select_indices(samples.len(), count, seed)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect()
}

fn select_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, len, count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    entries: Vec<ReplayEntry<T>>,
    select_count: usize,
    capacity: usize,
    /// Most recent scene refreshed, whether or not any of it survived.
    #[serde(default)]
    last_scene: Option<usize>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(select_count: usize, capacity: usize) -> Result<Self> {
        if select_count > capacity {
            return Err(Error::Config(format!(
                "replay select count {select_count} exceeds capacity {capacity}"
            )));
        }
        Ok(Self {
            entries: Vec::new(),
            select_count,
            capacity,
            last_scene: None,
        })
    }

    pub fn entries(&self) -> &[ReplayEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn select_count(&self) -> usize {
        self.select_count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adds `μ` frames of the finished scene, evicting random older entries
    /// if capacity would be exceeded.
    pub fn refresh(&mut self, scene: usize, finished: &[T], seed: u64) -> Result<()> {
        if self.select_count > self.capacity {
            return Err(Error::Config(format!(
                "replay select count {} exceeds capacity {}",
                self.select_count, self.capacity
            )));
        }
        if let Some(last) = self.last_scene.filter(|&last| scene <= last) {
            return Err(Error::Config(format!(
                "scene {scene} refreshed after scene {last}"
            )));
        }
        // independent streams for selection and eviction
        let new = select(finished, self.select_count, seed);
        let room = self.capacity - new.len();
        if self.entries.len() > room {
            let keep = select_indices(self.entries.len(), room, seed ^ 0x9e37_79b9_7f4a_7c15);
            let old = std::mem::take(&mut self.entries);
            let mut keep = keep.into_iter().peekable();
            for (i, e) in old.into_iter().enumerate() {
                if keep.peek() == Some(&i) {
                    keep.next();
                    self.entries.push(e);
                }
            }
        }
        self.entries
            .extend(new.into_iter().map(|sample| ReplayEntry { scene, sample }));
        self.last_scene = Some(scene);
        Ok(())
    }
}

/// Where a stream item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Current,
    Replay,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamItem<'a, T> {
    pub origin: Origin,
    pub sample: &'a T,
}

/// One epoch of batches over all of `current` plus a fresh draw of up to
/// `replay_draw` buffered samples, shuffled together.
pub fn make_training_stream<'a, T: Clone>(
    current: &'a [T],
    buffer: &'a ReplayBuffer<T>,
    replay_draw: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<StreamItem<'a, T>>>> {
    if current.is_empty() {
        return Err(Error::Empty("current scene has no training samples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<StreamItem<'a, T>> = current
        .iter()
        .map(|sample| StreamItem {
            origin: Origin::Current,
            sample,
        })
        .collect();
    let draw = index::sample(&mut rng, buffer.len(), replay_draw.min(buffer.len())).into_vec();
    let mut draw = draw;
    draw.sort_unstable();
    items.extend(draw.into_iter().map(|i| StreamItem {
        origin: Origin::Replay,
        sample: &buffer.entries[i].sample,
    }));
    items.shuffle(&mut rng);
    Ok(items.chunks(batch_size).map(<[_]>::to_vec).collect())
}

#[derive(Serialize, Deserialize)]
struct BufferFile {
    schema_version: u32,
    #[serde(flatten)]
    buffer: ReplayBuffer<Frame>,
}

impl ReplayBuffer<Frame> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufferFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            buffer: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: BufferFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "replay file schema {} is not {SCENARIO_SCHEMA_VERSION}",
                file.schema_version
            )));
        }
        let b = file.buffer;
        if b.select_count > b.capacity || b.entries.len() > b.capacity {
            return Err(Error::Config("stored replay buffer violates its capacity".into()));
        }
        Ok(b)
    }
}
