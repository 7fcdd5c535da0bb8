//! Fixtures shared by the criterion benches.

use mhel_core::kb::KbStore;
use mhel_core::mock::{synthetic_world, MockEncoder, ScriptedChat, SyntheticWorld};
use mhel_core::pipeline::PromptMode;
use mhel_core::{EmbeddingMatrix, LinkerDeps, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `count × dim` matrix of uniform values in [-1, 1).
pub fn random_index(count: usize, dim: usize, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let ids = (0..count).map(|i| format!("Q{}", i + 1)).collect();
    VectorIndex::new(EmbeddingMatrix::new(ids, dim, data).expect("consistent matrix"))
}

pub fn random_queries(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

/// Synthetic world with an on-disk entity store and mock backends.
pub struct PipelineFixture {
    _dir: tempfile::TempDir,
    pub world: SyntheticWorld,
    pub index: VectorIndex,
    pub store: KbStore,
    pub encoder: MockEncoder,
}

impl PipelineFixture {
    pub fn new(entities: usize, mentions: usize, dim: usize) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let world = synthetic_world(42, entities, mentions, dim);
        let store = KbStore::write(dir.path().join("kb.store"), &world.entities).expect("store");
        Self {
            index: VectorIndex::new(world.matrix.clone()),
            store,
            encoder: MockEncoder::new(dim),
            world,
            _dir: dir,
        }
    }

    /// Fresh scripted chat; scripts are consumed, so use one per run.
    pub fn chat(&self) -> ScriptedChat {
        ScriptedChat::from_map(self.world.chat_script(PromptMode::Chain))
    }

    pub fn deps<'a>(&'a self, chat: &'a ScriptedChat) -> LinkerDeps<'a> {
        LinkerDeps {
            encoder: &self.encoder,
            index: &self.index,
            store: &self.store,
            chat,
        }
    }
}
