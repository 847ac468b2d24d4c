#![allow(dead_code)]

pub mod caches;
pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcil_core::backbone::BlockConfig;
use vcil_core::datagen::{CorpusConfig, RenderConfig, VideoClip};
use vcil_core::expansion::ExpansionConfig;

/// 1 block, d = 8, two frames of 8×8 pixels in 4×4 patches.
pub fn tiny_block() -> BlockConfig {
    BlockConfig {
        embed_dim: 8,
        heads: 2,
        blocks: 1,
        frames: 2,
        frame_size: 8,
        patch_size: 4,
        mlp_ratio: 2.0,
        bottleneck: 4,
        position_embeddings: true,
        ln_eps: 1e-5,
    }
}

/// A model that accepts clips from [`small_corpus`].
pub fn corpus_block() -> BlockConfig {
    BlockConfig {
        embed_dim: 8,
        heads: 2,
        blocks: 2,
        frames: 8,
        frame_size: 32,
        patch_size: 16,
        mlp_ratio: 2.0,
        bottleneck: 4,
        position_embeddings: true,
        ln_eps: 1e-5,
    }
}

/// 8 classes, 3 train and 2 test clips each.
pub fn small_corpus() -> CorpusConfig {
    CorpusConfig {
        textures: 4,
        train_per_class: 3,
        test_per_class: 2,
        render: RenderConfig::default(),
        ..CorpusConfig::default()
    }
}

pub fn plain() -> ExpansionConfig {
    ExpansionConfig {
        separate_adapters: false,
        cross_task_attention: false,
        ..ExpansionConfig::default()
    }
}

pub fn random_clip(rng: &mut ChaCha8Rng, b: &BlockConfig, id: u64) -> VideoClip {
    let mut c = VideoClip::zeros(b.frames, b.frame_size, b.frame_size);
    c.pixels.iter_mut().for_each(|p| *p = rng.gen_range(0.0..1.0));
    c.sample_id = id;
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
