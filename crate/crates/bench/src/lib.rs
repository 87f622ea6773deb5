//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitlora_core::{init_adapter, LoraAdapter, Tensor, ViTConfig, ViTWeights};

pub fn desk_cfg() -> ViTConfig {
    ViTConfig::preset("vit-tiny").unwrap()
}

/// A larger stand-in used to show switch latency does not track model size.
pub fn wide_cfg() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 8,
        channels: 1,
        dim: 192,
        depth: 8,
        heads: 8,
        mlp_ratio: 4,
    }
}

pub struct Fixture {
    pub cfg: ViTConfig,
    pub weights: ViTWeights,
    pub adapter: LoraAdapter,
    pub image: Tensor,
}

pub fn fixture(cfg: ViTConfig, seed: u64) -> Fixture {
    let weights = ViTWeights::init(&cfg, seed);
    let mut adapter = init_adapter(&cfg, 4, 4.min(cfg.dim - 1), seed + 1).unwrap();
    adapter.task_name = "bench".into();
    adapter.randomize_updates(0.05, seed + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let image = Tensor::randn(&[cfg.channels, cfg.image_size, cfg.image_size], 1.0, &mut rng);
    Fixture {
        cfg,
        weights,
        adapter,
        image,
    }
}
