//! Desk-scale fixtures shared by the integration tests. The pretrained
//! model is cached on disk next to the test binaries so each binary trains
//! it at most once.

use std::path::PathBuf;
use std::sync::OnceLock;

use genie_core::nn::{desk_split, pretrain, ArchConfig, LabeledImages, ModelGraph, TrainConfig};

pub const DESK_ARCH: &str = "resnet-tiny";
pub const TRAIN_SIZE: usize = 4000;
pub const TEST_SIZE: usize = 1000;
pub const DATA_SEED: u64 = 1;

pub fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 64,
        lr: 0.01,
        seed: 0,
    }
}

pub fn desk_data() -> &'static (LabeledImages<f32>, LabeledImages<f32>) {
    static DATA: OnceLock<(LabeledImages<f32>, LabeledImages<f32>)> = OnceLock::new();
    DATA.get_or_init(|| desk_split(TRAIN_SIZE, TEST_SIZE, DATA_SEED))
}

pub fn cache_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk-resnet-tiny-e10.genz")
}

/// Trains the desk model from scratch.
pub fn train_desk_model() -> ModelGraph<f32> {
    let arch = ArchConfig::builtin(DESK_ARCH).unwrap();
    let model = ModelGraph::build(&arch).unwrap();
    pretrain(&model, &desk_data().0, &train_config()).unwrap().0
}

/// The pretrained desk model, from the on-disk cache when available.
pub fn desk_model() -> &'static ModelGraph<f32> {
    static MODEL: OnceLock<ModelGraph<f32>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let path = cache_path();
        if let Ok(m) = ModelGraph::load(&path) {
            return m;
        }
        let m = train_desk_model();
        m.save(&path, serde_json::Value::Null).unwrap();
        m
    })
}

/// Stores a freshly trained model as the cache entry.
pub fn store_desk_model(model: &ModelGraph<f32>) {
    model.save(&cache_path(), serde_json::Value::Null).unwrap();
}
