#![allow(dead_code)]

use bimatch_core::crossmodal::MimMethod;
use bimatch_core::synthdata::{generate_dataset, Dataset, GenConfig};
use bimatch_core::trainer::TrainConfig;

/// 12 identities with two images each; 4 identities are held out.
pub fn small_dataset() -> Dataset {
    let cfg = GenConfig {
        seed: 3,
        num_identities: 12,
        images_per_identity: 2,
        captions_per_image: 1,
        ..GenConfig::default()
    };
    generate_dataset(&cfg).expect("generation succeeds").0
}

/// A model small enough that a full training run takes a second or two.
pub fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.hidden_size = 16;
    cfg.encoder_layers = 1;
    cfg.encoder_heads = 2;
    cfg.attention_heads_of_cme = 2;
    cfg.transformer_blocks_in_cme = 1;
    cfg.batch_size = 8;
    cfg.epoch = 2;
    cfg.warmup_epochs = 1;
    cfg.num_test_identities = 4;
    cfg.mim_method = MimMethod::Semantic;
    cfg
}
