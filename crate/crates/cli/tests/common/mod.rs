//! Small experiment configurations shared by the integration tests.
#![allow(dead_code)]

use hmnas_cli::config::ExperimentConfig;

/// One normal cell with a single intermediate node and a short schedule.
pub fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for kv in [
        "dataset=synthetic:blobs2:3",
        "space.nodes_per_cell=4",
        "space.num_cells=1",
        "space.init_channels=4",
        "space.ops=sep_conv_3x3,max_pool_3x3,identity",
        "space.reduction_cells=",
        "space.stem_multiplier=1",
        "train.epochs=4",
        "train.warmup_epochs=1",
        "train.batch_size=64",
        "train.w_lr=0.05",
        "masker.epochs=3",
        "masker.batch_size=64",
        "masker.lr_w_mask=0.05",
        "masker.lr_arch_mask=0.05",
        "finetune.epochs=3",
        "finetune.batch_size=64",
        "ablation.random_seeds=2",
    ] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.set_seed(seed);
    cfg
}
