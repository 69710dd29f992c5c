#![allow(dead_code)]

use latent_restore::config::RunConfig;
use latent_restore::train::Stage;

/// Small end-to-end configuration: every stage runs, in seconds.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{
            "seed": 99,
            "data": {"train_volumes": 3, "val_volumes": 3, "val_normal_volumes": 1, "slices": 6, "side": 16,
                     "radius_range": [2, 4], "span_range": [2, 4]},
            "codec": {"image_side": 16, "channels": 8, "res_channels": 8, "codebook_size": 8, "embedding_dim": 8,
                      "vae_latent_dim": 8},
            "prior": {"channels": 8, "blocks": 1, "res_blocks": 1},
            "scoring": {"restorations": 3}
        }"#,
    )
    .expect("tiny config parses");
    for s in [Stage::Vqvae, Stage::Prior, Stage::Vae] {
        let t = match s {
            Stage::Vqvae => &mut cfg.train.vqvae,
            Stage::Prior => &mut cfg.train.prior,
            Stage::Vae => &mut cfg.train.vae,
        };
        t.max_steps = 12;
        t.batch_size = 4;
        t.checkpoint_interval = 5;
        t.log_interval = 5;
    }
    cfg.validate().expect("tiny config validates");
    cfg
}
