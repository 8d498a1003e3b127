//! Trains briefly, then shows how many groups each image receives and how the
//! complexity score tracks the boundary content of the mask.
//!
//! cargo run --release --example group_plan

use tauflow::config::ModelConfig;
use tauflow::data::{generate_synthetic, make_batch};
use tauflow::loss::complexity_target;
use tauflow::metrics::BinaryMask;
use tauflow::model::TauFlowNet;
use tauflow::train::train;

fn main() -> tauflow::error::Result<()> {
    let mut cfg = ModelConfig { base_channel: 8, hidden_channels: 16, group_embed_dim: 4, norm_groups: 4, ..ModelConfig::reduced() };
    cfg.train.max_epochs = 15;
    cfg.train.batch_size = 4;
    let data = generate_synthetic(24, 5, cfg.input_size, cfg.input_size);
    let (net, store) = TauFlowNet::build::<f32>(&cfg, 5)?;
    let out = train(&net, store, &data[..16], &data[16..], None)?;
    println!("val dice {:.3} after {} epochs\n", out.best_dice, out.epochs_run);

    println!("{:<20} {:>8} {:>8} {:>7}", "sample", "target", "score", "groups");
    // One image per call so each gets its own group count.
    for s in &data[16..] {
        let (images, _) = make_batch(&[s])?;
        let (_, plan) = net.predict(&out.best_params, &images)?;
        let target = complexity_target(&BinaryMask::from_tensor(&s.mask)?);
        println!("{:<20} {:>8.3} {:>8.3} {:>7}", s.id, target, plan.scores[0], plan.per_image_groups[0]);
    }
    Ok(())
}
