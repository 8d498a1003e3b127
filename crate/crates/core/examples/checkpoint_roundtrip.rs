//! Saves a freshly initialized model, loads it back and checks that
//! predictions match bit for bit. Also shows the error for a model whose
//! shape disagrees with the file.
//!
//! cargo run --example checkpoint_roundtrip

use tauflow::checkpoint;
use tauflow::config::ModelConfig;
use tauflow::data::{generate_synthetic, make_batch};
use tauflow::model::TauFlowNet;

fn main() -> tauflow::error::Result<()> {
    let cfg = ModelConfig { base_channel: 8, hidden_channels: 16, group_embed_dim: 4, norm_groups: 4, ..ModelConfig::reduced() };
    let (net, store) = TauFlowNet::build::<f32>(&cfg, 7)?;
    let path = std::env::temp_dir().join("tauflow_example.ckpt");
    checkpoint::save(&path, &cfg, &store)?;
    println!("wrote {} ({} bytes, {} tensors)", path.display(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), store.len());

    let ckpt = checkpoint::load(&path)?;
    let (net2, store2) = ckpt.clone().into_model()?;
    let samples = generate_synthetic(2, 1, cfg.input_size, cfg.input_size);
    let (images, _) = make_batch(&samples.iter().collect::<Vec<_>>())?;
    let (a, _) = net.predict(&store, &images)?;
    let (b, _) = net2.predict(&store2, &images)?;
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("predictions identical after reload: {same}");

    match ckpt.model_with(&ModelConfig { max_groups: 7, ..cfg }) {
        Ok(_) => println!("unexpected: max_groups 7 accepted"),
        Err(e) => println!("max_groups 7 runtime: {e}"),
    }
    Ok(())
}
