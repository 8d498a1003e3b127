//! Writes a synthetic dataset to disk, reads it back and prints per-sample
//! foreground fractions and boundary-based complexity targets.
//!
//! cargo run --example synth_dataset -- [dir] [n] [size]

use tauflow::data::{generate_synthetic, load_dir, save_sample};
use tauflow::loss::complexity_target;
use tauflow::metrics::BinaryMask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tauflow_synth"));
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let size: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(96);

    std::fs::create_dir_all(&dir)?;
    for s in generate_synthetic(n, 42, size, size) {
        save_sample(&dir, &s)?;
    }
    let loaded = load_dir(&dir, size)?;
    println!("{} samples in {}", loaded.len(), dir.display());
    for s in &loaded {
        let mask = BinaryMask::from_tensor(&s.mask)?;
        println!(
            "{}  foreground {:.3}  boundary px {:>4}  complexity target {:.3}",
            s.id,
            mask.count() as f64 / (size * size) as f64,
            mask.boundary().len(),
            complexity_target(&mask)
        );
    }
    Ok(())
}
