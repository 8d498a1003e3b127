//! Parameter and FLOP accounting for the default model and a few variants.
//!
//! cargo run --example cost_report

use tauflow::accounting::CostReport;
use tauflow::config::ModelConfig;

fn main() -> tauflow::error::Result<()> {
    let base = ModelConfig::default();
    print!("{}", CostReport::new(&base, 224)?.table());
    println!();

    println!("{:<28} {:>9} {:>10} {:>10}", "variant", "params", "G=1", "G=max");
    let variants = [
        ("default", base.clone()),
        ("max_groups 7", ModelConfig { max_groups: 7, ..base.clone() }),
        ("time_steps 4", ModelConfig { time_steps: 4, ..base.clone() }),
        ("base_channel 16", ModelConfig { base_channel: 16, norm_groups: 4, ..base.clone() }),
        ("reduced (64x64)", ModelConfig::reduced()),
    ];
    for (name, cfg) in variants {
        let size = cfg.input_size;
        let r = CostReport::new(&cfg, size)?;
        let g1 = r.flops_at(1).unwrap() as f64 / 1e9;
        let gmax = r.flops_at(cfg.max_groups).unwrap() as f64 / 1e9;
        println!("{:<28} {:>9} {:>9.3}G {:>9.3}G", format!("{name} @{size}"), r.params_total, g1, gmax);
    }
    Ok(())
}
