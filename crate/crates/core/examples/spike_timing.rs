//! The spike-timing regularizer on hand-made event trains: a causal pair
//! (pre fires, post follows) is rewarded; the reversed order is penalized.
//!
//! cargo run --example spike_timing

use tauflow::stdp::{stdp_loss, EventMaps};
use tauflow::tensor::{Tape, Tensor};

fn loss(pre: &[f64], post: &[f64], beta: f64) -> f64 {
    let t = pre.len();
    let mut tape = Tape::<f64>::new();
    let pre = tape.constant(Tensor::from_f64(&[1, t, 1, 1], pre).unwrap()).unwrap();
    let post = tape.constant(Tensor::from_f64(&[1, t, 1, 1], post).unwrap()).unwrap();
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
    let l = stdp_loss(&mut tape, &EventMaps { pre, post }, w, beta).unwrap();
    tape.value(l).item()
}

fn main() {
    let trains: [(&str, [f64; 4], [f64; 4]); 4] = [
        ("pre then post", [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]),
        ("post then pre", [0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]),
        ("simultaneous", [0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]),
        ("silent", [0.0; 4], [0.0; 4]),
    ];
    for beta in [0.5, 1.0] {
        println!("beta {beta}");
        for (name, pre, post) in &trains {
            println!("  {name:<14} {:+.4}", loss(pre, post, beta));
        }
    }
}
