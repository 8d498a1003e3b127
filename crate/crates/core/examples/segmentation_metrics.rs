//! Dice, IoU and HD95 on a few hand-built mask pairs.
//!
//! cargo run --example segmentation_metrics

use tauflow::metrics::{dice_iou, hd95, BinaryMask};

fn disc(size: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    let mut m = BinaryMask::empty(size, size);
    for i in 0..size {
        for j in 0..size {
            m.set(i, j, (i as f64 - cy).hypot(j as f64 - cx) <= r);
        }
    }
    m
}

fn main() -> tauflow::error::Result<()> {
    let gt = disc(64, 32.0, 32.0, 12.0);
    let cases = [
        ("identical", gt.clone()),
        ("shifted by 3", disc(64, 32.0, 35.0, 12.0)),
        ("shrunk to r=9", disc(64, 32.0, 32.0, 9.0)),
        ("disjoint", disc(64, 10.0, 10.0, 5.0)),
        ("speck only", disc(64, 50.0, 50.0, 0.5)),
        ("empty", BinaryMask::empty(64, 64)),
    ];
    println!("{:<14} {:>7} {:>7} {:>9}", "prediction", "dice", "iou", "hd95");
    for (name, pred) in &cases {
        let (d, i) = dice_iou(pred, &gt)?;
        let h = hd95(pred, &gt)?;
        let flag = if h.empty { " (empty)" } else { "" };
        println!("{name:<14} {d:>7.4} {i:>7.4} {:>9.3}{flag}", h.value);
    }
    Ok(())
}
