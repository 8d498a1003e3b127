//! Synthetic gland-like images: lobed, soft-edged blobs on a textured
//! background. Every sample is a pure function of `(seed, index)`.

use std::f64::consts::TAU;

use super::Sample;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const BACKGROUND: [f64; 3] = [0.86, 0.66, 0.76];
const GLAND: [f64; 3] = [0.46, 0.24, 0.56];
/// Width of the soft edge, in units of the blob radius.
const EDGE: f64 = 0.15;

struct Blob {
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    angle: f64,
    lobes: f64,
    lobe_amp: f64,
    lobe_phase: f64,
}

impl Blob {
    fn draw(rng: &mut SplitMix64) -> Self {
        let ra = rng.uniform(0.08, 0.18);
        Blob {
            cx: rng.uniform(0.15, 0.85),
            cy: rng.uniform(0.15, 0.85),
            ra,
            rb: ra * rng.uniform(0.6, 1.0),
            angle: rng.uniform(0.0, TAU),
            lobes: (3 + rng.below(4)) as f64,
            lobe_amp: rng.uniform(0.0, 0.2),
            lobe_phase: rng.uniform(0.0, TAU),
        }
    }

    /// Signed margin `r(θ) - d`: positive inside, zero on the outline.
    fn margin(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ra;
        let v = (-s * dx + c * dy) / self.rb;
        let d = (u * u + v * v).sqrt();
        let r = 1.0 + self.lobe_amp * (self.lobes * v.atan2(u) + self.lobe_phase).sin();
        r - d
    }
}

/// Number of blobs drawn for sample `index` of `seed`.
pub fn synthetic_blob_count(seed: u64, index: u64) -> usize {
    2 + SplitMix64::stream(seed, index).below(5) as usize
}

pub fn synthetic_sample(seed: u64, index: u64, height: usize, width: usize) -> Sample {
    let mut rng = SplitMix64::stream(seed, index);
    let count = 2 + rng.below(5) as usize;
    let blobs: Vec<Blob> = (0..count).map(|_| Blob::draw(&mut rng)).collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.uniform(-0.05, 0.05)).collect();
    let waves: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (rng.uniform(4.0, 14.0), rng.uniform(0.0, TAU), rng.uniform(0.0, TAU))).collect();

    let plane = height * width;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![0f32; plane];
    for i in 0..height {
        for j in 0..width {
            let y = (i as f64 + 0.5) / height as f64;
            let x = (j as f64 + 0.5) / width as f64;
            let margin = blobs.iter().map(|b| b.margin(x, y)).fold(f64::NEG_INFINITY, f64::max);
            let cover = (margin / EDGE + 0.5).clamp(0.0, 1.0);
            let texture: f64 = waves.iter().map(|&(f, a, p)| 0.02 * (TAU * f * (x * a.cos() + y * a.sin()) + p).sin()).sum();
            let grain = rng.uniform(-0.03, 0.03);
            let p = i * width + j;
            for c in 0..3 {
                let v = BACKGROUND[c] * (1.0 - cover) + (GLAND[c] + tint[c]) * cover + texture + grain;
                image[c * plane + p] = v.clamp(0.0, 1.0) as f32;
            }
            mask[p] = if margin > 0.0 { 1.0 } else { 0.0 };
        }
    }
    Sample {
        id: format!("synth_{seed}_{index:05}"),
        image: Tensor::new(vec![3, height, width], image).expect("consistent shape"),
        mask: Tensor::new(vec![1, height, width], mask).expect("consistent shape"),
    }
}

/// Samples `0..n` of `seed` at `height × width`.
pub fn generate_synthetic(n: usize, seed: u64, height: usize, width: usize) -> Vec<Sample> {
    (0..n as u64).map(|i| synthetic_sample(seed, i, height, width)).collect()
}
