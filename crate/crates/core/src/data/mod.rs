//! Samples, the synthetic gland generator, PPM/PGM ingestion, flips and
//! dataset splits.

pub mod pnm;
mod synth;

use std::path::{Path, PathBuf};

pub use synth::{generate_synthetic, synthetic_blob_count, synthetic_sample};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::kernels;
use crate::tensor::Tensor;
use pnm::RawImage;

/// One image with its binary mask. `image`: `[3, H, W]` in [0, 1];
/// `mask`: `[1, H, W]` in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Bilinear resize of both planes; the mask is re-thresholded at 0.5.
    pub fn resized(&self, h: usize, w: usize) -> Result<Sample> {
        if (h, w) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        Ok(Sample {
            id: self.id.clone(),
            image: resize_planes(&self.image, h, w)?,
            mask: threshold(&resize_planes(&self.mask, h, w)?),
        })
    }
}

fn resize_planes(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let x = t.clone().reshape(&[1, s[0], s[1], s[2]])?;
    Ok(kernels::bilinear_resize(&x, h, w)?.reshape(&[s[0], h, w])?)
}

pub fn threshold(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

fn image_tensor(raw: &RawImage) -> Tensor<f32> {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, p) = (idx / (h * w), idx % (h * w));
        raw.pixels[p * c + ch] as f32 / 255.0
    })
}

fn raw_from_planes(t: &Tensor<f32>) -> RawImage {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut pixels = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            pixels[p * c + ch] = (t.data()[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    RawImage { width: w, height: h, channels: c, pixels }
}

/// Reads a P6 image and a P5 mask (binarized at 128) and resizes both to
/// `size × size`.
pub fn load_sample(image_path: &Path, mask_path: &Path, size: usize) -> Result<Sample> {
    let img = pnm::read(image_path)?;
    let mask = pnm::read(mask_path)?;
    if img.channels != 3 {
        return Err(Error::Format { path: image_path.into(), reason: "expected a P6 colour image".into() });
    }
    if mask.channels != 1 {
        return Err(Error::Format { path: mask_path.into(), reason: "expected a P5 greyscale mask".into() });
    }
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::Invalid(format!(
            "{} is {}x{} but {} is {}x{}",
            image_path.display(),
            img.width,
            img.height,
            mask_path.display(),
            mask.width,
            mask.height
        )));
    }
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let binary = RawImage { pixels: mask.pixels.iter().map(|&v| if v >= 128 { 255 } else { 0 }).collect(), ..mask };
    let sample = Sample { id, image: image_tensor(&img), mask: image_tensor(&binary) };
    sample.resized(size, size)
}

pub fn mask_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image_path.with_file_name(format!("{stem}_mask.pgm"))
}

/// Writes `<id>.ppm` and `<id>_mask.pgm` into `dir`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    let image_path = dir.join(format!("{}.ppm", sample.id));
    pnm::write(&image_path, &raw_from_planes(&sample.image))?;
    pnm::write(&mask_path_for(&image_path), &raw_from_planes(&sample.mask))
}

/// Every `<id>.ppm` with a matching `<id>_mask.pgm` in `dir`, sorted by id.
pub fn load_dir(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::Invalid(format!("no .ppm images in {}", dir.display())));
    }
    images.iter().map(|p| load_sample(p, &mask_path_for(p), size)).collect()
}

/// Mirrors image and mask together.
pub fn flip(sample: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let flip_planes = |t: &Tensor<f32>| {
        let s = t.shape();
        let (h, w) = (s[1], s[2]);
        Tensor::from_fn(s, |idx| {
            let (c, i, j) = (idx / (h * w), idx / w % h, idx % w);
            let si = if vertical { h - 1 - i } else { i };
            let sj = if horizontal { w - 1 - j } else { j };
            t.data()[(c * h + si) * w + sj]
        })
    };
    Sample { id: sample.id.clone(), image: flip_planes(&sample.image), mask: flip_planes(&sample.mask) }
}

/// Independent horizontal and vertical flips, each with probability 0.5.
pub fn augment(sample: &Sample, rng: &mut SplitMix64) -> Sample {
    let h = rng.bernoulli(0.5);
    let v = rng.bernoulli(0.5);
    flip(sample, h, v)
}

/// Stacks samples into `([B, 3, H, W], [B, 1, H, W])`.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffled k-fold partition of `0..n`.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::Invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let val = order[lo..hi].to_vec();
            let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
            Fold { train, val }
        })
        .collect())
}

/// Shuffled train/validation split with `val` held-out samples.
pub fn holdout(n: usize, val: usize, seed: u64) -> Result<Fold> {
    if val == 0 || val >= n {
        return Err(Error::Invalid(format!("cannot hold out {val} of {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    Ok(Fold { val: order[..val].to_vec(), train: order[val..].to_vec() })
}
