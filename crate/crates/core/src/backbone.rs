//! Three-stage convolutional encoder and the skip-connected decoder.

use crate::config::ModelConfig;
use crate::nn::{Bound, Conv2d, ConvBlock, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{shape_err, Real, Result, Tape, Var};

/// Encoder outputs at full, half and quarter resolution, all `base_channel` wide.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SegOutputs {
    /// `[B, 1, S, S]`
    pub seg_logits: Var,
    /// `[B, 1, S/2, S/2]`
    pub aux_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: [[ConvBlock; 2]; 3],
    input_size: usize,
    channels: usize,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channel;
        let g = cfg.norm_groups;
        let mut block = |name: &str, cin: usize, stride: usize| ConvBlock::new(store, rng, name, cin, c, stride, g);
        let stages = [
            [block("encoder.stage1.0", 3, 1), block("encoder.stage1.1", c, 1)],
            [block("encoder.stage2.0", c, 2), block("encoder.stage2.1", c, 1)],
            [block("encoder.stage3.0", c, 2), block("encoder.stage3.1", c, 1)],
        ];
        Encoder { stages, input_size: cfg.input_size, channels: c }
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let s = tape.shape(image);
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(shape_err(
                "encode",
                format!("expected [B, 3, {0}, {0}] input, got {s:?}", self.input_size),
            ));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(tape, p, x)?;
            }
            levels.push(x);
        }
        debug_assert_eq!(tape.shape(levels[2])[1], self.channels);
        Ok(FeaturePyramid { f1: levels[0], f2: levels[1], f3: levels[2] })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    up_mid: ConvBlock,
    aux_head: Conv2d,
    up_top: ConvBlock,
    seg_head: Conv2d,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channel;
        Decoder {
            up_mid: ConvBlock::new(store, rng, "decoder.mid", 2 * c, c, 1, cfg.norm_groups),
            aux_head: Conv2d::pointwise(store, rng, "decoder.aux_head", c, 1),
            up_top: ConvBlock::new(store, rng, "decoder.top", 2 * c, c, 1, cfg.norm_groups),
            seg_head: Conv2d::pointwise(store, rng, "decoder.seg_head", c, 1),
        }
    }

    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, fused: Var, pyramid: &FeaturePyramid) -> Result<SegOutputs> {
        let fs = tape.shape(fused).to_vec();
        let s2 = tape.shape(pyramid.f2).to_vec();
        let s1 = tape.shape(pyramid.f1).to_vec();
        let consistent = fs.len() == 4
            && fs[0] == s2[0]
            && fs[1] == s2[1]
            && s2[2] == 2 * fs[2]
            && s2[3] == 2 * fs[3]
            && s1[2] == 2 * s2[2]
            && s1[3] == 2 * s2[3];
        if !consistent {
            return Err(shape_err("decode", format!("fused {fs:?} incompatible with f2 {s2:?} / f1 {s1:?}")));
        }
        let up = tape.bilinear_resize(fused, s2[2], s2[3])?;
        let cat = tape.concat(&[up, pyramid.f2], 1)?;
        let mid = self.up_mid.forward(tape, p, cat)?;
        let aux_logits = self.aux_head.forward(tape, p, mid)?;
        let up = tape.bilinear_resize(mid, s1[2], s1[3])?;
        let cat = tape.concat(&[up, pyramid.f1], 1)?;
        let top = self.up_top.forward(tape, p, cat)?;
        let seg_logits = self.seg_head.forward(tape, p, top)?;
        Ok(SegOutputs { seg_logits, aux_logits })
    }
}
