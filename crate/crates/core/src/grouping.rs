//! Dynamic grouping: the τ field, complexity-driven group count, soft group
//! masks refined over flow steps, and the grouped feature tensor.

use crate::config::ModelConfig;
use crate::nn::{Bound, Conv2d, ConvBlock, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::kernels::{self, sigmoid, softplus, ConvGeometry};
use crate::tensor::{real, shape_err, to_f64, Real, Result, Tape, Tensor, Var};

/// Positive time-constant bounds and the additive softplus offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauBounds {
    pub min: f64,
    pub max: f64,
    pub eps: f64,
}

impl TauBounds {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        TauBounds { min: cfg.tau_min, max: cfg.tau_max, eps: cfg.tau_eps }
    }

    /// `clamp(softplus(raw) + eps, min, max)` on a plain value.
    pub fn apply(&self, raw: f64) -> f64 {
        (softplus(raw) + self.eps).clamp(self.min, self.max)
    }

    /// Same activation recorded on the tape.
    pub fn activate<T: Real>(&self, tape: &mut Tape<T>, raw: Var) -> Result<Var> {
        let sp = tape.softplus(raw)?;
        let shifted = tape.affine(sp, 1.0, self.eps)?;
        tape.clamp(shifted, self.min, self.max)
    }
}

/// Complexity scores and the resulting group count.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPlan {
    pub scores: Vec<f64>,
    pub per_image_groups: Vec<usize>,
    /// Groups evaluated for the whole batch: the largest per-image count.
    pub active_groups: usize,
}

/// `min(max_groups, 1 + floor(score * max_groups))`, with the score clipped to [0, 1].
pub fn groups_for_score(score: f64, max_groups: usize) -> usize {
    let s = score.clamp(0.0, 1.0);
    (1 + (s * max_groups as f64).floor() as usize).min(max_groups)
}

impl GroupPlan {
    pub fn from_scores(scores: Vec<f64>, max_groups: usize) -> Self {
        let per_image_groups: Vec<usize> = scores.iter().map(|&s| groups_for_score(s, max_groups)).collect();
        let active_groups = per_image_groups.iter().copied().max().unwrap_or(1);
        GroupPlan { scores, per_image_groups, active_groups }
    }

    pub fn fixed(batch: usize, groups: usize, scores: Vec<f64>) -> Self {
        GroupPlan { scores, per_image_groups: vec![groups; batch], active_groups: groups }
    }
}

/// Temperature after one flow step: `t * exp(-reward_scale * reward)`.
pub fn next_temperature(t: f64, reward: f64, reward_scale: f64) -> f64 {
    t * (-reward_scale * reward).exp()
}

/// Mean gradient magnitude of the luma channel, resampled to `core × core`,
/// normalized by the batch maximum.
pub fn edge_density<T: Real>(image: &Tensor<T>, core: usize) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(shape_err("edge_density", format!("expected [B, 3, H, W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let mut luma = Tensor::<T>::zeros(&[b, 1, h, w]);
    for bi in 0..b {
        for p in 0..plane {
            let sum = (0..3).fold(T::zero(), |a, c| a + image.data()[(bi * 3 + c) * plane + p]);
            luma.data_mut()[bi * plane + p] = sum / real(3.0);
        }
    }
    let small = kernels::bilinear_resize(&luma, core, core)?;
    let mut raw = Vec::with_capacity(b);
    for bi in 0..b {
        let img = &small.data()[bi * core * core..][..core * core];
        let at = |i: usize, j: usize| to_f64(img[i * core + j]);
        let mut total = 0.0;
        for i in 0..core {
            for j in 0..core {
                let gx = (at(i, (j + 1).min(core - 1)) - at(i, j.saturating_sub(1))) / 2.0;
                let gy = (at((i + 1).min(core - 1), j) - at(i.saturating_sub(1), j)) / 2.0;
                total += (gx * gx + gy * gy).sqrt();
            }
        }
        raw.push(total / (core * core) as f64);
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    Ok(raw.into_iter().map(|e| e / (max + 1e-6)).collect())
}

/// Unnormalized τ-gradient key: per pixel, the L2 norm of the gradient of the
/// channel-mean τ with respect to the input feature vector at that pixel.
///
/// `weight` is the `[Cτ, Cin, 1, 1]` kernel of the τ projection. Channels
/// whose τ is saturated by the clamp contribute nothing.
pub fn tau_input_gradient_raw<T: Real>(
    ltc_input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    bounds: TauBounds,
) -> Result<Tensor<T>> {
    let raw = kernels::conv2d(ltc_input, weight, Some(bias), ConvGeometry::pointwise())?;
    let (b, cin, h, w) = {
        let s = ltc_input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let ctau = weight.shape()[0];
    let plane = h * w;
    let ws = weight.data();
    let mut key = Tensor::<T>::zeros(&[b, 1, h, w]);
    let mut v = vec![0.0f64; cin];
    for bi in 0..b {
        for p in 0..plane {
            v.fill(0.0);
            for c in 0..ctau {
                let r = to_f64(raw.data()[(bi * ctau + c) * plane + p]);
                let tau = softplus(r) + bounds.eps;
                if !(tau > bounds.min && tau < bounds.max) {
                    continue;
                }
                let slope = sigmoid(r) / ctau as f64;
                for (ci, vc) in v.iter_mut().enumerate() {
                    *vc += slope * to_f64(ws[c * cin + ci]);
                }
            }
            key.data_mut()[bi * plane + p] = real(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    Ok(key)
}

/// [`tau_input_gradient_raw`] min-max normalized per image to [0, 1].
pub fn tau_input_gradient_map<T: Real>(
    ltc_input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    bounds: TauBounds,
) -> Result<Tensor<T>> {
    let mut key = tau_input_gradient_raw(ltc_input, weight, bias, bounds)?;
    let plane = key.shape()[2] * key.shape()[3];
    for img in key.data_mut().chunks_mut(plane) {
        let lo = img.iter().copied().fold(T::infinity(), T::min);
        let hi = img.iter().copied().fold(T::neg_infinity(), T::max);
        let span = hi - lo + real(1e-6);
        for v in img.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
    Ok(key)
}

#[derive(Clone, Debug)]
pub struct DynamicGrouping {
    pub tau_conv: Conv2d,
    complexity_hidden: Linear,
    complexity_out: Linear,
    pattern: [ConvBlock; 2],
    pattern_head: Conv2d,
    pub fast_proj: Conv2d,
    pub fast_head: Conv2d,
    pub bounds: TauBounds,
    max_groups: usize,
    fixed_groups: Option<usize>,
    flow_steps: usize,
    reward_scale: f64,
}

impl DynamicGrouping {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Self {
        let ltc = cfg.ltc_channels();
        let width = cfg.base_channel;
        let g = cfg.norm_groups;
        DynamicGrouping {
            tau_conv: Conv2d::pointwise(store, rng, "grouping.tau_conv", ltc, cfg.hidden_channels),
            complexity_hidden: Linear::new(store, rng, "grouping.complexity.0", 2 * ltc + 1, cfg.complexity_hidden),
            complexity_out: Linear::new(store, rng, "grouping.complexity.1", cfg.complexity_hidden, 1),
            pattern: [
                ConvBlock::new(store, rng, "grouping.pattern.0", ltc + cfg.hidden_channels, width, 1, g),
                ConvBlock::new(store, rng, "grouping.pattern.1", width, width, 1, g),
            ],
            pattern_head: Conv2d::pointwise(store, rng, "grouping.pattern_head", width, cfg.max_groups),
            fast_proj: Conv2d::pointwise(store, rng, "grouping.fast_proj", ltc, cfg.fast_head_channels),
            fast_head: Conv2d::pointwise(store, rng, "grouping.fast_head", cfg.fast_head_channels, 1),
            bounds: TauBounds::from_config(cfg),
            max_groups: cfg.max_groups,
            fixed_groups: cfg.fixed_groups,
            flow_steps: cfg.max_flow_steps,
            reward_scale: cfg.reward_scale,
        }
    }

    pub fn max_groups(&self) -> usize {
        self.max_groups
    }

    /// τ = clamp(softplus(Conv1x1(ltc_input)) + ε, τ_min, τ_max).
    pub fn compute_tau<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, ltc_input: Var) -> Result<Var> {
        tape.value(ltc_input).ensure_finite("compute_tau")?;
        let raw = self.tau_conv.forward(tape, p, ltc_input)?;
        self.bounds.activate(tape, raw)
    }

    /// Complexity score per image (`[B, 1]`, differentiable) and the group plan.
    pub fn assess_complexity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ltc_input: Var,
        image: &Tensor<T>,
    ) -> Result<(Var, GroupPlan)> {
        let s = tape.shape(ltc_input).to_vec();
        let (b, c) = (s[0], s[1]);
        let mean = tape.mean_axes(ltc_input, &[2, 3])?;
        let centered = tape.sub_bcast(ltc_input, mean)?;
        let sq = tape.map(centered, crate::tensor::Pointwise::Square)?;
        let var = tape.mean_axes(sq, &[2, 3])?;
        let var = tape.affine(var, 1.0, 1e-8)?;
        let std = tape.map(var, crate::tensor::Pointwise::Sqrt)?;
        let edges = edge_density(image, s[2])?;
        let edges = tape.constant(Tensor::new(vec![b, 1], edges.into_iter().map(real).collect())?)?;
        let mean = tape.reshape(mean, &[b, c])?;
        let std = tape.reshape(std, &[b, c])?;
        let features = tape.concat(&[mean, std, edges], 1)?;
        let h = self.complexity_hidden.forward(tape, p, features)?;
        let h = tape.relu(h)?;
        let z = self.complexity_out.forward(tape, p, h)?;
        let score = tape.sigmoid(z)?;
        let scores: Vec<f64> = tape.value(score).to_f64_vec();
        let plan = match self.fixed_groups {
            Some(g) => GroupPlan::fixed(b, g, scores),
            None => GroupPlan::from_scores(scores, self.max_groups),
        };
        Ok((score, plan))
    }

    /// Pattern-generator logits `[B, G_max, H, W]`.
    pub fn mask_logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, ltc_input: Var, tau: Var) -> Result<Var> {
        let mut h = tape.concat(&[ltc_input, tau], 1)?;
        for block in &self.pattern {
            h = block.forward(tape, p, h)?;
        }
        self.pattern_head.forward(tape, p, h)
    }

    /// Pattern-generator logits and their softmax over the first `groups` entries.
    pub fn generate_masks<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ltc_input: Var,
        tau: Var,
        groups: usize,
    ) -> Result<(Var, Var)> {
        let logits = self.mask_logits(tape, p, ltc_input, tau)?;
        let masks = tape.softmax(logits, 1, None, Some(groups))?;
        Ok((logits, masks))
    }

    /// Key map for the current τ projection weights.
    pub fn key_map<T: Real>(&self, tape: &Tape<T>, p: &Bound, ltc_input: Var) -> Result<Tensor<T>> {
        tau_input_gradient_map(
            tape.value(ltc_input),
            tape.value(p.var(self.tau_conv.weight)),
            tape.value(p.var(self.tau_conv.bias)),
            self.bounds,
        )
    }

    /// Fast-head logits for one set of masks: each active group's masked
    /// projection is scored by the shared 1×1 head, and the per-group scores
    /// are fused with the same mask weights.
    fn fast_logits<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        projected: &Tensor<T>,
        masks: &Tensor<T>,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let s = projected.shape().to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let hw = h * w;
        let mut fused = Tensor::<T>::zeros(&[b, 1, h, w]);
        for g in 0..groups {
            let m = kernels::slice_axis(masks, 1, g, 1)?;
            let mb = kernels::broadcast_to(&m, &s)?;
            let masked_data = projected.data().iter().zip(mb.data()).map(|(&a, &m)| a * m).collect();
            let masked = Tensor::new(s.clone(), masked_data)?;
            let z = kernels::conv2d(
                &masked,
                tape.value(p.var(self.fast_head.weight)),
                Some(tape.value(p.var(self.fast_head.bias))),
                ConvGeometry::pointwise(),
            )?;
            for bi in 0..b {
                for q in 0..hw {
                    fused.data_mut()[bi * hw + q] += m.data()[bi * hw + q] * z.data()[bi * hw + q];
                }
            }
        }
        Ok(fused)
    }

    /// Iterative refinement. Each step computes masks at the current
    /// temperature (sharpened where the key map is large), scores them with
    /// the fast head, and updates the temperature from the reward. The
    /// returned masks use the temperature after the last update; the
    /// temperature path is a constant on the tape.
    pub fn refine_masks<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mask_logits: Var,
        key_map: &Tensor<T>,
        ltc_input: Var,
        target: Option<&Tensor<T>>,
        groups: usize,
    ) -> Result<(Var, Vec<f64>)> {
        let ls = tape.shape(mask_logits).to_vec();
        let key_shape = [ls[0], 1, ls[2], ls[3]];
        if key_map.shape() != key_shape {
            return Err(shape_err("refine_masks", format!("key map {:?}, expected {key_shape:?}", key_map.shape())));
        }
        if let Some(t) = target {
            if t.shape() != key_shape {
                return Err(shape_err("refine_masks", format!("target {:?}, expected {key_shape:?}", t.shape())));
            }
        }
        let temperature_map = |t: f64| key_map.map(|k| real::<T>(t) / (T::one() + k));
        let projected = kernels::conv2d(
            tape.value(ltc_input),
            tape.value(p.var(self.fast_proj.weight)),
            Some(tape.value(p.var(self.fast_proj.bias))),
            ConvGeometry::pointwise(),
        )?;
        let mut temperature = 1.0;
        let mut rewards = Vec::with_capacity(self.flow_steps);
        for _ in 0..self.flow_steps {
            let tmap = temperature_map(temperature);
            let masks = kernels::softmax_axis(tape.value(mask_logits), 1, Some(&tmap), Some(groups))?;
            let logits = self.fast_logits(tape, p, &projected, &masks, groups)?;
            let probs = logits.map(sigmoid);
            let reward = match target {
                Some(t) => soft_dice(&probs, t) - 0.5,
                None => confidence_reward(&probs),
            };
            rewards.push(reward);
            temperature = next_temperature(temperature, reward, self.reward_scale);
        }
        let masks = tape.softmax(mask_logits, 1, Some(temperature_map(temperature)), Some(groups))?;
        Ok((masks, rewards))
    }

    /// `U[b, g, c] = ltc_input[b, c] * masks[b, g]`, shape `[B, G_max, C, H, W]`.
    pub fn group_features<T: Real>(&self, tape: &mut Tape<T>, ltc_input: Var, masks: Var) -> Result<Var> {
        group_features(tape, ltc_input, masks)
    }
}

/// Dice coefficient with the same stabilizer as the Dice loss.
pub(crate) fn soft_dice<T: Real>(p: &Tensor<T>, t: &Tensor<T>) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.data().iter().zip(t.data()) {
        let (a, b) = (to_f64(a), to_f64(b));
        inter += a * b;
        sp += a;
        st += b;
    }
    (2.0 * inter + 1e-6) / (sp + st + 1e-6)
}

/// Label-free stand-in for the Dice reward, centred on the same neutral point:
/// `2 * mean|p - 0.5| - 0.5`.
pub(crate) fn confidence_reward<T: Real>(p: &Tensor<T>) -> f64 {
    let mean = p.data().iter().map(|&v| (to_f64(v) - 0.5).abs()).sum::<f64>() / p.numel() as f64;
    2.0 * mean - 0.5
}

pub fn group_features<T: Real>(tape: &mut Tape<T>, ltc_input: Var, masks: Var) -> Result<Var> {
    let xs = tape.shape(ltc_input).to_vec();
    let ms = tape.shape(masks).to_vec();
    if xs.len() != 4 || ms.len() != 4 || xs[0] != ms[0] || xs[2..] != ms[2..] {
        return Err(shape_err("group_features", format!("features {xs:?} vs masks {ms:?}")));
    }
    let full = [xs[0], ms[1], xs[1], xs[2], xs[3]];
    let x5 = tape.reshape(ltc_input, &[xs[0], 1, xs[1], xs[2], xs[3]])?;
    let x5 = tape.broadcast_to(x5, &full)?;
    let m5 = tape.reshape(masks, &[ms[0], ms[1], 1, ms[2], ms[3]])?;
    tape.mul_bcast(x5, m5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_to_group_count() {
        assert_eq!(groups_for_score(0.0, 5), 1);
        assert_eq!(groups_for_score(0.5, 5), 3);
        assert_eq!(groups_for_score(0.999, 5), 5);
        assert_eq!(groups_for_score(1.0, 5), 5);
        assert_eq!(groups_for_score(0.19, 5), 1);
        assert_eq!(groups_for_score(0.2, 5), 2);
    }

    #[test]
    fn batch_uses_largest_group_count() {
        let plan = GroupPlan::from_scores(vec![0.1, 0.7, 0.3], 5);
        assert_eq!(plan.per_image_groups, vec![1, 4, 2]);
        assert_eq!(plan.active_groups, 4);
    }

    #[test]
    fn tau_activation_values() {
        let b = TauBounds { min: 1e-2, max: 1e3, eps: 1e-6 };
        assert!((b.apply(0.0) - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-12);
        assert_eq!(b.apply(-100.0), 1e-2);
        assert_eq!(b.apply(1e4), 1e3);
    }

    #[test]
    fn temperature_closed_form() {
        let t = (0..3).fold(1.0, |t, _| next_temperature(t, 0.5, 0.1));
        assert!((t - (-0.15f64).exp()).abs() < 1e-12);
        assert!((t - 0.8607).abs() < 1e-4);
        assert_eq!(next_temperature(1.0, 0.0, 0.1), 1.0);
    }

    #[test]
    fn dice_reward_of_perfect_prediction() {
        let t = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        assert!((soft_dice(&t, &t) - 0.5 - 0.5).abs() < 1e-9);
        let half = Tensor::<f64>::full(&[1, 1, 2, 2], 0.5);
        assert_eq!(confidence_reward(&half), -0.5);
    }

    #[test]
    fn zero_weight_key_map_is_zero() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.3).sin());
        let w = Tensor::<f64>::zeros(&[5, 3, 1, 1]);
        let b = Tensor::<f64>::zeros(&[5]);
        let bounds = TauBounds { min: 1e-2, max: 1e3, eps: 1e-6 };
        let k = tau_input_gradient_map(&x, &w, &b, bounds).unwrap();
        assert!(k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_pixels_have_zero_key() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, -1.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[500.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let bounds = TauBounds { min: 1e-2, max: 1e3, eps: 1e-6 };
        let k = tau_input_gradient_raw(&x, &w, &b, bounds).unwrap();
        // raw = +500: tau inside the bounds, slope sigmoid(500) = 1.
        assert!((k.data()[0] - 500.0).abs() < 1e-9);
        // raw = -500: tau clamped to the floor.
        assert_eq!(k.data()[1], 0.0);
    }

    #[test]
    fn edge_density_normalized_by_batch_max() {
        let flat = Tensor::<f64>::full(&[1, 3, 8, 8], 0.4);
        let stripes = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |i| ((i % 8) / 4) as f64);
        let both = Tensor::stack(&[&flat.index_first(0).unwrap(), &stripes.index_first(0).unwrap()])
            .unwrap()
            .reshape(&[2, 3, 8, 8])
            .unwrap();
        let e = edge_density(&both, 4).unwrap();
        assert_eq!(e[0], 0.0);
        assert!(e[1] > 0.99 && e[1] < 1.0);
    }
}
