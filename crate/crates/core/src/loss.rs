//! Training objectives and their weighted combination.

use crate::config::LossWeights;
use crate::metrics::BinaryMask;
use crate::tensor::{shape_err, to_f64, Pointwise, Real, Result, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLIP: f64 = 1e-7;
/// Share of the total mask mass a group needs to count as used.
pub const DIVERSITY_THRESHOLD: f64 = 0.05;
/// Boundary density at which the complexity target saturates.
pub const BOUNDARY_SATURATION: f64 = 0.05;

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// `1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)`, summed jointly over batch and pixels.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(tape, "dice_loss", p, t)?;
    let pt = tape.mul(p, t)?;
    let inter = tape.sum_all(pt)?;
    let num = tape.affine(inter, 2.0, DICE_EPS)?;
    let sp = tape.sum_all(p)?;
    let st = tape.sum_all(t)?;
    let den = tape.add(sp, st)?;
    let den = tape.affine(den, 1.0, DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    tape.affine(ratio, -1.0, 1.0)
}

/// Mean of `-[α t (1-p)^γ ln p + (1-α)(1-t) p^γ ln(1-p)]` with γ = 2.
pub fn focal_loss<T: Real>(tape: &mut Tape<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(tape, "focal_loss", p, t)?;
    let pc = tape.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let q = tape.affine(pc, -1.0, 1.0)?;
    let ln_p = tape.map(pc, Pointwise::Ln)?;
    let ln_q = tape.map(q, Pointwise::Ln)?;
    let q2 = tape.map(q, Pointwise::Square)?;
    let p2 = tape.map(pc, Pointwise::Square)?;
    let not_t = tape.affine(t, -1.0, 1.0)?;
    let pos = tape.mul(q2, ln_p)?;
    let pos = tape.mul(pos, t)?;
    let pos = tape.scale(pos, FOCAL_ALPHA)?;
    let neg = tape.mul(p2, ln_q)?;
    let neg = tape.mul(neg, not_t)?;
    let neg = tape.scale(neg, 1.0 - FOCAL_ALPHA)?;
    let sum = tape.add(pos, neg)?;
    let mean = tape.mean_all(sum)?;
    tape.scale(mean, -1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct DiceFocal {
    pub loss: Var,
    pub dice: Var,
    pub focal: Var,
}

/// `0.5 * dice + 0.5 * focal` on `sigmoid(logits)`.
pub fn dice_focal_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<DiceFocal> {
    let p = tape.sigmoid(logits)?;
    let dice = dice_loss(tape, p, target)?;
    let focal = focal_loss(tape, p, target)?;
    let sum = tape.add(dice, focal)?;
    let loss = tape.scale(sum, 0.5)?;
    Ok(DiceFocal { loss, dice, focal })
}

/// Mean over all `(b, g, i, j)` of `|∇x M| + |∇y M|`, forward differences
/// with the last row and column contributing zero.
pub fn flow_smooth_loss<T: Real>(tape: &mut Tape<T>, masks: Var) -> Result<Var> {
    let s = tape.shape(masks).to_vec();
    if s.len() != 4 {
        return Err(shape_err("flow_smooth_loss", format!("expected [B, G, H, W], got {s:?}")));
    }
    let count = s.iter().product::<usize>() as f64;
    let (h, w) = (s[2], s[3]);
    let mut parts = Vec::new();
    if w > 1 {
        let right = tape.slice(masks, 3, 1, w - 1)?;
        let left = tape.slice(masks, 3, 0, w - 1)?;
        let d = tape.sub(right, left)?;
        let d = tape.map(d, Pointwise::Abs)?;
        parts.push(tape.sum_all(d)?);
    }
    if h > 1 {
        let down = tape.slice(masks, 2, 1, h - 1)?;
        let up = tape.slice(masks, 2, 0, h - 1)?;
        let d = tape.sub(down, up)?;
        let d = tape.map(d, Pointwise::Abs)?;
        parts.push(tape.sum_all(d)?);
    }
    let total = match parts.as_slice() {
        [] => return tape.constant(Tensor::scalar(T::zero())),
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    tape.scale(total, 1.0 / count)
}

/// Mean squared difference between the predicted complexity scores `[B, 1]`
/// and their targets.
pub fn complexity_loss<T: Real>(tape: &mut Tape<T>, score: Var, target: &[f64]) -> Result<Var> {
    let s = tape.shape(score).to_vec();
    if s.iter().product::<usize>() != target.len() {
        return Err(shape_err("complexity_loss", format!("{} targets for scores {s:?}", target.len())));
    }
    let t = tape.constant(Tensor::new(s, target.iter().map(|&v| crate::tensor::real(v)).collect())?)?;
    let d = tape.sub(score, t)?;
    let d2 = tape.map(d, Pointwise::Square)?;
    tape.mean_all(d2)
}

/// `min(1, boundary pixels / (0.05 H W))` of a ground-truth mask.
pub fn complexity_target(mask: &BinaryMask) -> f64 {
    let area = (mask.height() * mask.width()) as f64;
    (mask.boundary().len() as f64 / (BOUNDARY_SATURATION * area)).min(1.0)
}

/// Fraction of the `max_groups` groups whose mask mass is at least 5% of the
/// total. Not differentiable.
pub fn diversity_reward<T: Real>(masks: &Tensor<T>, max_groups: usize) -> Result<f64> {
    let s = masks.shape();
    if s.len() != 4 {
        return Err(shape_err("diversity_reward", format!("expected [B, G, H, W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut mass = vec![0.0; s[1]];
    for (k, chunk) in masks.data().chunks(plane).enumerate() {
        mass[k % s[1]] += chunk.iter().map(|&v| to_f64(v)).sum::<f64>();
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let used = mass.iter().filter(|&&m| m >= DIVERSITY_THRESHOLD * total).count();
    Ok(used as f64 / max_groups as f64)
}

/// Scalar values of every term and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux: f64,
    pub complexity: f64,
    pub diversity_reward: f64,
    pub flow: f64,
    pub stdp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 7] = ["main", "aux", "complexity", "diversity_reward", "flow", "stdp", "total"];

    pub fn combine(main: f64, aux: f64, complexity: f64, diversity_reward: f64, flow: f64, stdp: f64, w: &LossWeights) -> Self {
        let total = main + w.aux * aux + w.complexity * complexity - w.diversity * diversity_reward + w.flow * flow + w.stdp * stdp;
        LossBreakdown { main, aux, complexity, diversity_reward, flow, stdp, total }
    }

    pub fn values(&self) -> [f64; 7] {
        [self.main, self.aux, self.complexity, self.diversity_reward, self.flow, self.stdp, self.total]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::TERMS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.main += weight * other.main;
        self.aux += weight * other.aux;
        self.complexity += weight * other.complexity;
        self.diversity_reward += weight * other.diversity_reward;
        self.flow += weight * other.flow;
        self.stdp += weight * other.stdp;
        self.total += weight * other.total;
    }
}

/// Differentiable terms of the objective; the diversity reward enters as a
/// constant shift.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub main: Var,
    pub aux: Var,
    pub complexity: Var,
    pub flow: Var,
    pub stdp: Option<Var>,
    pub diversity_reward: f64,
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut total = terms.main;
    for (v, k) in [(terms.aux, w.aux), (terms.complexity, w.complexity), (terms.flow, w.flow)] {
        let scaled = tape.scale(v, k)?;
        total = tape.add(total, scaled)?;
    }
    if let Some(s) = terms.stdp {
        let scaled = tape.scale(s, w.stdp)?;
        total = tape.add(total, scaled)?;
    }
    let total = tape.affine(total, 1.0, -w.diversity * terms.diversity_reward)?;
    let value = |v: Var| to_f64(tape.value(v).item());
    let mut breakdown = LossBreakdown::combine(
        value(terms.main),
        value(terms.aux),
        value(terms.complexity),
        terms.diversity_reward,
        value(terms.flow),
        terms.stdp.map(value).unwrap_or(0.0),
        w,
    );
    breakdown.total = value(total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape<f64>, Var, Var) -> Result<Var>, p: Tensor<f64>, t: Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let (p, t) = (tape.constant(p).unwrap(), tape.constant(t).unwrap());
        let l = f(&mut tape, p, t).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn dice_edge_cases() {
        let t = Tensor::from_fn(&[1, 1, 3, 3], |i| (i % 2) as f64);
        assert!(eval(dice_loss, t.clone(), t.clone()) <= 1e-6);
        let n = 9.0;
        let miss = eval(dice_loss, Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1, 1, 3, 3]));
        assert!((miss - (1.0 - DICE_EPS / (n + DICE_EPS))).abs() < 1e-15);
        assert_eq!(eval(dice_loss, Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1, 1, 3, 3])), 0.0);
    }

    #[test]
    fn focal_closed_forms() {
        let half = Tensor::full(&[2, 1, 2, 2], 0.5);
        let pos = eval(focal_loss, half.clone(), Tensor::ones(&[2, 1, 2, 2]));
        assert!((pos - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((pos - 0.043321).abs() < 1e-5);
        let neg = eval(focal_loss, half, Tensor::zeros(&[2, 1, 2, 2]));
        assert!((neg - 0.129964).abs() < 1e-5);
        let t = Tensor::from_fn(&[1, 1, 2, 2], |i| (i % 2) as f64);
        assert!(eval(focal_loss, t.clone(), t) <= 1e-5);
    }

    #[test]
    fn flow_step_edge() {
        let m = Tensor::from_fn(&[1, 1, 4, 4], |i| if i % 4 >= 2 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let v = tape.constant(m).unwrap();
        let l = flow_smooth_loss(&mut tape, v).unwrap();
        assert_eq!(tape.value(l).item(), 0.25);
        let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.3)).unwrap();
        let l = flow_smooth_loss(&mut tape, c).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::combine(0.2, 0.1, 0.04, 0.6, 0.05, 0.1, &LossWeights::default());
        assert!((b.total - 0.22).abs() < 1e-12);
        let mut bad = b;
        bad.flow = f64::NAN;
        assert_eq!(bad.first_non_finite(), Some("flow"));
    }

    #[test]
    fn diversity_counts() {
        let uniform = Tensor::<f64>::full(&[2, 5, 3, 3], 0.2);
        assert_eq!(diversity_reward(&uniform, 5).unwrap(), 1.0);
        let dominant = Tensor::<f64>::from_fn(&[1, 5, 3, 3], |i| if i < 9 { 0.98 } else { 0.005 });
        assert_eq!(diversity_reward(&dominant, 5).unwrap(), 0.2);
    }

    #[test]
    fn complexity_target_saturates() {
        let mut m = BinaryMask::empty(10, 10);
        assert_eq!(complexity_target(&m), 0.0);
        m.set(4, 4, true);
        assert!((complexity_target(&m) - 0.2).abs() < 1e-15);
        for i in 0..10 {
            m.set(i, 1, true);
        }
        assert_eq!(complexity_target(&m), 1.0);
    }
}
