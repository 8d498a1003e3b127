//! Group-level gating from pooled query/key interaction, mask mass and
//! mask-weighted τ.

use crate::config::ModelConfig;
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{real, shape_err, ConvGeometry, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, G_max]`, each in (0, 1).
    pub weights: Var,
    /// `[B, G, C, H, W]`: the active group features scaled by their weight.
    /// Inactive slices are zero and are not materialized.
    pub weighted: Var,
}

/// Bias-free 1×1 projection, so an all-zero group pools to exactly zero.
#[derive(Clone, Debug)]
struct Projection {
    weight: ParamId,
}

impl Projection {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, 1, 1], |_| real(rng.uniform(-bound, bound)));
        Projection { weight: store.add(format!("{name}.weight"), w) }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), None, ConvGeometry::pointwise())
    }
}

#[derive(Clone, Debug)]
pub struct TauAttention {
    query: Projection,
    key: Projection,
    score: Linear,
    /// `[3]`: weights of the interaction, mask-mass and τ terms.
    pub mix: ParamId,
    qk_dim: usize,
}

impl TauAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Self {
        let c = cfg.ltc_channels();
        TauAttention {
            query: Projection::new(store, rng, "attention.query", c, cfg.qk_dim),
            key: Projection::new(store, rng, "attention.key", c, cfg.qk_dim),
            score: Linear::new(store, rng, "attention.score", cfg.qk_dim, 1),
            mix: store.add("attention.mix", Tensor::ones(&[3])),
            qk_dim: cfg.qk_dim,
        }
    }

    /// `u`: `[B, G_max, C, H, W]`, `masks`: `[B, G_max, H, W]`, `tau`: `[B, Cτ, H, W]`.
    ///
    /// Only the first `groups` slices are evaluated. An all-zero slice with an
    /// all-zero mask scores `a * bias`, so inactive weights are filled with
    /// that value instead of running the projections on zeros.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        u: Var,
        masks: Var,
        tau: Var,
        groups: usize,
    ) -> Result<AttentionOutput> {
        let us = tape.shape(u).to_vec();
        let ms = tape.shape(masks).to_vec();
        let ts = tape.shape(tau).to_vec();
        if us.len() != 5 || ms != [us[0], us[1], us[3], us[4]] || ts.len() != 4 || ts[0] != us[0] || ts[2..] != us[3..] {
            return Err(shape_err("tau_attention", format!("u {us:?}, masks {ms:?}, tau {ts:?}")));
        }
        let (b, gmax, c, h, w) = (us[0], us[1], us[2], us[3], us[4]);
        if groups == 0 || groups > gmax {
            return Err(shape_err("tau_attention", format!("{groups} active groups of {gmax}")));
        }
        let n = b * groups;
        let ua = tape.slice(u, 1, 0, groups)?;
        let ma = tape.slice(masks, 1, 0, groups)?;

        let flat = tape.reshape(ua, &[n, c, h, w])?;
        let q = self.query.forward(tape, p, flat)?;
        let q = tape.mean_axes(q, &[2, 3])?;
        let k = self.key.forward(tape, p, flat)?;
        let k = tape.mean_axes(k, &[2, 3])?;
        let qk = tape.mul(q, k)?;
        let qk = tape.reshape(qk, &[n, self.qk_dim])?;
        let base = self.score.forward(tape, p, qk)?;
        let base = tape.reshape(base, &[b, groups])?;

        let mass = tape.mean_axes(ma, &[2, 3])?;
        let mass = tape.reshape(mass, &[b, groups])?;

        let tau_bar = tape.mean_axes(tau, &[1])?;
        let weighted_tau = tape.mul_bcast(ma, tau_bar)?;
        let num = tape.sum_axes(weighted_tau, &[2, 3])?;
        let den = tape.sum_axes(ma, &[2, 3])?;
        let den = tape.affine(den, 1.0, 1e-6)?;
        let tau_mean = tape.div(num, den)?;
        let tau_mean = tape.reshape(tau_mean, &[b, groups])?;

        let mix = p.var(self.mix);
        let coef = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            let s = tape.slice(mix, 0, i, 1)?;
            tape.reshape(s, &[1, 1])
        };
        let (ca, cb, cc) = (coef(tape, 0)?, coef(tape, 1)?, coef(tape, 2)?);
        let t1 = tape.mul_bcast(base, ca)?;
        let t2 = tape.mul_bcast(mass, cb)?;
        let t3 = tape.mul_bcast(tau_mean, cc)?;
        let score = tape.add(t1, t2)?;
        let score = tape.add(score, t3)?;
        let active = tape.sigmoid(score)?;

        let weights = if groups < gmax {
            let bias = tape.reshape(p.var(self.score.bias), &[1, 1])?;
            let idle = tape.mul(ca, bias)?;
            let idle = tape.sigmoid(idle)?;
            let idle = tape.broadcast_to(idle, &[b, gmax - groups])?;
            tape.concat(&[active, idle], 1)?
        } else {
            active
        };

        let gate = tape.reshape(active, &[b, groups, 1, 1, 1])?;
        let weighted = tape.mul_bcast(ua, gate)?;
        Ok(AttentionOutput { weights, weighted })
    }
}
