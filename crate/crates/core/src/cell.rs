//! Convolutional liquid-time-constant cell: per-group time constants, explicit
//! Euler evolution and mask-weighted fusion of the group outputs.

use crate::config::ModelConfig;
use crate::grouping::TauBounds;
use crate::nn::{Bound, Conv2d, GroupNorm, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{arg_err, shape_err, Pointwise, Real, Result, Tape, Var};

/// States and inputs of one evolution, laid out as `[B * G, ...]` with the
/// group index varying fastest.
#[derive(Clone, Debug)]
pub struct CellTrace {
    pub batch: usize,
    pub groups: usize,
    /// `T + 1` states, each `[B * G, hidden, H, W]`; `states[0]` is the shared initial state.
    pub states: Vec<Var>,
    /// `[B * G, C, H, W]`, held constant over time.
    pub input: Var,
    /// Group time constants, `[B * G, hidden, H, W]`.
    pub tau: Var,
}

impl CellTrace {
    pub fn time_steps(&self) -> usize {
        self.states.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct TauFlowCell {
    pub tau_conv: Conv2d,
    pub input_map: Conv2d,
    pub state_depthwise: Conv2d,
    pub state_pointwise: Conv2d,
    norm: GroupNorm,
    proj: Conv2d,
    out_proj: Conv2d,
    pub bounds: TauBounds,
    pub dt: f64,
    hidden: usize,
}

impl TauFlowCell {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Self {
        let (c, h) = (cfg.ltc_channels(), cfg.hidden_channels);
        TauFlowCell {
            tau_conv: Conv2d::pointwise(store, rng, "cell.tau_conv", c, h),
            input_map: Conv2d::pointwise(store, rng, "cell.input_map", c, h),
            state_depthwise: Conv2d::new(store, rng, "cell.state_depthwise", h, h, 3, 1, h),
            state_pointwise: Conv2d::pointwise(store, rng, "cell.state_pointwise", h, h),
            norm: GroupNorm::new(store, "cell.norm", h, cfg.norm_groups),
            proj: Conv2d::pointwise(store, rng, "cell.proj", h, h),
            out_proj: Conv2d::pointwise(store, rng, "cell.out_proj", h, cfg.base_channel),
            bounds: TauBounds::from_config(cfg),
            dt: cfg.dt,
            hidden: h,
        }
    }

    pub fn compute_group_tau<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, u: Var) -> Result<Var> {
        let raw = self.tau_conv.forward(tape, p, u)?;
        self.bounds.activate(tape, raw)
    }

    /// Effective step `min(dt / tau, 1)`.
    pub fn step_size<T: Real>(&self, tape: &mut Tape<T>, tau: Var) -> Result<Var> {
        let inv = tape.map(tau, Pointwise::Recip)?;
        let eta = tape.scale(inv, self.dt)?;
        tape.clamp(eta, 0.0, 1.0)
    }

    /// `(1 - eta) * s + eta * tanh(W_s(s) + drive)`, where `drive = W_u(u)`.
    fn advance<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: Var, drive: Var, eta: Var) -> Result<Var> {
        let ws = self.state_depthwise.forward(tape, p, s)?;
        let ws = self.state_pointwise.forward(tape, p, ws)?;
        let pre = tape.add(ws, drive)?;
        let f = tape.tanh(pre)?;
        let delta = tape.sub(f, s)?;
        let delta = tape.mul(eta, delta)?;
        let next = tape.add(s, delta)?;
        if !tape.value(next).is_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "cell_step" });
        }
        Ok(next)
    }

    /// One explicit Euler step of the leaky state.
    pub fn cell_step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: Var, u: Var, tau: Var) -> Result<Var> {
        let drive = self.input_map.forward(tape, p, u)?;
        let eta = self.step_size(tape, tau)?;
        self.advance(tape, p, s, drive, eta)
    }

    /// Evolves every active group for `time_steps` steps from `s0` and fuses
    /// the projected final states with the group masks.
    ///
    /// `u`: `[B, G, C, H, W]` (active groups only), `masks`: `[B, G_max, H, W]`,
    /// `s0`: `[B, hidden, H, W]`. Returns `[B, base_channel, H, W]`.
    pub fn evolve_and_fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        u: Var,
        masks: Var,
        s0: Var,
        time_steps: usize,
    ) -> Result<(Var, CellTrace)> {
        let us = tape.shape(u).to_vec();
        let ms = tape.shape(masks).to_vec();
        let ss = tape.shape(s0).to_vec();
        if us.len() != 5
            || ms.len() != 4
            || ss.len() != 4
            || ms[0] != us[0]
            || ms[1] < us[1]
            || ms[2..] != us[3..]
            || ss != [us[0], self.hidden, us[3], us[4]]
        {
            return Err(shape_err("evolve_and_fuse", format!("u {us:?}, masks {ms:?}, s0 {ss:?}")));
        }
        if time_steps == 0 {
            return Err(arg_err("evolve_and_fuse", "at least one time step is required"));
        }
        let (b, g, c, h, w) = (us[0], us[1], us[2], us[3], us[4]);
        let n = b * g;
        let input = tape.reshape(u, &[n, c, h, w])?;
        let s = tape.reshape(s0, &[b, 1, self.hidden, h, w])?;
        let s = tape.broadcast_to(s, &[b, g, self.hidden, h, w])?;
        let mut s = tape.reshape(s, &[n, self.hidden, h, w])?;

        let tau = self.compute_group_tau(tape, p, input)?;
        let eta = self.step_size(tape, tau)?;
        let drive = self.input_map.forward(tape, p, input)?;
        let mut states = vec![s];
        for _ in 0..time_steps {
            s = self.advance(tape, p, s, drive, eta)?;
            states.push(s);
        }

        let y = self.norm.forward(tape, p, s)?;
        let y = self.proj.forward(tape, p, y)?;
        let out = self.out_proj.forward(tape, p, y)?;
        let cb = tape.shape(out)[1];
        let out = tape.reshape(out, &[b, g, cb, h, w])?;
        let m = tape.slice(masks, 1, 0, g)?;
        let m = tape.reshape(m, &[b, g, 1, h, w])?;
        let weighted = tape.mul_bcast(out, m)?;
        let fused = tape.sum_axes(weighted, &[1])?;
        let fused = tape.reshape(fused, &[b, cb, h, w])?;
        Ok((fused, CellTrace { batch: b, groups: g, states, input, tau }))
    }
}
