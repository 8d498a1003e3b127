//! Spike-timing regularizer: soft pre/post events from the cell trace and a
//! loss that rewards pre-before-post co-activation and penalizes the reverse.

use crate::cell::CellTrace;
use crate::config::StdpConfig;
use crate::tensor::{arg_err, shape_err, Pointwise, Real, Result, Tape, Tensor, Var};

/// Soft events, each `[N, T, H, W]` with `N = B * G`.
#[derive(Clone, Copy, Debug)]
pub struct EventMaps {
    pub pre: Var,
    pub post: Var,
}

/// Per-channel spatial standardization followed by the channel mean:
/// `[N, C, H, W]` → `[N, 1, H, W]`.
fn standardized_mean<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let mean = tape.mean_axes(x, &[2, 3])?;
    let centered = tape.sub_bcast(x, mean)?;
    let sq = tape.map(centered, Pointwise::Square)?;
    let var = tape.mean_axes(sq, &[2, 3])?;
    let var = tape.affine(var, 1.0, 1e-12)?;
    let std = tape.map(var, Pointwise::Sqrt)?;
    let std = tape.affine(std, 1.0, 1e-5)?;
    let z = tape.div_bcast(centered, std)?;
    tape.mean_axes(z, &[1])
}

fn fire<T: Real>(tape: &mut Tape<T>, x: Var, kappa: f64, theta: f64) -> Result<Var> {
    let z = tape.affine(x, kappa, -kappa * theta)?;
    tape.sigmoid(z)
}

/// Event `t` pairs the (constant) input with the state after step `t`.
pub fn event_approx<T: Real>(tape: &mut Tape<T>, trace: &CellTrace, cfg: &StdpConfig) -> Result<EventMaps> {
    let steps = trace.time_steps();
    if steps < 2 {
        return Err(arg_err("event_approx", format!("need at least 2 time steps, got {steps}")));
    }
    let u_hat = standardized_mean(tape, trace.input)?;
    let pre = fire(tape, u_hat, cfg.kappa, cfg.theta_u)?;
    let s = tape.shape(pre).to_vec();
    let pre = tape.broadcast_to(pre, &[s[0], steps, s[2], s[3]])?;
    let mut posts = Vec::with_capacity(steps);
    for &state in &trace.states[1..] {
        let s_hat = standardized_mean(tape, state)?;
        posts.push(fire(tape, s_hat, cfg.kappa, cfg.theta_s)?);
    }
    let post = tape.concat(&posts, 1)?;
    Ok(EventMaps { pre, post })
}

/// Channel-mean τ divided by its global mean: `[N, hidden, H, W]` → `[N, 1, H, W]`.
pub fn tau_weights<T: Real>(tape: &mut Tape<T>, tau: Var) -> Result<Var> {
    let local = tape.mean_axes(tau, &[1])?;
    let global = tape.mean_all(local)?;
    let global = tape.reshape(global, &[1, 1, 1, 1])?;
    tape.div_bcast(local, global)
}

/// `-(1/Z) Σ w [pre_t post_{t+1} - β pre_{t+1} post_t]`, `Z = N H W (T - 1)`.
pub fn stdp_loss<T: Real>(tape: &mut Tape<T>, events: &EventMaps, weights: Var, beta: f64) -> Result<Var> {
    let s = tape.shape(events.pre).to_vec();
    if s.len() != 4 || tape.shape(events.post) != s.as_slice() {
        return Err(shape_err("stdp_loss", format!("pre {s:?} vs post {:?}", tape.shape(events.post))));
    }
    let ws = tape.shape(weights);
    if ws != [s[0], 1, s[2], s[3]] {
        return Err(shape_err("stdp_loss", format!("weights {ws:?} for events {s:?}")));
    }
    let (n, t, h, w) = (s[0], s[1], s[2], s[3]);
    if t < 2 {
        return Err(arg_err("stdp_loss", "events need at least 2 time steps"));
    }
    let pre_now = tape.slice(events.pre, 1, 0, t - 1)?;
    let pre_next = tape.slice(events.pre, 1, 1, t - 1)?;
    let post_now = tape.slice(events.post, 1, 0, t - 1)?;
    let post_next = tape.slice(events.post, 1, 1, t - 1)?;
    let causal = tape.mul(pre_now, post_next)?;
    let anti = tape.mul(pre_next, post_now)?;
    let anti = tape.scale(anti, beta)?;
    let term = tape.sub(causal, anti)?;
    let term = tape.mul_bcast(term, weights)?;
    let total = tape.sum_all(term)?;
    tape.scale(total, -1.0 / (n * h * w * (t - 1)) as f64)
}

/// Teacher forcing: post events become `(1 - ρ) post + ρ y*` before the loss.
/// `target`: `[B, 1, H, W]` binary, repeated over the `G` groups of each image.
pub fn stdp_loss_supervised<T: Real>(
    tape: &mut Tape<T>,
    events: &EventMaps,
    weights: Var,
    target: Option<&Tensor<T>>,
    groups: usize,
    cfg: &StdpConfig,
) -> Result<Var> {
    let target = target.ok_or_else(|| arg_err("stdp_loss_supervised", "a target mask is required"))?;
    let s = tape.shape(events.post).to_vec();
    let ts = target.shape();
    if ts.len() != 4 || ts[1] != 1 || ts[0] * groups != s[0] || ts[2..] != s[2..] {
        return Err(shape_err("stdp_loss_supervised", format!("target {ts:?} for events {s:?} with {groups} groups")));
    }
    let plane = s[2] * s[3];
    let mut forced = Tensor::<T>::zeros(&s);
    for n in 0..s[0] {
        let src = &target.data()[(n / groups) * plane..][..plane];
        for t in 0..s[1] {
            forced.data_mut()[(n * s[1] + t) * plane..][..plane].copy_from_slice(src);
        }
    }
    let forced = tape.constant(forced.map(|v| v * crate::tensor::real(cfg.rho)))?;
    let kept = tape.scale(events.post, 1.0 - cfg.rho)?;
    let post = tape.add(kept, forced)?;
    stdp_loss(tape, &EventMaps { pre: events.pre, post }, weights, cfg.beta)
}
