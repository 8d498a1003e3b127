//! Autodiff versus central finite differences for every differentiable
//! module, in 64-bit precision on small shapes.
//!
//! Each check contracts the module outputs with fixed random weights to get a
//! scalar, then compares the tape gradient of every parameter and input that
//! receives one against the numeric gradient.

use std::time::Instant;

use crate::attention::TauAttention;
use crate::cell::TauFlowCell;
use crate::config::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::grouping::DynamicGrouping;
use crate::interface::TauFlowInterface;
use crate::loss::{self, LossTerms};
use crate::nn::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::stdp;
use crate::tensor::{finite_diff_gradient, max_relative_error, Tape, Tensor, Var};

pub const MODULES: [&str; 6] = ["interface", "grouping", "attention", "cell", "loss", "stdp"];
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-4;

const BATCH: usize = 2;
const GROUPS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub max_rel_error: f64,
    /// Scalars compared.
    pub checked: usize,
    pub seconds: f64,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// The configuration every check builds its modules from: 4 core channels,
/// 8×8 core, 3 groups.
pub fn check_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        input_size: 32,
        base_channel: 2,
        group_embed_dim: 2,
        hidden_channels: 4,
        qk_dim: 2,
        norm_groups: 2,
        complexity_hidden: 3,
        fast_head_channels: 2,
        max_groups: GROUPS,
        dt: 0.1,
        time_steps: 2,
        ..ModelConfig::default()
    };
    cfg.stdp.enabled = true;
    cfg
}

fn random(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn contract(tape: &mut Tape<f64>, rng: &mut SplitMix64, out: Var) -> Result<Var> {
    let r = random(rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r)?;
    let prod = tape.mul(out, r)?;
    Ok(tape.sum_all(prod)?)
}

/// Objective over bound parameters and input leaves. Must be deterministic.
type Objective<'a> = dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var> + 'a;

fn compare(module: &'static str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], step: f64, f: &Objective) -> Result<ModuleCheck> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape)?;
    let xs = inputs.iter().map(|x| tape.param(x.clone())).collect::<crate::tensor::Result<Vec<_>>>()?;
    let out = f(&mut tape, &p, &xs)?;
    let mut grads = tape.backward(out)?;

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let xs = inputs.iter().map(|x| tape.param(x.clone())).collect::<crate::tensor::Result<Vec<_>>>()?;
        let out = f(&mut tape, &p, &xs)?;
        Ok(tape.value(out).item())
    };

    let (mut worst, mut checked) = (0.0f64, 0usize);
    let fd_err = |e: Error| match e {
        Error::Tensor(t) => t,
        other => crate::tensor::TensorError::InvalidArgument { op: "gradcheck", detail: other.to_string() },
    };
    for (k, id) in store.ids().enumerate() {
        let Some(auto) = grads.take(p.vars()[k]) else { continue };
        let numeric = finite_diff_gradient(
            |t| {
                let mut s = store.clone();
                *s.get_mut(id) = t.clone();
                eval(&s, inputs).map_err(fd_err)
            },
            store.get(id),
            step,
        )?;
        worst = worst.max(max_relative_error(&auto, &numeric));
        checked += auto.numel();
    }
    for (k, x) in inputs.iter().enumerate() {
        let Some(auto) = grads.take(xs[k]) else { continue };
        let numeric = finite_diff_gradient(
            |t| {
                let mut xs = inputs.to_vec();
                xs[k] = t.clone();
                eval(store, &xs).map_err(fd_err)
            },
            x,
            step,
        )?;
        worst = worst.max(max_relative_error(&auto, &numeric));
        checked += auto.numel();
    }
    Ok(ModuleCheck { module, max_rel_error: worst, checked, seconds: start.elapsed().as_secs_f64() })
}

/// A store holding only one module's parameters.
fn store_for<M>(cfg: &ModelConfig, seed: u64, make: impl FnOnce(&mut ParamStore<f64>, &mut SplitMix64, &ModelConfig) -> M) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let m = make(&mut store, &mut rng, cfg);
    (m, store)
}

fn check_interface(step: f64) -> Result<ModuleCheck> {
    let cfg = check_config();
    let (m, store) = store_for(&cfg, 11, TauFlowInterface::new);
    let core = cfg.core_size();
    let mut rng = SplitMix64::new(12);
    let f3 = random(&mut rng, &[BATCH, cfg.base_channel, core, core], -1.0, 1.0);
    compare("interface", &store, &[f3], step, &|tape, p, xs| {
        let mut rng = SplitMix64::new(13);
        let out = m.forward(tape, p, xs[0])?;
        let a = contract(tape, &mut rng, out.ltc_input)?;
        let b = contract(tape, &mut rng, out.s0)?;
        Ok(tape.add(a, b)?)
    })
}

/// τ, the complexity score and the group masks at a fixed temperature map.
fn check_grouping(step: f64) -> Result<ModuleCheck> {
    let cfg = check_config();
    let (m, store) = store_for(&cfg, 21, DynamicGrouping::new);
    let core = cfg.core_size();
    let mut rng = SplitMix64::new(22);
    let ltc = random(&mut rng, &[BATCH, cfg.ltc_channels(), core, core], -1.0, 1.0);
    let image = random(&mut rng, &[BATCH, 3, cfg.input_size, cfg.input_size], 0.0, 1.0);
    let temperature = random(&mut rng, &[BATCH, 1, core, core], 0.5, 1.5);
    compare("grouping", &store, &[ltc], step, &|tape, p, xs| {
        let mut rng = SplitMix64::new(23);
        let tau = m.compute_tau(tape, p, xs[0])?;
        let (score, _) = m.assess_complexity(tape, p, xs[0], &image)?;
        let logits = m.mask_logits(tape, p, xs[0], tau)?;
        let masks = tape.softmax(logits, 1, Some(temperature.clone()), Some(GROUPS - 1))?;
        let tau_log = tape.map(tau, crate::tensor::Pointwise::Ln)?;
        let a = contract(tape, &mut rng, tau_log)?;
        let b = contract(tape, &mut rng, score)?;
        let c = contract(tape, &mut rng, masks)?;
        let ab = tape.add(a, b)?;
        Ok(tape.add(ab, c)?)
    })
}

fn check_attention(step: f64) -> Result<ModuleCheck> {
    let cfg = check_config();
    let (m, store) = store_for(&cfg, 31, TauAttention::new);
    let core = cfg.core_size();
    let c = cfg.ltc_channels();
    let mut rng = SplitMix64::new(32);
    let u = random(&mut rng, &[BATCH, GROUPS, c, core, core], -1.0, 1.0);
    let masks = random(&mut rng, &[BATCH, GROUPS, core, core], 0.05, 1.0);
    let tau = random(&mut rng, &[BATCH, cfg.hidden_channels, core, core], 0.1, 3.0);
    compare("attention", &store, &[u, masks, tau], step, &|tape, p, xs| {
        let mut rng = SplitMix64::new(33);
        let out = m.forward(tape, p, xs[0], xs[1], xs[2], GROUPS - 1)?;
        let a = contract(tape, &mut rng, out.weights)?;
        let b = contract(tape, &mut rng, out.weighted)?;
        Ok(tape.add(a, b)?)
    })
}

fn check_cell(step: f64) -> Result<ModuleCheck> {
    let cfg = check_config();
    let (m, store) = store_for(&cfg, 41, TauFlowCell::new);
    let core = cfg.core_size();
    let mut rng = SplitMix64::new(42);
    let u = random(&mut rng, &[BATCH, GROUPS, cfg.ltc_channels(), core, core], -1.0, 1.0);
    let masks = random(&mut rng, &[BATCH, GROUPS, core, core], 0.05, 1.0);
    let s0 = random(&mut rng, &[BATCH, cfg.hidden_channels, core, core], -0.9, 0.9);
    compare("cell", &store, &[u, masks, s0], step, &|tape, p, xs| {
        let mut rng = SplitMix64::new(43);
        let (fused, trace) = m.evolve_and_fuse(tape, p, xs[0], xs[1], xs[2], cfg.time_steps)?;
        let a = contract(tape, &mut rng, fused)?;
        let b = contract(tape, &mut rng, trace.states[1])?;
        Ok(tape.add(a, b)?)
    })
}

/// Dice + focal, flow smoothing and complexity terms, combined with the
/// training weights.
fn check_losses(step: f64) -> Result<ModuleCheck> {
    let mut rng = SplitMix64::new(51);
    let (s, core) = (8, 4);
    let logits = random(&mut rng, &[BATCH, 1, s, s], -3.0, 3.0);
    let aux_logits = random(&mut rng, &[BATCH, 1, s / 2, s / 2], -3.0, 3.0);
    let masks = random(&mut rng, &[BATCH, GROUPS, core, core], 0.0, 1.0);
    let score = random(&mut rng, &[BATCH, 1], 0.1, 0.9);
    let target = Tensor::from_fn(&[BATCH, 1, s, s], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    let aux_target = Tensor::from_fn(&[BATCH, 1, s / 2, s / 2], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    let weights = LossWeights::default();
    let store = ParamStore::new();
    compare("loss", &store, &[logits, aux_logits, masks, score], step, &|tape, _, xs| {
        let t = tape.constant(target.clone())?;
        let at = tape.constant(aux_target.clone())?;
        let main = loss::dice_focal_loss(tape, xs[0], t)?.loss;
        let aux = loss::dice_focal_loss(tape, xs[1], at)?.loss;
        let flow = loss::flow_smooth_loss(tape, xs[2])?;
        let complexity = loss::complexity_loss(tape, xs[3], &[0.3, 0.8])?;
        let terms = LossTerms { main, aux, complexity, flow, stdp: None, diversity_reward: 0.4 };
        Ok(loss::total_loss(tape, &terms, &weights)?.0)
    })
}

/// Teacher-forced STDP loss through the cell trace it is computed from.
fn check_stdp(step: f64) -> Result<ModuleCheck> {
    let cfg = check_config();
    let (m, store) = store_for(&cfg, 61, TauFlowCell::new);
    let core = cfg.core_size();
    let mut rng = SplitMix64::new(62);
    let u = random(&mut rng, &[BATCH, GROUPS, cfg.ltc_channels(), core, core], -1.0, 1.0);
    let masks = random(&mut rng, &[BATCH, GROUPS, core, core], 0.05, 1.0);
    let s0 = random(&mut rng, &[BATCH, cfg.hidden_channels, core, core], -0.9, 0.9);
    let target = Tensor::from_fn(&[BATCH, 1, core, core], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
    let sc = cfg.stdp.clone();
    compare("stdp", &store, &[u, masks, s0], step, &|tape, p, xs| {
        let (_, trace) = m.evolve_and_fuse(tape, p, xs[0], xs[1], xs[2], cfg.time_steps)?;
        let events = stdp::event_approx(tape, &trace, &sc)?;
        let w = stdp::tau_weights(tape, trace.tau)?;
        Ok(stdp::stdp_loss_supervised(tape, &events, w, Some(&target), trace.groups, &sc)?)
    })
}

/// Runs one named module, or all of them.
pub fn run(module: Option<&str>, step: f64) -> Result<Vec<ModuleCheck>> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let selected: Vec<&str> = match module {
        None => MODULES.to_vec(),
        Some(m) if MODULES.contains(&m) => vec![m],
        Some(m) => return Err(Error::Invalid(format!("unknown module {m}; expected one of {}", MODULES.join(", ")))),
    };
    selected
        .into_iter()
        .map(|m| match m {
            "interface" => check_interface(step),
            "grouping" => check_grouping(step),
            "attention" => check_attention(step),
            "cell" => check_cell(step),
            "loss" => check_losses(step),
            _ => check_stdp(step),
        })
        .collect()
}
