//! The assembled network: encoder → interface → grouping → attention → cell →
//! decoder, plus the training objective.

use crate::attention::TauAttention;
use crate::backbone::{Decoder, Encoder, FeaturePyramid};
use crate::cell::{CellTrace, TauFlowCell};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::grouping::{group_features, DynamicGrouping, GroupPlan};
use crate::interface::TauFlowInterface;
use crate::loss::{self, LossBreakdown, LossTerms};
use crate::metrics::BinaryMask;
use crate::nn::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::stdp;
use crate::tensor::{kernels, real, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TauFlowNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub interface: TauFlowInterface,
    pub grouping: DynamicGrouping,
    pub attention: TauAttention,
    pub cell: TauFlowCell,
    pub decoder: Decoder,
}

/// Everything one forward pass records.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub seg_logits: Var,
    pub aux_logits: Var,
    pub pyramid: FeaturePyramid,
    pub ltc_input: Var,
    pub tau: Var,
    /// `[B, 1]`
    pub complexity: Var,
    pub plan: GroupPlan,
    pub mask_logits: Var,
    pub masks: Var,
    pub rewards: Vec<f64>,
    pub attention_weights: Var,
    pub trace: CellTrace,
    /// Target resampled to the core resolution, when one was supplied.
    pub core_target: Option<Tensor<T>>,
}

/// Bilinear resize of `[B, 1, H, W]` binary masks followed by a 0.5 threshold.
pub fn downsample_mask<T: Real>(mask: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let r = kernels::bilinear_resize(mask, size, size)?;
    Ok(r.map(|v| if v >= real(0.5) { T::one() } else { T::zero() }))
}

impl TauFlowNet {
    /// Builds the network and its freshly initialized parameters.
    pub fn build<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::stream(seed, 0x1417);
        let net = TauFlowNet {
            cfg: cfg.clone(),
            encoder: Encoder::new(&mut store, &mut rng, cfg),
            interface: TauFlowInterface::new(&mut store, &mut rng, cfg),
            grouping: DynamicGrouping::new(&mut store, &mut rng, cfg),
            attention: TauAttention::new(&mut store, &mut rng, cfg),
            cell: TauFlowCell::new(&mut store, &mut rng, cfg),
            decoder: Decoder::new(&mut store, &mut rng, cfg),
        };
        Ok((net, store))
    }

    /// `image`: `[B, 3, S, S]`; `target`: optional `[B, 1, S, S]` binary mask,
    /// used only by the refinement reward.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: &Tensor<T>,
        target: Option<&Tensor<T>>,
    ) -> Result<Forward<T>> {
        let x = tape.constant(image.clone())?;
        let pyramid = self.encoder.encode(tape, p, x)?;
        let iface = self.interface.forward(tape, p, pyramid.f3)?;
        let ltc = iface.ltc_input;
        let g = &self.grouping;
        let tau = g.compute_tau(tape, p, ltc)?;
        let (complexity, plan) = g.assess_complexity(tape, p, ltc, image)?;
        let groups = plan.active_groups;
        let mask_logits = g.mask_logits(tape, p, ltc, tau)?;
        let key = g.key_map(tape, p, ltc)?;
        let core_target = target.map(|t| downsample_mask(t, self.cfg.core_size())).transpose()?;
        let (masks, rewards) = g.refine_masks(tape, p, mask_logits, &key, ltc, core_target.as_ref(), groups)?;
        let u = group_features(tape, ltc, masks)?;
        let att = self.attention.forward(tape, p, u, masks, tau, groups)?;
        let (fused, trace) = self.cell.evolve_and_fuse(tape, p, att.weighted, masks, iface.s0, self.cfg.time_steps)?;
        let seg = self.decoder.decode(tape, p, fused, &pyramid)?;
        Ok(Forward {
            seg_logits: seg.seg_logits,
            aux_logits: seg.aux_logits,
            pyramid,
            ltc_input: ltc,
            tau,
            complexity,
            plan,
            mask_logits,
            masks,
            rewards,
            attention_weights: att.weights,
            trace,
            core_target,
        })
    }

    /// The weighted training objective for a forward pass on `target`.
    pub fn objective<T: Real>(&self, tape: &mut Tape<T>, out: &Forward<T>, target: &Tensor<T>) -> Result<(Var, LossBreakdown)> {
        let s = target.shape();
        let t = tape.constant(target.clone())?;
        let main = loss::dice_focal_loss(tape, out.seg_logits, t)?.loss;
        let aux_target = downsample_mask(target, s[2] / 2)?;
        let aux_t = tape.constant(aux_target)?;
        let aux = loss::dice_focal_loss(tape, out.aux_logits, aux_t)?.loss;

        let plane = s[2] * s[3];
        let mut targets = Vec::with_capacity(s[0]);
        for b in 0..s[0] {
            let m = Tensor::new(vec![s[2], s[3]], target.data()[b * plane..][..plane].to_vec())?;
            targets.push(loss::complexity_target(&BinaryMask::from_tensor(&m)?));
        }
        let complexity = loss::complexity_loss(tape, out.complexity, &targets)?;
        let flow = loss::flow_smooth_loss(tape, out.masks)?;
        let diversity_reward = loss::diversity_reward(tape.value(out.masks), self.cfg.max_groups)?;

        let stdp = if self.cfg.stdp.enabled {
            let core = match &out.core_target {
                Some(c) => c.clone(),
                None => downsample_mask(target, self.cfg.core_size())?,
            };
            let events = stdp::event_approx(tape, &out.trace, &self.cfg.stdp)?;
            let w = stdp::tau_weights(tape, out.trace.tau)?;
            Some(stdp::stdp_loss_supervised(tape, &events, w, Some(&core), out.trace.groups, &self.cfg.stdp)?)
        } else {
            None
        };
        let terms = LossTerms { main, aux, complexity, flow, stdp, diversity_reward };
        Ok(loss::total_loss(tape, &terms, &self.cfg.loss)?)
    }

    /// Foreground probabilities `[B, 1, S, S]` and the group plan, without
    /// gradients and without labels.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<(Tensor<T>, GroupPlan)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape)?;
        let out = self.forward(&mut tape, &p, images, None)?;
        let probs = tape.value(out.seg_logits).map(kernels::sigmoid);
        Ok((probs, out.plan))
    }
}
