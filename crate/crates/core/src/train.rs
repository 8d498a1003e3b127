//! Training loop, validation, early stopping and the per-epoch metric log.

use std::io::Write;
use std::path::Path;

use crate::data::{augment, make_batch, Sample};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::metrics::{dice_iou, hd95, BinaryMask, MetricSummary};
use crate::model::TauFlowNet;
use crate::nn::ParamStore;
use crate::optim::{lr_at, AdamW};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

/// Sub-stream ids; epoch `e` uses `id + e`.
const SHUFFLE_STREAM: u64 = 1 << 32;
const AUGMENT_STREAM: u64 = 2 << 32;

pub const LOG_HEADER: &str =
    "# epoch\ttrain_loss\tmain\taux\tcomplexity\tdiversity_reward\tflow\tstdp\tval_dice\tval_iou\tval_hd95\tlr";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub train: LossBreakdown,
    pub val: MetricSummary,
    pub lr: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), format!("{:.6}", self.train.total)];
        let t = &self.train;
        cols.extend([t.main, t.aux, t.complexity, t.diversity_reward, t.flow, t.stdp].iter().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.6}", self.val.dice));
        cols.push(format!("{:.6}", self.val.iou));
        cols.push(format!("{:.4}", self.val.hd95));
        cols.push(format!("{:.6e}", self.lr));
        cols.join("\t")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub best_dice: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    /// Weighted total of every optimizer micro-batch, in order.
    pub step_losses: Vec<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Default)]
pub struct PerSample {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub groups: usize,
}

/// Thresholded predictions for `samples`, evaluated in consecutive batches of
/// `batch_size` (the group count is shared within a batch).
pub fn evaluate(
    net: &TauFlowNet,
    store: &ParamStore<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(MetricSummary, Vec<PerSample>)> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = make_batch(&refs)?;
        let (probs, plan) = net.predict(store, &images)?;
        for (k, s) in chunk.iter().enumerate() {
            let pred = BinaryMask::from_tensor(&probs.index_first(k)?)?;
            let gt = BinaryMask::from_tensor(&s.mask)?;
            let (dice, iou) = dice_iou(&pred, &gt)?;
            let h = hd95(&pred, &gt)?;
            rows.push(PerSample { id: s.id.clone(), dice, iou, hd95: h.value, groups: plan.per_image_groups[k] });
        }
    }
    let mut summary = MetricSummary { count: rows.len(), ..Default::default() };
    if !rows.is_empty() {
        let n = rows.len() as f64;
        summary.dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
        summary.iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
        summary.hd95 = rows.iter().map(|r| r.hd95).sum::<f64>() / n;
    }
    Ok((summary, rows))
}

fn check_sizes(net: &TauFlowNet, samples: &[Sample], which: &str) -> Result<()> {
    let s = net.cfg.input_size;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{which} set is empty")));
    }
    if let Some(bad) = samples.iter().find(|x| x.height() != s || x.width() != s) {
        return Err(Error::Invalid(format!(
            "{which} sample {} is {}x{}, model expects {s}x{s}",
            bad.id,
            bad.height(),
            bad.width()
        )));
    }
    Ok(())
}

/// Forward, objective and gradients for one batch.
fn batch_gradients(
    net: &TauFlowNet,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
) -> Result<(LossBreakdown, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape)?;
    let out = net.forward(&mut tape, &p, images, Some(masks))?;
    let (total, parts) = net.objective(&mut tape, &out, masks)?;
    if parts.first_non_finite().is_some() {
        return Ok((parts, Vec::new()));
    }
    let mut grads = tape.backward(total)?;
    Ok((parts, p.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Trains `store` in place on `train`, validating on `val` after each epoch.
/// Stops after `patience` epochs without a better validation Dice, at
/// `max_epochs`, or once the configured targets are met. When `log` is given, one
/// line per epoch is written there.
pub fn train(
    net: &TauFlowNet,
    mut store: ParamStore<f32>,
    train: &[Sample],
    val: &[Sample],
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    let tc = net.cfg.train.clone();
    check_sizes(net, train, "training")?;
    check_sizes(net, val, "validation")?;
    let mut log_file = match log {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut opt = AdamW::new(&store, tc.lr, tc.weight_decay);
    let mut best_params = store.clone();
    let (mut best_dice, mut best_epoch, mut since_best) = (f64::NEG_INFINITY, 0, 0);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 0..tc.max_epochs {
        let lr = lr_at(epoch as f64, tc.lr, tc.t0, tc.t_mult, tc.eta_min);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        SplitMix64::stream(tc.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
        let mut aug_rng = SplitMix64::stream(tc.seed, AUGMENT_STREAM + epoch as u64);

        let mut epoch_loss = LossBreakdown::default();
        let mut pending: Option<Vec<Option<Tensor<f32>>>> = None;
        let mut pending_count = 0;
        let batches: Vec<&[usize]> = order.chunks(tc.batch_size).collect();
        let nb = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| if tc.augment { augment(&train[i], &mut aug_rng) } else { train[i].clone() })
                .collect();
            let (images, masks) = make_batch(&batch.iter().collect::<Vec<_>>())?;
            let (parts, grads) = batch_gradients(net, &store, &images, &masks)?;
            if let Some(term) = parts.first_non_finite() {
                return Err(Error::NonFiniteLoss { step, term });
            }
            step_losses.push(parts.total);
            epoch_loss.accumulate(&parts, 1.0 / nb as f64);
            step += 1;

            pending = Some(match pending.take() {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                    acc
                }
            });
            pending_count += 1;
            if pending_count == tc.accum_steps || bi + 1 == nb {
                let mut grads = pending.take().expect("gradients pending");
                if pending_count > 1 {
                    let k = 1.0 / pending_count as f32;
                    grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= k));
                }
                opt.step(&mut store, &grads)?;
                pending_count = 0;
            }
        }

        let (summary, _) = evaluate(net, &store, val, tc.batch_size)?;
        let record = EpochRecord { epoch, train: epoch_loss, val: summary, lr };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", record.log_line()).map_err(|e| Error::io(*path, e))?;
        }
        history.push(record);
        if summary.dice > best_dice {
            best_dice = summary.dice;
            best_epoch = epoch;
            best_params = store.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let targets_set = tc.target_dice.is_some() || tc.target_main_loss.is_some();
        let dice_met = tc.target_dice.is_none_or(|t| summary.dice >= t);
        let main_met = tc.target_main_loss.is_none_or(|t| epoch_loss.main <= t);
        if targets_set && dice_met && main_met {
            stopped_early = true;
            break;
        }
        if since_best >= tc.patience {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        best_params,
        final_params: store,
        best_dice,
        best_epoch,
        epochs_run: history.len(),
        history,
        step_losses,
        stopped_early,
    })
}
