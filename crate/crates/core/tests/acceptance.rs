//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Positional arguments select criteria by substring.
//!
//! cargo test --test acceptance [-- overfit determinism ...]

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use tauflow::accounting::CostReport;
use tauflow::cell::TauFlowCell;
use tauflow::config::{LossWeights, ModelConfig};
use tauflow::data::generate_synthetic;
use tauflow::gradcheck;
use tauflow::grouping::{group_features, DynamicGrouping};
use tauflow::loss::{self, LossBreakdown, LossTerms};
use tauflow::metrics::{dice_iou, hd95, percentile95_index, scaled_sq_distance, BinaryMask, HD_DOMAIN};
use tauflow::model::TauFlowNet;
use tauflow::nn::ParamStore;
use tauflow::rng::SplitMix64;
use tauflow::stdp::{stdp_loss, EventMaps};
use tauflow::tensor::{Tape, Tensor};
use tauflow::train::train;

const GRADCHECK_BUDGET_SECS: f64 = 120.0;
const TAU_MIN: f64 = 1e-2;
const TAU_MAX: f64 = 1e3;
const SIMPLEX_TOL: f64 = 1e-6;
const CONSERVATION_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-6;
const FOCAL_TOL: f64 = 1e-5;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_MAIN_LOSS: f64 = 0.1;
const OVERFIT_MAX_EPOCHS: usize = 300;
const ABLATION_MARGIN: f64 = 0.005;
const PARAM_BUDGET: u64 = 500_000;

type Verdict = Result<String, String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, max_shrink_iters: 64, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn proptest_verdict(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// Tiny core shared by the module-level criteria.
fn small_config(max_groups: usize) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        base_channel: 4,
        group_embed_dim: 2,
        hidden_channels: 4,
        qk_dim: 2,
        norm_groups: 2,
        complexity_hidden: 3,
        fast_head_channels: 2,
        max_groups,
        ..ModelConfig::default()
    }
}

fn random_tensor(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| (rng.uniform(-1.0, 1.0) * scale) as f32)
}

fn scale_params(store: &mut ParamStore<f32>, factor: f64) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor as f32);
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let results = gradcheck::run(None, gradcheck::DEFAULT_STEP).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = results.iter().map(|r| format!("{} {:.1e}", r.module, r.max_rel_error)).collect();
    let detail = format!("{} in {secs:.1}s", detail.join(", "));
    if results.len() == gradcheck::MODULES.len() && results.iter().all(|r| r.passed()) && secs < GRADCHECK_BUDGET_SECS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tau_range() -> Verdict {
    let cfg = small_config(5);
    let core = cfg.core_size();
    let strategy = (any::<u64>(), -3.0f64..3.0, -3.0f64..3.0);
    let r = runner(10_000).run(&strategy, |(seed, log_param, log_input)| {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::<f32>::new();
        let grouping = DynamicGrouping::new(&mut store, &mut rng, &cfg);
        let cell = TauFlowCell::new(&mut store, &mut rng, &cfg);
        scale_params(&mut store, 10f64.powf(log_param));
        let ltc = random_tensor(&mut rng, &[1, cfg.ltc_channels(), core, core], 10f64.powf(log_input));
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape).unwrap();
        let x = tape.constant(ltc).unwrap();
        let tau = grouping.compute_tau(&mut tape, &p, x).unwrap();
        let group_tau = cell.compute_group_tau(&mut tape, &p, x).unwrap();
        for v in tape.value(tau).data().iter().chain(tape.value(group_tau).data()) {
            // Bounds as stored in the model's scalar type.
            prop_assert!((TAU_MIN as f32..=TAU_MAX as f32).contains(v), "tau {v}");
        }
        Ok(())
    });
    proptest_verdict(r)?;
    Ok("10000 random inputs and parameterizations, 0 violations".into())
}

fn simplex_and_conservation() -> Verdict {
    let cfg = small_config(5);
    let core = cfg.core_size();
    let (worst_sum, worst_cons) = (Cell::new(0f64), Cell::new(0f64));
    for groups in 1..=5usize {
        let strategy = (any::<u64>(), -1.0f64..1.0, any::<bool>());
        let r = runner(1_000).run(&strategy, |(seed, log_scale, with_target)| {
            let mut rng = SplitMix64::new(seed);
            let mut store = ParamStore::<f32>::new();
            let g = DynamicGrouping::new(&mut store, &mut rng, &cfg);
            scale_params(&mut store, 10f64.powf(log_scale));
            let ltc = random_tensor(&mut rng, &[2, cfg.ltc_channels(), core, core], 3.0);
            let target = Tensor::from_fn(&[2, 1, core, core], |_| if rng.bernoulli(0.4) { 1f32 } else { 0.0 });
            let mut tape = Tape::new();
            let p = store.bind(&mut tape).unwrap();
            let x = tape.constant(ltc.clone()).unwrap();
            let tau = g.compute_tau(&mut tape, &p, x).unwrap();
            let logits = g.mask_logits(&mut tape, &p, x, tau).unwrap();
            let key = g.key_map(&tape, &p, x).unwrap();
            let t = with_target.then_some(&target);
            let (masks, _) = g.refine_masks(&mut tape, &p, logits, &key, x, t, groups).unwrap();
            let u = group_features(&mut tape, x, masks).unwrap();
            let (m, u) = (tape.value(masks), tape.value(u));
            let (c, hw) = (cfg.ltc_channels(), core * core);
            for b in 0..2 {
                for q in 0..hw {
                    let mut sum = 0f64;
                    for k in 0..5 {
                        let v = m.data()[(b * 5 + k) * hw + q] as f64;
                        if k >= groups {
                            prop_assert!(v == 0.0, "inactive group {k} has mass {v}");
                        }
                        sum += v;
                    }
                    worst_sum.set(worst_sum.get().max((sum - 1.0).abs()));
                    prop_assert!((sum - 1.0).abs() <= SIMPLEX_TOL, "mask sum {sum}");
                    for ch in 0..c {
                        let total: f64 = (0..5).map(|k| u.data()[((b * 5 + k) * c + ch) * hw + q] as f64).sum();
                        let want = ltc.data()[(b * c + ch) * hw + q] as f64;
                        worst_cons.set(worst_cons.get().max((total - want).abs()));
                        prop_assert!((total - want).abs() <= CONSERVATION_TOL, "feature sum {total} vs {want}");
                    }
                }
            }
            Ok(())
        });
        proptest_verdict(r).map_err(|e| format!("G={groups}: {e}"))?;
    }
    Ok(format!("5 x 1000 forwards, worst |sum-1| {:.1e}, worst conservation {:.1e}", worst_sum.get(), worst_cons.get()))
}

fn state_stability() -> Verdict {
    let cfg = small_config(2);
    let core = cfg.core_size();
    let steps = 50;
    let largest = Cell::new(0f64);
    let strategy = (any::<u64>(), -1.0f64..1.5, -2.0f64..1.0);
    let r = runner(1_000).run(&strategy, |(seed, log_scale, log_dt)| {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::<f32>::new();
        let mut cell = TauFlowCell::new(&mut store, &mut rng, &cfg);
        cell.dt = 10f64.powf(log_dt);
        scale_params(&mut store, 10f64.powf(log_scale));
        let u = random_tensor(&mut rng, &[1, 2, cfg.ltc_channels(), core, core], 5.0);
        let masks = Tensor::from_fn(&[1, 2, core, core], |_| rng.uniform(0.0, 1.0) as f32);
        let s0 = random_tensor(&mut rng, &[1, cfg.hidden_channels, core, core], 1.0);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape).unwrap();
        let (u, m, s) = (tape.constant(u).unwrap(), tape.constant(masks).unwrap(), tape.constant(s0).unwrap());
        let (_, trace) = cell.evolve_and_fuse(&mut tape, &p, u, m, s, steps).unwrap();
        for &state in &trace.states {
            let peak = tape.value(state).max_abs() as f64;
            largest.set(largest.get().max(peak));
            prop_assert!(peak <= 1.0, "state magnitude {peak}");
        }
        Ok(())
    });
    proptest_verdict(r)?;
    Ok(format!("1000 parameterizations x {steps} steps, max |s| {:.6}", largest.get()))
}

fn stdp_value(pre: &Tensor<f64>, post: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let events = EventMaps { pre: tape.constant(pre.clone()).unwrap(), post: tape.constant(post.clone()).unwrap() };
    let w = tape.constant(w.clone()).unwrap();
    let l = stdp_loss(&mut tape, &events, w, 0.5).unwrap();
    tape.value(l).item()
}

fn reverse_time(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape().to_vec();
    let plane = s[2] * s[3];
    Tensor::from_fn(&s, |idx| {
        let (n, k, q) = (idx / (s[1] * plane), idx / plane % s[1], idx % plane);
        t.data()[(n * s[1] + (s[1] - 1 - k)) * plane + q]
    })
}

fn stdp_asymmetry() -> Verdict {
    let strategy = (any::<u64>(), 2usize..7, 1usize..4, 1usize..5);
    let r = runner(500).run(&strategy, |(seed, steps, n, side)| {
        let mut rng = SplitMix64::new(seed);
        let shape = [n, steps, side, side];
        let plane = side * side;
        let mut pre = Tensor::<f64>::zeros(&shape);
        let mut post = Tensor::<f64>::zeros(&shape);
        // Each pixel fires once before and once after, one step apart.
        for i in 0..n {
            for q in 0..plane {
                let t = rng.below(steps as u64 - 1) as usize;
                pre.data_mut()[(i * steps + t) * plane + q] = rng.uniform(0.05, 1.0);
                post.data_mut()[(i * steps + t + 1) * plane + q] = rng.uniform(0.05, 1.0);
            }
        }
        let w = Tensor::from_fn(&[n, 1, side, side], |_| rng.uniform(0.1, 2.0));
        let causal = stdp_value(&pre, &post, &w);
        let mirrored = stdp_value(&reverse_time(&pre), &reverse_time(&post), &w);
        prop_assert!(causal < mirrored, "causal {causal} vs mirrored {mirrored}");
        let zeros = Tensor::zeros(&shape);
        prop_assert!(stdp_value(&zeros, &zeros, &w) == 0.0);
        Ok(())
    });
    proptest_verdict(r)?;

    // Inference never touches the regularizer.
    let mut on = ModelConfig { base_channel: 8, hidden_channels: 16, group_embed_dim: 4, norm_groups: 4, input_size: 32, ..ModelConfig::default() };
    on.stdp.enabled = true;
    let off = ModelConfig { stdp: tauflow::config::StdpConfig { enabled: false, ..on.stdp.clone() }, ..on.clone() };
    let (net_on, store_on) = TauFlowNet::build::<f32>(&on, 7).map_err(|e| e.to_string())?;
    let (net_off, store_off) = TauFlowNet::build::<f32>(&off, 7).map_err(|e| e.to_string())?;
    let samples = generate_synthetic(4, 9, 32, 32);
    let refs: Vec<_> = samples.iter().collect();
    let (images, _) = tauflow::data::make_batch(&refs).map_err(|e| e.to_string())?;
    let (a, _) = net_on.predict(&store_on, &images).map_err(|e| e.to_string())?;
    let (b, _) = net_off.predict(&store_off, &images).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&a) != bits(&b) {
        return Err("inference output changes with the regularizer enabled".into());
    }
    Ok("500 causal constructions beat their mirrors, zero events give 0, inference bit-identical".into())
}

fn random_mask(rng: &mut SplitMix64, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    if rng.bernoulli(0.5) {
        let p = rng.uniform(0.0, 0.6);
        for i in 0..h {
            for j in 0..w {
                m.set(i, j, rng.bernoulli(p));
            }
        }
    } else {
        for _ in 0..rng.below(4) {
            let (ci, cj) = (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64));
            let r = rng.uniform(0.5, h as f64 / 3.0);
            for i in 0..h {
                for j in 0..w {
                    let d = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
                    if d <= r {
                        m.set(i, j, true);
                    }
                }
            }
        }
    }
    m
}

/// All-pairs reference: 4-connected components below `min_area` are dropped,
/// boundary pixels found directly, every distance computed.
fn hd95_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    fn denoise(m: &BinaryMask, min_area: usize) -> BinaryMask {
        let (h, w) = (m.height(), m.width());
        let mut label = vec![usize::MAX; h * w];
        let mut out = BinaryMask::empty(h, w);
        for start in 0..h * w {
            if !m.cells()[start] || label[start] != usize::MAX {
                continue;
            }
            let mut comp = vec![start];
            label[start] = start;
            let mut k = 0;
            while k < comp.len() {
                let (i, j) = (comp[k] / w, comp[k] % w);
                let mut nbrs = Vec::new();
                if i > 0 {
                    nbrs.push(comp[k] - w);
                }
                if i + 1 < h {
                    nbrs.push(comp[k] + w);
                }
                if j > 0 {
                    nbrs.push(comp[k] - 1);
                }
                if j + 1 < w {
                    nbrs.push(comp[k] + 1);
                }
                for nb in nbrs {
                    if m.cells()[nb] && label[nb] == usize::MAX {
                        label[nb] = start;
                        comp.push(nb);
                    }
                }
                k += 1;
            }
            if comp.len() >= min_area {
                for c in comp {
                    out.set(c / w, c % w, true);
                }
            }
        }
        out
    }
    fn border(m: &BinaryMask) -> Vec<(usize, usize)> {
        let (h, w) = (m.height() as isize, m.width() as isize);
        let on = |i: isize, j: isize| i >= 0 && j >= 0 && i < h && j < w && m.get(i as usize, j as usize);
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if on(i, j) && !(on(i - 1, j) && on(i + 1, j) && on(i, j - 1) && on(i, j + 1)) {
                    out.push((i as usize, j as usize));
                }
            }
        }
        out
    }
    let (a, b) = (denoise(a, 3), denoise(b, 3));
    if a.count() == 0 || b.count() == 0 {
        return HD_DOMAIN * std::f64::consts::SQRT_2;
    }
    let (sy, sx) = (HD_DOMAIN / a.height() as f64, HD_DOMAIN / a.width() as f64);
    let (ba, bb) = (border(&a), border(&b));
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&p| to.iter().map(|&q| scaled_sq_distance(p, q, sy, sx)).fold(f64::INFINITY, f64::min).sqrt())
            .collect()
    };
    let mut d = directed(&ba, &bb);
    d.extend(directed(&bb, &ba));
    d.sort_by(f64::total_cmp);
    let idx = ((d.len() * 95).div_ceil(100)) - 1;
    assert_eq!(idx, percentile95_index(d.len()));
    d[idx]
}

fn metric_oracles() -> Verdict {
    let ulps = Cell::new(0f64);
    let r = runner(1_000).run(&(any::<u64>(), 1usize..33, 1usize..33), |(seed, h, w)| {
        let mut rng = SplitMix64::new(seed);
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let (dice, iou) = dice_iou(&a, &b).unwrap();
        let inter = a.cells().iter().zip(b.cells()).filter(|(x, y)| **x && **y).count();
        let union = a.cells().iter().zip(b.cells()).filter(|(x, y)| **x || **y).count();
        let (na, nb) = (a.count(), b.count());
        if na + nb == 0 {
            prop_assert!(dice == 1.0 && iou == 1.0);
            return Ok(());
        }
        // dice = 2 iou / (1 + iou)  ⇔  union + inter = |A| + |B|
        prop_assert_eq!(union + inter, na + nb);
        prop_assert_eq!(dice, 2.0 * inter as f64 / (na + nb) as f64);
        prop_assert_eq!(iou, inter as f64 / union as f64);
        let via_iou = 2.0 * iou / (1.0 + iou);
        ulps.set(ulps.get().max((dice - via_iou).abs() / f64::EPSILON));
        prop_assert!((dice - via_iou).abs() <= 4.0 * f64::EPSILON, "{dice} vs {via_iou}");
        Ok(())
    });
    proptest_verdict(r)?;

    let empty = Cell::new(0usize);
    let r = runner(200).run(&any::<u64>(), |seed| {
        let mut rng = SplitMix64::new(seed);
        let (a, b) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
        let ab = hd95(&a, &b).unwrap();
        let ba = hd95(&b, &a).unwrap();
        let oracle = hd95_oracle(&a, &b);
        empty.set(empty.get() + ab.empty as usize);
        prop_assert_eq!(ab.value.to_bits(), oracle.to_bits(), "hd95 {} vs oracle {}", ab.value, oracle);
        prop_assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        Ok(())
    });
    proptest_verdict(r)?;
    Ok(format!(
        "1000 Dice/IoU pairs satisfy the identity in counts (float gap {:.0} ulp); 200 HD95 pairs equal the oracle and are symmetric ({} empty)",
        ulps.get(),
        empty.get()
    ))
}

fn loss_arithmetic() -> Verdict {
    let weights = LossWeights::default();
    let worst = Cell::new(0f64);
    let r = runner(1_000).run(&prop::array::uniform6(-2.0f64..2.0), |c| {
        let [main, aux, complexity, diversity, flow, stdp] = c;
        let expect = main + 0.4 * aux + 0.1 * complexity - 0.05 * diversity + 0.1 * flow + 0.01 * stdp;
        let combined = LossBreakdown::combine(main, aux, complexity, diversity, flow, stdp, &weights);
        let mut tape = Tape::<f64>::new();
        let mut leaf = |v: f64| tape.constant(Tensor::scalar(v)).unwrap();
        let terms = LossTerms {
            main: leaf(main),
            aux: leaf(aux),
            complexity: leaf(complexity),
            flow: leaf(flow),
            stdp: Some(leaf(stdp)),
            diversity_reward: diversity,
        };
        let (total, parts) = loss::total_loss(&mut tape, &terms, &weights).unwrap();
        for got in [combined.total, parts.total, tape.value(total).item()] {
            worst.set(worst.get().max((got - expect).abs()));
            prop_assert!((got - expect).abs() <= LOSS_TOL, "{got} vs {expect}");
        }
        Ok(())
    });
    proptest_verdict(r)?;

    let focal = |t: f64| {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[1, 1, 4, 4], 0.5)).unwrap();
        let t = tape.constant(Tensor::full(&[1, 1, 4, 4], t)).unwrap();
        let l = loss::focal_loss(&mut tape, p, t).unwrap();
        tape.value(l).item()
    };
    let (pos, neg) = (focal(1.0), focal(0.0));
    if (pos - 0.043321).abs() > FOCAL_TOL || (neg - 0.129964).abs() > FOCAL_TOL {
        return Err(format!("focal at p=0.5: {pos:.6} (t=1), {neg:.6} (t=0)"));
    }
    Ok(format!("1000 random totals within {:.1e}; focal {pos:.6} / {neg:.6}", worst.get()))
}

fn overfit_convergence() -> Verdict {
    let mut cfg = ModelConfig { base_channel: 16, ..ModelConfig::reduced() };
    cfg.train.max_epochs = OVERFIT_MAX_EPOCHS;
    cfg.train.patience = OVERFIT_MAX_EPOCHS;
    cfg.train.batch_size = 2;
    cfg.train.augment = false;
    cfg.train.target_dice = Some(OVERFIT_DICE);
    cfg.train.target_main_loss = Some(OVERFIT_MAIN_LOSS);
    let data = generate_synthetic(8, cfg.train.seed, 64, 64);
    let (net, store) = TauFlowNet::build::<f32>(&cfg, cfg.train.seed).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = train(&net, store, &data, &data, None).map_err(|e| e.to_string())?;
    let last = out.history.last().ok_or("no epochs ran")?;
    let detail = format!(
        "epochs {}, training Dice {:.4}, main loss {:.4}, {:.0}s",
        out.epochs_run,
        last.val.dice,
        last.train.main,
        start.elapsed().as_secs_f64()
    );
    if last.val.dice >= OVERFIT_DICE && last.train.main <= OVERFIT_MAIN_LOSS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        input_size: 32,
        base_channel: 8,
        hidden_channels: 16,
        group_embed_dim: 8,
        norm_groups: 4,
        ..ModelConfig::default()
    };
    cfg.train.seed = seed;
    cfg.train.max_epochs = 25;
    cfg.train.patience = 25;
    cfg
}

fn ablation_direction() -> Verdict {
    let seeds = [42u64, 43, 44];
    let variants: [(&str, fn(&mut ModelConfig)); 3] = [
        ("full", |_| {}),
        ("no-stdp", |c| c.stdp.enabled = false),
        ("single-group", |c| c.fixed_groups = Some(1)),
    ];
    let mut means = Vec::new();
    for (name, tweak) in variants {
        let mut total = 0.0;
        for &seed in &seeds {
            let mut cfg = ablation_config(seed);
            tweak(&mut cfg);
            let all = generate_synthetic(80, seed, cfg.input_size, cfg.input_size);
            let (train_set, val_set) = all.split_at(64);
            let (net, store) = TauFlowNet::build::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
            let out = train(&net, store, train_set, val_set, None).map_err(|e| e.to_string())?;
            total += out.best_dice;
        }
        means.push((name, total / seeds.len() as f64));
    }
    let full = means[0].1;
    let detail = means.iter().map(|(n, d)| format!("{n} {:.2}", 100.0 * d)).collect::<Vec<_>>().join(", ");
    if means[1..].iter().all(|&(_, d)| full >= d - ABLATION_MARGIN) {
        Ok(format!("mean val Dice over 3 seeds: {detail}"))
    } else {
        Err(format!("mean val Dice over 3 seeds: {detail}"))
    }
}

fn budget_accounting() -> Verdict {
    let cfg = ModelConfig::default();
    let report = CostReport::new(&cfg, 224).map_err(|e| e.to_string())?;
    println!("{}", report.table().trim_end());
    let (_, store) = TauFlowNet::build::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
    let seven = CostReport::new(&ModelConfig { max_groups: 7, ..cfg.clone() }, 224).map_err(|e| e.to_string())?;
    let (f1, f5) = (report.flops_at(1).unwrap(), report.flops_at(5).unwrap());
    let checks = [
        ("params within budget", report.params_total <= PARAM_BUDGET),
        ("recount matches allocation", report.params_total == store.element_count() as u64),
        ("G_max 7 larger", seven.params_total > report.params_total),
        ("G=1 cheaper than G=5", f1 < f5),
        ("224x224 in [1G, 10G]", (1_000_000_000..=10_000_000_000).contains(&f5)),
    ];
    let detail = format!(
        "{} params ({} at G_max 7), {:.2}G FLOPs at G=1, {:.2}G at G=5",
        report.params_total,
        seven.params_total,
        f1 as f64 / 1e9,
        f5 as f64 / 1e9
    );
    match checks.iter().find(|c| !c.1) {
        None => Ok(detail),
        Some((what, _)) => Err(format!("{what} failed: {detail}")),
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tauflow")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("small.json");
    let small = r#"{"input_size": 32, "base_channel": 8, "hidden_channels": 8, "group_embed_dim": 4,
                    "norm_groups": 4, "train": {"batch_size": 2, "seed": 42}}"#;
    std::fs::write(&cfg_path, small).map_err(|e| e.to_string())?;
    let cfg_arg = cfg_path.to_str().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let ckpt = dir.path().join(format!("run{k}.ckpt"));
        let args = ["train", "--config", cfg_arg, "--synth", "8", "--val-on-train", "--epochs", "2", "--out", ckpt.to_str().unwrap()];
        let out = cli(&args)?;
        let steps: Vec<String> = out.lines().filter(|l| l.starts_with("step ")).map(str::to_string).collect();
        runs.push(steps);
    }
    if runs[0].len() != 5 || runs[0] != runs[1] {
        return Err(format!("first steps differ: {:?} vs {:?}", runs[0], runs[1]));
    }

    let mut trees = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("synth{k}"));
        cli(&["synth", "--n", "4", "--seed", "42", "--size", "64", "--out", out.to_str().unwrap()])?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        trees.push(files);
    }
    if trees[0].len() != 8 || trees[0] != trees[1] {
        return Err("synth output differs between runs".into());
    }
    let first = runs[0][0].trim_start_matches("step 0 loss ").to_string();
    Ok(format!("first 5 step losses identical across runs (step 0 = {first}); 8 synth files byte-identical"))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("gradient integrity", gradient_integrity),
        ("time-constant range", tau_range),
        ("mask simplex and feature conservation", simplex_and_conservation),
        ("recurrent state stability", state_stability),
        ("spike-timing asymmetry", stdp_asymmetry),
        ("metric oracles", metric_oracles),
        ("loss arithmetic", loss_arithmetic),
        ("overfit convergence", overfit_convergence),
        ("ablation direction", ablation_direction),
        ("budget accounting", budget_accounting),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS  {name:<40} {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name:<40} {d}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
