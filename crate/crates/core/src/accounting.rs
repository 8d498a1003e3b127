//! Analytic parameter and FLOP accounting.
//!
//! The network is described as a flat list of layers, each tagged with how
//! often it runs. Parameters are counted once per layer; FLOPs are scaled by
//! the active group count, the number of time steps and the refinement steps.
//! One multiply-accumulate is 2 FLOPs; normalization, activations and other
//! elementwise work are 1 FLOP per element.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        learnable: bool,
        out_h: usize,
        out_w: usize,
    },
    /// Group normalization with a per-channel affine.
    Norm { channels: usize, h: usize, w: usize },
    Linear { inputs: usize, outputs: usize },
    /// Free-standing learnable scalars.
    Scalars { count: usize },
    /// Parameter-free pointwise work.
    Elementwise { elements: usize },
    /// A layer the cost model does not understand.
    Opaque(String),
}

/// How many times a layer runs per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scaling {
    Static,
    PerGroup,
    PerGroupStep,
    PerFlowStep,
    PerFlowStepGroup,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub module: &'static str,
    pub name: String,
    pub kind: LayerKind,
    pub scaling: Scaling,
}

impl LayerDesc {
    pub fn params(&self) -> u64 {
        let n = match self.kind {
            LayerKind::Conv { cin, cout, kernel, groups, bias, learnable, .. } => {
                if learnable {
                    cout * (cin / groups) * kernel * kernel + if bias { cout } else { 0 }
                } else {
                    0
                }
            }
            LayerKind::Norm { channels, .. } => 2 * channels,
            LayerKind::Linear { inputs, outputs } => inputs * outputs + outputs,
            LayerKind::Scalars { count } => count,
            LayerKind::Elementwise { .. } | LayerKind::Opaque(_) => 0,
        };
        n as u64
    }

    /// Cost of a single invocation.
    pub fn flops_once(&self) -> Result<u64> {
        let f = match &self.kind {
            &LayerKind::Conv { cin, cout, kernel, groups, out_h, out_w, .. } => {
                2 * cout * (cin / groups) * kernel * kernel * out_h * out_w
            }
            &LayerKind::Norm { channels, h, w } => channels * h * w,
            &LayerKind::Linear { inputs, outputs } => 2 * inputs * outputs,
            LayerKind::Scalars { .. } => 0,
            &LayerKind::Elementwise { elements } => elements,
            LayerKind::Opaque(what) => {
                return Err(Error::Invalid(format!("cost model has no rule for layer {} ({what})", self.name)))
            }
        };
        Ok(f as u64)
    }

    pub fn repeats(&self, groups: usize, time_steps: usize, flow_steps: usize) -> u64 {
        (match self.scaling {
            Scaling::Static => 1,
            Scaling::PerGroup => groups,
            Scaling::PerGroupStep => groups * time_steps,
            Scaling::PerFlowStep => flow_steps,
            Scaling::PerFlowStepGroup => flow_steps * groups,
        }) as u64
    }
}

struct Builder {
    layers: Vec<LayerDesc>,
    module: &'static str,
    scaling: Scaling,
}

impl Builder {
    fn push(&mut self, name: &str, kind: LayerKind) {
        self.layers.push(LayerDesc { module: self.module, name: format!("{}.{name}", self.module), kind, scaling: self.scaling });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool, out: usize) {
        let kind = LayerKind::Conv { cin, cout, kernel, groups, bias, learnable: true, out_h: out, out_w: out };
        self.push(name, kind);
    }

    fn elementwise(&mut self, name: &str, elements: usize) {
        self.push(name, LayerKind::Elementwise { elements });
    }

    /// 3×3 conv, group norm, ReLU.
    fn block(&mut self, name: &str, cin: usize, cout: usize, out: usize) {
        self.conv(&format!("{name}.conv"), cin, cout, 3, 1, true, out);
        self.push(&format!("{name}.norm"), LayerKind::Norm { channels: cout, h: out, w: out });
        self.elementwise(&format!("{name}.relu"), cout * out * out);
    }
}

/// Every layer of the network at a given input resolution.
pub fn describe(cfg: &ModelConfig, input_size: usize) -> Vec<LayerDesc> {
    let (c, e, hid, gmax) = (cfg.base_channel, cfg.group_embed_dim, cfg.hidden_channels, cfg.max_groups);
    let l = cfg.ltc_channels();
    let (s1, s2, s3) = (input_size, input_size / 2, input_size / 4);
    let core = s3 * s3;
    let mut b = Builder { layers: Vec::new(), module: "encoder", scaling: Scaling::Static };

    b.block("stage1.0", 3, c, s1);
    b.block("stage1.1", c, c, s1);
    b.block("stage2.0", c, c, s2);
    b.block("stage2.1", c, c, s2);
    b.block("stage3.0", c, c, s3);
    b.block("stage3.1", c, c, s3);

    b.module = "interface";
    b.conv("pos_conv", 1, e, cfg.pos_kernel, 1, true, s3);
    b.elementwise("pool", c * core);
    b.push("init_state", LayerKind::Linear { inputs: c, outputs: hid });
    b.elementwise("init_tanh", hid);

    b.module = "grouping";
    b.conv("tau_conv", l, hid, 1, 1, true, s3);
    b.elementwise("tau_activation", 2 * hid * core);
    b.elementwise("statistics", 4 * l * core);
    b.push("complexity.0", LayerKind::Linear { inputs: 2 * l + 1, outputs: cfg.complexity_hidden });
    b.push("complexity.1", LayerKind::Linear { inputs: cfg.complexity_hidden, outputs: 1 });
    b.block("pattern.0", l + hid, c, s3);
    b.block("pattern.1", c, c, s3);
    b.conv("pattern_head", c, gmax, 1, 1, true, s3);
    // The key map needs the τ pre-activation and its input gradient.
    b.push("key_map", LayerKind::Conv { cin: l, cout: hid, kernel: 1, groups: 1, bias: false, learnable: false, out_h: s3, out_w: s3 });
    b.conv("fast_proj", l, cfg.fast_head_channels, 1, 1, true, s3);
    b.scaling = Scaling::PerFlowStep;
    b.elementwise("flow_softmax", 3 * gmax * core);
    b.elementwise("reward", 4 * core);
    b.scaling = Scaling::PerFlowStepGroup;
    b.elementwise("fast_mask", cfg.fast_head_channels * core);
    b.push("fast_head", LayerKind::Conv {
        cin: cfg.fast_head_channels,
        cout: 1,
        kernel: 1,
        groups: 1,
        bias: true,
        learnable: false,
        out_h: s3,
        out_w: s3,
    });
    b.elementwise("fast_fuse", 2 * core);
    b.scaling = Scaling::Static;
    b.elementwise("softmax", 3 * gmax * core);
    // The fast head's parameters are counted once, not per invocation.
    b.push("fast_head_params", LayerKind::Conv {
        cin: cfg.fast_head_channels,
        cout: 1,
        kernel: 1,
        groups: 1,
        bias: true,
        learnable: true,
        out_h: 0,
        out_w: 0,
    });
    b.scaling = Scaling::PerGroup;
    b.elementwise("group_features", l * core);

    b.module = "attention";
    b.conv("query", l, cfg.qk_dim, 1, 1, false, s3);
    b.conv("key", l, cfg.qk_dim, 1, 1, false, s3);
    b.elementwise("pool", 2 * cfg.qk_dim * core);
    b.push("score", LayerKind::Linear { inputs: cfg.qk_dim, outputs: 1 });
    b.elementwise("tau_mean", 3 * core);
    b.scaling = Scaling::Static;
    b.elementwise("tau_channel_mean", hid * core);
    b.push("mix", LayerKind::Scalars { count: 3 });

    b.module = "cell";
    b.scaling = Scaling::PerGroup;
    b.conv("tau_conv", l, hid, 1, 1, true, s3);
    b.elementwise("step_size", 4 * hid * core);
    b.conv("input_map", l, hid, 1, 1, true, s3);
    b.scaling = Scaling::PerGroupStep;
    b.conv("state_depthwise", hid, hid, 3, hid, true, s3);
    b.conv("state_pointwise", hid, hid, 1, 1, true, s3);
    b.elementwise("euler_update", 5 * hid * core);
    b.scaling = Scaling::PerGroup;
    b.push("norm", LayerKind::Norm { channels: hid, h: s3, w: s3 });
    b.conv("proj", hid, hid, 1, 1, true, s3);
    b.conv("out_proj", hid, c, 1, 1, true, s3);
    b.elementwise("fuse", 2 * c * core);

    b.module = "decoder";
    b.scaling = Scaling::Static;
    b.elementwise("upsample_mid", 4 * c * s2 * s2);
    b.block("mid", 2 * c, c, s2);
    b.conv("aux_head", c, 1, 1, 1, true, s2);
    b.elementwise("upsample_top", 4 * c * s1 * s1);
    b.block("top", 2 * c, c, s1);
    b.conv("seg_head", c, 1, 1, 1, true, s1);
    b.layers
}

/// Learnable element count per module, keyed by module name.
pub fn count_params(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for layer in describe(cfg, cfg.input_size) {
        *out.entry(layer.module.to_string()).or_insert(0) += layer.params();
    }
    out
}

/// Total FLOPs for one image with `groups` active groups.
pub fn estimate_flops(cfg: &ModelConfig, input_size: usize, groups: usize) -> Result<u64> {
    flops_of(&describe(cfg, input_size), groups, cfg.time_steps, cfg.max_flow_steps)
}

pub fn flops_of(layers: &[LayerDesc], groups: usize, time_steps: usize, flow_steps: usize) -> Result<u64> {
    layers.iter().try_fold(0u64, |acc, l| Ok(acc + l.flops_once()? * l.repeats(groups, time_steps, flow_steps)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub base_channel: usize,
    pub max_groups: usize,
    pub time_steps: usize,
    pub input_size: usize,
    pub params_total: u64,
    pub params_by_module: BTreeMap<String, u64>,
    /// Cost of the group-independent layers.
    pub flops_static: u64,
    /// `(G, total FLOPs)` for `G = 1..=max_groups`.
    pub flops_dynamic: Vec<(usize, u64)>,
}

impl CostReport {
    pub fn new(cfg: &ModelConfig, input_size: usize) -> Result<Self> {
        let layers = describe(cfg, input_size);
        let params_by_module = count_params(cfg);
        let statics: Vec<LayerDesc> = layers.iter().filter(|l| l.scaling == Scaling::Static).cloned().collect();
        let flops_static = flops_of(&statics, 0, cfg.time_steps, cfg.max_flow_steps)?;
        let flops_dynamic = (1..=cfg.max_groups)
            .map(|g| Ok((g, flops_of(&layers, g, cfg.time_steps, cfg.max_flow_steps)?)))
            .collect::<Result<_>>()?;
        Ok(CostReport {
            base_channel: cfg.base_channel,
            max_groups: cfg.max_groups,
            time_steps: cfg.time_steps,
            input_size,
            params_total: params_by_module.values().sum(),
            params_by_module,
            flops_static,
            flops_dynamic,
        })
    }

    pub fn flops_at(&self, groups: usize) -> Option<u64> {
        self.flops_dynamic.iter().find(|&&(g, _)| g == groups).map(|&(_, f)| f)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "base_channel {}  max_groups {}  T {}  input {}x{}",
            self.base_channel, self.max_groups, self.time_steps, self.input_size, self.input_size
        );
        let _ = writeln!(s, "{:<12} {:>10}", "module", "params");
        for (m, n) in &self.params_by_module {
            let _ = writeln!(s, "{m:<12} {n:>10}");
        }
        let _ = writeln!(s, "{:<12} {:>10}  ({:.3}M)", "params_total", self.params_total, self.params_total as f64 / 1e6);
        let _ = writeln!(s, "{:<12} {:>14}  ({:.3}G)", "flops_static", self.flops_static, self.flops_static as f64 / 1e9);
        for &(g, f) in &self.flops_dynamic {
            let _ = writeln!(s, "flops G={g:<5} {f:>14}  ({:.3}G)", f as f64 / 1e9);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
