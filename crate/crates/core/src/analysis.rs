//! Static FLOPs and parameter accounting from configuration alone.
//!
//! Convention: one multiply-accumulate counts as one FLOP; residual additions,
//! normalization, pooling and softmax are free.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BlockKind, Branch, NUM_STAGES};
use crate::bicnet::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-frame average over a segment, in GFLOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCost {
    pub alpha: usize,
    /// Backbone cost of one big frame (the single-branch baseline).
    pub baseline: f64,
    /// Backbone cost of one small frame.
    pub small: f64,
    /// `(baseline + alpha * small) / (1 + alpha)`.
    pub backbone_avg: f64,
    pub csp: f64,
    pub dao: f64,
    pub tks: f64,
    pub total: f64,
    pub cost_fraction: f64,
    /// `backbone_avg / baseline`.
    pub measured_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub resolution: Option<[usize; 2]>,
    pub layers: Vec<LayerCost>,
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub gflops: f64,
    pub params_millions: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_flops_per_frame: Option<FrameCost>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_fraction_vs_baseline: Option<f64>,
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>, resolution: Option<[usize; 2]>) -> Self {
        let mut modules: Vec<ModuleCost> = Vec::new();
        for l in &layers {
            match modules.iter_mut().find(|m| m.name == l.module) {
                Some(m) => {
                    m.params += l.params;
                    m.macs += l.macs;
                }
                None => modules.push(ModuleCost {
                    name: l.module.clone(),
                    params: l.params,
                    macs: l.macs,
                }),
            }
        }
        let total_params = layers.iter().map(|l| l.params).sum();
        let total_macs = layers.iter().map(|l| l.macs).sum();
        Self {
            resolution,
            layers,
            modules,
            total_params,
            total_macs,
            gflops: total_macs as f64 / 1e9,
            params_millions: total_params as f64 / 1e6,
            avg_flops_per_frame: None,
            cost_fraction_vs_baseline: None,
        }
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.modules.iter().find(|m| m.name == name)
    }
}

fn conv(name: String, module: &str, k: usize, cin: usize, cout: usize, out_hw: Option<(usize, usize)>) -> LayerCost {
    let params = (k * k * cin * cout) as u64;
    LayerCost {
        name,
        module: module.to_string(),
        params,
        macs: out_hw.map_or(0, |(h, w)| params * (h * w) as u64),
    }
}

fn norm(name: String, module: &str, c: usize) -> LayerCost {
    LayerCost {
        name,
        module: module.to_string(),
        params: 2 * c as u64,
        macs: 0,
    }
}

fn conv_out(x: usize, k: usize, stride: usize) -> usize {
    (x + 2 * (k / 2) - k) / stride + 1
}

/// Every backbone layer, with MACs when a resolution is given.
pub fn backbone_layers(cfg: &BackboneConfig, resolution: Option<[usize; 2]>) -> Vec<LayerCost> {
    let mut out = Vec::new();
    let mut hw = resolution.map(|[h, w]| (h, w));
    let st = &cfg.stem;
    hw = hw.map(|(h, w)| (conv_out(h, st.kernel, st.stride), conv_out(w, st.kernel, st.stride)));
    out.push(conv("stem.conv".into(), "stem", st.kernel, cfg.in_channels, st.out_channels, hw));
    out.push(norm("stem.bn".into(), "stem", st.out_channels));
    if st.pooling {
        hw = hw.map(|(h, w)| ((h - 1) / 2 + 1, (w - 1) / 2 + 1));
    }
    let mut cin = st.out_channels;
    for s in 1..=NUM_STAGES {
        let module = format!("stage{s}");
        let spec = cfg.stages[s - 1];
        let stage_stride = if s == NUM_STAGES && cfg.last_downsample_removed { 1 } else { spec.stride };
        for b in 0..spec.blocks {
            let stride = if b == 0 { stage_stride } else { 1 };
            let cout = spec.out_channels;
            let in_hw = hw;
            let out_hw = in_hw.map(|(h, w)| ((h - 1) / stride + 1, (w - 1) / stride + 1));
            let p = format!("{module}.block{b}");
            match cfg.block_kind {
                BlockKind::Basic => {
                    out.push(conv(format!("{p}.conv1"), &module, 3, cin, cout, out_hw));
                    out.push(norm(format!("{p}.bn1"), &module, cout));
                    out.push(conv(format!("{p}.conv2"), &module, 3, cout, cout, out_hw));
                    out.push(norm(format!("{p}.bn2"), &module, cout));
                }
                BlockKind::Bottleneck => {
                    let width = cout / 4;
                    out.push(conv(format!("{p}.conv1"), &module, 1, cin, width, in_hw));
                    out.push(norm(format!("{p}.bn1"), &module, width));
                    out.push(conv(format!("{p}.conv2"), &module, 3, width, width, out_hw));
                    out.push(norm(format!("{p}.bn2"), &module, width));
                    out.push(conv(format!("{p}.conv3"), &module, 1, width, cout, out_hw));
                    out.push(norm(format!("{p}.bn3"), &module, cout));
                }
            }
            if stride != 1 || cin != cout {
                out.push(conv(format!("{p}.down"), &module, 1, cin, cout, out_hw));
                out.push(norm(format!("{p}.down_bn"), &module, cout));
            }
            hw = out_hw;
            cin = cout;
        }
    }
    out
}

/// Per-frame backbone MACs at `resolution`.
pub fn count_flops(cfg: &BackboneConfig, resolution: [usize; 2]) -> CostReport {
    CostReport::from_layers(backbone_layers(cfg, Some(resolution)), Some(resolution))
}

fn model_extra_layers(cfg: &ModelConfig) -> Vec<LayerCost> {
    let mut out = Vec::new();
    for &s in &cfg.csp_stages {
        let c = cfg.backbone.stage_channels(s);
        out.push(conv(format!("csp.stage{s}"), "csp", 1, c, cfg.alpha * c, None));
    }
    if cfg.dao.enabled {
        let s = cfg.dao.stage;
        let c = cfg.backbone.stage_channels(s);
        for (branch, frames) in [(Branch::Detail, cfg.big_frames()), (Branch::Context, cfg.small_frames())] {
            let (h, w) = cfg.stage_size(branch, s);
            let hw = (h * w) as u64;
            for k in 2..=frames {
                out.push(LayerCost {
                    name: format!("dao.{}.frame{k}", branch.name()),
                    module: "dao".into(),
                    params: c as u64 + hw * hw + hw,
                    macs: 0,
                });
            }
        }
    }
    for &s in cfg.tks.active_stages() {
        let c = cfg.backbone.stage_channels(s) as u64;
        let k = cfg.tks.k as u64;
        out.push(LayerCost {
            name: format!("tks.stage{s}.paths"),
            module: "tks".into(),
            params: k * c * c * 3,
            macs: 0,
        });
        out.push(LayerCost {
            name: format!("tks.stage{s}.select"),
            module: "tks".into(),
            params: k * c * c,
            macs: 0,
        });
    }
    out
}

/// Learnable parameters of the whole model (classifier excluded).
pub fn count_params(cfg: &ModelConfig) -> CostReport {
    let mut layers: Vec<LayerCost> = backbone_layers(&cfg.backbone, None)
        .into_iter()
        .map(|mut l| {
            l.module = "backbone".into();
            l
        })
        .collect();
    layers.extend(model_extra_layers(cfg));
    CostReport::from_layers(layers, None)
}

/// Fraction of the single-branch cost retained: `(4 + alpha) / (4 (1 + alpha))`.
pub fn cost_fraction(alpha: usize) -> f64 {
    let a = alpha as f64;
    (4.0 + a) / (4.0 * (1.0 + a))
}

/// Average per-frame cost of a segment, overheads itemized.
pub fn avg_flops_per_frame(cfg: &ModelConfig) -> FrameCost {
    let g = |m: u64| m as f64 / 1e9;
    let big = count_flops(&cfg.backbone, cfg.big_res).total_macs;
    let small = count_flops(&cfg.backbone, cfg.small_res()).total_macs;
    let a = cfg.alpha as u64;
    let n = cfg.segment_len as f64;
    let (m, am) = (cfg.big_frames() as u64, cfg.small_frames() as u64);

    let mut csp = 0u64;
    for &s in &cfg.csp_stages {
        let c = cfg.backbone.stage_channels(s) as u64;
        let (h, w) = cfg.stage_size(Branch::Detail, s);
        csp += m * c * a * c * (h as u64 / 2) * (w as u64 / 2);
    }
    let mut dao = 0u64;
    if cfg.dao.enabled {
        let s = cfg.dao.stage;
        let c = cfg.backbone.stage_channels(s) as u64;
        for (branch, frames) in [(Branch::Detail, m), (Branch::Context, am)] {
            let (h, w) = cfg.stage_size(branch, s);
            let hw = (h * w) as u64;
            dao += frames.saturating_sub(1) * (c * hw + hw * hw);
        }
    }
    let mut tks = 0u64;
    for &s in cfg.tks.active_stages() {
        let c = cfg.backbone.stage_channels(s) as u64;
        let k = cfg.tks.k as u64;
        let cells = (cfg.tks.grid_h * cfg.tks.grid_w) as u64;
        tks += (m + am) * k * 3 * c * c * cells;
        if !cfg.tks.fixed_fusion {
            tks += 2 * k * c * c;
        }
    }
    let backbone_avg = (big + a * small) as f64 / (1 + a) as f64;
    let total = (backbone_avg + (csp + dao + tks) as f64 / n) / 1e9;
    FrameCost {
        alpha: cfg.alpha,
        baseline: g(big),
        small: g(small),
        backbone_avg: backbone_avg / 1e9,
        csp: csp as f64 / n / 1e9,
        dao: dao as f64 / n / 1e9,
        tks: tks as f64 / n / 1e9,
        total,
        cost_fraction: cost_fraction(cfg.alpha),
        measured_fraction: backbone_avg / big as f64,
    }
}

/// Model-level report: parameters plus the per-frame cost of a segment.
pub fn model_report(cfg: &ModelConfig) -> CostReport {
    let mut report = count_params(cfg);
    let frame = avg_flops_per_frame(cfg);
    report.resolution = Some(cfg.big_res);
    report.cost_fraction_vs_baseline = Some(frame.total / frame.baseline);
    report.avg_flops_per_frame = Some(frame);
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub gflops: f64,
    pub params_millions: f64,
}

/// Cumulative rows from the single-branch baselines up to the full model.
pub fn cost_table(cfg: &ModelConfig) -> Vec<TableRow> {
    let params = count_params(cfg);
    let p = |name: &str| params.module(name).map_or(0, |m| m.params) as f64 / 1e6;
    let frame = avg_flops_per_frame(cfg);
    let [h, w] = cfg.big_res;
    let [sh, sw] = cfg.small_res();
    let base = p("backbone");
    let mut rows = vec![
        TableRow { model: format!("single branch {h}x{w}"), gflops: frame.baseline, params_millions: base },
        TableRow { model: format!("single branch {sh}x{sw}"), gflops: frame.small, params_millions: base },
        TableRow {
            model: format!("two branches (alpha={})", cfg.alpha),
            gflops: frame.backbone_avg,
            params_millions: base,
        },
    ];
    let mut g = frame.backbone_avg;
    let mut par = base;
    for (label, module, cost) in [("+ csp", "csp", frame.csp), ("+ dao", "dao", frame.dao), ("+ tks", "tks", frame.tks)] {
        if params.module(module).is_some() {
            g += cost;
            par += p(module);
            rows.push(TableRow { model: label.into(), gflops: g, params_millions: par });
        }
    }
    rows
}

pub fn format_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let prec = if rows.iter().all(|r| r.gflops < 0.1) { 4 } else { 2 };
    let mut s = format!("{:<width$}  {:>8}  {:>8}\n", "model", "GFLOPs", "Param(M)");
    s.push_str(&format!("{}\n", "-".repeat(width + 20)));
    for r in rows {
        s.push_str(&format!("{:<width$}  {:>8.prec$}  {:>8.2}\n", r.model, r.gflops, r.params_millions));
    }
    s
}
