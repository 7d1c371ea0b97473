//! Analytic multiply-accumulate accounting for the published closed forms and
//! for the assembled model, plus reconciliation against the measured counter.
//!
//! Counts are MAdds (one multiply-accumulate = 1); callers wanting a
//! FLOPs-style figure double them.

use crate::model::{ForwardMode, Model, ModelConfig};
use crate::tensor::{macs, no_grad, Result, Rng, Tensor};

/// Plain convolution cost: k^2 C^2 per pixel.
pub fn flops_conv(c: usize, k: usize, h: usize, w: usize) -> f64 {
    (k * k * c * c) as f64 * (h * w) as f64
}

/// Window multi-head self-attention cost: 4C^2 + 2M^2 C per pixel.
pub fn flops_wmsa(c: usize, m: usize, h: usize, w: usize) -> f64 {
    (4 * c * c + 2 * m * m * c) as f64 * (h * w) as f64
}

/// Published closed form for the content-aware mixer: conv term k^2 C,
/// attention term 2(1+gamma)C^2 + 2 gamma M^2 C, and predictor terms
/// rho C(C+4) + M + 2 rho C + rho k^2 C per pixel plus rho C^2 per image.
pub fn flops_camixer(c: usize, k: usize, m: usize, gamma: f64, rho: f64, h: usize, w: usize) -> f64 {
    let (cf, kf, mf) = (c as f64, (k * k) as f64, (m * m) as f64);
    let per_pixel = kf * cf
        + 2.0 * (1.0 + gamma) * cf * cf
        + 2.0 * gamma * mf * cf
        + rho * cf * (cf + 4.0)
        + m as f64
        + 2.0 * rho * cf
        + rho * kf * cf;
    per_pixel * (h * w) as f64 + rho * cf * cf
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FlopsRow {
    pub name: String,
    pub analytic_flops: f64,
    pub analytic_params: u64,
    /// Measured multiply-accumulates attributed to this component, when an
    /// instrumented forward was run; 0 otherwise.
    pub measured_macs: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    pub total_flops: f64,
    pub total_params: u64,
    pub measured_total: u64,
    pub measured_attention: u64,
    pub gamma_used: f64,
    /// Feature dims the analytic count assumed (after window padding).
    pub feature_hw: (usize, usize),
}

impl FlopsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>16} {:>12} {:>16}\n",
            "layer", "analytic MAdds", "params", "measured MAdds"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>16.0} {:>12} {:>16}\n",
                r.name, r.analytic_flops, r.analytic_params, r.measured_macs
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>16.0} {:>12} {:>16}\n",
            "total", self.total_flops, self.total_params, self.measured_total
        ));
        out.push_str(&format!("gamma = {:.3}, attention measured MAdds = {}\n", self.gamma_used, self.measured_attention));
        out
    }
}

fn count(params: &[(String, Tensor<f32>)], prefix: &str) -> u64 {
    params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

/// Per-layer analytic accounting for the assembled network at LR input
/// `(lr_h, lr_w)`, optionally reconciled against an instrumented forward.
///
/// The attention projections for queries and keys are applied to every window
/// before the routing gather (an exact reformulation, since they are
/// per-token linear maps), so only the score and value-mixing terms scale
/// with gamma.
pub fn model_report(cfg: &ModelConfig, gamma: f64, lr_h: usize, lr_w: usize, measure: bool) -> Result<FlopsReport> {
    cfg.validate()?;
    let m = cfg.window;
    let (h, w) = (lr_h.div_ceil(m) * m, lr_w.div_ceil(m) * m);
    let hw = (h * w) as f64;
    let c = cfg.channels as f64;
    let hid = cfg.hidden() as f64;
    let m2 = (m * m) as f64;
    let s = cfg.blocks() as f64;

    let model = Model::<f32>::init(cfg.clone(), &mut Rng::new(0))?;
    let params = model.params();

    // per-pixel mixer cost (actual architecture)
    let mixer_pp = c * c                                 // value projection
        + 2.0 * c * c                                    // q/k projections, all windows
        + 2.0 * gamma * m2 * c                           // scores and value mixing
        + 2.0 * 9.0 * c                                  // two 3x3 depthwise convs
        + c * c                                          // output projection
        + hid * (c + 4.0)                                // predictor head 1x1
        + 9.0 * hid                                      // predictor head depthwise
        + 2.0 * hid                                      // offset head
        + 9.0 * hid                                      // spatial attention conv
        + hid                                            // mask features (per window hid*M^2)
        + 2.0;                                           // mask logits (per window 2*M^2)
    let mixer_flops = s * (mixer_pp * hw + hid * c);     // + channel attention per image

    let ffn_flops = s * 2.0 * cfg.ffn_expansion as f64 * c * c * hw;
    let shallow_flops = 9.0 * 3.0 * c * hw;
    let global_flops = (9.0 * c * hid + 9.0 * hid * 2.0) * hw;
    let tails_flops = cfg.groups.len() as f64 * 9.0 * c * c * hw;
    let s2 = (cfg.scale * cfg.scale) as f64;
    let recon_flops = 9.0 * c * 3.0 * s2 * hw;

    let mixer_params: u64 = (0..cfg.blocks())
        .map(|i| count(&params, &format!("block{i}.mixer")))
        .sum();
    let ffn_params: u64 = (0..cfg.blocks())
        .map(|i| {
            count(&params, &format!("block{i}.ffn")) + count(&params, &format!("block{i}.ln"))
        })
        .sum();
    let tail_params: u64 = (0..cfg.groups.len()).map(|i| count(&params, &format!("tail{i}"))).sum();

    let (measured, attention_macs) = if measure {
        macs::reset();
        let x = Tensor::<f32>::rand_uniform(&[1, 3, lr_h, lr_w], 0.0, 1.0, &mut Rng::new(1));
        no_grad(|| model.forward(&x, &mut ForwardMode::InferTopk { gamma_target: gamma }))?;
        let snap = macs::snapshot();
        let att = macs::labeled("attention");
        macs::reset();
        (snap, att)
    } else {
        (Default::default(), 0)
    };
    let get = |k: &str| measured.get(k).copied().unwrap_or(0);

    let rows = vec![
        FlopsRow {
            name: "shallow".into(),
            analytic_flops: shallow_flops,
            analytic_params: count(&params, "shallow"),
            measured_macs: get("shallow"),
        },
        FlopsRow {
            name: "global-cond".into(),
            analytic_flops: global_flops,
            analytic_params: count(&params, "global"),
            measured_macs: get("global"),
        },
        FlopsRow {
            name: "mixers".into(),
            analytic_flops: mixer_flops,
            analytic_params: mixer_params,
            measured_macs: get("mixer") + attention_macs,
        },
        FlopsRow {
            name: "ffns".into(),
            analytic_flops: ffn_flops,
            analytic_params: ffn_params,
            measured_macs: get("ffn"),
        },
        FlopsRow {
            name: "tails".into(),
            analytic_flops: tails_flops,
            analytic_params: tail_params,
            measured_macs: get("tail"),
        },
        FlopsRow {
            name: "reconstruction".into(),
            analytic_flops: recon_flops,
            analytic_params: count(&params, "recon"),
            measured_macs: get("recon"),
        },
    ];
    let total_flops = rows.iter().map(|r| r.analytic_flops).sum();
    let total_params = rows.iter().map(|r| r.analytic_params).sum();
    let measured_total = rows.iter().map(|r| r.measured_macs).sum();
    Ok(FlopsReport {
        rows,
        total_flops,
        total_params,
        measured_total,
        measured_attention: attention_macs,
        gamma_used: gamma,
        feature_hw: (h, w),
    })
}
