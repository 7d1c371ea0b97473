//! Content-aware mixer: windows are routed either to windowed self-attention
//! (hard) or to a lightweight attention-weighted pass-through (simple), with a
//! shared convolutional refinement on the merged result.
//!
//! Training uses a straight-through gumbel mask and computes attention over
//! all windows with masked values; inference gathers only the hard windows.
//! Both paths produce the same values for the same binary decision.

use crate::predictor::{self, Conditions, PredictorConfig, PredictorParams, PredictorToggles};
use crate::tensor::{macs, Real, Result, Rng, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteMode {
    TrainSoft,
    InferTopk,
    InferThreshold,
    /// Deterministic continuous relaxation: every window blends both
    /// branches with softmax weights, no sampling and no hard cut. Used to
    /// probe the loss surface smoothly (hard routing makes the loss jump
    /// whenever a window crosses the selection boundary).
    EvalSoft,
}

/// Which windows went where, and the realized attention ratio.
#[derive(Debug, Clone)]
pub struct RoutingPlan {
    pub hard_idx: Vec<usize>,
    pub simple_idx: Vec<usize>,
    pub k: usize,
    pub gamma_actual: f64,
    pub mode: RouteMode,
    /// Per-window attention-minus-simple logit, for routing diagnostics.
    pub logit_diff: Vec<f64>,
}

/// How to decide the routing for one forward pass.
pub enum RouteSpec<'a> {
    /// Straight-through gumbel sampling (training).
    Train { rng: &'a mut Rng },
    /// Top-K windows by logit difference, K = round(gamma_target * N).
    TopK { gamma_target: f64 },
    /// All windows whose attention-class probability exceeds 0.5.
    Threshold,
    /// Externally fixed binary decision (index i hard iff hard[i]).
    Fixed { hard: Vec<bool>, as_training: bool },
    /// Noise-free softmax mask: the continuous relaxation the training
    /// gradients see, evaluated deterministically.
    Soft,
}

/// Routing decision plus, on the training path, the straight-through mask
/// tensor `[N,2]` the forward must multiply with.
pub fn route<T: Real>(
    mask_logits: &Tensor<T>,
    spec: &mut RouteSpec,
    temperature: f64,
) -> Result<(RoutingPlan, Option<Tensor<T>>)> {
    let shape = mask_logits.shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(TensorError::Dimension(format!("route expects [N,2] logits, got {shape:?}")));
    }
    let n = shape[0];
    let logit_diff: Vec<f64> = {
        let lv = mask_logits.to_f64_vec();
        (0..n).map(|i| lv[2 * i] - lv[2 * i + 1]).collect()
    };
    match spec {
        RouteSpec::Train { rng } => {
            let mask = mask_logits.gumbel_softmax(temperature, rng, true)?;
            let mv = mask.to_f64_vec();
            let hard_idx: Vec<usize> = (0..n).filter(|&i| mv[2 * i] == 1.0).collect();
            let simple_idx: Vec<usize> = (0..n).filter(|&i| mv[2 * i] != 1.0).collect();
            let k = hard_idx.len();
            Ok((
                RoutingPlan {
                    hard_idx,
                    simple_idx,
                    k,
                    gamma_actual: k as f64 / n as f64,
                    mode: RouteMode::TrainSoft,
                    logit_diff,
                },
                Some(mask),
            ))
        }
        RouteSpec::TopK { gamma_target } => {
            if !(0.0..=1.0).contains(gamma_target) {
                return Err(TensorError::Dimension(format!("gamma target {gamma_target} outside [0,1]")));
            }
            let lv = mask_logits.to_f64_vec();
            let k = (*gamma_target * n as f64).round() as usize;
            let k = k.min(n);
            let mut order: Vec<usize> = (0..n).collect();
            // descending logit difference, ties broken by lower window index
            order.sort_by(|&a, &b| {
                let da = lv[2 * a] - lv[2 * a + 1];
                let db = lv[2 * b] - lv[2 * b + 1];
                db.partial_cmp(&da).unwrap().then(a.cmp(&b))
            });
            let mut hard_idx: Vec<usize> = order[..k].to_vec();
            hard_idx.sort_unstable();
            let simple_idx: Vec<usize> = (0..n).filter(|i| !hard_idx.contains(i)).collect();
            Ok((
                RoutingPlan {
                    hard_idx,
                    simple_idx,
                    k,
                    gamma_actual: k as f64 / n as f64,
                    mode: RouteMode::InferTopk,
                    logit_diff,
                },
                None,
            ))
        }
        RouteSpec::Threshold => {
            let lv = mask_logits.to_f64_vec();
            let hard_idx: Vec<usize> = (0..n).filter(|&i| lv[2 * i] - lv[2 * i + 1] > 0.0).collect();
            let simple_idx: Vec<usize> = (0..n).filter(|&i| lv[2 * i] - lv[2 * i + 1] <= 0.0).collect();
            let k = hard_idx.len();
            Ok((
                RoutingPlan {
                    hard_idx,
                    simple_idx,
                    k,
                    gamma_actual: k as f64 / n as f64,
                    mode: RouteMode::InferThreshold,
                    logit_diff,
                },
                None,
            ))
        }
        RouteSpec::Soft => {
            let mask = mask_logits.scale(1.0 / temperature).softmax(1)?;
            let mv = mask.to_f64_vec();
            let hard_idx: Vec<usize> = (0..n).filter(|&i| mv[2 * i] > 0.5).collect();
            let simple_idx: Vec<usize> = (0..n).filter(|&i| mv[2 * i] <= 0.5).collect();
            let k = hard_idx.len();
            let gamma_actual = (0..n).map(|i| mv[2 * i]).sum::<f64>() / n as f64;
            Ok((
                RoutingPlan {
                    hard_idx,
                    simple_idx,
                    k,
                    gamma_actual,
                    mode: RouteMode::EvalSoft,
                    logit_diff,
                },
                Some(mask),
            ))
        }
        RouteSpec::Fixed { hard, as_training } => {
            if hard.len() != n {
                return Err(TensorError::Dimension(format!(
                    "fixed routing of {} decisions for {n} windows",
                    hard.len()
                )));
            }
            let hard_idx: Vec<usize> = (0..n).filter(|&i| hard[i]).collect();
            let simple_idx: Vec<usize> = (0..n).filter(|&i| !hard[i]).collect();
            let k = hard_idx.len();
            let mask = if *as_training {
                let mut data = vec![T::zero(); n * 2];
                for (i, &h) in hard.iter().enumerate() {
                    data[2 * i + usize::from(!h)] = T::one();
                }
                Some(Tensor::new(&[n, 2], data)?)
            } else {
                None
            };
            Ok((
                RoutingPlan {
                    hard_idx,
                    simple_idx,
                    k,
                    gamma_actual: k as f64 / n as f64,
                    mode: if *as_training { RouteMode::TrainSoft } else { RouteMode::InferTopk },
                    logit_diff,
                },
                mask,
            ))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CAMixerConfig {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub offset_range: f64,
    /// Hidden width of the predictor (the reduced channel count).
    pub hidden: usize,
    pub temperature: f64,
    pub toggles: PredictorToggles,
}

impl CAMixerConfig {
    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            channels: self.channels,
            hidden: self.hidden,
            window: self.window,
            offset_range: self.offset_range,
            toggles: self.toggles,
        }
    }
}

pub struct CAMixerParams<T: Real> {
    pub value_w: Tensor<T>,
    pub value_b: Tensor<T>,
    /// Token-space projections `[1,C,C]` for queries and keys.
    pub q_w: Tensor<T>,
    pub k_w: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    pub dw1_w: Tensor<T>,
    pub dw1_b: Tensor<T>,
    pub dw2_w: Tensor<T>,
    pub dw2_b: Tensor<T>,
    pub predictor: PredictorParams<T>,
}

impl<T: Real> CAMixerParams<T> {
    pub fn init(cfg: &CAMixerConfig, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let tn = |shape: &[usize], rng: &mut Rng| {
            Tensor::param(shape, Tensor::<T>::trunc_normal(shape, 0.02, rng).to_vec()).unwrap()
        };
        let zeros = |shape: &[usize]| Tensor::param(shape, vec![T::zero(); shape.iter().product()]).unwrap();
        // Queries/keys start as identity plus noise, so each token's largest
        // score is (near) itself and attention begins as a gentle
        // similarity-weighted mix instead of uniform window smoothing. Uniform
        // smoothing at the start blurs detailed windows, which actively
        // penalizes routing them to attention before it has learned anything.
        let qk = |rng: &mut Rng| {
            let mut data = Tensor::<T>::trunc_normal(&[1, c, c], 1.0 / (c as f64).sqrt(), rng).to_vec();
            for i in 0..c {
                data[i * c + i] = data[i * c + i] + T::one();
            }
            Tensor::param(&[1, c, c], data).unwrap()
        };
        CAMixerParams {
            value_w: tn(&[c, c, 1, 1], rng),
            value_b: zeros(&[c]),
            q_w: qk(rng),
            k_w: qk(rng),
            out_w: tn(&[c, c, 1, 1], rng),
            out_b: zeros(&[c]),
            dw1_w: tn(&[c, 1, 3, 3], rng),
            dw1_b: zeros(&[c]),
            dw2_w: tn(&[c, 1, 3, 3], rng),
            dw2_b: zeros(&[c]),
            predictor: PredictorParams::init(&cfg.predictor(), rng),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = [
            ("value_w", &self.value_w),
            ("value_b", &self.value_b),
            ("q_w", &self.q_w),
            ("k_w", &self.k_w),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
            ("dw1_w", &self.dw1_w),
            ("dw1_b", &self.dw1_b),
            ("dw2_w", &self.dw2_w),
            ("dw2_b", &self.dw2_b),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect();
        out.extend(self.predictor.named(&format!("{prefix}.pred")));
        out
    }
}

pub struct MixerOutput<T: Real> {
    pub out: Tensor<T>,
    /// Realized attention ratio; on the training path this is traced through
    /// the straight-through mask so the ratio loss can backpropagate.
    pub gamma: Tensor<T>,
    pub plan: RoutingPlan,
}

/// Per-window self-attention for the hard windows. Queries and keys come from
/// the warped feature windows, values from the unwarped value windows.
pub fn attention_branch<T: Real>(
    q_tokens: &Tensor<T>,
    k_tokens: &Tensor<T>,
    v_tokens: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let c = q_tokens.shape()[2];
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::Dimension(format!("{c} channels not divisible into {heads} heads")));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = q_tokens.slice_last(h * d, d)?;
        let k = k_tokens.slice_last(h * d, d)?;
        let v = v_tokens.slice_last(h * d, d)?;
        let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(scale);
        let attn = scores.softmax(2)?;
        head_outs.push(attn.matmul(&v)?);
    }
    if heads == 1 {
        Ok(head_outs.pop().unwrap())
    } else {
        Tensor::concat(&head_outs, 2)
    }
}

/// Attention-weighted pass-through for the simple windows.
pub fn simple_branch<T: Real>(v_windows: &Tensor<T>, a_s_windows: &Tensor<T>) -> Result<Tensor<T>> {
    v_windows.mul(a_s_windows)
}

/// Full mixer forward. `c_g` is the shared global condition (`[B,2,H,W]`).
pub fn camixer_forward<T: Real>(
    x: &Tensor<T>,
    c_g: &Tensor<T>,
    params: &CAMixerParams<T>,
    cfg: &CAMixerConfig,
    spec: &mut RouteSpec,
) -> Result<MixerOutput<T>> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 || xs[1] != cfg.channels {
        return Err(TensorError::Dimension(format!(
            "mixer expects [B,{},H,W], got {xs:?}",
            cfg.channels
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = cfg.window;
    if h % m != 0 || w % m != 0 {
        return Err(TensorError::Dimension(format!("mixer: dims {h}x{w} not divisible by window {m}")));
    }
    let n = b * (h / m) * (w / m);

    // Eq. 1: value projection
    let v = x.conv2d(&params.value_w, Some(&params.value_b), 1, 0, 1)?;

    // Eq. 2: guidance signals from local/global/window conditions
    let cond = Conditions {
        local: v.clone(),
        global: c_g.clone(),
        window: predictor::build_window_condition(h, w, m)?,
    };
    let pred = predictor::predict(&cond, &params.predictor, &cfg.predictor())?;

    // Eq. 3: deformable warp of the input features
    let x_warp = if cfg.toggles.offsets && cfg.offset_range > 0.0 {
        x.grid_sample_bilinear(&pred.offsets)?
    } else {
        x.clone()
    };

    let logits_flat = pred.mask_logits.reshape(&[n, 2])?;
    let (plan, st_mask) = route(&logits_flat, spec, cfg.temperature)?;

    let v_win = v.window_partition(m)?;
    // Eq. 7 weighting applied in image space, then windowed
    let v_simple_weighted = v.mul(&pred.spatial_attn)?.window_partition(m)?;

    let attn_tokens = if let Some(mask) = st_mask.as_ref() {
        // Training path: attention over all windows with values masked to the
        // hard class; simple windows contribute exactly zero through it.
        let mask_hard = mask.slice_last(0, 1)?.reshape(&[n, 1, 1])?;
        let mask_simple = mask.slice_last(1, 1)?.reshape(&[n, 1, 1])?;
        let x_win = x_warp.window_partition(m)?;
        let (q, k) = macs::scope("attention", || -> Result<_> {
            Ok((x_win.matmul(&params.q_w)?, x_win.matmul(&params.k_w)?))
        })?;
        let v_masked = v_win.mul(&mask_hard)?;
        let attn_all = macs::scope("attention", || attention_branch(&q, &k, &v_masked, cfg.heads))?;
        attn_all.add(&simple_branch(&v_simple_weighted, &mask_simple)?)?
    } else if plan.k == 0 {
        // Pure convolutional token mixer: no attention computation at all.
        v_simple_weighted.clone()
    } else {
        let x_win = x_warp.window_partition(m)?;
        // Queries/keys are a per-token linear map, so projecting before the
        // gather is exact and keeps the projection cost ratio-independent.
        let (q_all, k_all) = macs::scope("attention", || -> Result<_> {
            Ok((x_win.matmul(&params.q_w)?, x_win.matmul(&params.k_w)?))
        })?;
        let q = q_all.gather_windows(&plan.hard_idx)?;
        let k = k_all.gather_windows(&plan.hard_idx)?;
        let v_hard = v_win.gather_windows(&plan.hard_idx)?;
        let hard_out = macs::scope("attention", || attention_branch(&q, &k, &v_hard, cfg.heads))?;
        if plan.simple_idx.is_empty() {
            Tensor::scatter_windows(&[(hard_out, plan.hard_idx.clone())], n)?
        } else {
            let simple_out = v_simple_weighted.gather_windows(&plan.simple_idx)?;
            Tensor::scatter_windows(
                &[(hard_out, plan.hard_idx.clone()), (simple_out, plan.simple_idx.clone())],
                n,
            )?
        }
    };

    // Eq. 8: depthwise refinement gated by channel attention, residual on the
    // mixed values
    let v_attn = attn_tokens.window_merge(m, b, c, h, w)?;
    let conv = v_attn
        .conv2d(&params.dw1_w, Some(&params.dw1_b), 1, 1, c)?
        .gelu()
        .conv2d(&params.dw2_w, Some(&params.dw2_b), 1, 1, c)?;
    let v_conv = conv.mul(&pred.channel_attn)?.add(&v_attn)?;

    // Eq. 9: output projection
    let out = v_conv.conv2d(&params.out_w, Some(&params.out_b), 1, 0, 1)?;

    let gamma = match st_mask {
        Some(mask) => mask.slice_last(0, 1)?.mean()?,
        None => Tensor::scalar(plan.gamma_actual),
    };
    Ok(MixerOutput { out, gamma, plan })
}
