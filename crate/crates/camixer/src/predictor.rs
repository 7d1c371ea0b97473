//! Guidance predictor: from local/global/window conditions, emit the offset
//! field, per-window routing logits, spatial attention, and channel attention.

use crate::tensor::{Real, Result, Rng, Tensor, TensorError};

/// Toggles for the predictor's guidance signals; each can be disabled to
/// ablate its contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorToggles {
    pub offsets: bool,
    pub spatial_attn: bool,
    pub channel_attn: bool,
    pub global_cond: bool,
    pub window_cond: bool,
}

impl Default for PredictorToggles {
    fn default() -> Self {
        PredictorToggles {
            offsets: true,
            spatial_attn: true,
            channel_attn: true,
            global_cond: true,
            window_cond: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PredictorConfig {
    /// Feature channels C of the mixer the predictor serves.
    pub channels: usize,
    /// Hidden width of the shared feature F (the reduced rho*C channels).
    pub hidden: usize,
    /// Window size M.
    pub window: usize,
    /// Offset range scalar r; displacements are bounded by r in each axis.
    pub offset_range: f64,
    pub toggles: PredictorToggles,
}

/// Input conditions: local features (the value tensor), the shared global
/// condition, and the per-window positional ramp.
pub struct Conditions<T: Real> {
    pub local: Tensor<T>,
    pub global: Tensor<T>,
    pub window: Tensor<T>,
}

pub struct PredictorOutputs<T: Real> {
    /// Pixel-unit displacement field, `[B,2,H,W]`, bounded by `offset_range`.
    pub offsets: Tensor<T>,
    /// Per-window routing logits, `[B, HW/M^2, 2]` (column 0 = attention).
    pub mask_logits: Tensor<T>,
    /// `[B,1,H,W]` in (0,1).
    pub spatial_attn: Tensor<T>,
    /// `[B,C,1,1]` in (0,1).
    pub channel_attn: Tensor<T>,
}

pub struct PredictorParams<T: Real> {
    // shared head: 1x1 conv (C+4 -> hidden), GELU, 3x3 depthwise
    pub head_pw_w: Tensor<T>,
    pub head_pw_b: Tensor<T>,
    pub head_dw_w: Tensor<T>,
    pub head_dw_b: Tensor<T>,
    // offset head: 1x1 conv (hidden -> 2), zero-initialized
    pub offset_w: Tensor<T>,
    pub offset_b: Tensor<T>,
    // mask head: window-mean -> linear (hidden -> M^2) -> linear (M^2 -> 2)
    pub mask_feat_w: Tensor<T>,
    pub mask_feat_b: Tensor<T>,
    pub mask_out_w: Tensor<T>,
    pub mask_out_b: Tensor<T>,
    // spatial attention: 3x3 conv (hidden -> 1)
    pub sa_w: Tensor<T>,
    pub sa_b: Tensor<T>,
    // channel attention: linear (hidden -> C) on pooled F
    pub ca_w: Tensor<T>,
    pub ca_b: Tensor<T>,
}

impl<T: Real> PredictorParams<T> {
    pub fn init(cfg: &PredictorConfig, rng: &mut Rng) -> Self {
        let (c, hid, m) = (cfg.channels, cfg.hidden, cfg.window);
        let zeros = |shape: &[usize]| Tensor::param(shape, vec![T::zero(); shape.iter().product()]).unwrap();
        // The guidance heads have no residual path, so they use fan-in-scaled
        // init: with flat 0.02 weights three cascaded layers attenuate the
        // condition signal to ~1e-6, leaving the mask logits buried under the
        // gumbel noise and the routing unable to become content-dependent
        // within a short training run.
        let fi = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let sigma = (2.0 / fan_in as f64).sqrt();
            Tensor::param(shape, Tensor::<T>::trunc_normal(shape, sigma, rng).to_vec()).unwrap()
        };
        PredictorParams {
            // The two global-condition columns (input layout: C local channels,
            // then 2 global, then 2 window) start positive in every hidden
            // channel, so the global detail map reaches the downstream heads
            // with one consistent sign instead of cancelling across channels.
            // The local-condition columns start small: layer-normed block
            // features projected through random signs contribute variance but
            // no consistent content signal, and at full fan-in scale that
            // variance rivals the detail-map gap in the routing logits.
            head_pw_w: {
                let mut v = Tensor::<T>::trunc_normal(&[hid, c + 4, 1, 1], (2.0 / (c + 4) as f64).sqrt(), rng)
                    .to_vec();
                let row = c + 4;
                let damp = T::from_f64(0.2);
                for i in 0..hid {
                    for j in 0..c {
                        v[i * row + j] = v[i * row + j] * damp;
                    }
                    for j in c..c + 2 {
                        v[i * row + j] = v[i * row + j].abs();
                    }
                }
                Tensor::param(&[hid, c + 4, 1, 1], v).unwrap()
            },
            head_pw_b: zeros(&[hid]),
            // Positive depthwise weights keep the GELU-rectified channel means
            // positive, so window energy reaches the mask head with a
            // consistent sign across channels.
            head_dw_w: {
                let v: Vec<T> = Tensor::<T>::trunc_normal(&[hid, 1, 3, 3], (2.0 / 9.0f64).sqrt(), rng)
                    .to_vec()
                    .into_iter()
                    .map(|x| x.abs())
                    .collect();
                Tensor::param(&[hid, 1, 3, 3], v).unwrap()
            },
            head_dw_b: zeros(&[hid]),
            offset_w: zeros(&[2, hid, 1, 1]),
            offset_b: zeros(&[2]),
            // The mask head starts with a detail-seeking prior: positive
            // feature weights and an antisymmetric output layer make the
            // attention-minus-simple logit monotone in window energy at init
            // (busy windows rank first), instead of random-sign mixing that
            // cancels the energy signal. Training is free to reshape it — the
            // ratio loss still controls the mean through the biases — but the
            // routing does not have to rediscover content sensitivity from
            // noise-dominated straight-through gradients.
            mask_feat_w: {
                let v: Vec<T> = Tensor::<T>::trunc_normal(&[1, hid, m * m], (2.0 / hid as f64).sqrt(), rng)
                    .to_vec()
                    .into_iter()
                    .map(|x| x.abs())
                    .collect();
                Tensor::param(&[1, hid, m * m], v).unwrap()
            },
            mask_feat_b: zeros(&[m * m]),
            mask_out_w: {
                let mag: Vec<T> = Tensor::<T>::trunc_normal(&[m * m], (2.0 / (m * m) as f64).sqrt(), rng)
                    .to_vec()
                    .into_iter()
                    .map(|x| x.abs())
                    .collect();
                let mut v = vec![T::zero(); m * m * 2];
                for (j, &g) in mag.iter().enumerate() {
                    v[2 * j] = g;
                    v[2 * j + 1] = T::zero() - g;
                }
                Tensor::param(&[1, m * m, 2], v).unwrap()
            },
            mask_out_b: zeros(&[2]),
            sa_w: fi(&[1, hid, 3, 3], hid * 9, rng),
            // Gate bias starts at -2 (sigmoid ~= 0.12) so the pass-through
            // branch begins as a genuinely cheap, do-little path; windows that
            // need real mixing capacity then benefit from the attention branch
            // immediately, instead of both branches starting out equivalent.
            sa_b: Tensor::param(&[1], vec![T::from_f64(-2.0)]).unwrap(),
            ca_w: fi(&[1, hid, c], hid, rng),
            ca_b: zeros(&[c]),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        [
            ("head_pw_w", &self.head_pw_w),
            ("head_pw_b", &self.head_pw_b),
            ("head_dw_w", &self.head_dw_w),
            ("head_dw_b", &self.head_dw_b),
            ("offset_w", &self.offset_w),
            ("offset_b", &self.offset_b),
            ("mask_feat_w", &self.mask_feat_w),
            ("mask_feat_b", &self.mask_feat_b),
            ("mask_out_w", &self.mask_out_w),
            ("mask_out_b", &self.mask_out_b),
            ("sa_w", &self.sa_w),
            ("sa_b", &self.sa_b),
            ("ca_w", &self.ca_w),
            ("ca_b", &self.ca_b),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

/// Per-window linear positional ramp: channel 0 ramps -1..1 in y across each
/// M-span, channel 1 in x; the pattern tiles with period M.
pub fn build_window_condition<T: Real>(h: usize, w: usize, m: usize) -> Result<Tensor<T>> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(TensorError::Dimension(format!(
            "window condition: dims {h}x{w} not divisible by window {m}"
        )));
    }
    let ramp = |i: usize| {
        if m == 1 {
            -1.0
        } else {
            -1.0 + 2.0 * i as f64 / (m - 1) as f64
        }
    };
    let mut data = vec![T::zero(); 2 * h * w];
    for y in 0..h {
        let vy = T::from_f64(ramp(y % m));
        for x in 0..w {
            data[y * w + x] = vy;
            data[h * w + y * w + x] = T::from_f64(ramp(x % m));
        }
    }
    Tensor::new(&[1, 2, h, w], data)
}

/// The shared-feature head F and the four guidance signals.
pub fn predict<T: Real>(
    cond: &Conditions<T>,
    params: &PredictorParams<T>,
    cfg: &PredictorConfig,
) -> Result<PredictorOutputs<T>> {
    let ls = cond.local.shape().to_vec();
    if ls.len() != 4 || ls[1] != cfg.channels {
        return Err(TensorError::Dimension(format!(
            "predictor: local condition {ls:?} does not carry {} channels",
            cfg.channels
        )));
    }
    let (b, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
    let m = cfg.window;
    if h % m != 0 || w % m != 0 {
        return Err(TensorError::Dimension(format!("predictor: dims {h}x{w} not divisible by window {m}")));
    }
    let hid = cfg.hidden;
    if params.head_pw_w.shape() != [hid, c + 4, 1, 1] {
        return Err(TensorError::Dimension(format!(
            "predictor: head expects {:?}, got {:?}",
            [hid, c + 4, 1, 1],
            params.head_pw_w.shape()
        )));
    }
    let global = if cfg.toggles.global_cond {
        cond.global.clone()
    } else {
        Tensor::zeros(&[b, 2, h, w])
    };
    let window = if cfg.toggles.window_cond {
        cond.window.clone()
    } else {
        Tensor::zeros(&[1, 2, h, w])
    };
    // broadcast the window condition over the batch by explicit concat rows
    let window = if b == 1 {
        window
    } else {
        Tensor::concat(&vec![window; b], 0)?
    };
    let stacked = Tensor::concat(&[cond.local.clone(), global, window], 1)?;
    let f = stacked
        .conv2d(&params.head_pw_w, Some(&params.head_pw_b), 1, 0, 1)?
        .gelu()
        .conv2d(&params.head_dw_w, Some(&params.head_dw_b), 1, 1, hid)?;

    let offsets = if cfg.toggles.offsets && cfg.offset_range > 0.0 {
        f.conv2d(&params.offset_w, Some(&params.offset_b), 1, 0, 1)?
            .tanh_act()
            .scale(cfg.offset_range)
    } else {
        Tensor::zeros(&[b, 2, h, w])
    };

    // routing logits from window-pooled features
    let n = (h / m) * (w / m);
    let pooled = f.window_mean(m)?; // [B, hid, H/M, W/M]
    let rows = pooled.permute(&[0, 2, 3, 1])?.reshape(&[1, b * n, hid])?;
    let feat = rows.matmul(&params.mask_feat_w)?.add(&params.mask_feat_b)?.gelu();
    let mask_logits = feat
        .matmul(&params.mask_out_w)?
        .add(&params.mask_out_b)?
        .reshape(&[b, n, 2])?;

    let spatial_attn = if cfg.toggles.spatial_attn {
        f.conv2d(&params.sa_w, Some(&params.sa_b), 1, 1, 1)?.sigmoid()
    } else {
        Tensor::ones(&[b, 1, h, w])
    };

    let channel_attn = if cfg.toggles.channel_attn {
        f.global_avg_pool()?
            .reshape(&[1, b, hid])?
            .matmul(&params.ca_w)?
            .add(&params.ca_b)?
            .sigmoid()
            .reshape(&[b, c, 1, 1])?
    } else {
        Tensor::ones(&[b, c, 1, 1])
    };

    Ok(PredictorOutputs { offsets, mask_logits, spatial_attn, channel_attn })
}

/// Global condition head shared by every mixer: two 3x3 convolutions
/// (C -> hidden -> 2) with a GELU between.
pub struct GlobalPredictorParams<T: Real> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
}

impl<T: Real> GlobalPredictorParams<T> {
    pub fn init(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        // Fan-in-scaled like the guidance heads: the global condition feeds
        // the routing decision, so it must carry a usable signal at init.
        let fi = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let sigma = (2.0 / fan_in as f64).sqrt();
            Tensor::param(shape, Tensor::<T>::trunc_normal(shape, sigma, rng).to_vec()).unwrap()
        };
        let zeros = |shape: &[usize]| Tensor::param(shape, vec![T::zero(); shape.iter().product()]).unwrap();
        GlobalPredictorParams {
            // Zero-sum first kernels reject brightness: the first conv starts
            // as a bank of high-pass filters, the GELU rectifies, and the
            // positive second conv aggregates — so the condition begins life
            // as a local-detail energy map rather than arbitrary mixing.
            conv1_w: {
                let mut v = fi(&[hidden, channels, 3, 3], channels * 9, rng).to_vec();
                for k in 0..hidden * channels {
                    let s: T = v[k * 9..(k + 1) * 9].iter().fold(T::zero(), |a, &b| a + b);
                    let m = s / T::from_f64(9.0);
                    for t in &mut v[k * 9..(k + 1) * 9] {
                        *t = *t - m;
                    }
                }
                Tensor::param(&[hidden, channels, 3, 3], v).unwrap()
            },
            conv1_b: zeros(&[hidden]),
            conv2_w: {
                let v: Vec<T> = fi(&[2, hidden, 3, 3], hidden * 9, rng).to_vec().into_iter().map(|x| x.abs()).collect();
                Tensor::param(&[2, hidden, 3, 3], v).unwrap()
            },
            conv2_b: zeros(&[2]),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        [
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

pub fn global_predictor<T: Real>(f0: &Tensor<T>, params: &GlobalPredictorParams<T>) -> Result<Tensor<T>> {
    f0.conv2d(&params.conv1_w, Some(&params.conv1_b), 1, 1, 1)?
        .gelu()
        .conv2d(&params.conv2_w, Some(&params.conv2_b), 1, 1, 1)
}
