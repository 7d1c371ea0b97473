//! Full super-resolution network: shallow conv extractor, shared global
//! condition, grouped mixer+FFN blocks with post-norm residuals and group
//! tails, and pixel-shuffle reconstruction. Includes the checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use crate::mixer::{self, CAMixerConfig, CAMixerParams, RouteSpec};
use crate::predictor::{self, GlobalPredictorParams, PredictorToggles};
use crate::tensor::{macs, Real, Result, Rng, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAMX0001";

fn default_channels() -> usize {
    60
}
fn default_window() -> usize {
    16
}
fn default_groups() -> Vec<usize> {
    vec![4, 4, 6, 6]
}
fn default_scale() -> usize {
    4
}
fn default_offset_range() -> f64 {
    8.0
}
fn default_rho() -> f64 {
    0.125
}
fn default_gamma_target() -> f64 {
    0.5
}
fn default_ffn_expansion() -> usize {
    2
}
fn default_heads() -> usize {
    1
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_groups")]
    pub groups: Vec<usize>,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_offset_range")]
    pub offset_range: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_gamma_target")]
    pub gamma_target: f64,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub toggles: PredictorToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl ModelConfig {
    pub fn blocks(&self) -> usize {
        self.groups.iter().sum()
    }

    /// Reduced predictor width rho*C, at least 1.
    pub fn hidden(&self) -> usize {
        ((self.channels as f64 * self.rho).round() as usize).max(1)
    }

    pub fn mixer_config(&self) -> CAMixerConfig {
        CAMixerConfig {
            channels: self.channels,
            window: self.window,
            heads: self.heads,
            offset_range: self.offset_range,
            hidden: self.hidden(),
            temperature: self.temperature,
            toggles: self.toggles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(TensorError::Dimension(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.channels == 0 || self.window == 0 || self.groups.is_empty() || self.blocks() == 0 {
            return Err(TensorError::Dimension("channels, window, and groups must be nonzero".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(TensorError::Dimension(format!(
                "{} channels not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma_target) {
            return Err(TensorError::Dimension(format!(
                "gamma target {} outside [0,1]",
                self.gamma_target
            )));
        }
        Ok(())
    }
}

pub struct BlockParams<T: Real> {
    pub mixer: CAMixerParams<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
}

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub shallow_w: Tensor<T>,
    pub shallow_b: Tensor<T>,
    pub global: GlobalPredictorParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub tails: Vec<(Tensor<T>, Tensor<T>)>,
    pub recon_w: Tensor<T>,
    pub recon_b: Tensor<T>,
}

/// Routing policy for one forward pass.
pub enum ForwardMode<'a> {
    Train { rng: &'a mut Rng },
    InferTopk { gamma_target: f64 },
    InferThreshold,
    /// Deterministic soft-mask blend of both branches in every window (the
    /// sampling-free continuous relaxation); used for smooth loss probes.
    EvalSoft,
}

pub struct ForwardOutput<T: Real> {
    pub sr: Tensor<T>,
    /// Per-block realized attention ratios (traced in training mode).
    pub gammas: Vec<Tensor<T>>,
    /// Per-block routing decisions, for mask dumps and statistics.
    pub plans: Vec<mixer::RoutingPlan>,
    /// Window-grid dims of the padded features, (rows, cols).
    pub window_grid: (usize, usize),
}

impl<T: Real> Model<T> {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let tn = |shape: &[usize], rng: &mut Rng| {
            Tensor::param(shape, Tensor::<T>::trunc_normal(shape, 0.02, rng).to_vec()).unwrap()
        };
        let zeros = |shape: &[usize]| Tensor::param(shape, vec![T::zero(); shape.iter().product()]).unwrap();
        let ones = |shape: &[usize]| Tensor::param(shape, vec![T::one(); shape.iter().product()]).unwrap();
        let mcfg = cfg.mixer_config();
        let e = cfg.ffn_expansion;
        let blocks = (0..cfg.blocks())
            .map(|i| {
                let mut brng = rng.fork(100 + i as u64);
                BlockParams {
                    mixer: CAMixerParams::init(&mcfg, &mut brng),
                    ln1_g: ones(&[c]),
                    ln1_b: zeros(&[c]),
                    ffn_w1: tn(&[e * c, c, 1, 1], &mut brng),
                    ffn_b1: zeros(&[e * c]),
                    ffn_w2: tn(&[c, e * c, 1, 1], &mut brng),
                    ffn_b2: zeros(&[c]),
                    ln2_g: ones(&[c]),
                    ln2_b: zeros(&[c]),
                }
            })
            .collect();
        let tails = (0..cfg.groups.len())
            .map(|i| {
                let mut trng = rng.fork(1000 + i as u64);
                (tn(&[c, c, 3, 3], &mut trng), zeros(&[c]))
            })
            .collect();
        let s2 = cfg.scale * cfg.scale;
        Ok(Model {
            // Fan-in-scaled: the shallow features feed both the global
            // condition and every block's predictor, so they must carry the
            // input at a usable magnitude from the start.
            shallow_w: {
                let sigma = (2.0 / 27.0f64).sqrt();
                Tensor::param(&[c, 3, 3, 3], Tensor::<T>::trunc_normal(&[c, 3, 3, 3], sigma, rng).to_vec())
                    .unwrap()
            },
            shallow_b: zeros(&[c]),
            global: GlobalPredictorParams::init(c, cfg.hidden(), &mut rng.fork(2)),
            blocks,
            tails,
            recon_w: tn(&[3 * s2, c, 3, 3], &mut rng.fork(3)),
            recon_b: zeros(&[3 * s2]),
            cfg,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("shallow_w".to_string(), self.shallow_w.clone()),
            ("shallow_b".to_string(), self.shallow_b.clone()),
        ];
        out.extend(self.global.named("global"));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            out.extend(b.mixer.named(&format!("{p}.mixer")));
            out.extend(
                [
                    ("ln1_g", &b.ln1_g),
                    ("ln1_b", &b.ln1_b),
                    ("ffn_w1", &b.ffn_w1),
                    ("ffn_b1", &b.ffn_b1),
                    ("ffn_w2", &b.ffn_w2),
                    ("ffn_b2", &b.ffn_b2),
                    ("ln2_g", &b.ln2_g),
                    ("ln2_b", &b.ln2_b),
                ]
                .into_iter()
                .map(|(n, t)| (format!("{p}.{n}"), t.clone())),
            );
        }
        for (i, (w, b)) in self.tails.iter().enumerate() {
            out.push((format!("tail{i}_w"), w.clone()));
            out.push((format!("tail{i}_b"), b.clone()));
        }
        out.push(("recon_w".to_string(), self.recon_w.clone()));
        out.push(("recon_b".to_string(), self.recon_b.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: &mut ForwardMode) -> Result<ForwardOutput<T>> {
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(TensorError::Dimension(format!("model expects [B,3,H,W], got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let m = self.cfg.window;
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let x_pad = if (ph, pw) == (h, w) {
            x.clone()
        } else {
            x.pad_reflect(0, ph - h, 0, pw - w)?
        };
        let f0 = macs::scope("shallow", || x_pad.conv2d(&self.shallow_w, Some(&self.shallow_b), 1, 1, 1))?;
        let c_g = macs::scope("global", || predictor::global_predictor(&f0, &self.global))?;
        let mcfg = self.cfg.mixer_config();
        let eps = 1e-6;
        let mut f = f0.clone();
        let mut gammas = Vec::with_capacity(self.cfg.blocks());
        let mut plans = Vec::with_capacity(self.cfg.blocks());
        let mut block_iter = self.blocks.iter();
        for (gi, &gsize) in self.cfg.groups.iter().enumerate() {
            let group_in = f.clone();
            for _ in 0..gsize {
                let b = block_iter.next().expect("block count matches groups");
                let mut spec = match mode {
                    ForwardMode::Train { rng } => RouteSpec::Train { rng: &mut **rng },
                    ForwardMode::InferTopk { gamma_target } => RouteSpec::TopK { gamma_target: *gamma_target },
                    ForwardMode::InferThreshold => RouteSpec::Threshold,
                    ForwardMode::EvalSoft => RouteSpec::Soft,
                };
                let mixed = macs::scope("mixer", || mixer::camixer_forward(&f, &c_g, &b.mixer, &mcfg, &mut spec))?;
                gammas.push(mixed.gamma);
                plans.push(mixed.plan);
                f = mixed.out.add(&f)?.layer_norm(&b.ln1_g, &b.ln1_b, eps, 1)?;
                let ff = macs::scope("ffn", || ffn(&f, &b.ffn_w1, &b.ffn_b1, &b.ffn_w2, &b.ffn_b2))?;
                f = ff.add(&f)?.layer_norm(&b.ln2_g, &b.ln2_b, eps, 1)?;
            }
            let (tw, tb) = &self.tails[gi];
            f = macs::scope("tail", || f.conv2d(tw, Some(tb), 1, 1, 1))?.add(&group_in)?;
        }
        let f = f.add(&f0)?;
        let recon = macs::scope("recon", || f.conv2d(&self.recon_w, Some(&self.recon_b), 1, 1, 1))?;
        let sr = recon.pixel_shuffle(self.cfg.scale)?;
        let s = self.cfg.scale;
        let sr = if (ph, pw) == (h, w) {
            sr
        } else {
            sr.crop(0, 0, s * h, s * w)?
        };
        Ok(ForwardOutput { sr, gammas, plans, window_grid: (ph / m, pw / m) })
    }
}

/// Convolutional feed-forward: 1x1 expand, GELU, 1x1 contract.
pub fn ffn<T: Real>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.conv2d(w1, Some(b1), 1, 0, 1)?.gelu().conv2d(w2, Some(b2), 1, 0, 1)
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic (expected CAMX0001)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("invalid embedded config: {0}")]
    BadConfig(String),
    #[error("unknown parameter '{0}' in checkpoint")]
    UnknownParam(String),
    #[error("parameter '{name}' holds {stored} values but the model expects {expected}")]
    ShapeMismatch { name: String, stored: usize, expected: usize },
    #[error("checkpoint missing parameter '{0}'")]
    MissingParam(String),
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> std::result::Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg_json = serde_json::to_vec(&model.cfg).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.numel() as u32).to_le_bytes());
        for v in t.to_f64_vec() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> std::result::Result<Model<T>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    load_checkpoint_bytes(&bytes)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
    if *pos + n > bytes.len() {
        return Err(CheckpointError::Truncated(what.to_string()));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn take_u32(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, CheckpointError> {
    let b = take(bytes, pos, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
}

pub fn load_checkpoint_bytes<T: Real>(bytes: &[u8]) -> std::result::Result<Model<T>, CheckpointError> {
    let mut pos = 0usize;
    let magic = take(bytes, &mut pos, 8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let cfg_len = take_u32(bytes, &mut pos, "config length")?;
    let cfg_bytes = take(bytes, &mut pos, cfg_len, "config blob")?;
    let cfg: ModelConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let model =
        Model::<T>::init(cfg, &mut Rng::new(0)).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let expected: std::collections::BTreeMap<String, Tensor<T>> = model.params().into_iter().collect();
    let n_params = take_u32(bytes, &mut pos, "parameter count")?;
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..n_params {
        let name_len = take_u32(bytes, &mut pos, "parameter name length")?;
        let name = String::from_utf8(take(bytes, &mut pos, name_len, "parameter name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("parameter name".into()))?;
        let count = take_u32(bytes, &mut pos, "parameter value count")?;
        let raw = take(bytes, &mut pos, count * 4, &format!("values of '{name}'"))?;
        let target = expected
            .get(&name)
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        if target.numel() != count {
            return Err(CheckpointError::ShapeMismatch {
                name,
                stored: count,
                expected: target.numel(),
            });
        }
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        target.set_data(data).expect("length checked");
        seen.insert(name);
    }
    for name in expected.keys() {
        if !seen.contains(name) {
            return Err(CheckpointError::MissingParam(name.clone()));
        }
    }
    Ok(model)
}

#[cfg(test)]
pub(crate) fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        window: 4,
        groups: vec![1, 1],
        scale: 2,
        offset_range: 2.0,
        rho: 0.25,
        gamma_target: 0.5,
        ffn_expansion: 2,
        heads: 1,
        temperature: 1.0,
        toggles: crate::predictor::PredictorToggles::default(),
    }
}
