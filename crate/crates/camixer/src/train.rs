//! Losses, the AdamW optimizer, and the training loop with CSV logging.

use std::collections::HashMap;
use std::io::Write;

use crate::imaging;
use crate::model::{ForwardMode, Model};
use crate::tensor::{Real, Rng, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Imaging(#[from] imaging::ImagingError),
    #[error("io error writing training log: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at step {step} (lr {lr:.3e}): l1 {l1}, ratio {ratio}")]
    NonFinite { step: usize, lr: f64, l1: f64, ratio: f64 },
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean absolute error.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(pred.sub(target)?.abs().mean()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioLossForm {
    /// `(gamma_ref * (1 - (2/S) * sum_i gamma_i))^2` over the S block ratios.
    Literal,
    /// `(mean_i gamma_i - gamma_ref)^2`.
    MeanTarget,
}

/// Ratio regularizer steering the per-block attention ratios toward
/// `gamma_ref`. Both forms vanish when the mean ratio equals the target and
/// grow quadratically away from it.
pub fn ratio_loss<T: Real>(gammas: &[Tensor<T>], gamma_ref: f64, form: RatioLossForm) -> Result<Tensor<T>> {
    if gammas.is_empty() {
        return Err(TensorError::Dimension("ratio loss needs at least one block ratio".into()).into());
    }
    let s = gammas.len() as f64;
    let mut sum = gammas[0].clone();
    for g in &gammas[1..] {
        sum = sum.add(g)?;
    }
    let term = match form {
        RatioLossForm::Literal => sum.scale(-2.0 / s).add_scalar(1.0).scale(gamma_ref),
        RatioLossForm::MeanTarget => sum.scale(1.0 / s).add_scalar(-gamma_ref),
    };
    Ok(term.mul(&term)?)
}

/// L1 with per-row weights (pass `imaging::ws_weights(h)` for the latitude
/// weighting; uniform weights reduce to plain [`l1_loss`]).
pub fn ws_weighted_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, row_weights: &[f64]) -> Result<Tensor<T>> {
    let sh = pred.shape().to_vec();
    if sh.len() != 4 || row_weights.len() != sh[2] {
        return Err(TensorError::Dimension(format!(
            "{} row weights for prediction shape {sh:?}",
            row_weights.len()
        ))
        .into());
    }
    let wsum: f64 = row_weights.iter().sum();
    let per_pixel = wsum * (sh[0] * sh[1] * sh[3]) as f64;
    let w = Tensor::new(&[1, 1, sh[2], 1], row_weights.iter().map(|&v| T::from_f64(v)).collect()).unwrap();
    Ok(pred.sub(target)?.abs().mul(&w)?.sum()?.scale(1.0 / per_pixel))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Decoupled-weight-decay Adam. Moment state is kept per parameter name in
/// f64; decay applies only to multiplicative weights (names ending in `_w`),
/// never to biases, gains, or shifts.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

fn decays(name: &str) -> bool {
    name.ends_with("_w")
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, state: HashMap::new() }
    }

    /// One update over all parameters at learning rate `lr` (the schedule
    /// owns `lr`; `cfg.lr` is only its base value). Parameters without a
    /// gradient are skipped.
    pub fn step<T: Real>(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, p) in params {
            let Some(grad) = p.grad() else { continue };
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut data: Vec<f64> = p.data().iter().map(|x| Real::to_f64(*x)).collect();
            let wd = if decays(name) { self.cfg.weight_decay } else { 0.0 };
            for i in 0..data.len() {
                let g = Real::to_f64(grad[i]);
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * data[i]);
            }
            p.set_data(data.into_iter().map(T::from_f64).collect())?;
        }
        Ok(())
    }
}

/// Cosine-decay schedule with a 5% floor. A step schedule held the full
/// base rate through the middle of the run, where the per-step weight
/// motion was large enough to leave visible bumps in the validation loss;
/// the gradual decay removes those without touching early convergence.
pub fn lr_at(step: usize, total_steps: usize, base: f64) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    base * (0.05 + 0.95 * cos)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// LR patch side fed to the model each step.
    pub patch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub ratio_form: RatioLossForm,
    /// CSV row cadence (also the validation cadence).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            patch_size: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
            ratio_form: RatioLossForm::Literal,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub l1: f64,
    pub ratio_loss: f64,
    pub mean_gamma: f64,
    pub psnr_val: f64,
}

pub const CSV_HEADER: &str = "step,l1,ratio_loss,mean_gamma,psnr_val";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4}",
            self.step, self.l1, self.ratio_loss, self.mean_gamma, self.psnr_val
        )
    }
}

pub struct TrainStats {
    pub rows: Vec<LogRow>,
    /// Reconstruction loss on the fixed validation pair after every
    /// optimizer step (the CSV only samples every `log_every` steps), for
    /// smoothed trend checks. The per-step training loss is dominated by
    /// the difficulty of that step's sampled image, so a run of hard draws
    /// shows up as a bump that no short smoothing window removes; probing
    /// a fixed pair with the soft-mask forward keeps only the optimization
    /// trend in the trace.
    pub l1_trace: Vec<f64>,
    /// Mean per-block attention ratio over the final quarter of the run.
    pub final_mean_gamma: f64,
}

/// One optimization step; returns (l1, ratio loss, mean gamma).
pub fn train_step<T: Real>(
    model: &Model<T>,
    opt: &mut AdamW,
    lr_pair: (&Tensor<T>, &Tensor<T>),
    gamma_ref: f64,
    form: RatioLossForm,
    lr: f64,
    step: usize,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let (lr_img, hr_img) = lr_pair;
    model.zero_grads();
    let out = model.forward(lr_img, &mut ForwardMode::Train { rng })?;
    let l1 = l1_loss(&out.sr, hr_img)?;
    let ratio = ratio_loss(&out.gammas, gamma_ref, form)?;
    let (l1v, rv) = (l1.item(), ratio.item());
    if !l1v.is_finite() || !rv.is_finite() {
        return Err(TrainError::NonFinite { step, lr, l1: l1v, ratio: rv });
    }
    let mean_gamma = out.gammas.iter().map(|g| g.item()).sum::<f64>() / out.gammas.len() as f64;
    let loss = l1.add(&ratio)?;
    loss.backward()?;
    let params = model.params();
    opt.step(&params, lr)?;
    Ok((l1v, rv, mean_gamma))
}

/// Schedule milestone steps (50/80/90/95% of the run) plus the final step,
/// where checkpoints should be snapshotted.
pub fn milestone_steps(total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [0.5, 0.8, 0.9, 0.95]
        .iter()
        .map(|m| ((total as f64 * m) as usize).min(total.saturating_sub(1)))
        .collect();
    out.push(total.saturating_sub(1));
    out.dedup();
    out
}

/// Run training with a caller-supplied pair sampler (LR, HR per step), a
/// fixed validation pair, and a CSV sink. The log is fully determined by the
/// model seed, the training seed, and the sampler.
pub fn run_training<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    sample: impl FnMut(&mut Rng) -> Result<(Tensor<T>, Tensor<T>)>,
    val_pair: (&Tensor<T>, &Tensor<T>),
    sink: &mut dyn Write,
) -> Result<TrainStats> {
    run_training_with(model, cfg, sample, val_pair, sink, |_| Ok(()))
}

/// [`run_training`] with a hook invoked at each milestone step (after the
/// optimizer update), for mid-run checkpointing.
pub fn run_training_with<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    mut sample: impl FnMut(&mut Rng) -> Result<(Tensor<T>, Tensor<T>)>,
    val_pair: (&Tensor<T>, &Tensor<T>),
    sink: &mut dyn Write,
    mut milestone: impl FnMut(usize) -> Result<()>,
) -> Result<TrainStats> {
    let milestones = milestone_steps(cfg.steps);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rng = Rng::new(cfg.seed);
    let mut data_rng = rng.fork(1);
    let gamma_ref = model.cfg.gamma_target;
    let mut rows = Vec::new();
    let mut l1_trace = Vec::with_capacity(cfg.steps);
    let mut gamma_tail = Vec::new();
    writeln!(sink, "{CSV_HEADER}")?;
    for step in 0..cfg.steps {
        let (lr_img, hr_img) = sample(&mut data_rng)?;
        let lr = lr_at(step, cfg.steps, cfg.optimizer.lr);
        let (l1, ratio, mean_gamma) =
            train_step(model, &mut opt, (&lr_img, &hr_img), gamma_ref, cfg.ratio_form, lr, step, &mut rng)?;
        l1_trace.push(monitor_l1(model, val_pair)?);
        if step >= cfg.steps - cfg.steps / 4 {
            gamma_tail.push(mean_gamma);
        }
        if milestones.contains(&step) {
            milestone(step)?;
        }
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let psnr_val = validate(model, val_pair)?;
            let row = LogRow { step, l1, ratio_loss: ratio, mean_gamma, psnr_val };
            writeln!(sink, "{}", row.to_csv())?;
            rows.push(row);
        }
    }
    let final_mean_gamma = if gamma_tail.is_empty() {
        f64::NAN
    } else {
        gamma_tail.iter().sum::<f64>() / gamma_tail.len() as f64
    };
    Ok(TrainStats { rows, l1_trace, final_mean_gamma })
}

/// Reconstruction loss on the fixed validation pair under the deterministic
/// soft-mask forward; feeds the per-step loss trace. Hard routing would make
/// this jump whenever a window crosses the selection boundary, which is
/// routing churn, not training progress.
fn monitor_l1<T: Real>(model: &Model<T>, (lr_img, hr_img): (&Tensor<T>, &Tensor<T>)) -> Result<f64> {
    let out = crate::tensor::no_grad(|| model.forward(lr_img, &mut ForwardMode::EvalSoft))?;
    Ok(l1_loss(&out.sr, hr_img)?.item())
}

/// PSNR of the model's output against the HR reference, using top-K routing
/// at the configured ratio target and no gradient tracing.
pub fn validate<T: Real>(model: &Model<T>, (lr_img, hr_img): (&Tensor<T>, &Tensor<T>)) -> Result<f64> {
    let out = crate::tensor::no_grad(|| {
        model.forward(lr_img, &mut ForwardMode::InferTopk { gamma_target: model.cfg.gamma_target })
    })?;
    Ok(imaging::psnr(&out.sr, hr_img, 1.0)?)
}

/// Moving average with a centered-as-possible trailing window, for loss
/// trend checks.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(window - 1);
            let s: f64 = values[lo..=i].iter().sum();
            s / (i - lo + 1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{make_synthetic_pair, SyntheticKind};
    use crate::model::{toy_config, Model};

    #[test]
    fn l1_zero_for_identical_inputs() {
        let mut rng = Rng::new(1);
        let a = Tensor::<f64>::rand_uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
        assert_eq!(l1_loss(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn l1_known_value() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::full(&[1, 1, 2, 2], 0.5);
        assert!((l1_loss(&a, &b).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ratio_literal_pinned_value() {
        // one block, target 0.5, realized ratio 0: (0.5 * (1 - 0))^2 = 0.25
        let g = Tensor::<f64>::scalar(0.0);
        let l = ratio_loss(&[g], 0.5, RatioLossForm::Literal).unwrap();
        assert!((l.item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ratio_losses_vanish_at_target() {
        let gs = vec![Tensor::<f64>::scalar(0.5), Tensor::<f64>::scalar(0.5)];
        for form in [RatioLossForm::Literal, RatioLossForm::MeanTarget] {
            assert!(ratio_loss(&gs, 0.5, form).unwrap().item() < 1e-15);
        }
    }

    #[test]
    fn ratio_gradient_points_back_toward_target() {
        for (gamma, want_positive) in [(0.7, true), (0.3, false)] {
            for form in [RatioLossForm::Literal, RatioLossForm::MeanTarget] {
                let g = Tensor::<f64>::param(&[], vec![gamma]).unwrap();
                let l = ratio_loss(&[g.clone()], 0.5, form).unwrap();
                l.backward().unwrap();
                let d = Real::to_f64(g.grad().unwrap()[0]);
                assert_eq!(d > 0.0, want_positive, "gamma {gamma} form {form:?} grad {d}");
            }
        }
    }

    #[test]
    fn ws_l1_with_uniform_weights_matches_l1() {
        let mut rng = Rng::new(2);
        let a = Tensor::<f64>::rand_uniform(&[2, 3, 6, 5], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[2, 3, 6, 5], 0.0, 1.0, &mut rng);
        let uniform = vec![1.0; 6];
        let ws = ws_weighted_l1(&a, &b, &uniform).unwrap().item();
        let plain = l1_loss(&a, &b).unwrap().item();
        assert!((ws - plain).abs() < 1e-12);
    }

    #[test]
    fn ws_l1_downweights_pole_rows() {
        // same error magnitude on every row: latitude weighting equals plain
        // l1; error only on the pole row: weighted loss is much smaller.
        let h = 16;
        let a = Tensor::<f64>::zeros(&[1, 1, h, 4]);
        let mut pole = vec![0.0; h * 4];
        pole[..4].iter_mut().for_each(|v| *v = 1.0);
        let b = Tensor::<f64>::new(&[1, 1, h, 4], pole).unwrap();
        let w = imaging::ws_weights(h);
        let weighted = ws_weighted_l1(&a, &b, &w).unwrap().item();
        let plain = l1_loss(&a, &b).unwrap().item();
        assert!(weighted < plain * 0.2, "weighted {weighted}, plain {plain}");
    }

    #[test]
    fn adamw_zero_lr_leaves_params_unchanged() {
        let p = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        p.mul(&p).unwrap().sum().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&[("x_w".to_string(), p.clone())], 0.0).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let p = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        let named = vec![("x".to_string(), p.clone())];
        for _ in 0..300 {
            p.zero_grad();
            let loss = p.mul(&p).unwrap().sum().unwrap();
            loss.backward().unwrap();
            opt.step(&named, cfg.lr).unwrap();
        }
        assert!(Real::to_f64(p.to_vec()[0]).abs() < 1e-2);
    }

    #[test]
    fn weight_decay_only_touches_weight_named_params() {
        let w = Tensor::<f64>::param(&[1], vec![1.0]).unwrap();
        let b = Tensor::<f64>::param(&[1], vec![1.0]).unwrap();
        // zero gradients for both
        w.add(&b).unwrap().sum().unwrap().scale(0.0).backward().unwrap();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        opt.step(
            &[("layer_w".to_string(), w.clone()), ("layer_b".to_string(), b.clone())],
            cfg.lr,
        )
        .unwrap();
        assert!(Real::to_f64(w.to_vec()[0]) < 1.0, "weight should decay");
        assert_eq!(Real::to_f64(b.to_vec()[0]), 1.0, "bias must not decay");
    }

    #[test]
    fn lr_schedule_decays_monotonically_to_floor() {
        let total = 100;
        assert_eq!(lr_at(0, total, 1.0), 1.0);
        let mid = lr_at(50, total, 1.0);
        assert!((mid - 0.525).abs() < 1e-12, "half-way rate {mid}");
        for s in 1..total {
            assert!(lr_at(s, total, 1.0) < lr_at(s - 1, total, 1.0));
        }
        let end = lr_at(total, total, 1.0);
        assert!((end - 0.05).abs() < 1e-12, "floor {end}");
    }

    fn tiny_run(seed: u64, steps: usize) -> (Vec<u8>, TrainStats) {
        let cfg = toy_config();
        let model = Model::<f32>::init(cfg, &mut Rng::new(7)).unwrap();
        let tcfg = TrainConfig {
            steps,
            patch_size: 8,
            seed,
            log_every: 5,
            ..Default::default()
        };
        let scale = model.cfg.scale;
        let size = tcfg.patch_size * scale;
        let (vl, vh) = make_synthetic_pair::<f32>(SyntheticKind::HalfSplit, size, scale, &mut Rng::new(99)).unwrap();
        let mut csv = Vec::new();
        let stats = run_training(
            &model,
            &tcfg,
            |rng| Ok(make_synthetic_pair(SyntheticKind::HalfSplit, size, scale, rng)?),
            (&vl, &vh),
            &mut csv,
        )
        .unwrap();
        (csv, stats)
    }

    #[test]
    fn short_run_decreases_smoothed_l1() {
        let (_, stats) = tiny_run(1, 200);
        let l1s: Vec<f64> = stats.rows.iter().map(|r| r.l1).collect();
        let sm = smooth(&l1s, 8);
        let early = sm[4];
        let late = *sm.last().unwrap();
        assert!(late < early, "smoothed l1 went {early} -> {late}");
    }

    #[test]
    fn training_is_reproducible() {
        let (a, _) = tiny_run(3, 40);
        let (b, _) = tiny_run(3, 40);
        assert_eq!(a, b, "same seeds must give byte-identical logs");
        let (c, _) = tiny_run(4, 40);
        assert_ne!(a, c, "different seeds should diverge");
    }

    #[test]
    fn csv_format_is_pinned() {
        let (csv, _) = tiny_run(5, 10);
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,"), "{first}");
        assert_eq!(first.split(',').count(), 5);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let cfg = toy_config();
        let model = Model::<f32>::init(cfg, &mut Rng::new(7)).unwrap();
        // poison one weight
        let params = model.params();
        let (name, p) = &params[0];
        let mut d = p.to_vec();
        d[0] = f32::NAN;
        p.set_data(d).unwrap();
        assert!(name.ends_with('w') || !name.is_empty());
        let mut rng = Rng::new(0);
        let scale = model.cfg.scale;
        let (lr_img, hr_img) = make_synthetic_pair::<f32>(SyntheticKind::Texture, 8 * scale, scale, &mut rng).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = train_step(
            &model,
            &mut opt,
            (&lr_img, &hr_img),
            0.5,
            RatioLossForm::Literal,
            5e-4,
            42,
            &mut rng,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 42"), "{msg}");
        assert!(msg.contains("non-finite"), "{msg}");
    }
}
