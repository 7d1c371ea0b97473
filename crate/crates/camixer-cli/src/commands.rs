//! Subcommand implementations.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use camixer::imaging::{
    self, bicubic_downsample, make_synthetic_pair, psnr, read_image, rgb_to_luma, ssim, tile_extract, tile_split,
    tile_stitch, write_image, Image, SyntheticKind,
};
use camixer::mixer::RouteMode;
use camixer::model::{load_checkpoint, save_checkpoint, ForwardMode, Model};
use camixer::tensor::{macs, no_grad, Rng, Tensor};
use camixer::train::{run_training_with, TrainError};

use crate::config::{write_manifest, RunConfig};
use crate::CliError;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) => CliError::Numeric(t.to_string()),
            TrainError::Imaging(i) => CliError::Data(i.to_string()),
            TrainError::Io(i) => CliError::Data(i.to_string()),
        }
    }
}

impl From<imaging::ImagingError> for CliError {
    fn from(e: imaging::ImagingError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn mode_for(mode: RouteMode, gamma: f64) -> ForwardMode<'static> {
    match mode {
        RouteMode::InferThreshold => ForwardMode::InferThreshold,
        _ => ForwardMode::InferTopk { gamma_target: gamma },
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// HR patch source: synthetic generator or crops from a directory of images.
enum PatchSource {
    Synthetic(SyntheticKind),
    Pool(Vec<Tensor<f32>>),
}

impl PatchSource {
    fn open(cfg: &RunConfig) -> Result<PatchSource, CliError> {
        let Some(dir) = &cfg.data.dir else {
            return Ok(PatchSource::Synthetic(cfg.data.kind));
        };
        if !dir.is_dir() {
            return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
        }
        let mut pool = Vec::new();
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(data_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        names.sort();
        for p in &names {
            let img = read_image(p)?;
            if img.channels != 3 || img.width < cfg.data.size || img.height < cfg.data.size {
                continue;
            }
            pool.push(img.to_tensor::<f32>());
        }
        if pool.is_empty() {
            return Err(CliError::Data(format!(
                "data directory {} holds no usable PPM images of at least {}x{}",
                dir.display(),
                cfg.data.size,
                cfg.data.size
            )));
        }
        Ok(PatchSource::Pool(pool))
    }

    fn sample(&self, size: usize, scale: usize, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
        match self {
            PatchSource::Synthetic(kind) => Ok(make_synthetic_pair(*kind, size, scale, rng)?),
            PatchSource::Pool(pool) => {
                let img = &pool[rng.below(pool.len())];
                let (h, w) = (img.shape()[2], img.shape()[3]);
                let top = rng.below(h - size + 1);
                let left = rng.below(w - size + 1);
                let hr = img.crop(top, left, size, size)?;
                let lr = bicubic_downsample(&hr, scale)?;
                Ok((lr, hr))
            }
        }
    }
}

pub fn cmd_train(config_path: &Path, out_dir: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", config_path.display())))?;
    let cfg = RunConfig::parse(&text)?;
    let out = out_dir.unwrap_or(&cfg.io.out_dir).to_path_buf();
    let source = PatchSource::open(&cfg)?;
    write_manifest(&out, "train", &text)?;

    let model = Model::<f32>::init(cfg.model.clone(), &mut Rng::new(cfg.train.seed))
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    let scale = cfg.model.scale;
    let size = cfg.data.size;
    let (vl, vh) = make_synthetic_pair::<f32>(cfg.data.kind, size, scale, &mut Rng::new(cfg.data.val_seed))
        .map_err(data_err)?;

    let mut csv = File::create(out.join("metrics.csv")).map_err(data_err)?;
    let stats = run_training_with(
        &model,
        &cfg.train,
        |rng| source.sample(size, scale, rng),
        (&vl, &vh),
        &mut csv,
        |step| {
            save_checkpoint(&model, &out.join(format!("checkpoint_step{step}.camx")))
                .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
            Ok(())
        },
    )?;
    save_checkpoint(&model, &out.join("checkpoint.camx")).map_err(data_err)?;
    println!(
        "trained {} steps; final mean gamma {:.4}; last val psnr {:.2} dB",
        cfg.train.steps,
        stats.final_mean_gamma,
        stats.rows.last().map_or(f64::NAN, |r| r.psnr_val)
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

fn load_model(path: &Path) -> Result<Model<f32>, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn read_rgb_tensor(path: &Path) -> Result<Tensor<f32>, CliError> {
    let img = read_image(path)?;
    if img.channels != 3 {
        return Err(CliError::Data(format!("{} is not a 3-channel PPM image", path.display())));
    }
    Ok(img.to_tensor())
}

/// Forward (optionally tiled); returns SR plus per-block mean realized gamma.
fn run_model(
    model: &Model<f32>,
    lr: &Tensor<f32>,
    mode: RouteMode,
    gamma: f64,
    tile: Option<(usize, usize)>,
) -> Result<(Tensor<f32>, Vec<f64>), CliError> {
    let scale = model.cfg.scale;
    let blocks = model.cfg.blocks();
    let numeric = |e: camixer::tensor::TensorError| CliError::Numeric(e.to_string());
    match tile {
        None => {
            let out = no_grad(|| model.forward(lr, &mut mode_for(mode, gamma))).map_err(numeric)?;
            let gammas = out.plans.iter().map(|p| p.gamma_actual).collect();
            Ok((out.sr, gammas))
        }
        Some((t, overlap)) => {
            let (h, w) = (lr.shape()[2], lr.shape()[3]);
            let plan = tile_split(w, h, t, overlap)?;
            let mut tiles = Vec::new();
            let mut gsum = vec![0.0; blocks];
            for r in &plan.rects {
                let patch = tile_extract(lr, r).map_err(numeric)?;
                let out = no_grad(|| model.forward(&patch, &mut mode_for(mode, gamma))).map_err(numeric)?;
                for (i, p) in out.plans.iter().enumerate() {
                    gsum[i] += p.gamma_actual;
                }
                tiles.push(out.sr);
            }
            let sr = tile_stitch(&tiles, &plan, scale)?;
            let n = plan.rects.len() as f64;
            Ok((sr, gsum.iter().map(|g| g / n).collect()))
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    gamma: Option<f64>,
    mode: RouteMode,
    tile: Option<usize>,
    overlap: usize,
) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let lr = read_rgb_tensor(input)?;
    let gamma = gamma.unwrap_or(model.cfg.gamma_target);
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CliError::Config(format!("gamma {gamma} outside [0,1]")));
    }
    macs::reset();
    let (sr, gammas) = run_model(&model, &lr, mode, gamma, tile.map(|t| (t, overlap)))?;
    let total_macs = macs::total();
    write_image(output, &Image::from_tensor(&sr)?)?;
    for (i, g) in gammas.iter().enumerate() {
        println!("block {i}: realized gamma {g:.4}");
    }
    println!("measured MAdds: {total_macs}");
    println!("wrote {}", output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// mask-dump
// ---------------------------------------------------------------------------

pub fn cmd_mask_dump(
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
    blocks: Option<Vec<usize>>,
    gamma: Option<f64>,
) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let lr = read_rgb_tensor(input)?;
    let gamma = gamma.unwrap_or(model.cfg.gamma_target);
    let n_blocks = model.cfg.blocks();
    let ids: Vec<usize> = blocks.unwrap_or_else(|| (0..n_blocks).collect());
    for &b in &ids {
        if b >= n_blocks {
            return Err(CliError::Config(format!("block id {b} out of range (model has {n_blocks} blocks)")));
        }
    }
    let numeric = |e: camixer::tensor::TensorError| CliError::Numeric(e.to_string());
    let out = no_grad(|| model.forward(&lr, &mut ForwardMode::InferTopk { gamma_target: gamma })).map_err(numeric)?;
    std::fs::create_dir_all(out_dir).map_err(data_err)?;
    let (rows, cols) = out.window_grid;
    let m = model.cfg.window;
    let (h, w) = (lr.shape()[2], lr.shape()[3]);
    for &b in &ids {
        let plan = &out.plans[b];
        let mut hard = vec![false; rows * cols];
        for &i in &plan.hard_idx {
            hard[i] = true;
        }
        // nearest-window fill at full padded resolution, cropped to the input
        let mut data = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let widx = (y / m).min(rows - 1) * cols + (x / m).min(cols - 1);
                data[y * w + x] = if hard[widx] { 255 } else { 0 };
            }
        }
        let img = Image::new(w, h, 1, data)?;
        let path = out_dir.join(format!("mask_block{b}.pgm"));
        write_image(&path, &img)?;
        println!("block {b}: {}/{} attention windows -> {}", plan.k, rows * cols, path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

pub fn cmd_flops(
    config_path: &Path,
    gamma: Option<f64>,
    out_width: usize,
    out_height: usize,
    measure: bool,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let gamma = gamma.unwrap_or_else(|| cfg.gamma());
    let s = cfg.model.scale;
    let (lr_h, lr_w) = (out_height.div_ceil(s), out_width.div_ceil(s));
    let report = camixer::flops::model_report(&cfg.model, gamma, lr_h, lr_w, measure)
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    print!("{}", report.to_table());
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    lr_dir: &Path,
    hr_dir: &Path,
    tile: Option<usize>,
    overlap: usize,
    gamma: Option<f64>,
    mode: RouteMode,
    ws: bool,
    luma: bool,
) -> Result<(), CliError> {
    for d in [lr_dir, hr_dir] {
        if !d.is_dir() {
            return Err(CliError::Data(format!("directory {} does not exist", d.display())));
        }
    }
    let model = checkpoint.map(load_model).transpose()?;
    let mut names: Vec<String> = std::fs::read_dir(hr_dir)
        .map_err(data_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(format!("no PPM images in {}", hr_dir.display())));
    }
    let missing: Vec<&String> = names.iter().filter(|n| !lr_dir.join(n).is_file()).collect();
    if !missing.is_empty() {
        let list = missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(CliError::Data(format!("missing LR files for: {list}")));
    }

    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for name in &names {
        let lr = read_rgb_tensor(&lr_dir.join(name))?;
        let hr = read_rgb_tensor(&hr_dir.join(name))?;
        let sr = match &model {
            None => lr,
            Some(m) => {
                let g = gamma.unwrap_or(m.cfg.gamma_target);
                run_model(m, &lr, mode, g, tile.map(|t| (t, overlap)))?.0
            }
        };
        if sr.shape() != hr.shape() {
            return Err(CliError::Data(format!(
                "{name}: output shape {:?} does not match reference {:?}",
                sr.shape(),
                hr.shape()
            )));
        }
        let (a, b) = if luma { (rgb_to_luma(&sr)?, rgb_to_luma(&hr)?) } else { (sr, hr) };
        let (p, s) = if ws {
            (imaging::ws_psnr(&a, &b, 1.0)?, imaging::ws_ssim(&a, &b, 1.0)?)
        } else {
            (psnr(&a, &b, 1.0)?, ssim(&a, &b, 1.0)?)
        };
        sum_psnr += p;
        sum_ssim += s;
        println!("{name}: psnr {p:.4} dB, ssim {s:.6}");
    }
    let n = names.len() as f64;
    println!("mean: psnr {:.4} dB, ssim {:.6} over {} images", sum_psnr / n, sum_ssim / n, names.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers for tests
// ---------------------------------------------------------------------------

/// Write a synthetic HR image (and its bicubic LR) as PPM files, for smoke
/// tests and demos.
pub fn write_synthetic(
    kind: SyntheticKind,
    size: usize,
    scale: usize,
    seed: u64,
    hr_path: &Path,
    lr_path: Option<&Path>,
) -> Result<(), CliError> {
    let (lr, hr) = make_synthetic_pair::<f32>(kind, size, scale, &mut Rng::new(seed))?;
    write_image(hr_path, &Image::from_tensor(&hr)?)?;
    if let Some(p) = lr_path {
        write_image(p, &Image::from_tensor(&lr)?)?;
    }
    Ok(())
}

pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}
