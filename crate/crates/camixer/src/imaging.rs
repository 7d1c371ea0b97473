//! Image IO (binary PPM/PGM), bicubic degradation, tiled inference with
//! overlap stitching, quality metrics (PSNR/SSIM and latitude-weighted
//! variants), and synthetic training data.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{Real, Rng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("io error reading/writing image: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Parse(String),
    #[error("image shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// 8-bit raster, interleaved samples, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::Shape(format!("{channels} channels unsupported (want 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::Shape(format!(
                "{}x{}x{channels} image needs {} bytes, got {}",
                width,
                height,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    /// `[1,C,H,W]` tensor in [0,1].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![T::zero(); c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[ch * h * w + y * w + x] = T::from_f64(self.data[(y * w + x) * c + ch] as f64 / 255.0);
                }
            }
        }
        Tensor::new(&[1, c, h, w], data).unwrap()
    }

    /// Quantize a `[1,C,H,W]` tensor in [0,1] back to 8 bits (clamped,
    /// rounded to nearest).
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3) {
            return Err(ImagingError::Shape(format!("cannot convert tensor {s:?} to an image")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let v = t.to_f64_vec();
        let mut data = vec![0u8; w * h * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let val = (v[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round();
                    data[(y * w + x) * c + ch] = val as u8;
                }
            }
        }
        Ok(Image { width: w, height: h, channels: c, data })
    }
}

// ---------------------------------------------------------------------------
// PPM (P6) / PGM (P5) IO
// ---------------------------------------------------------------------------

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImagingError::Parse("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let magic = read_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(ImagingError::Parse(format!("unsupported magic '{other}' (want P5 or P6)"))),
    };
    let width: usize = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| ImagingError::Parse("bad width".into()))?;
    let height: usize = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| ImagingError::Parse("bad height".into()))?;
    let maxval: usize = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| ImagingError::Parse("bad maxval".into()))?;
    if maxval != 255 {
        return Err(ImagingError::Parse(format!("unsupported maxval {maxval} (want 255)")));
    }
    // exactly one whitespace byte separates header and payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImagingError::Parse("missing header/payload separator".into()));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(ImagingError::Parse(format!(
            "truncated payload: need {need} bytes, found {}",
            bytes.len() - pos
        )));
    }
    Image::new(width, height, channels, bytes[pos..pos + need].to_vec())
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_image(&bytes)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_image(img))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Bicubic downsampling
// ---------------------------------------------------------------------------

fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// One-axis antialiased bicubic resample by integer factor `s`: the kernel is
/// widened by `s` so the pass band shrinks with the output rate.
fn downsample_axis(src: &[f64], n: usize, s: usize) -> Vec<f64> {
    let out_n = n / s;
    let sf = s as f64;
    let support = 2.0 * sf;
    let mut out = vec![0.0; out_n];
    for (i, o) in out.iter_mut().enumerate() {
        let center = (i as f64 + 0.5) * sf - 0.5;
        let lo = (center - support).floor() as isize;
        let hi = (center + support).ceil() as isize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for j in lo..=hi {
            let wgt = cubic((j as f64 - center) / sf);
            if wgt == 0.0 {
                continue;
            }
            let idx = j.clamp(0, n as isize - 1) as usize;
            acc += wgt * src[idx];
            wsum += wgt;
        }
        *o = acc / wsum;
    }
    out
}

/// Bicubic downsample of `[1,C,H,W]` by integer factor `s` (separable,
/// antialiased, edge-clamped). Dims must be divisible by `s`.
pub fn bicubic_downsample<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(ImagingError::Shape(format!("bicubic expects [B,C,H,W], got {sh:?}")));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if s < 1 || h % s != 0 || w % s != 0 {
        return Err(ImagingError::Shape(format!("dims {h}x{w} not divisible by factor {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    let src = x.to_f64_vec();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        // rows first
        let mut tmp = vec![0.0; h * ow];
        for y in 0..h {
            let row = downsample_axis(&plane[y * w..(y + 1) * w], w, s);
            tmp[y * ow..(y + 1) * ow].copy_from_slice(&row);
        }
        // then columns
        for x_ in 0..ow {
            let col: Vec<f64> = (0..h).map(|y| tmp[y * ow + x_]).collect();
            let dcol = downsample_axis(&col, h, s);
            for (y, v) in dcol.iter().enumerate() {
                out[bc * oh * ow + y * ow + x_] = T::from_f64(*v);
            }
        }
    }
    Ok(Tensor::new(&[b, c, oh, ow], out).unwrap())
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TilePlan {
    pub tile: usize,
    pub overlap: usize,
    pub width: usize,
    pub height: usize,
    pub rects: Vec<TileRect>,
}

fn axis_positions(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut pos = Vec::new();
    let mut p = 0usize;
    loop {
        if p + tile >= n {
            pos.push(n - tile);
            break;
        }
        pos.push(p);
        p += stride;
    }
    pos.dedup();
    pos
}

/// Cover an `height x width` image with `tile`-sized squares overlapping by
/// `overlap`; edge tiles are clamped inward (and shrink to the image when it
/// is smaller than one tile).
pub fn tile_split(width: usize, height: usize, tile: usize, overlap: usize) -> Result<TilePlan> {
    if tile <= 2 * overlap {
        return Err(ImagingError::Shape(format!("tile {tile} must exceed twice the overlap {overlap}")));
    }
    let mut rects = Vec::new();
    for &y in &axis_positions(height, tile, overlap) {
        for &x in &axis_positions(width, tile, overlap) {
            rects.push(TileRect {
                x,
                y,
                w: tile.min(width),
                h: tile.min(height),
            });
        }
    }
    Ok(TilePlan { tile, overlap, width, height, rects })
}

/// Cut one tile out of `[1,C,H,W]`.
pub fn tile_extract<T: Real>(x: &Tensor<T>, rect: &TileRect) -> crate::tensor::Result<Tensor<T>> {
    x.crop(rect.y, rect.x, rect.h, rect.w)
}

/// Blend processed tiles (upscaled by `s`) back into a full image, averaging
/// wherever tiles overlap. Accumulation is exact for identity tiles: summing
/// n copies of a value and dividing by n returns the value bit-for-bit in
/// the f64 accumulator.
pub fn tile_stitch<T: Real>(tiles: &[Tensor<T>], plan: &TilePlan, s: usize) -> Result<Tensor<T>> {
    if tiles.len() != plan.rects.len() {
        return Err(ImagingError::Shape(format!(
            "{} tiles for a plan of {} rectangles",
            tiles.len(),
            plan.rects.len()
        )));
    }
    let c = tiles
        .first()
        .map(|t| t.shape()[1])
        .ok_or_else(|| ImagingError::Shape("no tiles".into()))?;
    let (ow, oh) = (plan.width * s, plan.height * s);
    let mut acc = vec![0.0f64; c * oh * ow];
    let mut cnt = vec![0.0f64; oh * ow];
    for (t, r) in tiles.iter().zip(&plan.rects) {
        let sh = t.shape();
        if sh[2] != r.h * s || sh[3] != r.w * s {
            return Err(ImagingError::Shape(format!(
                "tile {:?} does not match rect {r:?} at scale {s}",
                sh
            )));
        }
        let v = t.to_f64_vec();
        let (tx, ty) = (r.x * s, r.y * s);
        for ch in 0..c {
            for y in 0..r.h * s {
                for x in 0..r.w * s {
                    acc[ch * oh * ow + (ty + y) * ow + tx + x] += v[ch * r.h * s * r.w * s + y * r.w * s + x];
                }
            }
        }
        for y in 0..r.h * s {
            for x in 0..r.w * s {
                cnt[(ty + y) * ow + tx + x] += 1.0;
            }
        }
    }
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for p in 0..oh * ow {
            if cnt[p] == 0.0 {
                return Err(ImagingError::Shape("tile plan leaves pixels uncovered".into()));
            }
            out[ch * oh * ow + p] = T::from_f64(acc[ch * oh * ow + p] / cnt[p]);
        }
    }
    Ok(Tensor::new(&[1, c, oh, ow], out).unwrap())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ImagingError::Shape(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let mse = av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// Equirectangular latitude weight for row `l` of an `h`-row image.
pub fn ws_weight(l: usize, h: usize) -> f64 {
    ((l as f64 + 0.5 - h as f64 / 2.0) / h as f64 * std::f64::consts::PI).cos()
}

pub fn ws_weights(h: usize) -> Vec<f64> {
    (0..h).map(|l| ws_weight(l, h)).collect()
}

/// PSNR with per-row weights on the squared error (pass `ws_weights(h)` for
/// the latitude weighting; uniform weights reduce to plain PSNR).
pub fn ws_psnr_weighted<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, row_weights: &[f64]) -> Result<f64> {
    check_same_shape(a, b)?;
    let s = a.shape();
    if s.len() != 4 || row_weights.len() != s[2] {
        return Err(ImagingError::Shape(format!(
            "{} row weights for image shape {s:?}",
            row_weights.len()
        )));
    }
    let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let mut num = 0.0;
    let mut den = 0.0;
    for img in 0..bn * c {
        for y in 0..h {
            let wgt = row_weights[y];
            for x in 0..w {
                let d = av[img * h * w + y * w + x] - bv[img * h * w + y * w + x];
                num += wgt * d * d;
                den += wgt;
            }
        }
    }
    Ok(psnr_from_mse(num / den, peak))
}

pub fn ws_psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let h = *a
        .shape()
        .get(2)
        .ok_or_else(|| ImagingError::Shape("ws_psnr expects [B,C,H,W]".into()))?;
    ws_psnr_weighted(a, b, peak, &ws_weights(h))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-mode gaussian filter of an `h x w` plane.
fn gauss_filter(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Per-pixel SSIM map (valid region) for one plane pair.
fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> Vec<f64> {
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mu_a = gauss_filter(a, h, w);
    let mu_b = gauss_filter(b, h, w);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let s_aa = gauss_filter(&aa, h, w);
    let s_bb = gauss_filter(&bb, h, w);
    let s_ab = gauss_filter(&ab, h, w);
    mu_a.iter()
        .zip(&mu_b)
        .zip(s_aa.iter().zip(&s_bb))
        .zip(&s_ab)
        .map(|(((&ma, &mb), (&saa, &sbb)), &sab)| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    ssim_impl(a, b, peak, None)
}

/// SSIM with the per-row latitude weighting applied to the SSIM map.
pub fn ws_ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(ImagingError::Shape("ws_ssim expects [B,C,H,W]".into()));
    }
    let map_h = s[2].saturating_sub(SSIM_WINDOW - 1);
    let weights = ws_weights(map_h);
    ssim_impl(a, b, peak, Some(&weights))
}

fn ssim_impl<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, row_weights: Option<&[f64]>) -> Result<f64> {
    check_same_shape(a, b)?;
    let s = a.shape();
    if s.len() != 4 {
        return Err(ImagingError::Shape(format!("ssim expects [B,C,H,W], got {s:?}")));
    }
    let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ImagingError::Shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..bn * c {
        let map = ssim_map(&av[p * h * w..(p + 1) * h * w], &bv[p * h * w..(p + 1) * h * w], h, w, peak);
        for y in 0..oh {
            let wgt = row_weights.map_or(1.0, |rw| rw[y]);
            for x in 0..ow {
                num += wgt * map[y * ow + x];
                den += wgt;
            }
        }
    }
    Ok(num / den)
}

/// Luma (BT.601) plane of an RGB tensor, for Y-channel metrics.
pub fn rgb_to_luma<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(ImagingError::Shape(format!("luma expects [B,3,H,W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let v = x.to_f64_vec();
    let mut out = vec![T::zero(); b * h * w];
    for bi in 0..b {
        for p in 0..h * w {
            let r = v[(bi * 3) * h * w + p];
            let g = v[(bi * 3 + 1) * h * w + p];
            let bl = v[(bi * 3 + 2) * h * w + p];
            out[bi * h * w + p] = T::from_f64(0.299 * r + 0.587 * g + 0.114 * bl);
        }
    }
    Ok(Tensor::new(&[b, 1, h, w], out).unwrap())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Flat,
    Texture,
    HalfSplit,
}

/// HR/LR pair: HR is generated (`[1,3,size,size]`), LR is its bicubic
/// downsample by `s`.
pub fn make_synthetic_pair<T: Real>(
    kind: SyntheticKind,
    size: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if size % s != 0 {
        return Err(ImagingError::Shape(format!("size {size} not divisible by scale {s}")));
    }
    let hr = match kind {
        SyntheticKind::Flat => flat_field(size, rng),
        SyntheticKind::Texture => texture_field(size, 0, size, rng),
        SyntheticKind::HalfSplit => {
            let mut f = flat_field(size, rng);
            let t = texture_field(size, size / 2, size, rng);
            for ch in 0..3 {
                for y in 0..size {
                    for x in size / 2..size {
                        f[ch * size * size + y * size + x] = t[ch * size * size + y * size + x];
                    }
                }
            }
            f
        }
    };
    let hr = Tensor::new(&[1, 3, size, size], hr.into_iter().map(T::from_f64).collect()).unwrap();
    let lr = bicubic_downsample(&hr, s)?;
    Ok((lr, hr))
}

/// Row-linear gradient with a random per-channel base and slope. The base
/// stays near mid-gray — the same level the textures oscillate around — so
/// flat and textured regions differ in local energy rather than brightness.
fn flat_field(size: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        let base = rng.uniform(0.45, 0.55);
        let slope = rng.uniform(-0.1, 0.1);
        for y in 0..size {
            let v = (base + slope * y as f64 / size.max(2) as f64).clamp(0.0, 1.0);
            for x in 0..size {
                out[ch * size * size + y * size + x] = v;
            }
        }
    }
    out
}

/// Structured texture: three oriented sinusoidal gratings with random
/// orientation, period, and phase, filled in columns `[x0, x1)`. Periods of
/// eight pixels and up survive the antialiased downsample with their energy
/// largely intact, so the texture is both recoverable from the low-resolution
/// side (unlike broadband noise) and visible to the routing predictor there.
fn texture_field(size: usize, x0: usize, x1: usize, rng: &mut Rng) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out = vec![0.0; 3 * size * size];
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.uniform(0.0, PI);
            let period = rng.uniform(8.0, 14.0);
            let phase = rng.uniform(0.0, 2.0 * PI);
            let w = 2.0 * PI / period;
            (theta.cos() * w, theta.sin() * w, phase)
        })
        .collect();
    let gains = [1.0, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)];
    for (ch, gain) in gains.iter().enumerate() {
        for y in 0..size {
            for x in x0..x1 {
                let s: f64 = comps
                    .iter()
                    .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                let v = 0.5 + 0.2 * gain * s;
                out[ch * size * size + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Column-wise variance split of `[1,3,S,S]`: (left-half, right-half),
/// averaged across channels, used to verify the half-split construction and
/// routing selectivity.
pub fn half_variances<T: Real>(hr: &Tensor<T>) -> (f64, f64) {
    let s = hr.shape()[2];
    let v = hr.to_f64_vec();
    let var = |x0: usize, x1: usize| {
        let mut total = 0.0;
        for ch in 0..3 {
            let mut vals = Vec::new();
            for y in 0..s {
                for x in x0..x1 {
                    vals.push(v[ch * s * s + y * s + x]);
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        total / 3.0
    };
    (var(0, s / 2), var(s / 2, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_byte_identical() {
        let mut rng = Rng::new(1);
        let data: Vec<u8> = (0..5 * 4 * 3).map(|_| rng.below(256) as u8).collect();
        let img = Image::new(5, 4, 3, data).unwrap();
        let bytes = encode_image(&img);
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_image(&back), bytes);
    }

    #[test]
    fn one_by_one_white_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = decode_image(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 3));
        assert_eq!(img.data, vec![255, 255, 255]);
    }

    #[test]
    fn sixteen_bit_maxval_rejected() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00";
        assert!(matches!(decode_image(bytes), Err(ImagingError::Parse(_))));
    }

    #[test]
    fn malformed_headers_rejected() {
        assert!(decode_image(b"P7\n1 1\n255\n\x00").is_err());
        assert!(decode_image(b"P6\n2 2\n255\n\x00\x00").is_err()); // truncated
        assert!(decode_image(b"P6\nx 1\n255\n\x00").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x10\x20";
        let img = decode_image(bytes).unwrap();
        assert_eq!(img.data, vec![0x10, 0x20]);
    }

    #[test]
    fn tensor_roundtrip_quantization_bound() {
        let mut rng = Rng::new(2);
        let t = Tensor::<f32>::rand_uniform(&[1, 3, 6, 6], 0.0, 1.0, &mut rng);
        let img = Image::from_tensor(&t).unwrap();
        let back: Tensor<f32> = img.to_tensor();
        for (a, b) in t.to_f64_vec().iter().zip(back.to_f64_vec()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-9);
        }
    }

    #[test]
    fn bicubic_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], 0.37);
        let y = bicubic_downsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for v in y.to_f64_vec() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_checkerboard_goes_mid_gray() {
        let n = 16;
        let data: Vec<f64> = (0..n * n)
            .map(|i| if (i / n + i % n) % 2 == 0 { 0.0 } else { 1.0 })
            .collect();
        let x = Tensor::<f64>::new(&[1, 1, n, n], data).unwrap();
        let y = bicubic_downsample(&x, 2).unwrap().to_f64_vec();
        // interior pixels: symmetric kernel averages the two classes
        for yy in 2..6 {
            for xx in 2..6 {
                assert!((y[yy * 8 + xx] - 0.5).abs() < 1.0 / 255.0, "{}", y[yy * 8 + xx]);
            }
        }
    }

    #[test]
    fn bicubic_output_dims() {
        let x = Tensor::<f32>::zeros(&[2, 3, 12, 8]);
        assert_eq!(bicubic_downsample(&x, 4).unwrap().shape(), &[2, 3, 3, 2]);
    }

    #[test]
    fn tile_plan_covers_image() {
        let plan = tile_split(128, 128, 64, 4).unwrap();
        assert!(plan.rects.len() >= 4 && plan.rects.len() <= 9);
        let mut covered = vec![false; 128 * 128];
        for r in &plan.rects {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    covered[y * 128 + x] = true;
                }
            }
        }
        assert!(covered.into_iter().all(|c| c));
    }

    #[test]
    fn oversized_tile_gives_single_tile_plan() {
        let plan = tile_split(16, 16, 64, 4).unwrap();
        assert_eq!(plan.rects, vec![TileRect { x: 0, y: 0, w: 16, h: 16 }]);
    }

    #[test]
    fn identity_stitch_is_exact() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f32>::rand_uniform(&[1, 3, 40, 40], 0.0, 1.0, &mut rng);
        for (tile, overlap) in [(16, 2), (32, 4), (24, 3)] {
            let plan = tile_split(40, 40, tile, overlap).unwrap();
            let tiles: Vec<Tensor<f32>> = plan.rects.iter().map(|r| tile_extract(&x, r).unwrap()).collect();
            let back = tile_stitch(&tiles, &plan, 1).unwrap();
            assert_eq!(back.to_vec(), x.to_vec(), "{{{tile},{overlap}}} stitch not exact");
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b = a.add_scalar(1.0 / 255.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 0.01, "{p}");
        let zero = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let one = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        assert!((psnr(&zero, &one, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = Rng::new(4);
        let a = Tensor::<f64>::rand_uniform(&[1, 3, 5, 5], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[1, 3, 5, 5], 0.0, 1.0, &mut rng);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ws_psnr_uniform_weights_equals_psnr() {
        let mut rng = Rng::new(5);
        let a = Tensor::<f64>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let uniform = vec![1.0; 8];
        assert_eq!(
            ws_psnr_weighted(&a, &b, 1.0, &uniform).unwrap(),
            psnr(&a, &b, 1.0).unwrap()
        );
    }

    #[test]
    fn ws_weights_closed_forms_and_symmetry() {
        let h = 64;
        let w = ws_weights(h);
        // pole row weight = sin(pi/(2H)); center rows = cos(pi/(2H))
        assert!((w[0] - (std::f64::consts::PI / (2.0 * h as f64)).sin()).abs() < 1e-12);
        assert!((w[h / 2] - (std::f64::consts::PI / (2.0 * h as f64)).cos()).abs() < 1e-12);
        for l in 0..h {
            assert!(w[l] > 0.0);
            assert!((w[l] - w[h - 1 - l]).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_identity_and_range() {
        let mut rng = Rng::new(6);
        let a = Tensor::<f64>::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let b = Tensor::<f64>::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn ws_ssim_runs_and_identity() {
        let mut rng = Rng::new(7);
        let a = Tensor::<f64>::rand_uniform(&[1, 1, 20, 20], 0.0, 1.0, &mut rng);
        assert!((ws_ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_kind_is_row_linear() {
        let (_, hr) = make_synthetic_pair::<f64>(SyntheticKind::Flat, 16, 2, &mut Rng::new(8)).unwrap();
        let v = hr.to_f64_vec();
        // constant along each row
        for ch in 0..3 {
            for y in 0..16 {
                for x in 1..16 {
                    assert_eq!(v[ch * 256 + y * 16 + x], v[ch * 256 + y * 16]);
                }
            }
        }
    }

    #[test]
    fn half_split_right_half_much_busier() {
        let (_, hr) = make_synthetic_pair::<f64>(SyntheticKind::HalfSplit, 32, 2, &mut Rng::new(9)).unwrap();
        let (left, right) = half_variances(&hr);
        assert!(right > 10.0 * left, "left {left}, right {right}");
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let (lr1, hr1) = make_synthetic_pair::<f32>(SyntheticKind::Texture, 16, 2, &mut Rng::new(10)).unwrap();
        let (lr2, hr2) = make_synthetic_pair::<f32>(SyntheticKind::Texture, 16, 2, &mut Rng::new(10)).unwrap();
        assert_eq!(hr1.to_vec(), hr2.to_vec());
        assert_eq!(lr1.to_vec(), lr2.to_vec());
    }

    #[test]
    fn luma_conversion() {
        let x = Tensor::<f64>::ones(&[1, 3, 11, 11]);
        let y = rgb_to_luma(&x).unwrap();
        for v in y.to_f64_vec() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
