//! Pixel-level preprocessing: threshold crop, bicubic resize, random
//! resized-crop augmentation, normalization, and PNG/PPM codec glue.
//!
//! Images are carried as planar `C×H×W` byte or float buffers.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-channel normalization constants (applied after scaling bytes to
/// `[0, 1]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalize {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// The common vision defaults; the underlying recipe fixes only that
/// normalization happens, so the constants stay configurable.
pub const IMAGENET_NORM: Normalize = Normalize {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

impl Default for Normalize {
    fn default() -> Self {
        IMAGENET_NORM
    }
}

/// Random-resized-crop + flip + normalize settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentCfg {
    /// Output side length (square).
    pub target: usize,
    /// Crop area as a fraction of the source area, sampled uniformly.
    pub area: (f64, f64),
    /// Aspect-ratio bounds, sampled log-uniformly.
    pub aspect: (f64, f64),
    pub hflip_p: f64,
    pub normalize: Normalize,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg {
            target: 224,
            area: (0.2, 1.0),
            aspect: (0.75, 4.0 / 3.0),
            hflip_p: 0.5,
            normalize: Normalize::default(),
        }
    }
}

fn check_dims(len: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if c == 0 || h == 0 || w == 0 || len != c * h * w {
        return Err(Error::Shape(format!(
            "image buffer length {len} does not match {c}x{h}x{w}"
        )));
    }
    Ok(())
}

/// Zero out pixels whose max-over-channels value is strictly below
/// `threshold`, then crop to the bounding box of the remaining non-zero
/// pixels. Returns `(pixels, height, width)`.
pub fn threshold_crop(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    threshold: u8,
) -> Result<(Vec<u8>, usize, usize)> {
    check_dims(img.len(), c, h, w)?;
    let plane = h * w;
    let max_at = |y: usize, x: usize| (0..c).map(|ch| img[ch * plane + y * w + x]).max().unwrap();

    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            let m = max_at(y, x);
            if m >= threshold && m > 0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 > y1 {
        return Err(Error::Image("empty after threshold".into()));
    }
    let (nh, nw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut out = vec![0u8; c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                let (sy, sx) = (y0 + y, x0 + x);
                // Below-threshold pixels stay zeroed even inside the box.
                if max_at(sy, sx) >= threshold {
                    out[ch * nh * nw + y * nw + x] = img[ch * plane + sy * w + sx];
                }
            }
        }
    }
    Ok((out, nh, nw))
}

/// Catmull-Rom cubic kernel (a = −0.5).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// One-axis cubic resampling of a row-major plane, pixel-center aligned
/// (`src = (dst + 0.5)·in/out − 0.5`) with edge-clamped taps.
fn resample_rows(src: &[f64], ih: usize, iw: usize, ow: usize) -> Vec<f64> {
    let scale = iw as f64 / ow as f64;
    let mut out = vec![0.0; ih * ow];
    for ox in 0..ow {
        let sx = (ox as f64 + 0.5) * scale - 0.5;
        let x0 = sx.floor();
        let t = sx - x0;
        let weights = [
            cubic_weight(t + 1.0),
            cubic_weight(t),
            cubic_weight(1.0 - t),
            cubic_weight(2.0 - t),
        ];
        let taps: Vec<usize> = (-1..3)
            .map(|d| (x0 as i64 + d).clamp(0, iw as i64 - 1) as usize)
            .collect();
        for y in 0..ih {
            let row = &src[y * iw..(y + 1) * iw];
            let mut acc = 0.0;
            for k in 0..4 {
                acc += weights[k] * row[taps[k]];
            }
            out[y * ow + ox] = acc;
        }
    }
    out
}

fn transpose(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = src[y * w + x];
        }
    }
    out
}

/// Bicubic (Catmull-Rom) resize of one plane; no clamping.
pub fn resize_plane(src: &[f64], ih: usize, iw: usize, oh: usize, ow: usize) -> Result<Vec<f64>> {
    if ih == 0 || iw == 0 || oh == 0 || ow == 0 || src.len() != ih * iw {
        return Err(Error::Shape(format!(
            "resize: plane {}:{ih}x{iw} -> {oh}x{ow}",
            src.len()
        )));
    }
    let horiz = resample_rows(src, ih, iw, ow);
    let t = transpose(&horiz, ih, ow);
    let vert = resample_rows(&t, ow, ih, oh);
    Ok(transpose(&vert, ow, oh))
}

/// Bicubic resize of a planar byte image; each channel is resampled
/// independently and the result is rounded and clamped to `[0, 255]`.
pub fn resize_cubic(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Result<Vec<u8>> {
    check_dims(img.len(), c, h, w)?;
    let mut out = vec![0u8; c * oh * ow];
    for ch in 0..c {
        let plane: Vec<f64> = img[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let r = resize_plane(&plane, h, w, oh, ow)?;
        for (dst, &v) in out[ch * oh * ow..(ch + 1) * oh * ow].iter_mut().zip(&r) {
            *dst = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Replicate a grayscale image to three channels; pass 3-channel input
/// through unchanged.
pub fn to_rgb3(img: &[u8], c: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    check_dims(img.len(), c, h, w)?;
    match c {
        3 => Ok(img.to_vec()),
        1 => Ok([img, img, img].concat()),
        _ => Err(Error::Image(format!("unsupported channel count {c}"))),
    }
}

/// Horizontal flip of a planar float image.
pub fn hflip(img: &[f32], c: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    if img.len() != c * h * w {
        return Err(Error::Shape(format!("hflip: length {} != {c}x{h}x{w}", img.len())));
    }
    let mut out = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            let row = &mut out[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            row.reverse();
        }
    }
    Ok(out)
}

/// Crop + resize + optional flip + scale + normalize with every random
/// choice supplied explicitly. `crop` is `(top, left, height, width)`.
pub fn apply_augment(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    crop: (usize, usize, usize, usize),
    flip: bool,
    cfg: &AugmentCfg,
) -> Result<Vec<f32>> {
    check_dims(img.len(), c, h, w)?;
    if c != 3 {
        return Err(Error::Image(format!("augment expects 3 channels, got {c}")));
    }
    let (top, left, ch_, cw_) = crop;
    if ch_ == 0 || cw_ == 0 || top + ch_ > h || left + cw_ > w {
        return Err(Error::Invalid(format!("crop {crop:?} outside {h}x{w}")));
    }
    let s = cfg.target;
    let mut out = vec![0.0f32; 3 * s * s];
    for chan in 0..3 {
        let mut region = vec![0.0f64; ch_ * cw_];
        for y in 0..ch_ {
            for x in 0..cw_ {
                region[y * cw_ + x] = img[chan * h * w + (top + y) * w + left + x] as f64;
            }
        }
        let resized = resize_plane(&region, ch_, cw_, s, s)?;
        let (mean, std) = (cfg.normalize.mean[chan], cfg.normalize.std[chan]);
        for (dst, &v) in out[chan * s * s..(chan + 1) * s * s].iter_mut().zip(&resized) {
            let v = v.clamp(0.0, 255.0) as f32 / 255.0;
            *dst = (v - mean) / std;
        }
    }
    if flip {
        out = hflip(&out, 3, s, s)?;
    }
    Ok(out)
}

/// Sample a random-resized-crop window: up to 10 attempts at a uniform
/// area fraction and log-uniform aspect ratio, then a centered square
/// fallback. Returns `(top, left, height, width)`.
pub fn sample_crop(
    h: usize,
    w: usize,
    cfg: &AugmentCfg,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let src_area = (h * w) as f64;
    for _ in 0..10 {
        let area = rng.gen_range(cfg.area.0..=cfg.area.1) * src_area;
        let log_aspect = rng.gen_range(cfg.aspect.0.ln()..=cfg.aspect.1.ln());
        let aspect = log_aspect.exp();
        let cw = (area * aspect).sqrt().round() as i64;
        let ch = (area / aspect).sqrt().round() as i64;
        if cw >= 1 && ch >= 1 && cw <= w as i64 && ch <= h as i64 {
            let (ch, cw) = (ch as usize, cw as usize);
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let s = h.min(w);
    ((h - s) / 2, (w - s) / 2, s, s)
}

/// Full training augmentation: random resized crop (area fraction in
/// `cfg.area` of the source), cubic resize to the target, horizontal flip
/// with probability `cfg.hflip_p`, then scale to `[0, 1]` and normalize.
pub fn augment(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    cfg: &AugmentCfg,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let crop = sample_crop(h, w, cfg, rng);
    let flip = rng.gen_bool(cfg.hflip_p);
    apply_augment(img, c, h, w, crop, flip, cfg)
}

/// Deterministic evaluation path: plain cubic resize to `target×target`
/// plus normalization (no crop, no flip).
pub fn resize_normalize(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    target: usize,
    norm: &Normalize,
) -> Result<Vec<f32>> {
    let cfg = AugmentCfg { target, normalize: *norm, ..AugmentCfg::default() };
    apply_augment(img, c, h, w, (0, 0, h, w), false, &cfg)
}

/// Inference preprocessing convention: resize to `round(target·8/7)`
/// (256 for a 224 target), center-crop to `target`, normalize.
pub fn center_crop_normalize(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    target: usize,
    norm: &Normalize,
) -> Result<Vec<f32>> {
    if target == 0 {
        return Err(Error::Invalid("center_crop_normalize: target must be >= 1".into()));
    }
    let r = (target * 8 + 3) / 7;
    let resized = resize_cubic(img, c, h, w, r, r)?;
    let off = (r - target) / 2;
    let cfg = AugmentCfg { target, normalize: *norm, ..AugmentCfg::default() };
    apply_augment(&resized, c, r, r, (off, off, target, target), false, &cfg)
}

/// Decode a PNG or PPM file into a planar byte image `(pixels, c, h, w)`
/// with 1 (grayscale) or 3 (RGB) channels.
pub fn load_image(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    codec_for(path)?;
    let dynimg = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (interleaved, c, h, w) = match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (g.into_raw(), 1, h, w)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            (rgb.into_raw(), 3, h, w)
        }
    };
    // HWC -> CHW.
    let mut planar = vec![0u8; interleaved.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                planar[ch * h * w + y * w + x] = interleaved[(y * w + x) * c + ch];
            }
        }
    }
    Ok((planar, c, h, w))
}

/// Encode a planar byte image to PNG or PPM, chosen by file extension.
pub fn save_image(path: &Path, img: &[u8], c: usize, h: usize, w: usize) -> Result<()> {
    check_dims(img.len(), c, h, w)?;
    codec_for(path)?;
    let color = match c {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        _ => return Err(Error::Image(format!("unsupported channel count {c}"))),
    };
    // CHW -> HWC.
    let mut interleaved = vec![0u8; img.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                interleaved[(y * w + x) * c + ch] = img[ch * h * w + y * w + x];
            }
        }
    }
    image::save_buffer(path, &interleaved, w as u32, h as u32, color)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn codec_for(path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "ppm" => Ok(()),
        other => Err(Error::Image(format!(
            "unsupported image format '{other}' (PNG and PPM only): {}",
            path.display()
        ))),
    }
}
