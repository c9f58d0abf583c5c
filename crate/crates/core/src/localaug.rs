//! Mask-based local transforms and the fused global/local augmentation.
//!
//! A local transform is applied to the extracted background or to one
//! extracted object, the result is re-masked by that region's own mask (so
//! blur bleed cannot double-count border pixels), and the per-region terms
//! are summed back into one image. The fused output blends the frequency-
//! domain global transform with the local one by a random weight `alpha`.
//!
//! Every random choice is recorded in an [`AugmentationPlan`]; replaying a
//! serialized plan reproduces the augmented image bit-exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raster::{background_of, extract_object, BoxRect, ObjectSet, Raster};
use crate::spectral::{self, SpectralError};

#[derive(Debug, Error)]
pub enum AugError {
    #[error("blur kernel size {0} must be odd and positive")]
    EvenKernel(usize),
    #[error("color factor out of range: {0}")]
    BadColorFactor(String),
    #[error("erase rect ({x0},{y0})..({x1},{y1}) outside {width}x{height} image")]
    EraseOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
    #[error("plan has {plan} object transforms, scene has {scene} objects")]
    PlanMismatch { plan: usize, scene: usize },
    #[error("fusion weight {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("malformed plan line {line}: {msg}")]
    MalformedPlan { line: usize, msg: String },
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AugError>;

/// Blur kernel sizes the plan sampler may pick.
pub const BLUR_KERNEL_SIZES: [usize; 5] = [23, 27, 29, 31, 33];

/// One spatial transform applied to an extracted region.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalTransform {
    Identity,
    GaussianBlur { k: usize },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64, hue: f64 },
    RandomErase { rect: BoxRect, fill_seed: u64 },
    Grayscale,
}

/// Fully seeded record of every random choice in one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub master_seed: u64,
    pub noise_seed: u64,
    pub radius: usize,
    pub alpha: f64,
    pub background: LocalTransform,
    pub objects: Vec<LocalTransform>,
}

/// Sampling ranges for [`sample_plan`].
#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub r_min: usize,
    pub r_max: usize,
    /// When set, the background may also draw the identity transform.
    pub identity_background: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            r_min: 1,
            r_max: 8,
            identity_background: false,
        }
    }
}

// --- the four local transforms ---------------------------------------------

fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    j as usize
}

/// Separable Gaussian blur with reflect padding. The kernel size is clamped
/// to `2 * min(H, W) - 1` so undersized images stay valid, and `sigma`
/// follows the conventional `0.3 * ((k - 1) * 0.5 - 1) + 0.8`.
pub fn gaussian_blur(x: &Raster, k: usize) -> Result<Raster> {
    if k == 0 || k % 2 == 0 {
        return Err(AugError::EvenKernel(k));
    }
    let k = k.min(2 * x.height().min(x.width()) - 1);
    if k == 1 {
        return Ok(x.clone());
    }
    let sigma = blur_sigma(k);
    let half = (k - 1) / 2;
    let mut kernel = Vec::with_capacity(k);
    for i in 0..k {
        let d = i as f64 - half as f64;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }

    let (h, w) = (x.height(), x.width());
    let ch = Raster::CHANNELS;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * w * ch];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, kw) in kernel.iter().enumerate() {
                    let sx = reflect(xx as isize + i as isize - half as isize, w);
                    acc += kw * x.get(y, sx, c);
                }
                tmp[(y * w + xx) * ch + c] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; h * w * ch];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, kw) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + i as isize - half as isize, h);
                    acc += kw * tmp[(sy * w + xx) * ch + c];
                }
                out[(y * w + xx) * ch + c] = acc;
            }
        }
    }
    Ok(Raster::from_data(h, w, out).expect("blur output is finite"))
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h6 = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h6 / 6.0, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r1, g1, b1) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r1 + m, g1 + m, b1 + m)
}

/// Photometric jitter in the fixed order brightness -> contrast ->
/// saturation -> hue, clamping after each stage. Factors must be finite and
/// non-negative; the hue shift is in turns and wraps modulo 1.
pub fn color_jitter(x: &Raster, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Result<Raster> {
    for (name, v) in [("brightness", brightness), ("contrast", contrast), ("saturation", saturation)] {
        if !v.is_finite() || v < 0.0 {
            return Err(AugError::BadColorFactor(format!("{name} = {v}")));
        }
    }
    if !hue.is_finite() {
        return Err(AugError::BadColorFactor(format!("hue = {hue}")));
    }
    let (h, w) = (x.height(), x.width());
    // brightness
    let mut img = Raster::from_fn(h, w, |y, xx, c| x.get(y, xx, c) * brightness);
    // contrast around the mean luma of the current image
    let mut mean_gray = 0.0;
    for y in 0..h {
        for xx in 0..w {
            mean_gray += luma(img.get(y, xx, 0), img.get(y, xx, 1), img.get(y, xx, 2));
        }
    }
    mean_gray /= (h * w) as f64;
    img = Raster::from_fn(h, w, |y, xx, c| mean_gray + (img.get(y, xx, c) - mean_gray) * contrast);
    // saturation around per-pixel luma
    let sat_src = img.clone();
    img = Raster::from_fn(h, w, |y, xx, c| {
        let l = luma(sat_src.get(y, xx, 0), sat_src.get(y, xx, 1), sat_src.get(y, xx, 2));
        l + (sat_src.get(y, xx, c) - l) * saturation
    });
    // hue rotation in HSV
    if hue != 0.0 {
        let hue_src = img.clone();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for xx in 0..w {
                let (hh, ss, vv) = rgb_to_hsv(hue_src.get(y, xx, 0), hue_src.get(y, xx, 1), hue_src.get(y, xx, 2));
                let (r, g, b) = hsv_to_rgb(hh + hue, ss, vv);
                data.extend([r, g, b]);
            }
        }
        img = Raster::from_data(h, w, data).expect("hsv output is finite");
    }
    Ok(img)
}

/// Replaces the pixels inside `rect` with uniform `[0, 1)` draws from
/// `fill_seed`, row-major and channel-interleaved within the rect.
pub fn random_erase(x: &Raster, rect: BoxRect, fill_seed: u64) -> Result<Raster> {
    if !rect.fits_in(x.width(), x.height()) {
        return Err(AugError::EraseOutOfBounds {
            x0: rect.x0,
            y0: rect.y0,
            x1: rect.x1,
            y1: rect.y1,
            width: x.width(),
            height: x.height(),
        });
    }
    let mut data = x.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(fill_seed);
    for y in rect.y0..rect.y1 {
        for xx in rect.x0..rect.x1 {
            for c in 0..Raster::CHANNELS {
                data[(y * x.width() + xx) * Raster::CHANNELS + c] = rng.random::<f64>();
            }
        }
    }
    Ok(Raster::from_data(x.height(), x.width(), data).expect("erase output is finite"))
}

/// Replicates the Rec.601 luma `0.299 R + 0.587 G + 0.114 B` to all channels.
pub fn grayscale(x: &Raster) -> Raster {
    Raster::from_fn(x.height(), x.width(), |y, xx, _| {
        luma(x.get(y, xx, 0), x.get(y, xx, 1), x.get(y, xx, 2))
    })
}

/// Applies one transform to a full image.
pub fn apply_transform(x: &Raster, t: &LocalTransform) -> Result<Raster> {
    match t {
        LocalTransform::Identity => Ok(x.clone()),
        LocalTransform::GaussianBlur { k } => gaussian_blur(x, *k),
        LocalTransform::ColorJitter { brightness, contrast, saturation, hue } => {
            color_jitter(x, *brightness, *contrast, *saturation, *hue)
        }
        LocalTransform::RandomErase { rect, fill_seed } => random_erase(x, *rect, *fill_seed),
        LocalTransform::Grayscale => Ok(grayscale(x)),
    }
}

/// Local transformation: the background and each object are extracted,
/// transformed, re-masked by their own region, and summed. Masks must be
/// disjoint (see `raster::disjointify`) so the sum partitions the image.
pub fn local_transform(x: &Raster, objs: &ObjectSet, plan: &AugmentationPlan) -> Result<Raster> {
    if objs.len() != plan.objects.len() {
        return Err(AugError::PlanMismatch {
            plan: plan.objects.len(),
            scene: objs.len(),
        });
    }
    let union = objs.union_mask(x.height(), x.width())?;
    let bg = apply_transform(&background_of(x, objs)?, &plan.background)?;
    let mut acc = extract_object(&bg, &union.complement())?.data().to_vec();
    for (mask, t) in objs.masks().iter().zip(&plan.objects) {
        let term = apply_transform(&extract_object(x, mask)?, t)?;
        let masked = extract_object(&term, mask)?;
        for (a, v) in acc.iter_mut().zip(masked.data()) {
            *a += v;
        }
    }
    Ok(Raster::from_data(x.height(), x.width(), acc)?)
}

/// `alpha * a + (1 - alpha) * b`, clamped to `[0, 1]`.
pub fn fuse(a: &Raster, b: &Raster, alpha: f64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AugError::BadAlpha(alpha));
    }
    if !a.same_shape(b) {
        return Err(AugError::Raster(crate::raster::RasterError::DimensionMismatch(
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&ga, &gb)| alpha * ga + (1.0 - alpha) * gb)
        .collect();
    Ok(Raster::from_data(a.height(), a.width(), data)?)
}

/// Fused global/local augmentation driven by one plan.
pub fn glt(x: &Raster, objs: &ObjectSet, plan: &AugmentationPlan) -> Result<Raster> {
    let gt = spectral::global_transform(x, plan.radius as f64, plan.noise_seed)?;
    let lt = local_transform(x, objs, plan)?;
    fuse(&gt, &lt, plan.alpha)
}

// --- plan sampling ----------------------------------------------------------

fn draw_transform(rng: &mut ChaCha8Rng, region: BoxRect, allow_identity: bool) -> LocalTransform {
    let n_kinds = if allow_identity { 5 } else { 4 };
    match rng.random_range(0..n_kinds) {
        0 => LocalTransform::GaussianBlur {
            k: BLUR_KERNEL_SIZES[rng.random_range(0..BLUR_KERNEL_SIZES.len())],
        },
        1 => LocalTransform::ColorJitter {
            brightness: 0.6 + 0.8 * rng.random::<f64>(),
            contrast: 0.6 + 0.8 * rng.random::<f64>(),
            saturation: 0.6 + 0.8 * rng.random::<f64>(),
            hue: -0.1 + 0.2 * rng.random::<f64>(),
        },
        2 => {
            let fill_seed = rng.next_u64();
            let frac = 0.02 + 0.18 * rng.random::<f64>();
            let aspect = 0.3 + 3.0 * rng.random::<f64>();
            let (rw, rh) = (region.width(), region.height());
            let rect = if rw == 0 || rh == 0 {
                BoxRect::new(region.x0, region.y0, region.x0, region.y0)
            } else {
                let area = frac * (rw * rh) as f64;
                let ew = ((area * aspect).sqrt().round() as usize).clamp(1, rw);
                let eh = ((area / aspect).sqrt().round() as usize).clamp(1, rh);
                let ox = rng.random_range(0..=rw - ew);
                let oy = rng.random_range(0..=rh - eh);
                BoxRect::new(region.x0 + ox, region.y0 + oy, region.x0 + ox + ew, region.y0 + oy + eh)
            };
            LocalTransform::RandomErase { rect, fill_seed }
        }
        3 => LocalTransform::Grayscale,
        _ => LocalTransform::Identity,
    }
}

/// Samples a full augmentation plan from one seed. Draw order (documented
/// so plans stay reproducible across releases): noise seed, alpha, radius,
/// background transform, then one transform per object box in index order.
/// Erase rectangles are sampled inside the owning region's box; the
/// background region is the whole image.
pub fn sample_plan(seed: u64, boxes: &[BoxRect], width: usize, height: usize, cfg: &PlanConfig) -> AugmentationPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_seed = rng.next_u64();
    let alpha = rng.random::<f64>();
    let radius = rng.random_range(cfg.r_min..=cfg.r_max.max(cfg.r_min));
    let full = BoxRect::new(0, 0, width, height);
    let background = draw_transform(&mut rng, full, cfg.identity_background);
    let objects = boxes
        .iter()
        .map(|&b| draw_transform(&mut rng, b, false))
        .collect();
    AugmentationPlan {
        master_seed: seed,
        noise_seed,
        radius,
        alpha,
        background,
        objects,
    }
}

// --- plan serialization -------------------------------------------------------

fn transform_to_text(t: &LocalTransform) -> String {
    match t {
        LocalTransform::Identity => "identity".into(),
        LocalTransform::GaussianBlur { k } => format!("blur {k}"),
        LocalTransform::ColorJitter { brightness, contrast, saturation, hue } => {
            format!("jitter {brightness} {contrast} {saturation} {hue}")
        }
        LocalTransform::RandomErase { rect, fill_seed } => {
            format!("erase {} {} {} {} {fill_seed}", rect.x0, rect.y0, rect.x1, rect.y1)
        }
        LocalTransform::Grayscale => "gray".into(),
    }
}

fn transform_from_fields(fields: &[&str], line: usize) -> Result<LocalTransform> {
    let bad = |msg: &str| AugError::MalformedPlan { line, msg: msg.into() };
    match fields {
        ["identity"] => Ok(LocalTransform::Identity),
        ["gray"] => Ok(LocalTransform::Grayscale),
        ["blur", k] => Ok(LocalTransform::GaussianBlur {
            k: k.parse().map_err(|_| bad("bad kernel size"))?,
        }),
        ["jitter", b, c, s, h] => Ok(LocalTransform::ColorJitter {
            brightness: b.parse().map_err(|_| bad("bad brightness"))?,
            contrast: c.parse().map_err(|_| bad("bad contrast"))?,
            saturation: s.parse().map_err(|_| bad("bad saturation"))?,
            hue: h.parse().map_err(|_| bad("bad hue"))?,
        }),
        ["erase", x0, y0, x1, y1, seed] => Ok(LocalTransform::RandomErase {
            rect: BoxRect::new(
                x0.parse().map_err(|_| bad("bad x0"))?,
                y0.parse().map_err(|_| bad("bad y0"))?,
                x1.parse().map_err(|_| bad("bad x1"))?,
                y1.parse().map_err(|_| bad("bad y1"))?,
            ),
            fill_seed: seed.parse().map_err(|_| bad("bad fill seed"))?,
        }),
        _ => Err(bad("unknown transform")),
    }
}

impl AugmentationPlan {
    /// Line-oriented text record. Floats use Rust's shortest round-trip
    /// formatting, so parsing restores bit-identical values.
    pub fn to_text(&self) -> String {
        let mut out = String::from("plan v1\n");
        out.push_str(&format!("master_seed {}\n", self.master_seed));
        out.push_str(&format!("noise_seed {}\n", self.noise_seed));
        out.push_str(&format!("r {}\n", self.radius));
        out.push_str(&format!("alpha {}\n", self.alpha));
        out.push_str(&format!("bg {}\n", transform_to_text(&self.background)));
        for t in &self.objects {
            out.push_str(&format!("obj {}\n", transform_to_text(t)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| AugError::MalformedPlan { line, msg: msg.into() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty plan"))?;
        if header.trim() != "plan v1" {
            return Err(bad(1, "expected `plan v1` header"));
        }
        let mut master_seed = None;
        let mut noise_seed = None;
        let mut radius = None;
        let mut alpha = None;
        let mut background = None;
        let mut objects = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            let l = raw.trim();
            if l.is_empty() {
                continue;
            }
            let fields: Vec<&str> = l.split_whitespace().collect();
            match fields.as_slice() {
                ["master_seed", v] => master_seed = Some(v.parse().map_err(|_| bad(line, "bad master_seed"))?),
                ["noise_seed", v] => noise_seed = Some(v.parse().map_err(|_| bad(line, "bad noise_seed"))?),
                ["r", v] => radius = Some(v.parse().map_err(|_| bad(line, "bad r"))?),
                ["alpha", v] => alpha = Some(v.parse().map_err(|_| bad(line, "bad alpha"))?),
                ["bg", rest @ ..] => background = Some(transform_from_fields(rest, line)?),
                ["obj", rest @ ..] => objects.push(transform_from_fields(rest, line)?),
                _ => return Err(bad(line, "unknown plan line")),
            }
        }
        Ok(AugmentationPlan {
            master_seed: master_seed.ok_or_else(|| bad(0, "missing master_seed"))?,
            noise_seed: noise_seed.ok_or_else(|| bad(0, "missing noise_seed"))?,
            radius: radius.ok_or_else(|| bad(0, "missing r"))?,
            alpha: alpha.ok_or_else(|| bad(0, "missing alpha"))?,
            background: background.ok_or_else(|| bad(0, "missing bg"))?,
            objects,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// A plan that leaves the image untouched at `alpha = 0`.
    pub fn identity(n_objects: usize) -> Self {
        AugmentationPlan {
            master_seed: 0,
            noise_seed: 0,
            radius: 0,
            alpha: 0.0,
            background: LocalTransform::Identity,
            objects: vec![LocalTransform::Identity; n_objects],
        }
    }
}
