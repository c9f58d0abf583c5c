//! Image, mask, and box containers with bit-exact file I/O and the mask
//! algebra shared by the augmentation and training pipelines.
//!
//! Images are PPM (P6, maxval 255), masks are PGM (P5, written as 0/255),
//! boxes are plain text lines `category x0 y0 x1 y1` with half-open pixel
//! ranges. Pixel values live in `[0, 1]`; clamping is applied at operation
//! boundaries so downstream code never sees out-of-range values.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, only 255 is supported")]
    UnsupportedMaxval(u64),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("box ({x0},{y0})..({x1},{y1}) out of bounds for {width}x{height}")]
    BoxOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
    #[error("malformed box line {line}: {msg}")]
    MalformedBoxLine { line: usize, msg: String },
    #[error("non-finite pixel value")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, RasterError>;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Axis-aligned integer box with half-open ranges `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BoxRect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// H x W x 3 image, row-major and channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Raster {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    /// Builds a raster from a per-pixel function `(y, x, c) -> value`.
    /// Values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Raster { height, width, data }
    }

    /// Wraps raw interleaved data, rejecting non-finite values and clamping
    /// into `[0, 1]`.
    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(RasterError::DimensionMismatch(format!(
                "expected {} values for {}x{}, got {}",
                height * width * Self::CHANNELS,
                width,
                height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite);
        }
        let data = data.into_iter().map(clamp01).collect();
        Ok(Raster { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Per-channel plane in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.get(y, x, c));
            }
        }
        out
    }
}

/// Binary H x W mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GrayMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        GrayMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        GrayMask { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(RasterError::DimensionMismatch(format!(
                "expected {} mask values for {}x{}, got {}",
                height * width,
                width,
                height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(RasterError::DimensionMismatch(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(GrayMask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = (v != 0) as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> GrayMask {
        GrayMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn union(&self, other: &GrayMask) -> Result<GrayMask> {
        self.check_same_shape(other)?;
        Ok(GrayMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a | b)
                .collect(),
        })
    }

    pub fn is_disjoint(&self, other: &GrayMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a & b == 0)
    }

    /// Tight bounding box of the 1-pixels, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoxRect> {
        let (mut x0, mut y0, mut x1, mut y1) = (self.width, self.height, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some(BoxRect::new(x0, y0, x1, y1))
    }

    fn check_same_shape(&self, other: &GrayMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(RasterError::DimensionMismatch(format!(
                "mask {}x{} vs mask {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Per-object masks, boxes, and category labels for one image.
#[derive(Debug, Clone, Default)]
pub struct ObjectSet {
    masks: Vec<GrayMask>,
    boxes: Vec<BoxRect>,
    categories: Vec<usize>,
}

impl ObjectSet {
    pub fn empty() -> Self {
        ObjectSet::default()
    }

    pub fn from_parts(masks: Vec<GrayMask>, boxes: Vec<BoxRect>, categories: Vec<usize>) -> Result<Self> {
        if masks.len() != boxes.len() || masks.len() != categories.len() {
            return Err(RasterError::DimensionMismatch(format!(
                "masks/boxes/categories lengths differ: {}/{}/{}",
                masks.len(),
                boxes.len(),
                categories.len()
            )));
        }
        for (i, m) in masks.iter().enumerate().skip(1) {
            if m.height() != masks[0].height() || m.width() != masks[0].width() {
                return Err(RasterError::DimensionMismatch(format!(
                    "mask {i} has shape {}x{}, mask 0 has {}x{}",
                    m.width(),
                    m.height(),
                    masks[0].width(),
                    masks[0].height()
                )));
            }
        }
        for (m, b) in masks.iter().zip(&boxes) {
            if !b.fits_in(m.width(), m.height()) {
                return Err(RasterError::BoxOutOfBounds {
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                    width: m.width(),
                    height: m.height(),
                });
            }
        }
        Ok(ObjectSet { masks, boxes, categories })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[GrayMask] {
        &self.masks
    }

    pub fn boxes(&self) -> &[BoxRect] {
        &self.boxes
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    /// Union of all object masks sized for `raster`; all-zero when empty.
    pub fn union_mask(&self, height: usize, width: usize) -> Result<GrayMask> {
        let mut acc = GrayMask::zeros(height, width);
        for m in &self.masks {
            if m.height() != height || m.width() != width {
                return Err(RasterError::DimensionMismatch(format!(
                    "mask {}x{} vs image {}x{}",
                    m.width(),
                    m.height(),
                    width,
                    height
                )));
            }
            acc = acc.union(m)?;
        }
        Ok(acc)
    }
}

/// Resolves overlaps by index order: mask `k` loses every pixel already
/// claimed by a mask `j < k`. The union of all masks is unchanged.
pub fn disjointify(objs: &ObjectSet) -> ObjectSet {
    if objs.is_empty() {
        return objs.clone();
    }
    let h = objs.masks[0].height();
    let w = objs.masks[0].width();
    let mut claimed = vec![0u8; h * w];
    let mut masks = Vec::with_capacity(objs.len());
    for m in &objs.masks {
        let mut data = Vec::with_capacity(h * w);
        for (i, &v) in m.data().iter().enumerate() {
            let keep = v & (1 - claimed[i]);
            claimed[i] |= keep;
            data.push(keep);
        }
        masks.push(GrayMask { height: h, width: w, data });
    }
    ObjectSet {
        masks,
        boxes: objs.boxes.clone(),
        categories: objs.categories.clone(),
    }
}

/// Pixelwise product `x (.) m`, broadcast over channels.
pub fn extract_object(x: &Raster, m: &GrayMask) -> Result<Raster> {
    if x.height() != m.height() || x.width() != m.width() {
        return Err(RasterError::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            x.width(),
            x.height(),
            m.width(),
            m.height()
        )));
    }
    let mut data = Vec::with_capacity(x.data.len());
    for (i, &v) in x.data.iter().enumerate() {
        data.push(v * m.data[i / Raster::CHANNELS] as f64);
    }
    Ok(Raster {
        height: x.height,
        width: x.width,
        data,
    })
}

/// `x (.) (1 - union of masks)`: the image with every object blanked out.
pub fn background_of(x: &Raster, objs: &ObjectSet) -> Result<Raster> {
    if objs.is_empty() {
        return Ok(x.clone());
    }
    let union = objs.union_mask(x.height(), x.width())?;
    extract_object(x, &union.complement())
}

// --- file I/O -------------------------------------------------------------

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderCursor { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(RasterError::MalformedHeader("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<u64> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| {
                RasterError::MalformedHeader(format!("expected integer, got {:?}", String::from_utf8_lossy(tok)))
            })
    }

    /// Consumes the single whitespace byte that separates header and payload.
    fn payload(&mut self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(RasterError::MalformedHeader(
                "missing whitespace before payload".into(),
            ));
        }
        self.pos += 1;
        Ok(&self.bytes[self.pos..])
    }
}

fn parse_netpbm(bytes: &[u8], magic: &[u8], samples_per_pixel: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = HeaderCursor::new(bytes);
    let tok = cur.token()?;
    if tok != magic {
        return Err(RasterError::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(tok)
        )));
    }
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    if width == 0 || height == 0 {
        return Err(RasterError::MalformedHeader("zero dimension".into()));
    }
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(RasterError::UnsupportedMaxval(maxval));
    }
    let payload = cur.payload()?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(samples_per_pixel))
        .ok_or_else(|| RasterError::MalformedHeader("dimensions overflow".into()))?;
    if payload.len() < expected {
        return Err(RasterError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(RasterError::TrailingBytes(payload.len() - expected));
    }
    Ok((height, width, payload.to_vec()))
}

/// Loads a binary PPM (P6, maxval 255); each byte `b` maps to `b / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let bytes = fs::read(path)?;
    let (height, width, payload) = parse_netpbm(&bytes, b"P6", Raster::CHANNELS)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Raster { height, width, data })
}

/// Round-half-up quantization of a `[0, 1]` value to a byte.
pub fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

/// Saves as binary PPM (P6, maxval 255) with round-half-up quantization.
pub fn save_image(x: &Raster, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_image(x))?;
    Ok(())
}

/// The exact bytes `save_image` writes.
pub fn encode_image(x: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", x.width, x.height).into_bytes();
    out.extend(x.data.iter().map(|&v| quantize(v)));
    out
}

/// Loads a binary PGM (P5, maxval 255) as a binary mask; bytes >= 128 map
/// to 1, everything else to 0.
pub fn load_mask(path: impl AsRef<Path>) -> Result<GrayMask> {
    let bytes = fs::read(path)?;
    let (height, width, payload) = parse_netpbm(&bytes, b"P5", 1)?;
    let data = payload.iter().map(|&b| (b >= 128) as u8).collect();
    Ok(GrayMask { height, width, data })
}

/// Saves a binary mask as PGM (P5) with 0/255 values.
pub fn save_mask(m: &GrayMask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    out.extend(m.data.iter().map(|&v| if v != 0 { 255u8 } else { 0u8 }));
    fs::write(path, out)?;
    Ok(())
}

/// Saves an arbitrary 8-bit grayscale plane as PGM (P5); used for attention
/// heat images.
pub fn save_gray_pgm(height: usize, width: usize, bytes: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if bytes.len() != height * width {
        return Err(RasterError::DimensionMismatch(format!(
            "expected {} bytes for {}x{}, got {}",
            height * width,
            width,
            height,
            bytes.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

/// Loads a plain-text box file: one `category x0 y0 x1 y1` line per object.
pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<(usize, BoxRect)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(RasterError::MalformedBoxLine {
                line: idx + 1,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let mut nums = [0usize; 5];
        for (slot, f) in nums.iter_mut().zip(&fields) {
            *slot = f.parse::<usize>().map_err(|_| RasterError::MalformedBoxLine {
                line: idx + 1,
                msg: format!("bad integer {f:?}"),
            })?;
        }
        let rect = BoxRect::new(nums[1], nums[2], nums[3], nums[4]);
        if rect.x1 < rect.x0 || rect.y1 < rect.y0 {
            return Err(RasterError::MalformedBoxLine {
                line: idx + 1,
                msg: "inverted box".into(),
            });
        }
        out.push((nums[0], rect));
    }
    Ok(out)
}

pub fn save_boxes(entries: &[(usize, BoxRect)], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for (cat, b) in entries {
        text.push_str(&format!("{} {} {} {} {}\n", cat, b.x0, b.y0, b.x1, b.y1));
    }
    fs::write(path, text)?;
    Ok(())
}
