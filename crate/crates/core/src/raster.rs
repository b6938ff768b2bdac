//! Image buffers, bilinear resampling, Gaussian blur and PPM/PGM I/O.
//!
//! Samples are `f64` in `[0, 1]`, row-major, channels interleaved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "buffer holds {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image samples must be finite"));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        ImageBuffer::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Precomputed interpolation taps along one axis.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

impl Taps {
    fn new(src_len: usize, dst_len: usize, scale: f64) -> Self {
        let max = (src_len - 1) as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(dst_len),
            hi: Vec::with_capacity(dst_len),
            t: Vec::with_capacity(dst_len),
        };
        for d in 0..dst_len {
            let s = ((d as f64 + 0.5) / scale - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.t.push(s - lo as f64);
        }
        taps
    }
}

fn resample(img: &ImageBuffer, out_w: usize, out_h: usize, sx: f64, sy: f64) -> ImageBuffer {
    let xt = Taps::new(img.width, out_w, sx);
    let yt = Taps::new(img.height, out_h, sy);
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for oy in 0..out_h {
        let (y0, y1, ty) = (yt.lo[oy], yt.hi[oy], yt.t[oy]);
        for ox in 0..out_w {
            let (x0, x1, tx) = (xt.lo[ox], xt.hi[ox], xt.t[ox]);
            for c in 0..ch {
                let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), tx);
                let bottom = lerp(img.get(x0, y1, c), img.get(x1, y1, c), tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    ImageBuffer {
        width: out_w,
        height: out_h,
        channels: ch,
        data,
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn scaled_dim(n: usize, factor: f64) -> usize {
    (n as f64 * factor).round() as usize
}

/// Bilinear resize by `factor` with half-pixel-center alignment.
///
/// Output size is `round(n * factor)` per axis and the source coordinate of
/// output pixel `d` is `(d + 0.5) / factor - 0.5`, clamped to the border.
pub fn resize_bilinear(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!(
            "resize factor must be positive, got {factor}"
        )));
    }
    let (w, h) = (
        scaled_dim(img.width, factor),
        scaled_dim(img.height, factor),
    );
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "resizing {}x{} by {factor} gives an empty image",
            img.width, img.height
        )));
    }
    Ok(resample(img, w, h, factor, factor))
}

/// Bilinear resize to explicit dimensions; the per-axis scale is the size ratio.
pub fn resize_to(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("target dimensions must be positive"));
    }
    let sx = width as f64 / img.width as f64;
    let sy = height as f64 / img.height as f64;
    Ok(resample(img, width, height, sx, sy))
}

/// Gaussian kernel size and scale, both in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    kernel_size: usize,
    sigma: f64,
}

impl GaussianSpec {
    pub fn new(kernel_size: usize, sigma: f64) -> Result<Self> {
        if kernel_size < 3 || kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size must be odd and at least 3, got {kernel_size}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(GaussianSpec { kernel_size, sigma })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized 1-D weights, centered at `(k - 1) / 2`.
    pub fn kernel(&self) -> Vec<f64> {
        let center = (self.kernel_size - 1) as f64 / 2.0;
        let denom = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (0..self.kernel_size)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / denom).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }
}

/// Separable Gaussian blur with edge-replicated borders.
pub fn gaussian_blur(img: &ImageBuffer, g: &GaussianSpec) -> ImageBuffer {
    let kernel = g.kernel();
    let r = (kernel.len() / 2) as isize;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horiz = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + i as isize - r, w);
                    acc += k * img.get(sx, y, c);
                }
                horiz[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut data = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + i as isize - r, h);
                    acc += k * horiz[(sy * w + x) * ch + c];
                }
                data[(y * w + x) * ch + c] = acc;
            }
        }
    }
    ImageBuffer {
        width: w,
        height: h,
        channels: ch,
        data,
    }
}

/// Downscales by `1 / gamma`, then upscales back to the exact input dimensions.
pub fn down_up(img: &ImageBuffer, gamma: f64) -> Result<ImageBuffer> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must exceed 1, got {gamma}")));
    }
    if (img.width as f64) < gamma || (img.height as f64) < gamma {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than gamma = {gamma}",
            img.width, img.height
        )));
    }
    let small = resize_bilinear(img, 1.0 / gamma)?;
    resize_to(&small, img.width, img.height)
}

/// Draws a rectangle outline `thickness` px wide inside `b`, restricted to
/// columns in `clip_x` and the image bounds.
pub fn draw_outline(
    img: &mut ImageBuffer,
    b: &crate::geometry::BBox,
    rgb: [u8; 3],
    thickness: usize,
    clip_x: (f64, f64),
) {
    let x_lo = b.x().max(clip_x.0).max(0.0).floor() as isize;
    let x_hi = (b.x2().min(clip_x.1).min(img.width as f64).ceil() as isize) - 1;
    let y_lo = b.y().max(0.0).floor() as isize;
    let y_hi = (b.y2().min(img.height as f64).ceil() as isize) - 1;
    if x_lo > x_hi || y_lo > y_hi {
        return;
    }
    let t = thickness as isize;
    let ch = img.channels;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let edge = x - x_lo < t || x_hi - x < t || y - y_lo < t || y_hi - y < t;
            if !edge {
                continue;
            }
            for c in 0..ch {
                let v = rgb[if ch == 1 { 1 } else { c }] as f64 / 255.0;
                img.set(x as usize, y as usize, c, v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PPM / PGM

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes as binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_pnm(bytes: &[u8], origin: &Path) -> Result<ImageBuffer> {
    let fail = |m: &str| Error::ImageFormat {
        path: origin.to_path_buf(),
        message: m.to_string(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(fail("unsupported magic number (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("missing whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(fail("only maxval 255 is supported"));
    }
    let n = w * h * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| fail("truncated payload"))?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuffer::new(w, h, channels, data).map_err(|e| fail(&e.to_string()))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    decode_pnm(&fsutil::read(path)?, path)
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &encode_pnm(img))
}
