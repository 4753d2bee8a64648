//! RGB raster container, Gaussian blur kernels, image quality metrics and
//! differentiable pixel losses.
//!
//! Intensities are display-referred `f64` values with nominal range `[0, 1]`.
//! There is no transfer-function conversion anywhere in the crate.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;

/// Row-major interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clipped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear lookup at continuous coordinates where integer index `i`
    /// sits at `i + 0.5`. Returns `None` outside the pixel-center hull.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let fx = u - 0.5;
        let fy = v - 0.5;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if fx > max_x || fy > max_y {
            return None;
        }
        let x0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let a = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
            let b = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
            *o = a * (1.0 - ty) + b * ty;
        }
        Some(out)
    }

    /// Per-pixel channel mean.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }
}

/// Loads a PNG (gray, RGB, with or without alpha, palette, 1–16 bit),
/// mapping codes to `code / max_code`. Alpha is ignored.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // Palette and sub-byte depths expand to 8-bit; 16-bit stays 16-bit.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| match e {
        png::DecodingError::Format(_) | png::DecodingError::Parameter(_) => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
        other => Error::CorruptData {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (color, depth) = reader.output_color_type();
    let samples = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "palette image was not expanded".into(),
            })
        }
    };
    let (bytes, max) = match depth {
        png::BitDepth::Eight => (1, 255.0),
        png::BitDepth::Sixteen => (2, 65535.0),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("unexpected bit depth {other:?} after expansion"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::CorruptData {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::CorruptData {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let sample = |b: &[u8]| -> f64 {
        if bytes == 1 {
            b[0] as f64 / max
        } else {
            u16::from_be_bytes([b[0], b[1]]) as f64 / max
        }
    };
    // Alpha is dropped; gray is replicated across channels.
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * samples * bytes].chunks_exact(samples * bytes) {
            if samples < 3 {
                let g = sample(&px[..bytes]);
                data.extend([g, g, g]);
            } else {
                data.extend((0..CHANNELS).map(|c| sample(&px[c * bytes..(c + 1) * bytes])));
            }
        }
    }
    Image::from_vec(w, h, data)
}

/// Round-half-up quantization of a clipped intensity.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::Unwritable {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    let codes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    writer.write_image_data(&codes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Square correlation kernel with odd side length.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd and positive, got {size}")));
        }
        if taps.len() != size * size {
            return Err(Error::DimensionMismatch(format!(
                "kernel of size {size} needs {} taps, got {}",
                size * size,
                taps.len()
            )));
        }
        Ok(Kernel { size, taps })
    }

    pub fn identity() -> Self {
        Kernel { size: 1, taps: vec![1.0] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dx, dy)` from the top-left corner.
    pub fn tap(&self, dx: usize, dy: usize) -> f64 {
        self.taps[dy * self.size + dx]
    }
}

/// Normalized `k x k` Gaussian kernel sampled on the integer grid around the center.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Result<Kernel> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (k / 2) as f64;
    let mut taps = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let dx = x as f64 - r;
            let dy = y as f64 - r;
            taps.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Kernel::new(k, taps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BorderMode {
    #[default]
    Replicate,
}

/// Per-channel 2D correlation; output has the input's size.
pub fn convolve2d(img: &Image, kernel: &Kernel, border: BorderMode) -> Image {
    let BorderMode::Replicate = border;
    let r = kernel.radius() as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for ky in 0..kernel.size {
                let sy = (y + ky as isize - r).clamp(0, h - 1) as usize;
                for kx in 0..kernel.size {
                    let sx = (x + kx as isize - r).clamp(0, w - 1) as usize;
                    let t = kernel.tap(kx, ky);
                    let i = img.index(sx, sy, 0);
                    acc[0] += t * img.data[i];
                    acc[1] += t * img.data[i + 1];
                    acc[2] += t * img.data[i + 2];
                }
            }
            let o = out.index(x as usize, y as usize, 0);
            out.data[o..o + 3].copy_from_slice(&acc);
        }
    }
    out
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// PSNR in dB for peak value 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with_cap(a, b, PSNR_CAP_DB)
}

pub fn psnr_with_cap(a: &Image, b: &Image, cap: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / m).log10()).min(cap))
}

fn ssim_window_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian-window filtering over all fully-contained window positions.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters window-position values back onto the full grid.
fn filter_valid_adjoint(vals: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = vals[y * ow + x];
            for (k, gk) in g.iter().enumerate() {
                tmp[(y + k) * ow + x] += gk * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, gk) in g.iter().enumerate() {
                out[y * w + x + k] += gk * v;
            }
        }
    }
    out
}

struct SsimMaps {
    width: usize,
    height: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn ssim_maps(a: &Image, b: &Image) -> Result<SsimMaps> {
    check_same(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let g = ssim_window_1d();
    let (w, h) = (a.width, a.height);
    let la = a.luma();
    let lb = b.luma();
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, w, h, &g);
    let mu_b = filter_valid(&lb, w, h, &g);
    let eaa = filter_valid(&sq(&la, &la), w, h, &g);
    let ebb = filter_valid(&sq(&lb, &lb), w, h, &g);
    let eab = filter_valid(&sq(&la, &lb), w, h, &g);
    let n = mu_a.len();
    let mut var_a = vec![0.0; n];
    let mut var_b = vec![0.0; n];
    let mut cov = vec![0.0; n];
    for i in 0..n {
        var_a[i] = eaa[i] - mu_a[i] * mu_a[i];
        var_b[i] = ebb[i] - mu_b[i] * mu_b[i];
        cov[i] = eab[i] - mu_a[i] * mu_b[i];
    }
    Ok(SsimMaps {
        width: w,
        height: h,
        a: la,
        b: lb,
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    })
}

#[inline]
fn ssim_terms(ma: f64, mb: f64, va: f64, vb: f64, cab: f64) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * ma * mb + SSIM_C1;
    let a2 = 2.0 * cab + SSIM_C2;
    let b1 = ma * ma + mb * mb + SSIM_C1;
    let b2 = va + vb + SSIM_C2;
    (a1, a2, b1, b2)
}

/// Mean local SSIM on channel-mean luma with an 11x11, sigma 1.5 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let m = ssim_maps(a, b)?;
    let n = m.mu_a.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (a1, a2, b1, b2) = ssim_terms(m.mu_a[i], m.mu_b[i], m.var_a[i], m.var_b[i], m.cov[i]);
        sum += (a1 * a2) / (b1 * b2);
    }
    Ok(sum / n as f64)
}

/// Scalar loss together with its gradient with respect to the predicted image.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLossKind {
    L2,
    Charbonnier { eps: f64 },
}

impl Default for PixelLossKind {
    fn default() -> Self {
        PixelLossKind::L2
    }
}

pub fn pixel_loss(pred: &Image, target: &Image, kind: PixelLossKind) -> Result<LossValue> {
    check_same(pred, target)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad = Image::new(pred.width, pred.height);
    let mut value = 0.0;
    match kind {
        PixelLossKind::L2 => {
            for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
                let r = p - t;
                value += r * r;
                *g = 2.0 * r / n;
            }
        }
        PixelLossKind::Charbonnier { eps } => {
            if !(eps > 0.0) {
                return Err(Error::invalid(format!("charbonnier eps must be positive, got {eps}")));
            }
            for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
                let r = p - t;
                let s = (r * r + eps * eps).sqrt();
                value += s;
                *g = r / s / n;
            }
        }
    }
    Ok(LossValue {
        value: value / n,
        gradient: grad,
    })
}

/// `1 - ssim(pred, target)` with its analytic gradient.
pub fn ssim_loss(pred: &Image, target: &Image) -> Result<LossValue> {
    let m = ssim_maps(pred, target)?;
    let g = ssim_window_1d();
    let n = m.mu_a.len();
    let mut sum = 0.0;
    // Per-window sensitivities of S w.r.t. E[a], E[a^2] and E[ab].
    let mut d_mu = vec![0.0; n];
    let mut d_eaa = vec![0.0; n];
    let mut d_eab = vec![0.0; n];
    for i in 0..n {
        let (ma, mb) = (m.mu_a[i], m.mu_b[i]);
        let (a1, a2, b1, b2) = ssim_terms(ma, mb, m.var_a[i], m.var_b[i], m.cov[i]);
        let s = (a1 * a2) / (b1 * b2);
        sum += s;
        let ds_dcov = 2.0 * a2.recip() * s;
        let ds_dvar = -s / b2;
        let ds_dmu_direct = s * (2.0 * mb / a1 - 2.0 * ma / b1);
        d_mu[i] = ds_dmu_direct - 2.0 * ma * ds_dvar - mb * ds_dcov;
        d_eaa[i] = ds_dvar;
        d_eab[i] = ds_dcov;
    }
    let scale = -1.0 / n as f64;
    let f_mu = filter_valid_adjoint(&d_mu, m.width, m.height, &g);
    let f_aa = filter_valid_adjoint(&d_eaa, m.width, m.height, &g);
    let f_ab = filter_valid_adjoint(&d_eab, m.width, m.height, &g);
    let mut grad = Image::new(m.width, m.height);
    for p in 0..m.width * m.height {
        let gl = scale * (f_mu[p] + 2.0 * m.a[p] * f_aa[p] + m.b[p] * f_ab[p]);
        let per_channel = gl / 3.0;
        grad.data[p * 3..p * 3 + 3].fill(per_channel);
    }
    Ok(LossValue {
        value: 1.0 - sum / n as f64,
        gradient: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random_image(w: usize, h: usize, salt: u64) -> Image {
        let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Image::from_fn(w, h, |_, _| {
            let mut px = [0.0; 3];
            for v in &mut px {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                *v = (state >> 11) as f64 / (1u64 << 53) as f64;
            }
            px
        })
    }

    fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) {
        let mut enc = png::Encoder::new(BufWriter::new(File::create(path).unwrap()), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(bytes).unwrap();
    }

    #[test]
    fn loads_gray16_and_rgba() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("g16.png");
        let codes: [u16; 2] = [0, 0x8000];
        let bytes: Vec<u8> = codes.iter().flat_map(|c| c.to_be_bytes()).collect();
        write_png(&p, 2, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes);
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0; 3]);
        assert_eq!(img.pixel(1, 0), [32768.0 / 65535.0; 3]);

        let p = tmp.path().join("rgba.png");
        write_png(&p, 1, 1, png::ColorType::Rgba, png::BitDepth::Eight, &[255, 0, 51, 7]);
        assert_eq!(load_image(&p).unwrap().pixel(0, 0), [1.0, 0.0, 0.2]);
    }

    #[test]
    fn kernel_k1_is_single_unit_tap() {
        let k = gaussian_kernel(0.7, 1).unwrap();
        assert_eq!(k.taps(), &[1.0]);
    }

    #[test]
    fn kernel_rejects_even_size_and_bad_sigma() {
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(0.0, 3).is_err());
        assert!(gaussian_kernel(-1.0, 3).is_err());
    }

    #[test]
    fn kernel_small_sigma_concentrates_at_center() {
        let k = gaussian_kernel(0.1, 3).unwrap();
        assert!(k.tap(1, 1) > 0.999);
    }

    #[test]
    fn kernel_sigma_one_matches_direct_evaluation() {
        let k = gaussian_kernel(1.0, 3).unwrap();
        let e1 = (-0.5f64).exp();
        let e2 = (-1.0f64).exp();
        let total = 1.0 + 4.0 * e1 + 4.0 * e2;
        assert!((k.tap(1, 1) - 1.0 / total).abs() < 1e-15);
        assert!((k.tap(0, 1) - e1 / total).abs() < 1e-15);
        assert!((k.tap(0, 0) - e2 / total).abs() < 1e-15);
        let s: f64 = k.taps().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(k.tap(x, y), k.tap(2 - x, 2 - y));
            }
        }
    }

    #[test]
    fn identity_kernel_leaves_image_unchanged() {
        let img = pseudo_random_image(7, 5, 3);
        assert_eq!(convolve2d(&img, &Kernel::identity(), BorderMode::Replicate), img);
    }

    #[test]
    fn constant_image_survives_blur() {
        let img = Image::filled(9, 6, [0.3, 0.6, 0.9]);
        let k = gaussian_kernel(1.3, 5).unwrap();
        let out = convolve2d(&img, &k, BorderMode::Replicate);
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - i).abs() < 1e-15);
        }
    }

    #[test]
    fn impulse_imprints_kernel() {
        let mut img = Image::new(5, 5);
        for c in 0..3 {
            img.set(2, 2, c, 1.0);
        }
        let k = gaussian_kernel(0.8, 3).unwrap();
        let out = convolve2d(&img, &k, BorderMode::Replicate);
        for y in 0..5 {
            for x in 0..5 {
                // direct summation: out(x,y) = sum_k tap(k) * img(x+kx-1, y+ky-1)
                let mut expect = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        let sy = y as isize + ky as isize - 1;
                        if sx == 2 && sy == 2 {
                            expect += k.tap(kx, ky);
                        }
                    }
                }
                assert!((out.get(x, y, 1) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.2; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = Image::filled(3, 3, [0.0; 3]);
        let o = Image::filled(3, 3, [1.0; 3]);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Image::new(2, 2)).is_err());
    }

    #[test]
    fn ssim_identity_and_errors() {
        let a = pseudo_random_image(16, 16, 9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let small = Image::new(10, 10);
        assert!(ssim(&small, &small).is_err());
        assert!(ssim(&a, &Image::new(16, 17)).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_oracle_on_checkerboard() {
        let a = Image::filled(15, 13, [0.5; 3]);
        let b = Image::from_fn(15, 13, |x, y| {
            let v = if (x + y) % 2 == 0 { 0.6 } else { 0.4 };
            [v; 3]
        });
        // Direct per-window evaluation with an explicit 2D window.
        let mut g = [0.0; 11];
        for (i, v) in g.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / 4.5).exp();
        }
        let mut total = 0.0;
        let mut count = 0.0;
        for oy in 0..=13 - 11 {
            for ox in 0..=15 - 11 {
                let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let w = g[i] * g[j];
                        wsum += w;
                        ma += w * a.get(ox + i, oy + j, 0);
                        mb += w * b.get(ox + i, oy + j, 0);
                    }
                }
                ma /= wsum;
                mb /= wsum;
                let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let w = g[i] * g[j] / wsum;
                        let da = a.get(ox + i, oy + j, 0) - ma;
                        let db = b.get(ox + i, oy + j, 0) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cab += w * da * db;
                    }
                }
                let c1 = 1e-4;
                let c2 = 9e-4;
                total += (2.0 * ma * mb + c1) * (2.0 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        let expect = total / count;
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((ssim(&b, &a).unwrap() - got).abs() < 1e-15);
    }

    #[test]
    fn pixel_loss_closed_forms() {
        let a = pseudo_random_image(3, 2, 1);
        let l = pixel_loss(&a, &a, PixelLossKind::L2).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.gradient.data().iter().all(|&g| g == 0.0));
        let c = pixel_loss(&a, &a, PixelLossKind::Charbonnier { eps: 1e-3 }).unwrap();
        assert!((c.value - 1e-3).abs() < 1e-15);
        assert!(c.gradient.data().iter().all(|&g| g == 0.0));

        let t = Image::from_vec(1, 1, vec![0.2, 0.5, 0.5]).unwrap();
        let p = Image::from_vec(1, 1, vec![0.5, 0.5, 0.5]).unwrap();
        let l = pixel_loss(&p, &t, PixelLossKind::L2).unwrap();
        assert!((l.value - 0.03).abs() < 1e-15);
        assert!((l.gradient.data()[0] - 0.2).abs() < 1e-15);
        assert_eq!(l.gradient.data()[1], 0.0);
    }

    #[test]
    fn ssim_loss_identity_has_zero_gradient() {
        let a = pseudo_random_image(12, 14, 5);
        let l = ssim_loss(&a, &a).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(l.gradient.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1.5), 255);
        assert_eq!(quantize(-0.2), 0);
    }
}
