//! Frequency-domain Gaussian image fusion.
//!
//! The image is transformed with a 2-D FFT, every frequency bin is scaled by a
//! Gaussian gain evaluated at its centred normalised frequency, the result is
//! transformed back, and the smoothed image is blended with the original:
//!
//! ```text
//! gain(fx, fy) = 1/(2πσ²) · exp(-(fx² + fy²) / (2σ²))      fx, fy ∈ [-0.5, 0.5)
//! fused        = α · image + (1 - α) · ifft2(gain · fft2(image))
//! ```
//!
//! With `normalize_peak` the gain is divided by its peak `1/(2πσ²)`, so the DC
//! bin passes unchanged and every gain lies in (0, 1].

mod io;

pub use io::{load_f32_grid, load_pnm, save_f32_grid, ImageMeta};

use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Largest imaginary part tolerated (and discarded) after an inverse transform.
pub const IMAGINARY_RESIDUE: f64 = 1e-6;

/// Planar image: `channels` planes of `height × width`, each row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    /// Ingests pixels; every value must be finite and within [0, 1].
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let img = Self::from_values(height, width, channels, data)?;
        if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Usage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(img)
    }

    /// Like [`ImageGrid::new`] but accepts any finite value, e.g. adapter output.
    pub fn from_values(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!(
                "image {height}x{width} with {channels} channels"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::from_values(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn scaled(&self, a: f32) -> Result<ImageGrid> {
        Self::from_values(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| v * a).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Per-channel complex spectrum, DC at bin (0, 0), uncentred storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    bins: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> &[Complex<f64>] {
        &self.bins
    }

    pub fn bin(&self, c: usize, ky: usize, kx: usize) -> Complex<f64> {
        self.bins[(c * self.height + ky) * self.width + kx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub sigma: f64,
    pub alpha: f64,
    pub normalize_peak: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            alpha: 0.9,
            normalize_peak: true,
        }
    }
}

impl AdapterConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            out.push(format!("adapter.sigma must be > 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            out.push(format!("adapter.alpha must be in [0, 1], got {}", self.alpha));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Signed normalised frequency of bin `k` in an `n`-point transform, in [-0.5, 0.5).
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let signed = if k < n.div_ceil(2) { k as i64 } else { k as i64 - n as i64 };
    signed as f64 / n as f64
}

/// Gaussian gain at normalised frequency `(fx, fy)`.
pub fn gaussian_gain_at(fx: f64, fy: f64, cfg: &AdapterConfig) -> Result<f64> {
    let s = cfg.sigma;
    if !(s > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {s}")));
    }
    // Floored so far-out bins stay strictly positive instead of underflowing.
    let envelope = (-(fx * fx + fy * fy) / (2.0 * s * s)).exp().max(f64::MIN_POSITIVE);
    Ok(if cfg.normalize_peak {
        envelope
    } else {
        envelope / (2.0 * PI * s * s)
    })
}

/// Gain for the centred integer frequency index `(x, y)` of a
/// `width × height` spectrum; `(0, 0)` is DC.
pub fn gaussian_gain(x: i64, y: i64, width: usize, height: usize, cfg: &AdapterConfig) -> Result<f64> {
    gaussian_gain_at(x as f64 / width as f64, y as f64 / height as f64, cfg)
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Usage(format!(
            "FFT extents must be powers of two, got {h}x{w}"
        )));
    }
    Ok(())
}

/// In-place 2-D transform of one `h × w` plane; rows then columns.
fn transform_plane(plane: &mut [Complex<f64>], h: usize, w: usize, dir: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(w, dir);
    for row in plane.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, dir);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

/// Unnormalised forward 2-D DFT of every channel.
pub fn fft2(img: &ImageGrid) -> Result<Spectrum> {
    let (h, w) = (img.height, img.width);
    check_pow2(h, w)?;
    let mut bins: Vec<Complex<f64>> = img.data.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    for plane in bins.chunks_mut(h * w) {
        transform_plane(plane, h, w, FftDirection::Forward);
    }
    Ok(Spectrum {
        height: h,
        width: w,
        channels: img.channels,
        bins,
    })
}

/// Inverse 2-D DFT scaled by `1/(H·W)`, returning the complex result.
pub fn ifft2_complex(spec: &Spectrum) -> Result<Vec<Complex<f64>>> {
    let (h, w) = (spec.height, spec.width);
    check_pow2(h, w)?;
    let scale = 1.0 / (h * w) as f64;
    let mut out = spec.bins.clone();
    for plane in out.chunks_mut(h * w) {
        transform_plane(plane, h, w, FftDirection::Inverse);
    }
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// Inverse transform back to pixels. Imaginary parts up to
/// [`IMAGINARY_RESIDUE`] are dropped; anything larger is an error.
pub fn ifft2(spec: &Spectrum) -> Result<ImageGrid> {
    let out = ifft2_complex(spec)?;
    let worst = out.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if worst > IMAGINARY_RESIDUE {
        return Err(Error::Numeric(format!(
            "inverse transform has imaginary residue {worst:e}"
        )));
    }
    ImageGrid::from_values(
        spec.height,
        spec.width,
        spec.channels,
        out.iter().map(|v| v.re as f32).collect(),
    )
}

/// Multiplies every bin by the Gaussian gain at its centred frequency.
pub fn apply_filter(spec: &Spectrum, cfg: &AdapterConfig) -> Result<Spectrum> {
    let (h, w) = (spec.height, spec.width);
    let mut gains = Vec::with_capacity(h * w);
    for ky in 0..h {
        for kx in 0..w {
            gains.push(gaussian_gain_at(bin_frequency(kx, w), bin_frequency(ky, h), cfg)?);
        }
    }
    let bins = spec
        .bins
        .chunks(h * w)
        .flat_map(|plane| plane.iter().zip(&gains).map(|(b, g)| b * g))
        .collect();
    Ok(Spectrum {
        bins,
        ..spec.clone()
    })
}

/// `alpha · orig + (1 - alpha) · filtered`, pixel-wise.
pub fn fuse(orig: &ImageGrid, filtered: &ImageGrid, alpha: f64) -> Result<ImageGrid> {
    if !orig.same_shape(filtered) {
        return Err(Error::dim(
            "fuse",
            &[orig.channels, orig.height, orig.width],
            &[filtered.channels, filtered.height, filtered.width],
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let data = if alpha == 1.0 {
        orig.data.clone()
    } else if alpha == 0.0 {
        filtered.data.clone()
    } else {
        let a = alpha as f32;
        orig.data
            .iter()
            .zip(&filtered.data)
            .map(|(&o, &f)| a * o + (1.0 - a) * f)
            .collect()
    };
    ImageGrid::from_values(orig.height, orig.width, orig.channels, data)
}

/// Full adapter: filter in the frequency domain, transform back, blend.
pub fn adapt(img: &ImageGrid, cfg: &AdapterConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    let filtered = ifft2(&apply_filter(&fft2(img)?, cfg)?)?;
    fuse(img, &filtered, cfg.alpha)
}
