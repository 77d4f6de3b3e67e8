//! Centered 2-D DFT, square low-pass masking, and the low/high frequency
//! split of an image.
//!
//! Spectra are stored center-shifted: bin `(u, v)` of the unshifted DFT
//! lives at `((u + H/2) mod H, (v + W/2) mod W)`, so the DC term sits at
//! `(⌊H/2⌋, ⌊W/2⌋)` for both even and odd sizes.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::image::Image;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// One channel of a center-shifted spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, bins: Vec<Complex64>) -> Self {
        assert_eq!(height * width, bins.len(), "spectrum size");
        Self { height, width, bins }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![Complex64::new(0.0, 0.0); height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }

    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.bins[u * self.width + v]
    }

    /// `Σ|F(u,v)|²`.
    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Zero every bin outside the mask.
    pub fn apply_mask(&mut self, mask: &LowpassMask) {
        assert_eq!((self.height, self.width), (mask.height, mask.width), "mask size");
        for (b, &keep) in self.bins.iter_mut().zip(&mask.cells) {
            if !keep {
                *b = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Result of an inverse transform: the real part plus the largest
/// imaginary magnitude that was discarded.
#[derive(Clone, Debug)]
pub struct Inverse {
    pub values: Vec<f64>,
    pub imag_residue: f64,
}

fn transform_rows(data: &mut [Complex64], rows: usize, cols: usize, dir: FftDirection) {
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(cols, dir));
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    debug_assert_eq!(data.len(), rows * cols);
    fft.process_with_scratch(data, &mut scratch);
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn dft2(mut data: Vec<Complex64>, h: usize, w: usize, dir: FftDirection) -> Vec<Complex64> {
    transform_rows(&mut data, h, w, dir);
    let mut t = transpose(&data, h, w);
    transform_rows(&mut t, w, h, dir);
    transpose(&t, w, h)
}

/// Move the element at `(r, c)` to `((r + sr) mod h, (c + sc) mod w)`.
fn roll(data: &[Complex64], h: usize, w: usize, sr: usize, sc: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..h {
        let dr = (r + sr) % h;
        for c in 0..w {
            out[dr * w + (c + sc) % w] = data[r * w + c];
        }
    }
    out
}

/// Forward DFT of one real `h×w` channel, center-shifted.
pub fn fft2d(channel: &[f64], height: usize, width: usize) -> Spectrum {
    assert!(height > 0 && width > 0, "empty grid");
    assert_eq!(channel.len(), height * width, "grid size");
    let data = channel.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let raw = dft2(data, height, width, FftDirection::Forward);
    Spectrum::new(height, width, roll(&raw, height, width, height / 2, width / 2))
}

/// Inverse of [`fft2d`], returning the real part.
pub fn ifft2d(spectrum: &Spectrum) -> Inverse {
    let (h, w) = (spectrum.height, spectrum.width);
    let unshifted = roll(&spectrum.bins, h, w, h - h / 2, w - w / 2);
    let raw = dft2(unshifted, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    let imag_residue = raw.iter().map(|c| (c.im * scale).abs()).fold(0.0, f64::max);
    Inverse {
        values: raw.iter().map(|c| c.re * scale).collect(),
        imag_residue,
    }
}

/// Binary square mask that keeps `[c−r, c+r]` (inclusive, clamped) around
/// the spectrum center on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct LowpassMask {
    height: usize,
    width: usize,
    radius: usize,
    center: (usize, usize),
    cells: Vec<bool>,
}

impl LowpassMask {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.cells[u * self.width + v]
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

pub fn lowpass_mask(height: usize, width: usize, radius: usize) -> LowpassMask {
    let (cx, cy) = (height / 2, width / 2);
    let rows = cx.saturating_sub(radius)..=(cx + radius).min(height - 1);
    let cols = cy.saturating_sub(radius)..=(cy + radius).min(width - 1);
    let mut cells = vec![false; height * width];
    for u in rows {
        for v in cols.clone() {
            cells[u * width + v] = true;
        }
    }
    LowpassMask {
        height,
        width,
        radius,
        center: (cx, cy),
        cells,
    }
}

/// Low-pass filtered image of every channel. Values are not clipped.
pub fn lowpass(image: &Image, radius: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let mask = lowpass_mask(h, w, radius);
    let mut out = image.clone();
    for c in 0..image.channels() {
        let grid: Vec<f64> = image.channel(c).iter().map(|&v| v as f64).collect();
        let mut spec = fft2d(&grid, h, w);
        spec.apply_mask(&mask);
        let inv = ifft2d(&spec);
        for (o, v) in out.channel_mut(c).iter_mut().zip(inv.values) {
            *o = v as f32;
        }
    }
    out
}

/// Split into `(LFI, HFI)` with `HFI = I − LFI` computed pixel-wise.
pub fn decompose(image: &Image, radius: usize) -> (Image, Image) {
    let lfi = lowpass(image, radius);
    let hfi_data = image.data().iter().zip(lfi.data()).map(|(&i, &l)| i - l).collect();
    let hfi = Image::new(image.channels(), image.height(), image.width(), hfi_data).expect("same shape");
    (lfi, hfi)
}

/// Amplitude and principal-value phase of a spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarSpectrum {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

pub fn to_polar(spectrum: &Spectrum) -> PolarSpectrum {
    let (amplitude, phase) = spectrum
        .bins
        .iter()
        .map(|c| {
            let a = c.norm();
            let p = if a == 0.0 { 0.0 } else { c.im.atan2(c.re) };
            (a, p)
        })
        .unzip();
    PolarSpectrum {
        height: spectrum.height,
        width: spectrum.width,
        amplitude,
        phase,
    }
}

pub fn from_polar(polar: &PolarSpectrum) -> Spectrum {
    let bins = polar
        .amplitude
        .iter()
        .zip(&polar.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    Spectrum::new(polar.height, polar.width, bins)
}

/// Map an angle into `(−π, π]`.
pub fn wrap_phase(p: f64) -> f64 {
    let mut x = (p + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}
