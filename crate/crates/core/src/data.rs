//! Synthetic multi-domain shape benchmark, splits, PPM I/O and the
//! standard (flip + jitter) augmentation.
//!
//! Every domain draws the same five shape classes with a dark outline; the
//! domains differ in background, fill, blur and color shift, all of which
//! live mostly in low spatial frequencies. The "sketch" domain keeps only
//! the outline on white paper.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::Image;

pub const IMAGE_SIZE: usize = 32;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed image at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("pose leaves the canvas: {0}")]
    Pose(String),
    #[error("invalid data: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Star,
        ShapeClass::Cross,
    ];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Star => "star",
            ShapeClass::Cross => "cross",
        }
    }

    /// Outline in local coordinates for a unit radius, or `None` for the circle.
    fn polygon(self) -> Option<Vec<(f64, f64)>> {
        let ring = |n: usize, r: f64, phase: f64| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let a = phase + 2.0 * PI * i as f64 / n as f64;
                    (r * a.cos(), r * a.sin())
                })
                .collect()
        };
        match self {
            ShapeClass::Circle => None,
            ShapeClass::Square => Some(ring(4, 1.0, PI / 4.0)),
            ShapeClass::Triangle => Some(ring(3, 1.0, -PI / 2.0)),
            ShapeClass::Star => Some(
                (0..10)
                    .map(|i| {
                        let r = if i % 2 == 0 { 1.0 } else { 0.45 };
                        let a = -PI / 2.0 + PI * i as f64 / 5.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect(),
            ),
            ShapeClass::Cross => {
                let (a, b) = (0.32, 1.0);
                Some(vec![
                    (-a, -b),
                    (a, -b),
                    (a, -a),
                    (b, -a),
                    (b, a),
                    (a, a),
                    (a, b),
                    (-a, b),
                    (-a, a),
                    (-b, a),
                    (-b, -a),
                    (-a, -a),
                ])
            }
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    Flat,
    VerticalGradient,
    RadialGradient,
    NoiseTexture,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Solid,
    /// Smooth two-tone diagonal stripes with an 8 px period.
    Hatched,
    /// Outline only.
    Empty,
}

/// Rendering style of one domain. Colors are drawn per sample, uniformly per
/// channel from the given ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub background: Background,
    pub background_range: (f32, f32),
    pub fill: Fill,
    pub fill_range: (f32, f32),
    pub edge_thickness: f64,
    /// The outline darkens the underlying color by an amount drawn from this
    /// range, so edge contrast does not depend on the domain's palette.
    pub edge_darkening: (f32, f32),
    /// Gaussian sigma in pixels; 0 disables blurring.
    pub blur: f64,
    pub color_shift: [f32; 3],
}

impl DomainSpec {
    pub fn flat() -> Self {
        Self {
            name: "flat".into(),
            background: Background::Flat,
            background_range: (0.6, 1.0),
            fill: Fill::Solid,
            fill_range: (0.6, 1.0),
            edge_thickness: 1.2,
            edge_darkening: (0.55, 0.65),
            blur: 0.0,
            color_shift: [0.0; 3],
        }
    }

    pub fn gradient() -> Self {
        Self {
            name: "gradient".into(),
            background: Background::VerticalGradient,
            background_range: (0.6, 1.0),
            fill: Fill::Hatched,
            fill_range: (0.6, 1.0),
            edge_thickness: 1.2,
            edge_darkening: (0.55, 0.65),
            blur: 0.25,
            color_shift: [0.05, 0.0, -0.05],
        }
    }

    pub fn texture() -> Self {
        Self {
            name: "texture".into(),
            background: Background::NoiseTexture,
            background_range: (0.7, 0.9),
            fill: Fill::Solid,
            fill_range: (0.6, 1.0),
            edge_thickness: 1.2,
            edge_darkening: (0.55, 0.65),
            blur: 0.15,
            color_shift: [-0.05, 0.03, 0.05],
        }
    }

    pub fn sketch() -> Self {
        Self {
            name: "sketch".into(),
            background: Background::Flat,
            background_range: (1.0, 1.0),
            fill: Fill::Empty,
            fill_range: (1.0, 1.0),
            edge_thickness: 1.2,
            edge_darkening: (0.55, 0.65),
            blur: 0.0,
            color_shift: [0.0; 3],
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::flat(), Self::gradient(), Self::texture(), Self::sketch()]
    }
}

/// Placement of a shape: center in pixels, circumradius in pixels, rotation
/// in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Pose {
    /// Random pose that keeps the shape and its outline inside a
    /// `size×size` canvas.
    pub fn random<R: Rng>(size: usize, rng: &mut R) -> Self {
        let size = size as f64;
        let scale = rng.random_range(size * 0.22..size * 0.34);
        let margin = scale + 2.0;
        Self {
            cx: rng.random_range(margin..size - margin),
            cy: rng.random_range(margin..size - margin),
            scale,
            rotation: rng.random_range(0.0..2.0 * PI),
        }
    }
}

struct Geometry {
    circle: bool,
    poly: Vec<(f64, f64)>,
    pose: Pose,
}

impl Geometry {
    fn new(class: ShapeClass, pose: Pose) -> Self {
        let (s, c) = pose.rotation.sin_cos();
        let poly = class
            .polygon()
            .unwrap_or_default()
            .into_iter()
            .map(|(x, y)| {
                let (x, y) = (x * pose.scale, y * pose.scale);
                (pose.cx + c * x - s * y, pose.cy + s * x + c * y)
            })
            .collect();
        Self {
            circle: class == ShapeClass::Circle,
            poly,
            pose,
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        if self.circle {
            return (x - self.pose.cx).hypot(y - self.pose.cy) <= self.pose.scale;
        }
        let mut inside = false;
        let n = self.poly.len();
        for i in 0..n {
            let (x1, y1) = self.poly[i];
            let (x2, y2) = self.poly[(i + 1) % n];
            if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
                inside = !inside;
            }
        }
        inside
    }

    /// Distance from `(x, y)` to the outline.
    fn edge_distance(&self, x: f64, y: f64) -> f64 {
        if self.circle {
            return ((x - self.pose.cx).hypot(y - self.pose.cy) - self.pose.scale).abs();
        }
        let n = self.poly.len();
        (0..n)
            .map(|i| {
                let (x1, y1) = self.poly[i];
                let (x2, y2) = self.poly[(i + 1) % n];
                let (dx, dy) = (x2 - x1, y2 - y1);
                let t = (((x - x1) * dx + (y - y1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                (x - (x1 + t * dx)).hypot(y - (y1 + t * dy))
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Distance from pixel center `(x, y)` to the analytic outline of `class`
/// at `pose`.
pub fn outline_distance(class: ShapeClass, pose: Pose, x: f64, y: f64) -> f64 {
    Geometry::new(class, pose).edge_distance(x, y)
}

fn random_color<R: Rng>(range: (f32, f32), rng: &mut R) -> [f32; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = if range.0 >= range.1 {
            range.0
        } else {
            rng.random_range(range.0..range.1)
        };
    }
    c
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn background<R: Rng>(domain: &DomainSpec, size: usize, rng: &mut R) -> Vec<[f32; 3]> {
    let a = random_color(domain.background_range, rng);
    let b = random_color(domain.background_range, rng);
    let s = size as f32;
    let mut out = Vec::with_capacity(size * size);
    match domain.background {
        Background::Flat => out.resize(size * size, a),
        Background::VerticalGradient => {
            for y in 0..size {
                let c = lerp(a, b, (y as f32 + 0.5) / s);
                out.extend(std::iter::repeat_n(c, size));
            }
        }
        Background::RadialGradient => {
            let half = s / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f32 + 0.5 - half).hypot(y as f32 + 0.5 - half) / (half * 1.42)).min(1.0);
                    out.push(lerp(a, b, d));
                }
            }
        }
        Background::NoiseTexture => {
            // A few random low-frequency cosines per channel.
            let waves: Vec<[(f32, f32, f32, f32); 3]> = (0..4)
                .map(|_| {
                    let mut w = [(0.0, 0.0, 0.0, 0.0); 3];
                    for v in &mut w {
                        *v = (
                            rng.random_range(-3i32..=3) as f32,
                            rng.random_range(-3i32..=3) as f32,
                            rng.random_range(0.0..std::f32::consts::TAU),
                            rng.random_range(0.03..0.09),
                        );
                    }
                    w
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let mut c = a;
                    for w in &waves {
                        for (ch, &(fx, fy, ph, amp)) in w.iter().enumerate() {
                            let arg = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / s + ph;
                            c[ch] += amp * arg.cos();
                        }
                    }
                    out.push(c);
                }
            }
        }
    }
    out
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let (h, w) = (img.height() as isize, img.width() as isize);
    for c in 0..img.channels() {
        let plane = img.channel(c).to_vec();
        let mut tmp = vec![0.0; plane.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * plane[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc / norm;
            }
        }
        let out = img.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc / norm;
            }
        }
    }
}

/// Render one 3×32×32 sample. Style colors are drawn from `rng`.
pub fn render_sample<R: Rng>(class: ShapeClass, domain: &DomainSpec, pose: Pose, rng: &mut R) -> Result<Image, DataError> {
    render_sized(class, domain, pose, IMAGE_SIZE, rng)
}

pub fn render_sized<R: Rng>(
    class: ShapeClass,
    domain: &DomainSpec,
    pose: Pose,
    size: usize,
    rng: &mut R,
) -> Result<Image, DataError> {
    let reach = pose.scale + domain.edge_thickness / 2.0;
    let limit = size as f64;
    if !(pose.scale > 0.0)
        || pose.cx - reach < 0.0
        || pose.cy - reach < 0.0
        || pose.cx + reach > limit
        || pose.cy + reach > limit
    {
        return Err(DataError::Pose(format!(
            "center ({:.2}, {:.2}) radius {:.2} on a {size}×{size} canvas",
            pose.cx, pose.cy, reach
        )));
    }
    let geom = Geometry::new(class, pose);
    let bg = background(domain, size, rng);
    let fill_a = random_color(domain.fill_range, rng);
    let fill_b = random_color(domain.fill_range, rng);
    let darken = random_color(domain.edge_darkening, rng);
    let hatch_angle = rng.random_range(0.0..PI);
    let (hs, hc) = hatch_angle.sin_cos();
    let half_t = domain.edge_thickness / 2.0;
    let ss = SUPERSAMPLE as f64;
    let bound = pose.scale + half_t + 1.5;

    let mut img = Image::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let mut color = bg[y * size + x];
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - pose.cx).hypot(py - pose.cy) <= bound {
                let (mut fill_cov, mut edge_cov) = (0.0f32, 0.0f32);
                for j in 0..SUPERSAMPLE {
                    for i in 0..SUPERSAMPLE {
                        let sx = x as f64 + (i as f64 + 0.5) / ss;
                        let sy = y as f64 + (j as f64 + 0.5) / ss;
                        if geom.edge_distance(sx, sy) <= half_t {
                            edge_cov += 1.0;
                        } else if geom.inside(sx, sy) {
                            fill_cov += 1.0;
                        }
                    }
                }
                let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
                let (fill_cov, edge_cov) = (fill_cov / n, edge_cov / n);
                let fill = match domain.fill {
                    Fill::Solid => Some(fill_a),
                    Fill::Hatched => {
                        let t = (2.0 * PI * (px * hc + py * hs) / 8.0).sin() * 0.5 + 0.5;
                        Some(lerp(fill_a, fill_b, t as f32))
                    }
                    Fill::Empty => None,
                };
                if let Some(f) = fill {
                    color = lerp(color, f, fill_cov);
                }
                let edge = [
                    (color[0] - darken[0]).max(0.0),
                    (color[1] - darken[1]).max(0.0),
                    (color[2] - darken[2]).max(0.0),
                ];
                color = lerp(color, edge, edge_cov);
            }
            for (c, &v) in color.iter().enumerate() {
                img.set(c, y, x, v);
            }
        }
    }
    gaussian_blur(&mut img, domain.blur);
    for c in 0..3 {
        let shift = domain.color_shift[c];
        img.channel_mut(c).iter_mut().for_each(|v| *v = (*v + shift).clamp(0.0, 1.0));
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Dataset-wide identifier.
    pub id: usize,
    pub image: Image,
    pub label: usize,
    pub domain: usize,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

impl Domain {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domains: Vec<Domain>,
    pub num_classes: usize,
    pub seed: u64,
}

impl DomainDataset {
    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.spec.name == name)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.spec.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.domains.iter().flat_map(|d| d.samples.iter())
    }
}

/// SplitMix64 step; used to derive independent per-sample seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Build the benchmark: every domain gets `per_class_per_domain` samples of
/// each class, split 4:1 into train/test per class.
pub fn build_dataset(
    domains: &[DomainSpec],
    classes: usize,
    per_class_per_domain: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    if classes == 0 || classes > ShapeClass::ALL.len() {
        return Err(DataError::Invalid(format!("classes must be in 1..=5, got {classes}")));
    }
    let train_per_class = per_class_per_domain * 4 / 5;
    let mut out = Vec::with_capacity(domains.len());
    let mut id = 0;
    for (d, spec) in domains.iter().enumerate() {
        let mut samples = Vec::with_capacity(classes * per_class_per_domain);
        for label in 0..classes {
            let class = ShapeClass::ALL[label];
            for k in 0..per_class_per_domain {
                let sample_seed = mix_seed(seed, ((d as u64) << 40) | ((label as u64) << 20) | k as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                let pose = Pose::random(IMAGE_SIZE, &mut rng);
                let image = render_sample(class, spec, pose, &mut rng)?;
                samples.push(Sample {
                    id,
                    image,
                    label,
                    domain: d,
                    split: if k < train_per_class { Split::Train } else { Split::Test },
                    seed: sample_seed,
                });
                id += 1;
            }
        }
        out.push(Domain {
            spec: spec.clone(),
            samples,
        });
    }
    Ok(DomainDataset {
        domains: out,
        num_classes: classes,
        seed,
    })
}

/// The default four-domain, five-class benchmark (120 images per class and
/// domain).
pub fn default_dataset(seed: u64) -> Result<DomainDataset, DataError> {
    build_dataset(&DomainSpec::presets(), 5, 120, seed)
}

// ---------------------------------------------------------------------------
// PPM I/O

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a 3-channel image as binary PPM (P6, maxval 255).
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>, DataError> {
    if image.channels() != 3 {
        return Err(DataError::Shape(format!("PPM needs 3 channels, got {}", image.channels())));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return if self.pos >= self.bytes.len() {
                self.err(format!("file ends before {what}"))
            } else {
                self.err(format!("expected {what}"))
            };
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.err(format!("{what} out of range")), Ok)
    }
}

/// Decode binary PPM (P6, maxval ≤ 255) into `[0, 1]` values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if bytes.len() < 2 {
        return r.err("file too short for a PPM header");
    }
    if &bytes[..2] != b"P6" {
        return r.err("missing P6 magic");
    }
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return r.err("zero image dimension");
    }
    if maxval == 0 || maxval > 255 {
        return r.err(format!("unsupported maxval {maxval}"));
    }
    match bytes.get(r.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => r.pos += 1,
        Some(_) => return r.err("expected whitespace after maxval"),
        None => return r.err("file ends before pixel data"),
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| DataError::Format {
            offset: r.pos,
            message: "image dimensions overflow".into(),
        })?;
    let raster = &bytes[r.pos..];
    if raster.len() < need {
        return Err(DataError::Format {
            offset: bytes.len(),
            message: format!("truncated pixel data: need {need} bytes, found {}", raster.len()),
        });
    }
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[(c * height + y) * width + x] = raster[(y * width + x) * 3 + c] as f32 * scale;
            }
        }
    }
    Image::new(3, height, width, data)
}

pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes)
}

pub fn write_image(path: &Path, image: &Image) -> Result<(), DataError> {
    let bytes = encode_ppm(image)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Dataset directory layout: <root>/<domain>/<class>/<index>.ppm + manifest.csv

pub const MANIFEST: &str = "manifest.csv";

pub fn write_dataset(dataset: &DomainDataset, root: &Path) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut manifest = String::from("path,domain,class,split,seed\n");
    for domain in &dataset.domains {
        for s in &domain.samples {
            let class = ShapeClass::ALL[s.label].name();
            let rel = format!("{}/{}/{}.ppm", domain.spec.name, class, s.id);
            write_image(&root.join(&rel), &s.image)?;
            manifest.push_str(&format!(
                "{rel},{},{class},{},{}\n",
                domain.spec.name,
                s.split.name(),
                s.seed
            ));
        }
    }
    let path = root.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&path))
}

/// Load a dataset written by [`write_dataset`]. Domain styles not among the
/// presets are recorded with the flat preset's parameters under their own
/// name.
pub fn load_dataset(root: &Path) -> Result<DomainDataset, DataError> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("path,domain,class,split,seed") => {}
        _ => return Err(DataError::Invalid(format!("{}: unexpected header", path.display()))),
    }
    let presets = DomainSpec::presets();
    let mut domains: Vec<Domain> = Vec::new();
    let mut max_label = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || DataError::Invalid(format!("{}:{}: malformed row", path.display(), lineno + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        let label = ShapeClass::ALL.iter().position(|c| c.name() == f[2]).ok_or_else(bad)?;
        let split = match f[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad()),
        };
        let seed = f[4].parse().map_err(|_| bad())?;
        let d = match domains.iter().position(|d| d.spec.name == f[1]) {
            Some(d) => d,
            None => {
                let mut spec = presets
                    .iter()
                    .find(|p| p.name == f[1])
                    .cloned()
                    .unwrap_or_else(DomainSpec::flat);
                spec.name = f[1].to_string();
                domains.push(Domain {
                    spec,
                    samples: Vec::new(),
                });
                domains.len() - 1
            }
        };
        let image = read_image(&root.join(f[0]))?;
        let id = domains.iter().map(|d| d.samples.len()).sum::<usize>();
        max_label = max_label.max(label);
        domains[d].samples.push(Sample {
            id,
            image,
            label,
            domain: d,
            split,
            seed,
        });
    }
    // Ids follow domain order so they are stable regardless of row order.
    let mut next = 0;
    for d in &mut domains {
        for s in &mut d.samples {
            s.id = next;
            next += 1;
        }
    }
    Ok(DomainDataset {
        domains,
        num_classes: max_label + 1,
        seed: 0,
    })
}

// ---------------------------------------------------------------------------
// Standard augmentation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardAugment {
    pub flip: bool,
    /// Per-channel brightness factors.
    pub factors: [f32; 3],
}

impl StandardAugment {
    pub const IDENTITY: StandardAugment = StandardAugment {
        flip: false,
        factors: [1.0; 3],
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let mut factors = [1.0; 3];
        for f in &mut factors {
            *f = rng.random_range(0.9..=1.1);
        }
        Self { flip, factors }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let (h, w) = (image.height(), image.width());
        let mut out = image.clone();
        for c in 0..image.channels() {
            let f = self.factors[c % 3];
            for y in 0..h {
                for x in 0..w {
                    let sx = if self.flip { w - 1 - x } else { x };
                    out.set(c, y, x, (image.get(c, y, sx) * f).clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

/// Random horizontal flip (p = 0.5) and per-channel jitter in `[0.9, 1.1]`.
pub fn augment_standard<R: Rng>(image: &Image, rng: &mut R) -> Image {
    StandardAugment::sample(rng).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose() -> Pose {
        Pose {
            cx: 16.0,
            cy: 15.0,
            scale: 9.0,
            rotation: 0.3,
        }
    }

    #[test]
    fn two_domains_render_different_pixels() {
        let a = render_sample(ShapeClass::Star, &DomainSpec::flat(), pose(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = render_sample(ShapeClass::Star, &DomainSpec::sketch(), pose(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.1);
    }

    #[test]
    fn flat_background_is_exact() {
        let mut spec = DomainSpec::flat();
        spec.background_range = (0.3, 0.3);
        let img = render_sample(ShapeClass::Circle, &spec, pose(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // top-left corner is far from the shape
        for c in 0..3 {
            assert_eq!(img.get(c, 0, 0), 0.3);
            assert_eq!(img.get(c, 31, 31), 0.3);
        }
    }

    #[test]
    fn off_canvas_pose_is_rejected() {
        let p = Pose { cx: 3.0, ..pose() };
        let r = render_sample(ShapeClass::Square, &DomainSpec::flat(), p, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(DataError::Pose(_))));
    }

    #[test]
    fn random_poses_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let p = Pose::random(IMAGE_SIZE, &mut rng);
            for spec in DomainSpec::presets() {
                assert!(render_sample(ShapeClass::Cross, &spec, p, &mut rng).is_ok());
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = DomainSpec::texture();
        let a = render_sample(ShapeClass::Triangle, &spec, pose(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = render_sample(ShapeClass::Triangle, &spec, pose(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ppm_white_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_header_comments_and_maxval() {
        let bytes = b"P6 # comment\n2 1 # dims\n15\n\x0f\x00\x00\x00\x0f\x00";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
    }

    #[test]
    fn ppm_errors_carry_offsets() {
        match decode_ppm(b"P6\n2 2\n255\n\x00\x00") {
            Err(DataError::Format { offset, message }) => {
                assert_eq!(offset, 13);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(DataError::Format { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n1"), Err(DataError::Format { .. })));
        assert!(matches!(decode_ppm(b""), Err(DataError::Format { .. })));
        assert!(matches!(decode_ppm(b"P6\n1 1\n999\n\x00\x00\x00"), Err(DataError::Format { .. })));
    }

    #[test]
    fn standard_augment_identity_and_double_flip() {
        let img = render_sample(ShapeClass::Star, &DomainSpec::gradient(), pose(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(StandardAugment::IDENTITY.apply(&img), img);
        let flip = StandardAugment {
            flip: true,
            factors: [1.0; 3],
        };
        assert_eq!(flip.apply(&flip.apply(&img)), img);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let out = augment_standard(&img, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(0, 1), mix_seed(0, 2));
        assert_ne!(mix_seed(1, 1), mix_seed(0, 1));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }

    #[test]
    fn circle_hfi_energy_hugs_the_outline() {
        let p = Pose {
            cx: 16.0,
            cy: 16.0,
            scale: 9.0,
            rotation: 0.0,
        };
        let img = render_sample(ShapeClass::Circle, &DomainSpec::flat(), p, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (_, hfi) = crate::spectral::decompose(&img, 8);
        let (mut near, mut total) = (0.0, 0.0);
        for c in 0..3 {
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let e = (hfi.get(c, y, x) as f64).powi(2);
                    total += e;
                    if outline_distance(ShapeClass::Circle, p, x as f64 + 0.5, y as f64 + 0.5) <= 2.0 {
                        near += e;
                    }
                }
            }
        }
        assert!(near / total >= 0.8, "edge-band share {}", near / total);
    }

    #[test]
    fn default_dataset_layout() {
        let a = default_dataset(21).unwrap();
        assert_eq!(a.len(), 2400);
        for d in &a.domains {
            assert_eq!(d.split(Split::Train).count(), 480);
            assert_eq!(d.split(Split::Test).count(), 120);
            for label in 0..5 {
                assert_eq!(d.samples.iter().filter(|s| s.label == label).count(), 120);
                assert_eq!(d.split(Split::Train).filter(|s| s.label == label).count(), 96);
            }
        }
        let ids: std::collections::HashSet<usize> = a.samples().map(|s| s.id).collect();
        assert_eq!(ids.len(), 2400);
        assert_eq!(a, default_dataset(21).unwrap());
    }

    fn rel_diff(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a + b)
    }

    #[test]
    fn domain_style_lives_in_low_frequencies() {
        let presets = DomainSpec::presets();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (mut dh, mut dl) = (0.0, 0.0);
        for k in 0..40 {
            let class = ShapeClass::ALL[k % 5];
            let pose = Pose::random(IMAGE_SIZE, &mut rng);
            let parts: Vec<(f64, f64)> = presets
                .iter()
                .map(|spec| {
                    let img = render_sample(class, spec, pose, &mut rng).unwrap();
                    let (l, h) = crate::spectral::decompose(&img, 8);
                    (l.energy(), h.energy())
                })
                .collect();
            for i in 0..parts.len() {
                for j in i + 1..parts.len() {
                    dl += rel_diff(parts[i].0, parts[j].0);
                    dh += rel_diff(parts[i].1, parts[j].1);
                }
            }
        }
        assert!(dh <= 0.5 * dl, "hfi {dh} lfi {dl}");
    }

    #[test]
    fn hfi_centroids_agree_across_domains() {
        let ds = build_dataset(&DomainSpec::presets(), 5, 30, 4).unwrap();
        let centroids = |hfi: bool| -> Vec<Vec<Vec<f64>>> {
            ds.domains
                .iter()
                .map(|d| {
                    (0..5)
                        .map(|label| {
                            let mut acc = vec![0.0; 3 * IMAGE_SIZE * IMAGE_SIZE];
                            let mut n = 0.0;
                            for s in d.samples.iter().filter(|s| s.label == label) {
                                let (l, h) = crate::spectral::decompose(&s.image, 8);
                                let img = if hfi { h } else { l };
                                acc.iter_mut().zip(img.data()).for_each(|(a, &v)| *a += v as f64);
                                n += 1.0;
                            }
                            acc.iter().map(|a| a / n).collect()
                        })
                        .collect()
                })
                .collect()
        };
        let mean_dist = |c: &Vec<Vec<Vec<f64>>>| -> f64 {
            let (mut sum, mut n) = (0.0, 0.0);
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    for k in 0..5 {
                        sum += c[i][k].iter().zip(&c[j][k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        n += 1.0;
                    }
                }
            }
            sum / n
        };
        let (h, l) = (mean_dist(&centroids(true)), mean_dist(&centroids(false)));
        assert!(h < l, "hfi {h} lfi {l}");
    }
}
