//! The frequency-disentangling network: encoder, two-branch disentangler,
//! high/low reconstructors, the low-to-high interaction gate, three linear
//! classifiers and the joint objective.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::Image;
use crate::spectral::decompose;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Config(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    Iim,
    Addition,
    Concatenation,
    Bilinear,
}

impl Interaction {
    pub fn name(self) -> &'static str {
        match self {
            Interaction::Iim => "iim",
            Interaction::Addition => "addition",
            Interaction::Concatenation => "concatenation",
            Interaction::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interaction {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iim" => Ok(Interaction::Iim),
            "addition" => Ok(Interaction::Addition),
            "concatenation" => Ok(Interaction::Concatenation),
            "bilinear" => Ok(Interaction::Bilinear),
            _ => config_err(format!("unknown interaction mode {s:?}")),
        }
    }
}

/// Which feature map a tap or prediction head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    E,
    H,
    L,
    Z,
}

impl FromStr for Tap {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_E" | "e" | "E" => Ok(Tap::E),
            "f_H" | "h" | "H" => Ok(Tap::H),
            "f_L" | "l" | "L" => Ok(Tap::L),
            "f_Z" | "z" | "Z" => Ok(Tap::Z),
            _ => config_err(format!("unknown feature tap {s:?}")),
        }
    }
}

/// How far back the reconstruction losses propagate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaeStop {
    /// Into the reconstructors, disentangler and encoder.
    None,
    /// Into the reconstructors and disentangler; the encoder sees none.
    Encoder,
    /// Into the reconstructors only.
    Disentangler,
}

impl fmt::Display for CaeStop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaeStop::None => "none",
            CaeStop::Encoder => "encoder",
            CaeStop::Disentangler => "disentangler",
        })
    }
}

impl FromStr for CaeStop {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CaeStop::None),
            "encoder" => Ok(CaeStop::Encoder),
            "disentangler" => Ok(CaeStop::Disentangler),
            _ => config_err(format!("unknown cae_stop {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfdiConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// Hidden widths of each reconstructor; it has one more transposed conv
    /// than entries here.
    pub decoder_widths: Vec<usize>,
    pub lambda: f64,
    pub r: usize,
    pub interaction: Interaction,
    pub use_h: bool,
    pub use_l: bool,
    pub use_interaction: bool,
    pub iim_kernel: usize,
    /// Average the reconstruction error over elements; when false it is
    /// summed per sample and averaged over the batch.
    pub cae_per_element: bool,
    /// Where reconstruction gradients stop.
    pub cae_stop: CaeStop,
}

impl Default for FfdiConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            channels: 3,
            height: 32,
            width: 32,
            encoder_widths: vec![16, 32, 64, 64],
            encoder_strides: vec![1, 2, 2, 2],
            decoder_widths: vec![16, 8],
            lambda: 1.0,
            r: 8,
            interaction: Interaction::Iim,
            use_h: true,
            use_l: true,
            use_interaction: true,
            iim_kernel: 7,
            cae_per_element: true,
            cae_stop: CaeStop::Encoder,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| ModelError::Config(format!("bad integer list {value:?}"))))
        .collect()
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => config_err(format!("bad boolean {value:?}")),
    }
}

fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value.parse().map_err(|_| ModelError::Config(format!("bad value {value:?} for {key}")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl FfdiConfig {
    /// DeepAll: encoder and fused classifier only.
    pub fn deep_all() -> Self {
        Self {
            use_h: false,
            use_l: false,
            use_interaction: false,
            ..Self::default()
        }
    }

    pub const KEYS: [&'static str; 16] = [
        "num_classes",
        "channels",
        "height",
        "width",
        "encoder_widths",
        "encoder_strides",
        "decoder_widths",
        "lambda",
        "r",
        "interaction",
        "use_h",
        "use_l",
        "use_interaction",
        "iim_kernel",
        "cae_per_element",
        "cae_stop",
    ];

    /// Set one field from its text form. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "encoder_widths" => self.encoder_widths = parse_list(value)?,
            "encoder_strides" => self.encoder_strides = parse_list(value)?,
            "decoder_widths" => self.decoder_widths = parse_list(value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "r" => self.r = parse_num(key, value)?,
            "interaction" => self.interaction = value.parse()?,
            "use_h" => self.use_h = parse_bool(value)?,
            "use_l" => self.use_l = parse_bool(value)?,
            "use_interaction" => self.use_interaction = parse_bool(value)?,
            "iim_kernel" => self.iim_kernel = parse_num(key, value)?,
            "cae_per_element" => self.cae_per_element = parse_bool(value)?,
            "cae_stop" => self.cae_stop = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("channels", self.channels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("encoder_widths", join(&self.encoder_widths)),
            ("encoder_strides", join(&self.encoder_strides)),
            ("decoder_widths", join(&self.decoder_widths)),
            ("lambda", self.lambda.to_string()),
            ("r", self.r.to_string()),
            ("interaction", self.interaction.to_string()),
            ("use_h", self.use_h.to_string()),
            ("use_l", self.use_l.to_string()),
            ("use_interaction", self.use_interaction.to_string()),
            ("iim_kernel", self.iim_kernel.to_string()),
            ("cae_per_element", self.cae_per_element.to_string()),
            ("cae_stop", self.cae_stop.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("expected key = value, got {line:?}")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return config_err(format!("unknown model key {:?}", k.trim()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial size after the encoder.
    pub fn feature_size(&self) -> (usize, usize) {
        self.encoder_strides.iter().fold((self.height, self.width), |(h, w), &s| {
            ((h + 2 - 3) / s.max(1) + 1, (w + 2 - 3) / s.max(1) + 1)
        })
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    /// Whether the fused feature comes from the interaction of both branches.
    pub fn interacts(&self) -> bool {
        self.use_h && self.use_l && self.use_interaction
    }

    fn fused_width(&self) -> usize {
        let c = self.feature_channels();
        if self.use_h && self.use_l {
            match (self.use_interaction, self.interaction) {
                (true, Interaction::Concatenation) => 2 * c,
                (true, Interaction::Bilinear) => c * c,
                _ => c,
            }
        } else {
            c
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return config_err("num_classes must be at least 2");
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 {
            return config_err("image must have channels and be at least 4×4");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return config_err("encoder_widths must be non-empty and positive");
        }
        if self.encoder_strides.len() != self.encoder_widths.len() || self.encoder_strides.contains(&0) {
            return config_err("encoder_strides must give a positive stride per encoder stage");
        }
        if self.decoder_widths.contains(&0) {
            return config_err("decoder_widths must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        if self.iim_kernel % 2 == 0 {
            return config_err("iim_kernel must be odd");
        }
        if self.use_interaction && !(self.use_h && self.use_l) {
            return config_err("use_interaction requires both use_h and use_l");
        }
        let (mut h, mut w) = self.feature_size();
        for _ in 0..=self.decoder_widths.len() {
            h *= 2;
            w *= 2;
        }
        if (h, w) != (self.height, self.width) {
            return config_err(format!(
                "reconstructors upsample features to {h}×{w}, image is {}×{}",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Layer>,
    dis_h: Layer,
    dis_l: Layer,
    rec_h: Vec<Layer>,
    rec_l: Vec<Layer>,
    iim: Layer,
    cls_ah: Layer,
    cls_al: Layer,
    cls_i: Layer,
}

/// Feature maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub f_e: Var,
    pub f_h: Option<Var>,
    pub f_l: Option<Var>,
    /// Interaction mask (N×1×H×W) when the gate is active.
    pub mask: Option<Var>,
    /// Pooled input of the fused classifier.
    pub fused: Var,
    pub logits: Var,
}

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ci: Var,
    pub ca_h: Option<Var>,
    pub ca_l: Option<Var>,
    pub cae_h: Option<Var>,
    pub cae_l: Option<Var>,
    pub all: Var,
}

/// Scalar values of every loss term; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub ci: f64,
    pub ca_h: f64,
    pub ca_l: f64,
    pub cae_h: f64,
    pub cae_l: f64,
    pub all: f64,
}

impl LossValues {
    /// `ci + λ·(ca_L + ca_H + cae_L + cae_H)` recomputed from the logged
    /// terms.
    pub fn recombine(&self, lambda: f64) -> f64 {
        self.ci + lambda * (self.ca_l + self.ca_h + self.cae_l + self.cae_h)
    }

    pub fn is_finite(&self) -> bool {
        [self.ci, self.ca_h, self.ca_l, self.cae_h, self.cae_l, self.all]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Images with labels (and source-domain ids, used only for bookkeeping).
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Input tensor, labels and reconstruction targets of one batch.
#[derive(Clone, Debug)]
pub struct LossInputs<T: Scalar> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub lfi: Option<Tensor<T>>,
    pub hfi: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct FfdiModel<T: Scalar = f32> {
    config: FfdiConfig,
    params: ParamStore<T>,
    layout: Layout,
}

const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)
const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2; // sqrt(3)

impl<T: Scalar> FfdiModel<T> {
    pub fn new(config: FfdiConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let body = ParamGroup::Body;
        let mut conv = |ps: &mut ParamStore<T>, name: &str, shape: [usize; 4], fan_in: usize, gain: f64, group| Layer {
            w: ps.add_uniform(format!("{name}.weight"), group, &shape, fan_in, gain, &mut rng),
            b: ps.add(format!("{name}.bias"), group, Tensor::zeros(&[if name.starts_with("rec") { shape[1] } else { shape[0] }])),
        };

        let mut encoder = Vec::new();
        let mut cin = config.channels;
        for (i, &cout) in config.encoder_widths.iter().enumerate() {
            encoder.push(conv(&mut ps, &format!("enc.{i}"), [cout, cin, 3, 3], cin * 9, RELU_GAIN, body));
            cin = cout;
        }
        let c = config.feature_channels();
        let dis_h = conv(&mut ps, "dis.h", [c, c, 3, 3], c * 9, RELU_GAIN, body);
        let dis_l = conv(&mut ps, "dis.l", [c, c, 3, 3], c * 9, RELU_GAIN, body);

        let mut decoder = |ps: &mut ParamStore<T>, branch: &str| {
            let mut widths = config.decoder_widths.clone();
            widths.push(config.channels);
            let mut cin = c;
            let last = widths.len() - 1;
            widths
                .iter()
                .enumerate()
                .map(|(j, &cout)| {
                    let gain = if j == last { LINEAR_GAIN } else { RELU_GAIN };
                    // each output pixel sees cin·k²/s² weights of a 4×4, stride-2 kernel
                    let l = conv(ps, &format!("rec.{branch}.{j}"), [cin, cout, 4, 4], cin * 4, gain, body);
                    cin = cout;
                    l
                })
                .collect::<Vec<_>>()
        };
        let rec_h = decoder(&mut ps, "h");
        let rec_l = decoder(&mut ps, "l");

        let k = config.iim_kernel;
        let iim = conv(&mut ps, "iim", [1, 2, k, k], 2 * k * k, LINEAR_GAIN, body);
        let mut linear = |ps: &mut ParamStore<T>, name: &str, inp: usize, group| Layer {
            w: ps.add_uniform(format!("{name}.weight"), group, &[config.num_classes, inp], inp, 1.0, &mut rng),
            b: ps.add(format!("{name}.bias"), group, Tensor::zeros(&[config.num_classes])),
        };
        let cls_ah = linear(&mut ps, "cls.ah", c, body);
        let cls_al = linear(&mut ps, "cls.al", c, body);
        let cls_i = linear(&mut ps, "cls.i", config.fused_width(), ParamGroup::Classifier);

        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                encoder,
                dis_h,
                dis_l,
                rec_h,
                rec_l,
                iim,
                cls_ah,
                cls_al,
                cls_i,
            },
        })
    }

    pub fn config(&self) -> &FfdiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> FfdiModel<U> {
        FfdiModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Names of the parameters outside the inference path (reconstructors
    /// and auxiliary classifiers).
    pub fn auxiliary_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("rec.") || p.name.starts_with("cls.ah") || p.name.starts_with("cls.al"))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    fn layer(&self, g: &mut Graph<T>, l: Layer) -> (Var, Var) {
        (g.param(&self.params, l.w), g.param(&self.params, l.b))
    }

    /// Input tensor for a slice of images, validated against the config.
    pub fn input_tensor<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
        let t: Tensor<T> = Image::batch_tensor::<T>(images).map(|v| v + v - T::one());
        let s = t.shape();
        if s[1..] != [self.config.channels, self.config.height, self.config.width] {
            return config_err(format!(
                "model expects {}×{}×{} images, got {:?}",
                self.config.channels,
                self.config.height,
                self.config.width,
                &s[1..]
            ));
        }
        Ok(t)
    }

    pub fn encode(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.value(x)?.shape().to_vec();
        if s.len() != 4 || s[1..] != [self.config.channels, self.config.height, self.config.width] {
            return config_err(format!("encoder input {s:?} does not match the configured image size"));
        }
        self.encode_from(g, x, 0)
    }

    pub fn encoder_depth(&self) -> usize {
        self.layout.encoder.len()
    }

    fn encoder_layer(&self, g: &mut Graph<T>, h: Var, i: usize) -> Result<Var> {
        let (w, b) = self.layer(g, self.layout.encoder[i]);
        let y = g.conv2d(h, w, b, self.config.encoder_strides[i], 1)?;
        Ok(g.relu(y)?)
    }

    /// Encoder layers `skip..`; `h` is the output of layer `skip - 1`, or the
    /// input when `skip` is 0.
    pub fn encode_from(&self, g: &mut Graph<T>, mut h: Var, skip: usize) -> Result<Var> {
        for i in skip..self.encoder_depth() {
            h = self.encoder_layer(g, h, i)?;
        }
        Ok(h)
    }

    /// Output of every encoder layer for the input tensor `x`.
    pub fn encoder_activations(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let mut h = g.input(x.clone());
        let mut out = Vec::with_capacity(self.encoder_depth());
        for i in 0..self.encoder_depth() {
            h = self.encoder_layer(&mut g, h, i)?;
            out.push(g.value(h)?.clone());
        }
        Ok(out)
    }

    fn branch(&self, g: &mut Graph<T>, f_e: Var, l: Layer) -> Result<Var> {
        let (w, b) = self.layer(g, l);
        let y = g.conv2d(f_e, w, b, 1, 1)?;
        Ok(g.relu(y)?)
    }

    /// `(f_H, f_L)` from two independent conv branches.
    pub fn disentangle(&self, g: &mut Graph<T>, f_e: Var) -> Result<(Var, Var)> {
        Ok((self.branch(g, f_e, self.layout.dis_h)?, self.branch(g, f_e, self.layout.dis_l)?))
    }

    pub fn disentangle_high(&self, g: &mut Graph<T>, f_e: Var) -> Result<Var> {
        self.branch(g, f_e, self.layout.dis_h)
    }

    pub fn disentangle_low(&self, g: &mut Graph<T>, f_e: Var) -> Result<Var> {
        self.branch(g, f_e, self.layout.dis_l)
    }

    /// Image-shaped, unbounded reconstruction from `f` by the `high` or low
    /// decoder.
    pub fn reconstruct(&self, g: &mut Graph<T>, f: Var, high: bool) -> Result<Var> {
        let layers = if high { &self.layout.rec_h } else { &self.layout.rec_l };
        let last = layers.len() - 1;
        let mut h = f;
        for (j, l) in layers.iter().enumerate() {
            let (w, b) = self.layer(g, *l);
            h = g.conv_transpose2d(h, w, b, 2, 1)?;
            if j != last {
                h = g.relu(h)?;
            }
        }
        let s = g.value(h)?.shape();
        if s[2..] != [self.config.height, self.config.width] {
            return config_err(format!("reconstruction is {:?}, image is {}×{}", s, self.config.height, self.config.width));
        }
        Ok(h)
    }

    /// Gate `f_H` with a spatial mask computed from `f_L`. Returns
    /// `(f_Z, mask)`.
    pub fn iim(&self, g: &mut Graph<T>, f_l: Var, f_h: Var) -> Result<(Var, Var)> {
        if g.value(f_l)?.shape() != g.value(f_h)?.shape() {
            return Err(TensorError::Shape {
                op: "iim",
                detail: format!("{:?} vs {:?}", g.value(f_l)?.shape(), g.value(f_h)?.shape()),
            }
            .into());
        }
        let pooled = g.channel_pool(f_l)?;
        let (w, b) = self.layer(g, self.layout.iim);
        let logits = g.conv2d(pooled, w, b, 1, self.config.iim_kernel / 2)?;
        let mask = g.sigmoid(logits)?;
        Ok((g.gate_channels(mask, f_h)?, mask))
    }

    /// Baseline fusions. Addition and concatenation return feature maps;
    /// bilinear returns an N×C² vector.
    pub fn interact_baseline(&self, g: &mut Graph<T>, f_l: Var, f_h: Var, mode: Interaction) -> Result<Var> {
        match mode {
            Interaction::Addition => Ok(g.add(f_h, f_l)?),
            Interaction::Concatenation => Ok(g.concat(f_h, f_l)?),
            Interaction::Bilinear => {
                let u = g.global_avg_pool(f_h)?;
                let v = g.global_avg_pool(f_l)?;
                let o = g.outer(u, v)?;
                let s = g.signed_sqrt(o)?;
                Ok(g.l2_normalize(s)?)
            }
            Interaction::Iim => config_err("iim is not a baseline fusion"),
        }
    }

    fn classify(&self, g: &mut Graph<T>, pooled: Var, l: Layer) -> Result<Var> {
        let (w, b) = self.layer(g, l);
        Ok(g.linear(pooled, w, b)?)
    }

    /// Inference path plus the branch features. Reconstructors and
    /// auxiliary classifiers are not touched.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Forward> {
        let f_e = self.encode(g, x)?;
        self.forward_from(g, f_e, self.encoder_depth())
    }

    /// [`forward`](Self::forward) resumed at encoder layer `skip` (see
    /// [`encode_from`](Self::encode_from)).
    pub fn forward_from(&self, g: &mut Graph<T>, h: Var, skip: usize) -> Result<Forward> {
        let cfg = &self.config;
        let f_e = self.encode_from(g, h, skip)?;
        let f_h = if cfg.use_h { Some(self.disentangle_high(g, f_e)?) } else { None };
        let f_l = if cfg.use_l { Some(self.disentangle_low(g, f_e)?) } else { None };
        let mut mask = None;
        let fused = match (f_h, f_l) {
            (Some(h), Some(l)) if cfg.use_interaction => match cfg.interaction {
                Interaction::Iim => {
                    let (z, m) = self.iim(g, l, h)?;
                    mask = Some(m);
                    g.global_avg_pool(z)?
                }
                Interaction::Bilinear => self.interact_baseline(g, l, h, Interaction::Bilinear)?,
                mode => {
                    let z = self.interact_baseline(g, l, h, mode)?;
                    g.global_avg_pool(z)?
                }
            },
            (Some(h), Some(l)) => {
                let z = g.add(h, l)?;
                g.global_avg_pool(z)?
            }
            (Some(h), None) => g.global_avg_pool(h)?,
            (None, Some(l)) => g.global_avg_pool(l)?,
            (None, None) => g.global_avg_pool(f_e)?,
        };
        let logits = self.classify(g, fused, self.layout.cls_i)?;
        Ok(Forward {
            f_e,
            f_h,
            f_l,
            mask,
            fused,
            logits,
        })
    }

    /// Build every enabled loss term for `batch` on `g`. Reconstruction
    /// targets are the frequency decomposition of the batch images
    /// themselves.
    pub fn loss_graph(&self, g: &mut Graph<T>, batch: &Batch) -> Result<(Forward, LossVars)> {
        let inputs = self.loss_inputs(batch)?;
        let x = g.input(inputs.x.clone());
        self.loss_graph_from(g, x, 0, &inputs)
    }

    /// The parameter-free part of a loss evaluation.
    pub fn loss_inputs(&self, batch: &Batch) -> Result<LossInputs<T>> {
        if batch.is_empty() || batch.labels.len() != batch.len() {
            return config_err("batch needs one label per image");
        }
        let x = self.input_tensor(&batch.images)?;
        let (mut lfis, mut hfis) = (Vec::new(), Vec::new());
        if self.config.use_h || self.config.use_l {
            for img in &batch.images {
                let (l, h) = decompose(img, self.config.r);
                lfis.push(l);
                hfis.push(h);
            }
        }
        Ok(LossInputs {
            x,
            labels: batch.labels.clone(),
            lfi: self.config.use_l.then(|| Image::batch_tensor(&lfis)),
            hfi: self.config.use_h.then(|| Image::batch_tensor(&hfis)),
        })
    }

    /// [`loss_graph`](Self::loss_graph) resumed at encoder layer `skip`.
    pub fn loss_graph_from(&self, g: &mut Graph<T>, h: Var, skip: usize, inputs: &LossInputs<T>) -> Result<(Forward, LossVars)> {
        let cfg = &self.config;
        let fwd = self.forward_from(g, h, skip)?;
        let ci = g.cross_entropy(fwd.logits, &inputs.labels)?;
        let aux = |g: &mut Graph<T>, f: Option<Var>, high: bool| -> Result<(Option<Var>, Option<Var>)> {
            let Some(f) = f else { return Ok((None, None)) };
            let cls = if high { self.layout.cls_ah } else { self.layout.cls_al };
            let pooled = g.global_avg_pool(f)?;
            let logits = self.classify(g, pooled, cls)?;
            let ca = g.cross_entropy(logits, &inputs.labels)?;
            let src = match cfg.cae_stop {
                CaeStop::None => f,
                CaeStop::Encoder => {
                    let e = g.detach(fwd.f_e)?;
                    self.branch(g, e, if high { self.layout.dis_h } else { self.layout.dis_l })?
                }
                CaeStop::Disentangler => g.detach(f)?,
            };
            let rec = self.reconstruct(g, src, high)?;
            let target = if high { &inputs.hfi } else { &inputs.lfi };
            let Some(target) = target else { return config_err("missing reconstruction target") };
            let target = g.input(target.clone());
            let cae = g.mse(rec, target, cfg.cae_per_element)?;
            Ok((Some(ca), Some(cae)))
        };
        let (ca_h, cae_h) = aux(g, fwd.f_h, true)?;
        let (ca_l, cae_l) = aux(g, fwd.f_l, false)?;
        let lambda = T::from_f64(cfg.lambda);
        let mut terms = vec![(ci, T::one())];
        for t in [ca_l, ca_h, cae_l, cae_h].into_iter().flatten() {
            terms.push((t, lambda));
        }
        let all = g.weighted_sum(&terms)?;
        Ok((
            fwd,
            LossVars {
                ci,
                ca_h,
                ca_l,
                cae_h,
                cae_l,
                all,
            },
        ))
    }

    /// Read the scalar values of `vars` off the tape.
    pub fn loss_values(g: &Graph<T>, vars: &LossVars) -> Result<LossValues> {
        let v = |x: Option<Var>| -> Result<f64> {
            Ok(match x {
                Some(x) => g.value(x)?.item().as_f64(),
                None => 0.0,
            })
        };
        Ok(LossValues {
            ci: v(Some(vars.ci))?,
            ca_h: v(vars.ca_h)?,
            ca_l: v(vars.ca_l)?,
            cae_h: v(vars.cae_h)?,
            cae_l: v(vars.cae_l)?,
            all: v(Some(vars.all))?,
        })
    }

    /// L_all resumed at encoder layer `skip`, where `h` is the cached output
    /// of layer `skip - 1` (the input tensor when `skip` is 0). Used to
    /// re-evaluate the loss cheaply when only later parameters change.
    pub fn loss_from(&self, h: &Tensor<T>, skip: usize, inputs: &LossInputs<T>) -> Result<f64> {
        let mut g = Graph::new();
        let h = g.input(h.clone());
        let (_, vars) = self.loss_graph_from(&mut g, h, skip, inputs)?;
        Ok(g.value(vars.all)?.item().as_f64())
    }

    /// All loss terms for `batch` without touching gradients.
    pub fn ffdi_losses(&self, batch: &Batch) -> Result<LossValues> {
        let mut g = Graph::new();
        let (_, vars) = self.loss_graph(&mut g, batch)?;
        Self::loss_values(&g, &vars)
    }

    /// Forward, backward into the parameter gradients, and return the loss
    /// values. Gradients accumulate; the caller zeroes or steps them.
    pub fn accumulate_gradients(&mut self, batch: &Batch) -> Result<LossValues> {
        let mut g = Graph::new();
        let (_, vars) = self.loss_graph(&mut g, batch)?;
        let values = Self::loss_values(&g, &vars)?;
        g.backward(vars.all, &mut self.params)?;
        Ok(values)
    }

    /// Fused-classifier logits (N×classes).
    pub fn logits<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(self.input_tensor(images)?);
        let fwd = self.forward(&mut g, x)?;
        Ok(g.value(fwd.logits)?.clone())
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(self.predict_batch(std::slice::from_ref(image))?[0])
    }

    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.logits(chunk)?;
            let k = self.config.num_classes;
            for row in logits.data().chunks(k) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Globally pooled feature vectors at `tap`, one row per image.
    pub fn features(&self, images: &[Image], tap: Tap) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        match tap {
            Tap::H if !cfg.use_h => return config_err("f_H tap needs use_h = true"),
            Tap::L if !cfg.use_l => return config_err("f_L tap needs use_l = true"),
            Tap::Z if !cfg.interacts() => {
                return config_err("f_Z tap needs use_interaction = true (with use_h and use_l)")
            }
            _ => {}
        }
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let x = g.input(self.input_tensor(chunk)?);
            let fwd = self.forward(&mut g, x)?;
            let pooled = match tap {
                Tap::E => g.global_avg_pool(fwd.f_e)?,
                Tap::H => g.global_avg_pool(fwd.f_h.expect("checked"))?,
                Tap::L => g.global_avg_pool(fwd.f_l.expect("checked"))?,
                Tap::Z => fwd.fused,
            };
            let t = g.value(pooled)?;
            let width = t.shape()[1];
            rows.extend(t.data().chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect()));
        }
        Ok(rows)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"FFDICKPT";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format!("invalid UTF-8 before byte {}", self.pos))
    }
}

impl FfdiModel<f32> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        let cfg = self.config.to_text();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.shape().len() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| ModelError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8).map_err(&fail)? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = c.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let config = FfdiConfig::from_text(&c.string().map_err(&fail)?)?;
        let mut model = FfdiModel::<f32>::new(config, 0)?;
        let count = c.u32().map_err(&fail)? as usize;
        if count != model.params.len() {
            return Err(fail(format!("{count} tensors stored, model has {}", model.params.len())));
        }
        for _ in 0..count {
            let name = c.string().map_err(&fail)?;
            let rank = c.u32().map_err(&fail)? as usize;
            if rank == 0 || rank > 4 {
                return Err(fail(format!("{name}: bad rank {rank}")));
            }
            let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>().map_err(&fail)?;
            let id = model.params.find(&name).ok_or_else(|| fail(format!("unknown tensor {name}")))?;
            let param = model.params.get_mut(id);
            if param.value.shape() != shape.as_slice() {
                return Err(fail(format!("{name}: stored shape {shape:?}, expected {:?}", param.value.shape())));
            }
            let raw = c.take(param.value.len() * 4).map_err(&fail)?;
            for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if c.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(io)?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
