//! Synthetic multi-channel images with controllable channel redundancy.
//!
//! Every channel is rendered by the same parametric renderer from its own
//! latent vector `u_c = rho * u_shared + (1 - rho) * u_indep_c`, each factor
//! then passed through the CDF of that mixture so that its marginal stays
//! uniform for every `rho`. The label is the angular sector of the blob in
//! the minority channel `m`.
//!
//! A deterministic signature factor (independent value 1 for channel `m`, 0
//! elsewhere, shared value 0) shrinks the minority blob, raises its bar
//! frequency and darkens its background. It fades linearly with `rho` and
//! vanishes at `rho = 1`, where all channels render the same latent.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::{normal, RngStream};

/// Latent factors per channel, each in `[0, 1]`:
/// blob angle (the class factor), bar orientation, bar phase, style (blob
/// width and bar frequency), gradient direction, minority signature.
pub const LATENT_DIM: usize = 6;
pub const LATENT_ANGLE: usize = 0;
pub const LATENT_STYLE: usize = 3;
pub const LATENT_SIGNATURE: usize = 5;

const MAX_REJECTIONS: usize = 1_000_000;

pub type Latent = [f64; LATENT_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub image_size: usize,
    pub classes: usize,
    /// Channel redundancy in `[0, 1]`.
    pub redundancy: f64,
    pub minority_channel: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 6,
            image_size: 32,
            classes: 4,
            redundancy: 0.25,
            minority_channel: 0,
            noise_std: 0.05,
            seed: 0,
            n_train: 4000,
            n_val: 1000,
            n_test: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    InvalidRedundancy(f64),
    TooFewClasses(usize),
    TooFewChannels(usize),
    MinorityOutOfRange { minority: usize, channels: usize },
    InvalidNoise(f64),
    InvalidImageSize(usize),
    RejectionLimit { label: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidRedundancy(r) => write!(f, "redundancy must lie in [0, 1], got {r}"),
            Self::TooFewClasses(k) => write!(f, "need at least 2 classes, got {k}"),
            Self::TooFewChannels(c) => write!(f, "need at least 2 channels, got {c}"),
            Self::MinorityOutOfRange { minority, channels } => {
                write!(
                    f,
                    "minority channel {minority} out of range for {channels} channels"
                )
            }
            Self::InvalidNoise(s) => write!(f, "noise std must be finite and >= 0, got {s}"),
            Self::InvalidImageSize(s) => write!(f, "image size must be positive, got {s}"),
            Self::RejectionLimit { label } => {
                write!(f, "could not place a latent in class {label}")
            }
        }
    }
}

impl std::error::Error for SynthError {}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(SynthError::InvalidRedundancy(self.redundancy));
        }
        if self.classes < 2 {
            return Err(SynthError::TooFewClasses(self.classes));
        }
        if self.channels < 2 {
            return Err(SynthError::TooFewChannels(self.channels));
        }
        if self.minority_channel >= self.channels {
            return Err(SynthError::MinorityOutOfRange {
                minority: self.minority_channel,
                channels: self.channels,
            });
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(SynthError::InvalidNoise(self.noise_std));
        }
        if self.image_size == 0 {
            return Err(SynthError::InvalidImageSize(self.image_size));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Class of a latent under this config.
    pub fn class_of(&self, latent: &Latent) -> usize {
        ((latent[LATENT_ANGLE] * self.classes as f64).floor() as usize).min(self.classes - 1)
    }
}

/// `C x H x W` raster with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub label: usize,
    pub latents: Vec<Latent>,
}

impl MultiChannelImage {
    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.pixels[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.pixels[c * hw..(c + 1) * hw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<MultiChannelImage>,
    pub val: Vec<MultiChannelImage>,
    pub test: Vec<MultiChannelImage>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[MultiChannelImage] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Global sample indices for each split; ranges are disjoint.
    pub fn split_indices(config: &GeneratorConfig) -> [(Split, std::ops::Range<usize>); 3] {
        let a = config.n_train;
        let b = a + config.n_val;
        let c = b + config.n_test;
        [
            (Split::Train, 0..a),
            (Split::Val, a..b),
            (Split::Test, b..c),
        ]
    }
}

fn uniform_latent(rng: &mut ChaCha8Rng) -> Latent {
    let mut u = [0.0; LATENT_DIM];
    for v in &mut u[..LATENT_SIGNATURE] {
        *v = rng.random::<f64>();
    }
    u
}

/// CDF of `rho * U + (1 - rho) * V` for independent uniforms `U`, `V`.
pub fn mixture_cdf(rho: f64, z: f64) -> f64 {
    let lo = rho.min(1.0 - rho);
    let hi = rho.max(1.0 - rho);
    if lo <= 0.0 {
        return z.clamp(0.0, 1.0);
    }
    let z = z.clamp(0.0, 1.0);
    if z <= lo {
        z * z / (2.0 * lo * hi)
    } else if z <= hi {
        (2.0 * z - lo) / (2.0 * hi)
    } else {
        1.0 - (1.0 - z) * (1.0 - z) / (2.0 * lo * hi)
    }
}

fn mix(redundancy: f64, shared: f64, own: f64) -> f64 {
    mixture_cdf(redundancy, redundancy * shared + (1.0 - redundancy) * own)
}

/// Latents for one instance whose minority channel falls in class `label`.
pub fn draw_latents(
    cfg: &GeneratorConfig,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Latent>, SynthError> {
    let rho = cfg.redundancy;
    let mut shared = uniform_latent(rng);
    let mut own: Vec<Latent> = (0..cfg.channels).map(|_| uniform_latent(rng)).collect();
    let m = cfg.minority_channel;
    own[m][LATENT_SIGNATURE] = 1.0;

    // Redraw the class factor of the shared and minority latents until the
    // minority channel lands in the requested class.
    let mut attempts = 0;
    loop {
        let mut probe = [0.0; LATENT_DIM];
        probe[LATENT_ANGLE] = mix(rho, shared[LATENT_ANGLE], own[m][LATENT_ANGLE]);
        if cfg.class_of(&probe) == label {
            break;
        }
        attempts += 1;
        if attempts > MAX_REJECTIONS {
            return Err(SynthError::RejectionLimit { label });
        }
        shared[LATENT_ANGLE] = rng.random::<f64>();
        own[m][LATENT_ANGLE] = rng.random::<f64>();
    }

    Ok(own
        .iter()
        .map(|o| {
            let mut u = [0.0; LATENT_DIM];
            for k in 0..LATENT_SIGNATURE {
                u[k] = mix(rho, shared[k], o[k]);
            }
            u[LATENT_SIGNATURE] = (1.0 - rho) * o[LATENT_SIGNATURE];
            u
        })
        .collect())
}

/// Pixels of one channel, before noise, for a latent in `[0, 1)^LATENT_DIM`.
pub fn render_channel(latent: &Latent, size: usize) -> Vec<f64> {
    let s = size as f64;
    let angle = 2.0 * PI * latent[LATENT_ANGLE];
    let (cx, cy) = (0.5 + 0.28 * angle.cos(), 0.5 + 0.28 * angle.sin());
    let signature = latent[LATENT_SIGNATURE];
    let sigma = 0.1 + 0.04 * latent[LATENT_STYLE] - 0.06 * signature;
    let theta = PI * latent[1];
    let phase = 2.0 * PI * latent[2];
    let freq = 2.0 + 2.0 * latent[LATENT_STYLE] + 3.0 * signature;
    let grad_dir = 2.0 * PI * latent[4];

    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        let y = (row as f64 + 0.5) / s;
        for col in 0..size {
            let x = (col as f64 + 0.5) / s;
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            let blob = 0.8 * (-d2 / (2.0 * sigma * sigma)).exp();
            let along = x * theta.cos() + y * theta.sin();
            let bars = 0.05 * (2.0 * PI * freq * along + phase).cos();
            let gradient = 0.1 * ((x - 0.5) * grad_dir.cos() + (y - 0.5) * grad_dir.sin());
            out.push(0.25 - 0.05 * signature + gradient + bars + blob);
        }
    }
    out
}

/// Renders every channel and adds clamped Gaussian pixel noise drawn from
/// `noise`. With `noise_std == 0` the stream is not consumed.
pub fn render_sample(
    latents: &[Latent],
    label: usize,
    cfg: &GeneratorConfig,
    noise: &mut ChaCha8Rng,
) -> MultiChannelImage {
    let size = cfg.image_size;
    let mut pixels = Vec::with_capacity(latents.len() * size * size);
    for latent in latents {
        for v in render_channel(latent, size) {
            let n = if cfg.noise_std > 0.0 {
                normal(noise, cfg.noise_std)
            } else {
                0.0
            };
            pixels.push((v + n).clamp(0.0, 1.0) as f32);
        }
    }
    MultiChannelImage {
        channels: latents.len(),
        height: size,
        width: size,
        pixels,
        label,
        latents: latents.to_vec(),
    }
}

/// Sample `index` of the dataset, in global index space; `label` is
/// `local_index mod K` so that each split is balanced.
pub fn generate_sample(
    cfg: &GeneratorConfig,
    index: usize,
    label: usize,
) -> Result<MultiChannelImage, SynthError> {
    let stream = RngStream::new(cfg.seed, 0x5a17).fork(index as u64);
    let mut latent_rng = stream.fork(0).generator();
    let latents = draw_latents(cfg, label, &mut latent_rng)?;
    let mut noise_rng = stream.fork(1).generator();
    Ok(render_sample(&latents, label, cfg, &mut noise_rng))
}

pub fn generate_split(
    cfg: &GeneratorConfig,
    split: Split,
) -> Result<Vec<MultiChannelImage>, SynthError> {
    cfg.validate()?;
    let range = Dataset::split_indices(cfg)
        .into_iter()
        .find(|(s, _)| *s == split)
        .map(|(_, r)| r)
        .unwrap_or(0..0);
    let start = range.start;
    range
        .map(|i| generate_sample(cfg, i, (i - start) % cfg.classes))
        .collect()
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    Ok(Dataset {
        config: cfg.clone(),
        train: generate_split(cfg, Split::Train)?,
        val: generate_split(cfg, Split::Val)?,
        test: generate_split(cfg, Split::Test)?,
    })
}

/// Pearson correlation of two equal-length slices; `None` if either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Mean pairwise Pearson correlation between the channels of one image.
/// Constant-channel pairs count as perfectly correlated when identical and
/// uncorrelated otherwise.
pub fn mean_interchannel_pixel_correlation(img: &MultiChannelImage) -> f64 {
    let chans: Vec<Vec<f64>> = (0..img.channels)
        .map(|c| img.channel(c).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..chans.len() {
        for j in i + 1..chans.len() {
            total += pearson(&chans[i], &chans[j]).unwrap_or(if chans[i] == chans[j] {
                1.0
            } else {
                0.0
            });
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}
