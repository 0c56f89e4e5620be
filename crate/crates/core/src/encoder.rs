//! Frozen multi-channel ViT with joint and independent channel encoding.
//!
//! Every channel is patchified on its own and embedded with one shared
//! single-channel patch projection; the same positional table is added at
//! the same spatial index in every channel, and there is no channel
//! embedding. Joint encoding runs one sequence `[cls, ch0 tokens, ch1 tokens,
//! ...]`; independent encoding runs `[cls, ch_c tokens]` once per channel
//! through the same blocks.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::ops::{self, gelu};
use crate::numerics::rng::{trunc_normal, RngStream};
use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;
use crate::synthdata::MultiChannelImage;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    Jfe,
    Ife,
}

impl EncodingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Jfe => "jfe",
            Self::Ife => "ife",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jfe" => Ok(Self::Jfe),
            "ife" => Ok(Self::Ife),
            other => Err(format!(
                "unknown encoding mode `{other}` (expected jfe or ife)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderError {
    InvalidConfig(String),
    SizeMismatch {
        expected: usize,
        got: (usize, usize),
    },
    NoChannels,
    SequenceTooLong {
        len: usize,
        max: usize,
    },
    Numerics(NumericsError),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid encoder config: {msg}"),
            Self::SizeMismatch { expected, got } => {
                write!(
                    f,
                    "image is {}x{}, encoder expects {expected}x{expected}",
                    got.0, got.1
                )
            }
            Self::NoChannels => write!(f, "image has no channels"),
            Self::SequenceTooLong { len, max } => {
                write!(
                    f,
                    "joint sequence of {len} tokens exceeds the configured maximum {max}"
                )
            }
            Self::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EncoderError {}

impl From<NumericsError> for EncoderError {
    fn from(e: NumericsError) -> Self {
        Self::Numerics(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub init_seed: u64,
    /// Longest sequence (cls included) a joint pass may assemble.
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            init_seed: 0,
            max_seq_len: 1025,
        }
    }
}

impl EncoderConfig {
    /// Default geometry at `D = 32`, depth 2; what the synthetic end-to-end
    /// checks use to stay within a few minutes on one core.
    pub fn small() -> Self {
        Self {
            embed_dim: 32,
            depth: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image and patch size must be positive");
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per channel, `(image_size / patch_size)^2`.
    pub fn tokens_per_channel(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Stable 64-bit FNV-1a hash of the canonical config string; written
    /// into feature files to bind them to the encoder that produced them.
    pub fn config_hash(&self) -> u64 {
        let canon = format!(
            "img={};patch={};dim={};depth={};heads={};mlp={};seed={};max={}",
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.init_seed,
            self.max_seq_len
        );
        fnv1a(canon.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub ln1_gamma: Vec<S>,
    pub ln1_beta: Vec<S>,
    /// `D x 3D`, columns ordered q | k | v.
    pub qkv_w: Tensor<S>,
    pub qkv_b: Vec<S>,
    pub proj_w: Tensor<S>,
    pub proj_b: Vec<S>,
    pub ln2_gamma: Vec<S>,
    pub ln2_beta: Vec<S>,
    pub fc1_w: Tensor<S>,
    pub fc1_b: Vec<S>,
    pub fc2_w: Tensor<S>,
    pub fc2_b: Vec<S>,
}

/// Frozen encoder parameters. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<S> {
    pub config: EncoderConfig,
    /// `patch_size^2 x D`, shared by every channel.
    pub patch_w: Tensor<S>,
    pub patch_b: Vec<S>,
    /// `(N + 1) x D`; row 0 belongs to the cls token.
    pub pos: Tensor<S>,
    pub cls: Vec<S>,
    pub blocks: Vec<Block<S>>,
    pub norm_gamma: Vec<S>,
    pub norm_beta: Vec<S>,
}

fn draw_matrix<S: Scalar>(
    rng: &mut rand_chacha::ChaCha8Rng,
    rows: usize,
    cols: usize,
) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::from_f64_lossy(trunc_normal(rng, INIT_STD)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Deterministic truncated-normal initialization from `init_seed`.
pub fn init_encoder<S: Scalar>(cfg: &EncoderConfig) -> Result<EncoderWeights<S>, EncoderError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_ratio * d;
    let p2 = cfg.patch_size * cfg.patch_size;
    let n = cfg.tokens_per_channel();
    let mut rng = RngStream::new(cfg.init_seed, 0xe4c0de).generator();

    let patch_w = draw_matrix(&mut rng, p2, d);
    let pos = draw_matrix(&mut rng, n + 1, d);
    let cls = draw_matrix::<S>(&mut rng, 1, d).into_data();
    let ones = vec![S::one(); d];
    let zeros = vec![S::zero(); d];
    let blocks = (0..cfg.depth)
        .map(|_| Block {
            ln1_gamma: ones.clone(),
            ln1_beta: zeros.clone(),
            qkv_w: draw_matrix(&mut rng, d, 3 * d),
            qkv_b: vec![S::zero(); 3 * d],
            proj_w: draw_matrix(&mut rng, d, d),
            proj_b: zeros.clone(),
            ln2_gamma: ones.clone(),
            ln2_beta: zeros.clone(),
            fc1_w: draw_matrix(&mut rng, d, hidden),
            fc1_b: vec![S::zero(); hidden],
            fc2_w: draw_matrix(&mut rng, hidden, d),
            fc2_b: zeros.clone(),
        })
        .collect();
    Ok(EncoderWeights {
        config: cfg.clone(),
        patch_w,
        patch_b: zeros.clone(),
        pos,
        cls,
        blocks,
        norm_gamma: ones,
        norm_beta: zeros,
    })
}

impl<S: Scalar> EncoderWeights<S> {
    /// FNV-1a over the bit patterns of every weight, in a fixed order.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut put = |v: &[S]| {
            for x in v {
                bytes.extend_from_slice(&x.to_f64_lossy().to_bits().to_le_bytes());
            }
        };
        put(self.patch_w.data());
        put(&self.patch_b);
        put(self.pos.data());
        put(&self.cls);
        for b in &self.blocks {
            put(&b.ln1_gamma);
            put(&b.ln1_beta);
            put(b.qkv_w.data());
            put(&b.qkv_b);
            put(b.proj_w.data());
            put(&b.proj_b);
            put(&b.ln2_gamma);
            put(&b.ln2_beta);
            put(b.fc1_w.data());
            put(&b.fc1_b);
            put(b.fc2_w.data());
            put(&b.fc2_b);
        }
        put(&self.norm_gamma);
        put(&self.norm_beta);
        fnv1a(&bytes)
    }
}

/// Pre-encoder embeddings `C x N x D` (positional embeddings included).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<S> {
    pub channels: usize,
    pub tokens_per_channel: usize,
    pub dim: usize,
    pub tokens: Tensor<S>,
}

impl<S: Scalar> TokenBatch<S> {
    /// `N x D` block of channel `c`.
    pub fn channel(&self, c: usize) -> Tensor<S> {
        self.tokens
            .slice_rows(c * self.tokens_per_channel, self.tokens_per_channel)
    }

    /// Batch restricted to the listed channels, in the given order.
    pub fn select_channels(&self, order: &[usize]) -> Self {
        let n = self.tokens_per_channel;
        let mut data = Vec::with_capacity(order.len() * n * self.dim);
        for &c in order {
            data.extend_from_slice(self.channel(c).data());
        }
        Self {
            channels: order.len(),
            tokens_per_channel: n,
            dim: self.dim,
            tokens: Tensor::new(vec![order.len(), n, self.dim], data).expect("shape matches"),
        }
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S> {
    pub mode: EncodingMode,
    pub channels: usize,
    pub tokens_per_channel: usize,
    pub dim: usize,
    /// `C x N x D`; under joint encoding the concatenated sequence is split
    /// back into channel blocks in input order.
    pub patch: Tensor<S>,
    /// `1 x D` (joint) or `C x D` (independent).
    pub cls: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn channel(&self, c: usize) -> Tensor<S> {
        self.patch
            .slice_rows(c * self.tokens_per_channel, self.tokens_per_channel)
    }

    pub fn cls_rows(&self) -> usize {
        match self.mode {
            EncodingMode::Jfe => 1,
            EncodingMode::Ife => self.channels,
        }
    }

    pub fn cast<T: Scalar>(&self) -> FeatureMap<T> {
        FeatureMap {
            mode: self.mode,
            channels: self.channels,
            tokens_per_channel: self.tokens_per_channel,
            dim: self.dim,
            patch: self.patch.cast(),
            cls: self.cls.cast(),
        }
    }
}

/// Patchifies every channel, applies the shared projection and adds the
/// shared positional rows `1..=N`.
pub fn tokenize<S: Scalar>(
    image: &MultiChannelImage,
    w: &EncoderWeights<S>,
) -> Result<TokenBatch<S>, EncoderError> {
    let cfg = &w.config;
    if image.channels == 0 {
        return Err(EncoderError::NoChannels);
    }
    if image.height != cfg.image_size || image.width != cfg.image_size {
        return Err(EncoderError::SizeMismatch {
            expected: cfg.image_size,
            got: (image.height, image.width),
        });
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let n = cfg.tokens_per_channel();
    let d = cfg.embed_dim;
    let c = image.channels;

    let mut patches = Vec::with_capacity(c * n * p * p);
    for ch in 0..c {
        let px = image.channel(ch);
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    let row = (gy * p + dy) * cfg.image_size + gx * p;
                    patches.extend(
                        px[row..row + p]
                            .iter()
                            .map(|&v| S::from_f64_lossy(f64::from(v))),
                    );
                }
            }
        }
    }
    let patches = Tensor::matrix(c * n, p * p, patches)?;
    let mut tokens = ops::matmul(&patches, &w.patch_w)?;
    for r in 0..c * n {
        let pos = w.pos.row_slice(1 + r % n);
        for ((t, &b), &q) in tokens.row_slice_mut(r).iter_mut().zip(&w.patch_b).zip(pos) {
            *t += b + q;
        }
    }
    Ok(TokenBatch {
        channels: c,
        tokens_per_channel: n,
        dim: d,
        tokens: tokens.reshape(&[c, n, d])?,
    })
}

fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &[S]) -> Result<Tensor<S>, NumericsError> {
    let mut y = ops::matmul(x, w)?;
    for r in 0..y.rows() {
        for (v, &bb) in y.row_slice_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
    Ok(y)
}

fn add_in_place<S: Scalar>(x: &mut Tensor<S>, y: &Tensor<S>) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

fn attention<S: Scalar>(
    x: &Tensor<S>,
    blk: &Block<S>,
    heads: usize,
) -> Result<Tensor<S>, NumericsError> {
    let (s, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let qkv = linear(x, &blk.qkv_w, &blk.qkv_b)?;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let take = |offset: usize| -> Tensor<S> {
        let mut data = Vec::with_capacity(s * dh);
        for r in 0..s {
            data.extend_from_slice(&qkv.row_slice(r)[offset..offset + dh]);
        }
        Tensor::matrix(s, dh, data).expect("shape matches")
    };
    let mut merged = Tensor::zeros(&[s, d]);
    for h in 0..heads {
        let q = take(h * dh);
        let k = take(d + h * dh);
        let v = take(2 * d + h * dh);
        let scores = ops::matmul_bt(&q, &k)?.map(|z| z * scale);
        let attn = ops::softmax_rows(&scores)?;
        let out = ops::matmul(&attn, &v)?;
        for r in 0..s {
            merged.row_slice_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row_slice(r));
        }
    }
    linear(&merged, &blk.proj_w, &blk.proj_b)
}

fn mlp<S: Scalar>(x: &Tensor<S>, blk: &Block<S>) -> Result<Tensor<S>, NumericsError> {
    let h = linear(x, &blk.fc1_w, &blk.fc1_b)?.map(gelu);
    linear(&h, &blk.fc2_w, &blk.fc2_b)
}

/// `f(.)`: pre-norm transformer blocks followed by the final layer norm,
/// over one `S x D` sequence.
pub fn encode_sequence<S: Scalar>(
    seq: &Tensor<S>,
    w: &EncoderWeights<S>,
) -> Result<Tensor<S>, EncoderError> {
    let eps = S::from_f64_lossy(LN_EPS);
    let mut x = seq.clone();
    for blk in &w.blocks {
        let h = ops::layer_norm_rows(&x, &blk.ln1_gamma, &blk.ln1_beta, eps)?;
        add_in_place(&mut x, &attention(&h, blk, w.config.heads)?);
        let h = ops::layer_norm_rows(&x, &blk.ln2_gamma, &blk.ln2_beta, eps)?;
        add_in_place(&mut x, &mlp(&h, blk)?);
    }
    Ok(ops::layer_norm_rows(&x, &w.norm_gamma, &w.norm_beta, eps)?)
}

fn cls_row<S: Scalar>(w: &EncoderWeights<S>) -> Vec<S> {
    w.cls
        .iter()
        .zip(w.pos.row_slice(0))
        .map(|(&c, &p)| c + p)
        .collect()
}

/// Joint encoding: one global cls token followed by all `C * N` channel
/// tokens in channel order, attended jointly.
pub fn encode_jfe<S: Scalar>(
    batch: &TokenBatch<S>,
    w: &EncoderWeights<S>,
) -> Result<FeatureMap<S>, EncoderError> {
    let (c, n, d) = (batch.channels, batch.tokens_per_channel, batch.dim);
    if c == 0 {
        return Err(EncoderError::NoChannels);
    }
    let len = 1 + c * n;
    if len > w.config.max_seq_len {
        return Err(EncoderError::SequenceTooLong {
            len,
            max: w.config.max_seq_len,
        });
    }
    let mut seq = cls_row(w);
    seq.extend_from_slice(batch.tokens.data());
    let out = encode_sequence(&Tensor::matrix(len, d, seq)?, w)?;
    let cls = out.slice_rows(0, 1);
    let patch = out.slice_rows(1, c * n).reshape(&[c, n, d])?;
    Ok(FeatureMap {
        mode: EncodingMode::Jfe,
        channels: c,
        tokens_per_channel: n,
        dim: d,
        patch,
        cls,
    })
}

/// Independent encoding: `[cls, channel c tokens]` through the shared
/// blocks, separately for each channel.
pub fn encode_ife<S: Scalar>(
    batch: &TokenBatch<S>,
    w: &EncoderWeights<S>,
) -> Result<FeatureMap<S>, EncoderError> {
    let (c, n, d) = (batch.channels, batch.tokens_per_channel, batch.dim);
    if c == 0 {
        return Err(EncoderError::NoChannels);
    }
    let cls = cls_row(w);
    let mut patch = Vec::with_capacity(c * n * d);
    let mut cls_out = Vec::with_capacity(c * d);
    for ch in 0..c {
        let mut seq = cls.clone();
        seq.extend_from_slice(batch.channel(ch).data());
        let out = encode_sequence(&Tensor::matrix(1 + n, d, seq)?, w)?;
        cls_out.extend_from_slice(out.row_slice(0));
        patch.extend_from_slice(&out.data()[d..]);
    }
    Ok(FeatureMap {
        mode: EncodingMode::Ife,
        channels: c,
        tokens_per_channel: n,
        dim: d,
        patch: Tensor::new(vec![c, n, d], patch)?,
        cls: Tensor::matrix(c, d, cls_out)?,
    })
}

pub fn encode<S: Scalar>(
    image: &MultiChannelImage,
    w: &EncoderWeights<S>,
    mode: EncodingMode,
) -> Result<FeatureMap<S>, EncoderError> {
    let batch = tokenize(image, w)?;
    match mode {
        EncodingMode::Jfe => encode_jfe(&batch, w),
        EncodingMode::Ife => encode_ife(&batch, w),
    }
}

/// Encodes many images in parallel; output order follows input order and
/// does not depend on the thread count.
pub fn extract_features<S: Scalar>(
    images: &[MultiChannelImage],
    w: &EncoderWeights<S>,
    mode: EncodingMode,
) -> Result<Vec<FeatureMap<S>>, EncoderError> {
    images.par_iter().map(|im| encode(im, w, mode)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            init_seed: 3,
            max_seq_len: 64,
        }
    }

    fn image(c: usize, size: usize, seed: u64) -> MultiChannelImage {
        use rand::Rng;
        let mut rng = RngStream::new(seed, 1).generator();
        MultiChannelImage {
            channels: c,
            height: size,
            width: size,
            pixels: (0..c * size * size).map(|_| rng.random::<f32>()).collect(),
            label: 0,
            latents: vec![],
        }
    }

    #[test]
    fn default_config_geometry() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.tokens_per_channel(), 16);
        assert_eq!((cfg.embed_dim, cfg.depth, cfg.heads), (64, 4, 4));
        assert_eq!(EncoderConfig::small().tokens_per_channel(), 16);
    }

    #[test]
    fn tokenize_shapes() {
        let w = init_encoder::<f64>(&EncoderConfig::default()).unwrap();
        let b = tokenize(&image(3, 32, 1), &w).unwrap();
        assert_eq!(b.tokens.shape(), &[3, 16, 64]);
    }

    #[test]
    fn identical_channels_identical_tokens() {
        let w = init_encoder::<f64>(&tiny()).unwrap();
        let mut im = image(2, 8, 5);
        let first = im.channel(0).to_vec();
        im.channel_mut(1).copy_from_slice(&first);
        let b = tokenize(&im, &w).unwrap();
        assert_eq!(b.channel(0), b.channel(1));
    }

    #[test]
    fn tokenize_errors() {
        let w = init_encoder::<f64>(&tiny()).unwrap();
        assert!(matches!(
            tokenize(&image(1, 16, 1), &w),
            Err(EncoderError::SizeMismatch { .. })
        ));
        assert!(matches!(
            tokenize(&image(0, 8, 1), &w),
            Err(EncoderError::NoChannels)
        ));
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.patch_size = 3;
        assert!(init_encoder::<f64>(&c).is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(init_encoder::<f64>(&c).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_encoder::<f64>(&tiny()).unwrap();
        let b = init_encoder::<f64>(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let mut other = tiny();
        other.init_seed = 4;
        let c = init_encoder::<f64>(&other).unwrap();
        assert_ne!(a.patch_w, c.patch_w);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_is_truncated() {
        let w = init_encoder::<f64>(&EncoderConfig::default()).unwrap();
        assert!(w.blocks[0]
            .qkv_w
            .data()
            .iter()
            .all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn single_channel_modes_agree() {
        let w = init_encoder::<f64>(&tiny()).unwrap();
        let b = tokenize(&image(1, 8, 2), &w).unwrap();
        let j = encode_jfe(&b, &w).unwrap();
        let i = encode_ife(&b, &w).unwrap();
        assert!(j.patch.max_abs_diff(&i.patch) < 1e-9);
        assert!(j.cls.max_abs_diff(&i.cls) < 1e-9);
    }

    #[test]
    fn sequence_overflow_rejected() {
        let mut cfg = tiny();
        cfg.max_seq_len = 8;
        let w = init_encoder::<f64>(&cfg).unwrap();
        let b = tokenize(&image(2, 8, 2), &w).unwrap();
        assert!(matches!(
            encode_jfe(&b, &w),
            Err(EncoderError::SequenceTooLong { len: 9, max: 8 })
        ));
        assert!(encode_ife(&b, &w).is_ok());
    }

    #[test]
    fn zero_blocks_reduce_to_final_norm() {
        let mut w = init_encoder::<f64>(&tiny()).unwrap();
        for blk in &mut w.blocks {
            blk.proj_w = Tensor::zeros(blk.proj_w.shape());
            blk.fc2_w = Tensor::zeros(blk.fc2_w.shape());
        }
        let b = tokenize(&image(2, 8, 9), &w).unwrap();
        let out = encode_jfe(&b, &w).unwrap();
        let expect = ops::layer_norm_rows(
            &b.tokens.clone().reshape(&[8, 8]).unwrap(),
            &w.norm_gamma,
            &w.norm_beta,
            LN_EPS,
        )
        .unwrap();
        assert!(
            out.patch
                .clone()
                .reshape(&[8, 8])
                .unwrap()
                .max_abs_diff(&expect)
                < 1e-12
        );
    }

    #[test]
    fn mode_parses() {
        assert_eq!("IFE".parse::<EncodingMode>().unwrap(), EncodingMode::Ife);
        assert!("both".parse::<EncodingMode>().is_err());
    }
}
