#![allow(dead_code)]

use chanprobe::encoder::EncoderConfig;
use chanprobe::numerics::{RngStream, Tensor};
use chanprobe::synthdata::MultiChannelImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    RngStream::new(seed, 0x7e57).generator()
}

pub fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        init_seed: seed,
        max_seq_len: 129,
    }
}

pub fn random_image(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> MultiChannelImage {
    MultiChannelImage {
        channels,
        height: size,
        width: size,
        pixels: (0..channels * size * size)
            .map(|_| rng.random::<f32>())
            .collect(),
        label: 0,
        latents: Vec::new(),
    }
}

/// Tensor of the given shape with entries uniform in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Image with channel `c` of the output taken from channel `order[c]`.
pub fn permute_channels(img: &MultiChannelImage, order: &[usize]) -> MultiChannelImage {
    let mut out = img.clone();
    out.pixels = order
        .iter()
        .flat_map(|&c| img.channel(c).iter().copied())
        .collect();
    out
}

/// Rows of `x` reordered so that output row `r` is input row `order[r]`.
pub fn permute_rows(x: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let d = x.cols();
    let data = order
        .iter()
        .flat_map(|&r| x.row_slice(r).iter().copied())
        .collect();
    Tensor::matrix(order.len(), d, data).expect("consistent shape")
}

pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
