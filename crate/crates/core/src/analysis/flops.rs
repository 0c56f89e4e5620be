//! Analytic parameter and FLOP counts.
//!
//! A multiply-accumulate counts as 2 FLOPs and a lone addition (mean
//! reductions, elementwise gating) as 1. Softmax, layer norm, activations and
//! bias additions are not counted.
//!
//! Encoder, per block and per sequence of length `S`:
//! attention `2 (4 S D^2 + 2 S^2 D)`, MLP `2 (2 S D r D)` with `r` the MLP
//! ratio. Joint encoding runs one sequence with `S = 1 + C N`; independent
//! encoding runs `C` sequences with `S = 1 + N`. Patch embedding and the final
//! norm are identical in both modes and are left out.
//!
//! Poolers are `a M + b` in the set size `M`; see [`pooler_cost`]. Quantities
//! that do not depend on the input (the projected `mab` seed query) are
//! computed once per forward pass and counted once, under either strategy.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncodingMode};
use crate::pooling::{abmilp_hidden, param_layout, PoolerArch, PoolerHyper, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    EncoderJfe,
    EncoderIfe,
    PoolerJap,
    PoolerDcp,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EncoderJfe => "encoder-jfe",
            Self::EncoderIfe => "encoder-ife",
            Self::PoolerJap => "pooler-jap",
            Self::PoolerDcp => "pooler-dcp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub component: Component,
    /// Pooler architecture, `None` for encoder reports.
    pub arch: Option<PoolerArch>,
    pub channels: u64,
    pub tokens: u64,
    pub dim: u64,
    pub depth: u64,
    pub heads: u64,
    pub flops: u64,
    /// Attention score and mixing terms only (`2 * 2 S^2 D` per block).
    pub attention_flops: u64,
    pub params: u64,
}

/// `(total, quadratic attention)` FLOPs of one block over a sequence of `s`.
fn block_flops(s: u64, d: u64, mlp_ratio: u64) -> (u64, u64) {
    let quad = 2 * (2 * s * s * d);
    let linear = 2 * (4 * s * d * d) + 2 * (2 * s * d * mlp_ratio * d);
    (linear + quad, quad)
}

/// Learnable scalars of the encoder with the given config.
pub fn encoder_params(cfg: &EncoderConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.mlp_ratio as u64 * d;
    let p2 = (cfg.patch_size * cfg.patch_size) as u64;
    let n = cfg.tokens_per_channel() as u64;
    let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
    p2 * d + d + (n + 1) * d + d + cfg.depth as u64 * block + 2 * d
}

pub fn encoder_flops(cfg: &EncoderConfig, channels: usize, mode: EncodingMode) -> CostReport {
    encoder_flops_at(cfg, channels, cfg.tokens_per_channel(), mode)
}

/// As [`encoder_flops`] with an explicit token count per channel.
pub fn encoder_flops_at(
    cfg: &EncoderConfig,
    channels: usize,
    tokens: usize,
    mode: EncodingMode,
) -> CostReport {
    let (c, n, d) = (channels as u64, tokens as u64, cfg.embed_dim as u64);
    let (seqs, s) = match mode {
        EncodingMode::Jfe => (1, 1 + c * n),
        EncodingMode::Ife => (c, 1 + n),
    };
    let (per, quad) = block_flops(s, d, cfg.mlp_ratio as u64);
    let depth = cfg.depth as u64;
    CostReport {
        component: match mode {
            EncodingMode::Jfe => Component::EncoderJfe,
            EncodingMode::Ife => Component::EncoderIfe,
        },
        arch: None,
        channels: c,
        tokens: n,
        dim: d,
        depth,
        heads: cfg.heads as u64,
        flops: depth * seqs * per,
        attention_flops: depth * seqs * quad,
        params: encoder_params(cfg),
    }
}

/// `(per application of g on M rows, once per forward)` FLOPs.
pub fn pooler_cost(arch: PoolerArch, m: u64, d: u64, hp: &PoolerHyper) -> (u64, u64) {
    let md = m * d;
    match arch {
        PoolerArch::Mean => (md, 0),
        PoolerArch::SimPool => (md + 2 * d * d + 2 * md * d + 4 * md, 0),
        PoolerArch::AbMilp => {
            let h = abmilp_hidden(d as usize) as u64;
            (4 * m * h * d + m * h + 2 * m * h + 2 * md, 0)
        }
        PoolerArch::Ep => {
            let k = hp.queries as u64;
            (2 * md * d + 4 * k * md + k * d, 0)
        }
        PoolerArch::Mhca => (4 * md * d + 4 * md + 2 * d * d, 0),
        PoolerArch::Mab => (4 * md * d + 4 * md + 2 * d * d + 8 * d * d, 2 * d * d),
        PoolerArch::ProtoBin => {
            let p = hp.prototypes as u64;
            (4 * p * md + p * d, 0)
        }
    }
}

pub fn pooler_params(arch: PoolerArch, d: usize, hp: &PoolerHyper) -> u64 {
    param_layout(arch, d, hp)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

pub fn pooler_flops(
    arch: PoolerArch,
    strategy: Strategy,
    channels: usize,
    tokens: usize,
    dim: usize,
) -> CostReport {
    pooler_flops_with(
        arch,
        strategy,
        channels,
        tokens,
        dim,
        &PoolerHyper::default(),
    )
}

pub fn pooler_flops_with(
    arch: PoolerArch,
    strategy: Strategy,
    channels: usize,
    tokens: usize,
    dim: usize,
    hp: &PoolerHyper,
) -> CostReport {
    let (c, n, d) = (channels as u64, tokens as u64, dim as u64);
    let cost = |m| pooler_cost(arch, m, d, hp).0;
    let prep = pooler_cost(arch, 1, d, hp).1;
    let (component, flops) = match strategy {
        Strategy::Jap => (Component::PoolerJap, prep + cost(c * n)),
        Strategy::Dcp => (Component::PoolerDcp, prep + c * cost(n) + cost(c)),
    };
    let heads = match arch {
        PoolerArch::Mab | PoolerArch::Mhca => hp.heads as u64,
        _ => 0,
    };
    CostReport {
        component,
        arch: Some(arch),
        channels: c,
        tokens: n,
        dim: d,
        depth: 1,
        heads,
        flops,
        attention_flops: 0,
        params: pooler_params(arch, dim, hp),
    }
}

/// `|DCP - JAP| / JAP`.
pub fn pooler_relative_overhead(
    arch: PoolerArch,
    channels: usize,
    tokens: usize,
    dim: usize,
) -> f64 {
    let jap = pooler_flops(arch, Strategy::Jap, channels, tokens, dim).flops as f64;
    let dcp = pooler_flops(arch, Strategy::Dcp, channels, tokens, dim).flops as f64;
    (dcp - jap).abs() / jap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::pooling::Pooler;

    fn vit(d: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: d,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            init_seed: 0,
            max_seq_len: 1 + 16 * 196,
        }
    }

    #[test]
    fn single_channel_modes_agree() {
        let cfg = vit(384);
        assert_eq!(
            encoder_flops(&cfg, 1, EncodingMode::Jfe).flops,
            encoder_flops(&cfg, 1, EncodingMode::Ife).flops
        );
    }

    #[test]
    fn attention_ratio_example() {
        let cfg = vit(384);
        let j = encoder_flops(&cfg, 8, EncodingMode::Jfe).attention_flops as f64;
        let i = encoder_flops(&cfg, 8, EncodingMode::Ife).attention_flops as f64;
        let expect = (1.0 + 8.0 * 196.0f64).powi(2) / (8.0 * 197.0f64.powi(2));
        assert!((j / i - expect).abs() < 1e-12);
        assert!((j / i - 7.929).abs() < 1e-3);
    }

    #[test]
    fn doubling_tokens_quadruples_quadratic_term() {
        let cfg = vit(64);
        let a = encoder_flops_at(&cfg, 4, 196, EncodingMode::Ife).attention_flops as f64;
        let b = encoder_flops_at(&cfg, 4, 392, EncodingMode::Ife).attention_flops as f64;
        assert!((b / a - 4.0).abs() < 0.03);
    }

    #[test]
    fn encoder_param_formula_matches_weights() {
        let cfg = EncoderConfig {
            depth: 2,
            ..EncoderConfig::default()
        };
        let w = init_encoder::<f64>(&cfg).unwrap();
        let mut count = w.patch_w.len() + w.patch_b.len() + w.pos.len() + w.cls.len();
        count += w.norm_gamma.len() + w.norm_beta.len();
        for b in &w.blocks {
            count += b.ln1_gamma.len() + b.ln1_beta.len() + b.ln2_gamma.len() + b.ln2_beta.len();
            count += b.qkv_w.len() + b.qkv_b.len() + b.proj_w.len() + b.proj_b.len();
            count += b.fc1_w.len() + b.fc1_b.len() + b.fc2_w.len() + b.fc2_b.len();
        }
        assert_eq!(encoder_params(&cfg), count as u64);
    }

    #[test]
    fn pooler_param_formula_matches_init() {
        let hp = PoolerHyper::default();
        for arch in PoolerArch::ALL {
            let p = Pooler::<f64>::new(arch, 32, 0, hp).unwrap();
            assert_eq!(pooler_params(arch, 32, &hp), p.param_count() as u64);
        }
    }

    #[test]
    fn mean_ratio_closed_form() {
        let j = pooler_flops(PoolerArch::Mean, Strategy::Jap, 8, 196, 384).flops;
        let d = pooler_flops(PoolerArch::Mean, Strategy::Dcp, 8, 196, 384).flops;
        assert_eq!(d * 196, j * 197);
    }

    #[test]
    fn parity_at_reference_scale() {
        for arch in PoolerArch::ALL {
            assert!(
                pooler_relative_overhead(arch, 8, 196, 384) <= 0.02,
                "{arch}"
            );
        }
    }

    #[test]
    fn overhead_grows_as_tokens_shrink() {
        assert_eq!(pooler_relative_overhead(PoolerArch::Mean, 1, 1, 8), 1.0);
        let small = pooler_relative_overhead(PoolerArch::Mhca, 4, 4, 64);
        assert!(small > 0.25 && small > pooler_relative_overhead(PoolerArch::Mhca, 8, 196, 64));
    }
}
