//! Set pooling functions `g: M x D -> D` and the two ways of applying one to
//! a `C x N x D` feature tensor.
//!
//! Joint pooling (JAP) runs `g` once over all `C * N` rows. Decoupled
//! pooling (DCP) runs `g` over each channel's `N` rows, stacks the `C`
//! results and runs the same `g`, with the same parameters, over that
//! `C x D` matrix. Both wrappers therefore hold exactly the pooler's
//! parameters.
//!
//! Architectures (`D` = feature dim; linear weights stored `in x out`):
//!
//! | arch     | definition                                                        | parameters            |
//! |----------|-------------------------------------------------------------------|-----------------------|
//! | mean     | row average                                                       | 0                     |
//! | simpool  | `q = mean(X)`; `a = softmax((q Wq)(X Wk)^T / sqrt D)`; `a X`      | `2 D^2`               |
//! | abmilp   | `a = softmax(w . (tanh(X V) * sigmoid(X U)))`, hidden `D/2`; `a X`| `2 D h + h`           |
//! | ep       | `k` queries, `A = softmax(Q (X Wk)^T / sqrt D)`; mean rows of `A X`| `k D + D^2`          |
//! | mab      | seed `s`; `H = LN(s + MHA(s, X, X))`; `LN(H + FF(H))`, FF width `2D`| see [`Pooler::param_count`] |
//! | mhca     | free query `q`; multi-head cross-attention with K, V, O projections| `D + 3 (D^2 + D)`    |
//! | protobin | `P` prototypes, `A = softmax(P X^T / sqrt D)`; mean rows of `A X`  | `P D`                 |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::rng::{trunc_normal, RngStream};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-6;
const QUERY_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolerArch {
    Mean,
    SimPool,
    AbMilp,
    Ep,
    Mab,
    Mhca,
    ProtoBin,
}

impl PoolerArch {
    pub const ALL: [PoolerArch; 7] = [
        PoolerArch::Mean,
        PoolerArch::SimPool,
        PoolerArch::AbMilp,
        PoolerArch::Ep,
        PoolerArch::Mab,
        PoolerArch::Mhca,
        PoolerArch::ProtoBin,
    ];

    /// The six learned architectures (everything except `mean`).
    pub const LEARNED: [PoolerArch; 6] = [
        PoolerArch::SimPool,
        PoolerArch::AbMilp,
        PoolerArch::Ep,
        PoolerArch::Mab,
        PoolerArch::Mhca,
        PoolerArch::ProtoBin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::SimPool => "simpool",
            Self::AbMilp => "abmilp",
            Self::Ep => "ep",
            Self::Mab => "mab",
            Self::Mhca => "mhca",
            Self::ProtoBin => "protobin",
        }
    }
}

impl fmt::Display for PoolerArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolerArch {
    type Err = PoolingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PoolerArch::ALL
            .into_iter()
            .find(|a| a.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| PoolingError::UnknownArch(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Jap,
    Dcp,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Jap => "jap",
            Self::Dcp => "dcp",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jap" => Ok(Self::Jap),
            "dcp" => Ok(Self::Dcp),
            other => Err(format!(
                "unknown pooling strategy `{other}` (expected jap or dcp)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolingError {
    EmptySet,
    DimMismatch {
        expected: usize,
        got: usize,
    },
    NonFinite,
    UnknownArch(String),
    InvalidHyper(String),
    ParamMismatch {
        expected: Vec<Vec<usize>>,
        got: Vec<Vec<usize>>,
    },
    Numerics(NumericsError),
}

impl fmt::Display for PoolingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptySet => write!(f, "cannot pool an empty set"),
            Self::DimMismatch { expected, got } => {
                write!(f, "feature dim {got} does not match pooler dim {expected}")
            }
            Self::NonFinite => write!(f, "features contain NaN or infinity"),
            Self::UnknownArch(a) => write!(
                f,
                "unknown pooler architecture `{a}` (expected mean, simpool, abmilp, ep, mab, mhca or protobin)"
            ),
            Self::InvalidHyper(msg) => write!(f, "invalid pooler hyperparameters: {msg}"),
            Self::ParamMismatch { expected, got } => {
                write!(f, "parameter shapes {got:?} do not match {expected:?}")
            }
            Self::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PoolingError {}

impl From<NumericsError> for PoolingError {
    fn from(e: NumericsError) -> Self {
        Self::Numerics(e)
    }
}

/// Architecture-specific sizes. Ignored where they do not apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolerHyper {
    /// Attention heads for `mhca` and `mab`.
    pub heads: usize,
    /// Prototypes for `protobin`.
    pub prototypes: usize,
    /// Learned queries for `ep`.
    pub queries: usize,
}

impl Default for PoolerHyper {
    fn default() -> Self {
        Self {
            heads: 4,
            prototypes: 8,
            queries: 4,
        }
    }
}

/// A pooling function with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooler<S> {
    pub arch: PoolerArch,
    pub dim: usize,
    pub hyper: PoolerHyper,
    params: Vec<Tensor<S>>,
}

/// Named parameter shapes, in storage order.
pub fn param_layout(
    arch: PoolerArch,
    d: usize,
    hp: &PoolerHyper,
) -> Vec<(&'static str, Vec<usize>)> {
    let sq = vec![d, d];
    let row = vec![1, d];
    match arch {
        PoolerArch::Mean => vec![],
        PoolerArch::SimPool => vec![("w_q", sq.clone()), ("w_k", sq)],
        PoolerArch::AbMilp => {
            let h = abmilp_hidden(d);
            vec![("v", vec![d, h]), ("u", vec![d, h]), ("w", vec![1, h])]
        }
        PoolerArch::Ep => vec![("queries", vec![hp.queries, d]), ("w_k", sq)],
        PoolerArch::Mhca => vec![
            ("query", row.clone()),
            ("w_k", sq.clone()),
            ("b_k", row.clone()),
            ("w_v", sq.clone()),
            ("b_v", row.clone()),
            ("w_o", sq),
            ("b_o", row),
        ],
        PoolerArch::Mab => vec![
            ("seed", row.clone()),
            ("w_q", sq.clone()),
            ("b_q", row.clone()),
            ("w_k", sq.clone()),
            ("b_k", row.clone()),
            ("w_v", sq.clone()),
            ("b_v", row.clone()),
            ("w_o", sq),
            ("b_o", row.clone()),
            ("ln1_gamma", row.clone()),
            ("ln1_beta", row.clone()),
            ("ff1_w", vec![d, 2 * d]),
            ("ff1_b", vec![1, 2 * d]),
            ("ff2_w", vec![2 * d, d]),
            ("ff2_b", row.clone()),
            ("ln2_gamma", row.clone()),
            ("ln2_beta", row),
        ],
        PoolerArch::ProtoBin => vec![("prototypes", vec![hp.prototypes, d])],
    }
}

/// Hidden width of the gated attention scorer.
pub fn abmilp_hidden(d: usize) -> usize {
    (d / 2).max(1)
}

/// Parameters bound to a tape for one forward pass, plus input-independent
/// quantities computed once per pass and reused by every application of `g`.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    prepared: Vec<Var>,
}

impl<S: Scalar> Pooler<S> {
    /// Deterministic initialization from `seed`.
    ///
    /// Linear weights draw from a truncated normal with std `1/sqrt(fan_in)`;
    /// queries, seeds and prototypes use std 0.02; biases start at zero and
    /// layer-norm gains at one.
    pub fn new(
        arch: PoolerArch,
        dim: usize,
        seed: u64,
        hyper: PoolerHyper,
    ) -> Result<Self, PoolingError> {
        if dim == 0 {
            return Err(PoolingError::InvalidHyper("dim must be positive".into()));
        }
        if matches!(arch, PoolerArch::Mhca | PoolerArch::Mab)
            && (hyper.heads == 0 || !dim.is_multiple_of(hyper.heads))
        {
            return Err(PoolingError::InvalidHyper(format!(
                "dim {dim} is not divisible by {} heads",
                hyper.heads
            )));
        }
        if arch == PoolerArch::Ep && hyper.queries == 0 {
            return Err(PoolingError::InvalidHyper(
                "ep needs at least one query".into(),
            ));
        }
        if arch == PoolerArch::ProtoBin && hyper.prototypes == 0 {
            return Err(PoolingError::InvalidHyper(
                "protobin needs at least one prototype".into(),
            ));
        }
        let mut rng = RngStream::new(seed, 0x9001).fork(arch as u64).generator();
        let params = param_layout(arch, dim, &hyper)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let std = match name {
                    "query" | "queries" | "seed" | "prototypes" => Some(QUERY_STD),
                    n if n.starts_with("w_")
                        || n.ends_with("_w")
                        || n == "v"
                        || n == "u"
                        || n == "w" =>
                    {
                        Some(1.0 / (shape[0] as f64).sqrt())
                    }
                    _ => None,
                };
                let fill = if name.ends_with("gamma") {
                    S::one()
                } else {
                    S::zero()
                };
                let data = match std {
                    Some(sd) => (0..n)
                        .map(|_| S::from_f64_lossy(trunc_normal(&mut rng, sd)))
                        .collect(),
                    None => vec![fill; n],
                };
                Tensor::new(shape, data).expect("layout shape")
            })
            .collect();
        Ok(Self {
            arch,
            dim,
            hyper,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<(), PoolingError> {
        let expected: Vec<Vec<usize>> = self.params.iter().map(|p| p.shape().to_vec()).collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != got {
            return Err(PoolingError::ParamMismatch { expected, got });
        }
        self.params = params;
        Ok(())
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places the parameters on `tape` and computes the input-independent
    /// part of the forward pass.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Bound, PoolingError> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        let mut prepared = Vec::new();
        match self.arch {
            PoolerArch::Mab => {
                let q = tape.matmul(vars[0], vars[1])?;
                prepared.push(tape.add_row(q, vars[2])?);
            }
            PoolerArch::Mhca => {
                let dh = self.dim / self.hyper.heads;
                for h in 0..self.hyper.heads {
                    prepared.push(tape.slice_cols(vars[0], h * dh, dh)?);
                }
            }
            _ => {}
        }
        Ok(Bound { vars, prepared })
    }

    fn check_input(&self, tape: &Tape<S>, feats: Var) -> Result<(), PoolingError> {
        let v = tape.value(feats);
        if v.rows() == 0 || v.is_empty() {
            return Err(PoolingError::EmptySet);
        }
        if v.cols() != self.dim {
            return Err(PoolingError::DimMismatch {
                expected: self.dim,
                got: v.cols(),
            });
        }
        if !v.all_finite() {
            return Err(PoolingError::NonFinite);
        }
        Ok(())
    }

    /// `g(X)` for `X: M x D` on the tape; returns a `1 x D` node.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        feats: Var,
    ) -> Result<Var, PoolingError> {
        self.check_input(tape, feats)?;
        let p = &bound.vars;
        let d = self.dim;
        let inv_sqrt = |n: usize| S::one() / S::from_usize_lossy(n).sqrt();
        let out = match self.arch {
            PoolerArch::Mean => tape.mean_rows(feats),
            PoolerArch::SimPool => {
                let q = tape.mean_rows(feats);
                let q = tape.matmul(q, p[0])?;
                let k = tape.matmul(feats, p[1])?;
                let s = tape.matmul_bt(q, k)?;
                let s = tape.scale(s, inv_sqrt(d));
                let a = tape.softmax_rows(s)?;
                tape.matmul(a, feats)?
            }
            PoolerArch::AbMilp => {
                let hv = tape.matmul(feats, p[0])?;
                let hv = tape.tanh(hv);
                let hu = tape.matmul(feats, p[1])?;
                let hu = tape.sigmoid(hu);
                let gated = tape.mul(hv, hu)?;
                let s = tape.matmul_bt(p[2], gated)?;
                let a = tape.softmax_rows(s)?;
                tape.matmul(a, feats)?
            }
            PoolerArch::Ep => {
                let k = tape.matmul(feats, p[1])?;
                let s = tape.matmul_bt(p[0], k)?;
                let s = tape.scale(s, inv_sqrt(d));
                let a = tape.softmax_rows(s)?;
                let o = tape.matmul(a, feats)?;
                tape.mean_rows(o)
            }
            PoolerArch::Mhca => {
                let heads = self.attend(tape, &bound.prepared, feats, [p[1], p[2], p[3], p[4]])?;
                let o = tape.matmul(heads, p[5])?;
                tape.add_row(o, p[6])?
            }
            PoolerArch::Mab => {
                let q = bound.prepared[0];
                let dh = d / self.hyper.heads;
                let mut q_heads = Vec::with_capacity(self.hyper.heads);
                for h in 0..self.hyper.heads {
                    q_heads.push(tape.slice_cols(q, h * dh, dh)?);
                }
                let heads = self.attend(tape, &q_heads, feats, [p[3], p[4], p[5], p[6]])?;
                let mh = tape.matmul(heads, p[7])?;
                let mh = tape.add_row(mh, p[8])?;
                let res = tape.add(p[0], mh)?;
                let h1 = tape.layer_norm_rows(res, p[9], p[10], S::from_f64_lossy(LN_EPS))?;
                let f = tape.matmul(h1, p[11])?;
                let f = tape.add_row(f, p[12])?;
                let f = tape.gelu(f);
                let f = tape.matmul(f, p[13])?;
                let f = tape.add_row(f, p[14])?;
                let res = tape.add(h1, f)?;
                tape.layer_norm_rows(res, p[15], p[16], S::from_f64_lossy(LN_EPS))?
            }
            PoolerArch::ProtoBin => {
                let s = tape.matmul_bt(p[0], feats)?;
                let s = tape.scale(s, inv_sqrt(d));
                let a = tape.softmax_rows(s)?;
                let o = tape.matmul(a, feats)?;
                tape.mean_rows(o)
            }
        };
        Ok(out)
    }

    /// Multi-head cross-attention of per-head query rows over `feats`;
    /// returns the concatenated `1 x D` head outputs (before the output
    /// projection).
    fn attend(
        &self,
        tape: &mut Tape<S>,
        q_heads: &[Var],
        feats: Var,
        kv: [Var; 4],
    ) -> Result<Var, PoolingError> {
        let [w_k, b_k, w_v, b_v] = kv;
        let dh = self.dim / self.hyper.heads;
        let k = tape.matmul(feats, w_k)?;
        let k = tape.add_row(k, b_k)?;
        let v = tape.matmul(feats, w_v)?;
        let v = tape.add_row(v, b_v)?;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut outs = Vec::with_capacity(q_heads.len());
        for (h, &q) in q_heads.iter().enumerate() {
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(q, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        Ok(tape.concat_cols(&outs)?)
    }

    /// Forward-only `g(X)` for an `M x D` matrix.
    pub fn pool(&self, feats: &Tensor<S>) -> Result<Tensor<S>, PoolingError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(feats.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }
}

/// A pooler applied under one strategy. JAP and DCP share the same pooler,
/// so their parameter counts are identical by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingWrapper<S> {
    pub strategy: Strategy,
    pub pooler: Pooler<S>,
}

impl<S: Scalar> PoolingWrapper<S> {
    pub fn new(strategy: Strategy, pooler: Pooler<S>) -> Self {
        Self { strategy, pooler }
    }

    pub fn param_count(&self) -> usize {
        self.pooler.param_count()
    }

    /// `z` for features `x: (C * N) x D` on the tape, channels stored as
    /// consecutive blocks of `N` rows.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: Var,
        channels: usize,
    ) -> Result<Var, PoolingError> {
        match self.strategy {
            Strategy::Jap => self.pooler.forward(tape, bound, x),
            Strategy::Dcp => Ok(self.dcp_parts(tape, bound, x, channels)?.1),
        }
    }

    /// Decoupled pooling, returning `(z_local: C x D, z_dcp: 1 x D)`.
    pub fn dcp_parts(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: Var,
        channels: usize,
    ) -> Result<(Var, Var), PoolingError> {
        let rows = tape.value(x).rows();
        if channels == 0 || rows == 0 {
            return Err(PoolingError::EmptySet);
        }
        if !rows.is_multiple_of(channels) {
            return Err(PoolingError::InvalidHyper(format!(
                "{rows} rows do not split into {channels} equal channels"
            )));
        }
        let n = rows / channels;
        let mut local = Vec::with_capacity(channels);
        for c in 0..channels {
            let xc = tape.slice_rows(x, c * n, n)?;
            local.push(self.pooler.forward(tape, bound, xc)?);
        }
        let z_local = tape.concat_rows(&local)?;
        let z = self.pooler.forward(tape, bound, z_local)?;
        Ok((z_local, z))
    }

    /// Forward-only pooling of a `C x N x D` tensor.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>, PoolingError> {
        let channels = match x.shape() {
            [c, _, _] => *c,
            _ => 1,
        };
        let mut tape = Tape::new();
        let bound = self.pooler.bind(&mut tape, false)?;
        let flat = x.clone().reshape(&[x.rows(), x.cols()])?;
        let xv = tape.constant(flat);
        let out = self.forward(&mut tape, &bound, xv, channels)?;
        Ok(tape.value(out).clone())
    }
}

pub fn jap_forward<S: Scalar>(
    pooler: &Pooler<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>, PoolingError> {
    PoolingWrapper::new(Strategy::Jap, pooler.clone()).apply(x)
}

pub fn dcp_forward<S: Scalar>(
    pooler: &Pooler<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>, PoolingError> {
    PoolingWrapper::new(Strategy::Dcp, pooler.clone()).apply(x)
}
