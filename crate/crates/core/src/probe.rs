//! Attentive probing over frozen features: a pooler and a linear head trained
//! by minibatch cross-entropy with decoupled weight decay.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::stats::{mean, std_dev};
use crate::encoder::{EncodingMode, FeatureMap};
use crate::numerics::rng::{log_uniform, trunc_normal, RngStream};
use crate::numerics::{AdamW, NumericsError, Tape, Tensor, Var};
use crate::pooling::{Pooler, PoolerArch, PoolerHyper, PoolingError, PoolingWrapper, Strategy};
use crate::scalar::Scalar;
use crate::synthdata::Split;

pub const LR_MIN: f64 = 1e-5;
pub const LR_MAX: f64 = 1e-2;
pub const SEARCH_SEED: u64 = 42;
pub const COARSE_DRAWS: usize = 10;
/// Seeds for the five runs of every matrix cell.
pub const MATRIX_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

const PROBE_STREAM: u64 = 0x9b0be;
const SEARCH_STREAM: u64 = 0x5ea2c4;

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeError {
    EncodingMismatch {
        expected: EncodingMode,
        found: EncodingMode,
    },
    EmptySplit(Split),
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    ShapeMismatch(String),
    InvalidConfig(String),
    Pooling(PoolingError),
    Numerics(NumericsError),
}

impl fmt::Display for ProbeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EncodingMismatch { expected, found } => write!(
                f,
                "probe expects {expected} features but the feature set was encoded with {found}"
            ),
            Self::EmptySplit(s) => write!(f, "{} split is empty", s.name()),
            Self::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Self::ShapeMismatch(msg) => write!(f, "inconsistent feature shapes: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid probe config: {msg}"),
            Self::Pooling(e) => write!(f, "{e}"),
            Self::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ProbeError {}

impl From<PoolingError> for ProbeError {
    fn from(e: PoolingError) -> Self {
        Self::Pooling(e)
    }
}

impl From<NumericsError> for ProbeError {
    fn from(e: NumericsError) -> Self {
        Self::Numerics(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub encoding: EncodingMode,
    pub strategy: Strategy,
    pub arch: PoolerArch,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hyper: PoolerHyper,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingMode::Ife,
            strategy: Strategy::Dcp,
            arch: PoolerArch::Mhca,
            lr: 1e-2,
            weight_decay: 0.05,
            batch_size: 128,
            epochs: 30,
            seed: SEARCH_SEED,
            hyper: PoolerHyper::default(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(ProbeError::InvalidConfig(format!(
                "lr must be >= 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(ProbeError::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(ProbeError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Patch features of one split, stored at 32-bit. Each entry is the
/// `C x N x D` tensor flattened to `(C * N) x D`, channel-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitFeatures {
    pub x: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl SplitFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub mode: EncodingMode,
    pub channels: usize,
    pub tokens: usize,
    pub dim: usize,
    pub classes: usize,
    pub train: SplitFeatures,
    pub val: SplitFeatures,
    pub test: SplitFeatures,
}

impl FeatureSet {
    /// Builds a feature set from encoder outputs; `classes` of `None` takes
    /// the largest label plus one.
    pub fn from_maps<S: Scalar>(
        splits: [(&[FeatureMap<S>], &[usize]); 3],
        classes: Option<usize>,
    ) -> Result<Self, ProbeError> {
        let first = splits
            .iter()
            .find_map(|(m, _)| m.first())
            .ok_or(ProbeError::EmptySplit(Split::Train))?;
        let (mode, c, n, d) = (
            first.mode,
            first.channels,
            first.tokens_per_channel,
            first.dim,
        );
        let max_label = splits
            .iter()
            .flat_map(|(_, l)| l.iter())
            .copied()
            .max()
            .unwrap_or(0);
        let classes = classes.unwrap_or(max_label + 1);
        let mut out: Vec<SplitFeatures> = Vec::with_capacity(3);
        for (maps, labels) in splits {
            if maps.len() != labels.len() {
                return Err(ProbeError::ShapeMismatch(format!(
                    "{} feature maps but {} labels",
                    maps.len(),
                    labels.len()
                )));
            }
            let mut x = Vec::with_capacity(maps.len());
            for m in maps {
                if (m.mode, m.channels, m.tokens_per_channel, m.dim) != (mode, c, n, d) {
                    return Err(ProbeError::ShapeMismatch(format!(
                        "{} x {} x {} ({}) vs {c} x {n} x {d} ({mode})",
                        m.channels, m.tokens_per_channel, m.dim, m.mode
                    )));
                }
                x.push(m.patch.cast::<f32>().reshape(&[c * n, d])?);
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
                return Err(ProbeError::LabelOutOfRange { label: l, classes });
            }
            out.push(SplitFeatures {
                x,
                labels: labels.to_vec(),
            });
        }
        let test = out.pop().expect("three splits");
        let val = out.pop().expect("three splits");
        let train = out.pop().expect("three splits");
        Ok(Self {
            mode,
            channels: c,
            tokens: n,
            dim: d,
            classes,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, s: Split) -> &SplitFeatures {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSource {
    Fixed,
    Coarse,
    Fine,
}

/// Pooler plus linear head `logits = z W + b`, `W: D x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub wrapper: PoolingWrapper<f64>,
    pub head_w: Tensor<f64>,
    pub head_b: Tensor<f64>,
}

impl ProbeModel {
    pub fn new(cfg: &ProbeConfig, dim: usize, classes: usize) -> Result<Self, ProbeError> {
        let root = RngStream::new(cfg.seed, PROBE_STREAM);
        let pooler_seed = root.fork(0).word_at(0);
        let pooler = Pooler::new(cfg.arch, dim, pooler_seed, cfg.hyper)?;
        let mut rng = root.fork(1).generator();
        let std = 1.0 / (dim as f64).sqrt();
        let head_w = Tensor::new(
            vec![dim, classes],
            (0..dim * classes)
                .map(|_| trunc_normal(&mut rng, std))
                .collect(),
        )?;
        Ok(Self {
            wrapper: PoolingWrapper::new(cfg.strategy, pooler),
            head_w,
            head_b: Tensor::zeros(&[1, classes]),
        })
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        let mut v = self.wrapper.pooler.params().to_vec();
        v.push(self.head_w.clone());
        v.push(self.head_b.clone());
        v
    }

    pub fn set_params(&mut self, mut params: Vec<Tensor<f64>>) -> Result<(), ProbeError> {
        let b = params
            .pop()
            .ok_or_else(|| ProbeError::ShapeMismatch("missing head bias".into()))?;
        let w = params
            .pop()
            .ok_or_else(|| ProbeError::ShapeMismatch("missing head weight".into()))?;
        if w.shape() != self.head_w.shape() || b.shape() != self.head_b.shape() {
            return Err(ProbeError::ShapeMismatch(
                "head parameter shapes changed".into(),
            ));
        }
        self.wrapper.pooler.set_params(params)?;
        self.head_w = w;
        self.head_b = b;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.wrapper.param_count() + self.head_w.len() + self.head_b.len()
    }

    /// Builds the forward graph for one sample; returns `(param vars, logits)`.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<f64>,
        x: &Tensor<f32>,
        channels: usize,
        trainable: bool,
    ) -> Result<(Vec<Var>, Var), ProbeError> {
        let bound = self.wrapper.pooler.bind(tape, trainable)?;
        let w = tape.leaf(self.head_w.clone(), trainable);
        let b = tape.leaf(self.head_b.clone(), trainable);
        let xv = tape.constant(x.cast::<f64>());
        let z = self.wrapper.forward(tape, &bound, xv, channels)?;
        let logits = tape.matmul(z, w)?;
        let logits = tape.add_row(logits, b)?;
        let mut vars = bound.vars;
        vars.push(w);
        vars.push(b);
        Ok((vars, logits))
    }

    pub fn logits(&self, x: &Tensor<f32>, channels: usize) -> Result<Vec<f64>, ProbeError> {
        let mut tape = Tape::new();
        let (_, l) = self.logits_on_tape(&mut tape, x, channels, false)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Loss, gradients (in [`ProbeModel::params`] order) and logits for one
    /// sample.
    pub fn sample_grad(
        &self,
        x: &Tensor<f32>,
        label: usize,
        channels: usize,
    ) -> Result<(f64, Vec<Tensor<f64>>, Vec<f64>), ProbeError> {
        let mut tape = Tape::new();
        let (vars, logits) = self.logits_on_tape(&mut tape, x, channels, true)?;
        let loss = tape.cross_entropy(logits, label)?;
        let loss_value = tape.value(loss).data()[0];
        let logit_values = tape.value(logits).data().to_vec();
        let grads = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = vars
            .iter()
            .map(|&v| tape.value(v).shape().to_vec())
            .collect();
        let g = vars
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| grads.get_or_zeros(v, s))
            .collect();
        Ok((loss_value, g, logit_values))
    }
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn predict(
    model: &ProbeModel,
    split: &SplitFeatures,
    channels: usize,
) -> Result<Vec<usize>, ProbeError> {
    split
        .x
        .par_iter()
        .map(|x| model.logits(x, channels).map(|l| argmax(&l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRun {
    pub config: ProbeConfig,
    pub model: ProbeModel,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// 1-based epoch whose parameters were kept; 0 when `epochs` is 0.
    pub best_epoch: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Accuracy of the predictions made during each epoch's training passes.
    pub running_train_acc: Vec<f64>,
    pub elapsed_secs: f64,
    pub lr_source: LrSource,
    pub channels: usize,
}

impl ProbeRun {
    /// Same metrics, ignoring wall-clock time.
    pub fn same_result(&self, other: &ProbeRun) -> bool {
        self.config == other.config
            && self.model == other.model
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.val_acc.to_bits() == other.val_acc.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
            && self.best_epoch == other.best_epoch
            && self
                .loss_curve
                .iter()
                .map(|v| v.to_bits())
                .eq(other.loss_curve.iter().map(|v| v.to_bits()))
    }
}

pub fn evaluate(run: &ProbeRun, features: &FeatureSet, split: Split) -> Result<f64, ProbeError> {
    let s = features.split(split);
    if s.is_empty() {
        return Err(ProbeError::EmptySplit(split));
    }
    let preds = predict(&run.model, s, features.channels)?;
    Ok(accuracy(&preds, &s.labels))
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed, PROBE_STREAM)
        .fork(2)
        .fork(epoch as u64)
        .generator();
    idx.shuffle(&mut rng);
    idx
}

/// Trains a probe and keeps the parameters of the epoch with the best
/// validation accuracy (earliest on ties).
pub fn train_probe(cfg: &ProbeConfig, features: &FeatureSet) -> Result<ProbeRun, ProbeError> {
    cfg.validate()?;
    if cfg.encoding != features.mode {
        return Err(ProbeError::EncodingMismatch {
            expected: cfg.encoding,
            found: features.mode,
        });
    }
    for s in Split::ALL {
        if features.split(s).is_empty() {
            return Err(ProbeError::EmptySplit(s));
        }
    }
    let start = Instant::now();
    let c = features.channels;
    let mut model = ProbeModel::new(cfg, features.dim, features.classes)?;
    let mut params = model.params();
    let mut opt = AdamW::<f64>::new(&params.iter().map(Tensor::len).collect::<Vec<_>>());
    let train = &features.train;

    let mut best: Option<(f64, usize, Vec<Tensor<f64>>)> = None;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut running_acc = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, Vec<Tensor<f64>>, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| model.sample_grad(&train.x[i], train.labels[i], c))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor<f64>> =
                params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (k, (loss, g, logits)) in per_sample.iter().enumerate() {
                loss_sum += loss;
                if argmax(logits) == train.labels[batch[k]] {
                    hits += 1;
                }
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b * scale;
                    }
                }
            }
            opt.step(&mut params, &grads, cfg.lr, cfg.weight_decay)?;
            model.set_params(params.clone())?;
        }
        loss_curve.push(loss_sum / train.len() as f64);
        let val_preds = predict(&model, &features.val, c)?;
        let val_acc = accuracy(&val_preds, &features.val.labels);
        running_acc.push(hits as f64 / train.len() as f64);
        if best.as_ref().is_none_or(|b| val_acc > b.0) {
            best = Some((val_acc, epoch + 1, params.clone()));
        }
    }

    let (val_acc, best_epoch) = match best {
        Some((v, e, p)) => {
            model.set_params(p)?;
            (v, e)
        }
        None => (
            accuracy(&predict(&model, &features.val, c)?, &features.val.labels),
            0,
        ),
    };
    let train_acc = accuracy(&predict(&model, train, c)?, &train.labels);
    let test_acc = accuracy(&predict(&model, &features.test, c)?, &features.test.labels);
    Ok(ProbeRun {
        config: cfg.clone(),
        model,
        train_acc,
        val_acc,
        test_acc,
        best_epoch,
        loss_curve,
        running_train_acc: running_acc,
        elapsed_secs: start.elapsed().as_secs_f64(),
        lr_source: LrSource::Fixed,
        channels: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub coarse_draws: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub seed: u64,
    /// Upper bound on refinement moves.
    pub max_fine_steps: usize,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            coarse_draws: COARSE_DRAWS,
            lr_min: LR_MIN,
            lr_max: LR_MAX,
            seed: SEARCH_SEED,
            max_fine_steps: 20,
        }
    }
}

/// Learning rates of the coarse stage: log-uniform draws from a stream keyed
/// by `spec.seed`.
pub fn coarse_grid(spec: &SearchSpec) -> Vec<f64> {
    let mut rng = RngStream::new(spec.seed, SEARCH_STREAM).generator();
    (0..spec.coarse_draws)
        .map(|_| log_uniform(&mut rng, spec.lr_min, spec.lr_max))
        .collect()
}

/// `lr -/+ 10^p`, `p` the decade of `lr`, kept inside `[lr_min, lr_max]`.
pub fn fine_neighbors(lr: f64, spec: &SearchSpec) -> Vec<f64> {
    let step = 10f64.powf(lr.log10().floor());
    [lr - step, lr + step]
        .into_iter()
        .map(round_lr)
        .filter(|&v| v >= spec.lr_min * (1.0 - 1e-9) && v <= spec.lr_max * (1.0 + 1e-9))
        .collect()
}

/// Rounds to 12 significant digits so repeated steps land on the same grid.
fn round_lr(v: f64) -> f64 {
    if v <= 0.0 {
        return v;
    }
    let mag = 10f64.powi(11 - v.log10().floor() as i32);
    (v * mag).round() / mag
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub lr: f64,
    pub stage: LrSource,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct LrSearchResult {
    pub chosen_lr: f64,
    pub source: LrSource,
    pub trials: Vec<Trial>,
    /// The run at the chosen LR under the search seed.
    pub best_run: ProbeRun,
}

/// Coarse log-uniform search followed by neighbor refinement, every run
/// under `spec.seed`. Ties keep the earlier incumbent.
pub fn lr_search(
    template: &ProbeConfig,
    features: &FeatureSet,
    spec: &SearchSpec,
) -> Result<LrSearchResult, ProbeError> {
    if features.val.is_empty() {
        return Err(ProbeError::EmptySplit(Split::Val));
    }
    let run_at = |lr: f64| {
        let cfg = ProbeConfig {
            lr,
            seed: spec.seed,
            ..template.clone()
        };
        train_probe(&cfg, features)
    };
    let mut cache: BTreeMap<u64, ProbeRun> = BTreeMap::new();
    let mut trials = Vec::new();

    let coarse = coarse_grid(spec);
    let coarse_runs: Vec<ProbeRun> = coarse
        .par_iter()
        .map(|&lr| run_at(lr))
        .collect::<Result<_, _>>()?;
    let mut incumbent: Option<(f64, f64, LrSource)> = None;
    for (lr, mut run) in coarse.iter().copied().zip(coarse_runs) {
        run.lr_source = LrSource::Coarse;
        trials.push(Trial {
            lr,
            stage: LrSource::Coarse,
            val_acc: run.val_acc,
            test_acc: run.test_acc,
        });
        if incumbent.is_none_or(|(_, v, _)| run.val_acc > v) {
            incumbent = Some((lr, run.val_acc, LrSource::Coarse));
        }
        cache.insert(lr.to_bits(), run);
    }
    let (mut lr, mut val, mut source) =
        incumbent.ok_or_else(|| ProbeError::InvalidConfig("no coarse draws".into()))?;

    for _ in 0..spec.max_fine_steps {
        let todo: Vec<f64> = fine_neighbors(lr, spec)
            .into_iter()
            .filter(|v| !cache.contains_key(&v.to_bits()))
            .collect();
        let runs: Vec<ProbeRun> = todo
            .par_iter()
            .map(|&v| run_at(v))
            .collect::<Result<_, _>>()?;
        for (v, mut run) in todo.into_iter().zip(runs) {
            run.lr_source = LrSource::Fine;
            trials.push(Trial {
                lr: v,
                stage: LrSource::Fine,
                val_acc: run.val_acc,
                test_acc: run.test_acc,
            });
            cache.insert(v.to_bits(), run);
        }
        let mut moved = false;
        for v in fine_neighbors(lr, spec) {
            let acc = cache[&v.to_bits()].val_acc;
            if acc > val {
                lr = v;
                val = acc;
                source = LrSource::Fine;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let mut best_run = cache.remove(&lr.to_bits()).expect("incumbent was trained");
    best_run.lr_source = source;
    Ok(LrSearchResult {
        chosen_lr: lr,
        source,
        trials,
        best_run,
    })
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub encoding: EncodingMode,
    pub strategy: Strategy,
    pub arch: PoolerArch,
    pub seed: u64,
    pub lr: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

pub const RESULTS_HEADER: [&str; 8] = [
    "dataset", "encoding", "strategy", "arch", "seed", "lr", "val_acc", "test_acc",
];

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory writer");
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.encoding.to_string(),
            r.strategy.to_string(),
            r.arch.to_string(),
            r.seed.to_string(),
            format!("{:e}", r.lr),
            format!("{:.6}", r.val_acc),
            format!("{:.6}", r.test_acc),
        ])
        .expect("in-memory writer");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_string)
        .collect();
    if header != RESULTS_HEADER {
        return Err(format!("unexpected results header {header:?}"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| {
            field(i)
                .parse::<f64>()
                .map_err(|e| format!("{}: {e}", RESULTS_HEADER[i]))
        };
        rows.push(ResultRow {
            dataset: field(0),
            encoding: field(1).parse().map_err(|e: String| e)?,
            strategy: field(2).parse()?,
            arch: field(3).parse().map_err(|e: PoolingError| e.to_string())?,
            seed: field(4).parse().map_err(|e| format!("seed: {e}"))?,
            lr: num(5)?,
            val_acc: num(6)?,
            test_acc: num(7)?,
        });
    }
    Ok(rows)
}

/// Mean and spread of one cell over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub dataset: String,
    pub encoding: EncodingMode,
    pub strategy: Strategy,
    pub arch: PoolerArch,
    pub n_seeds: usize,
    pub mean_test: f64,
    pub std_test: f64,
    /// This cell minus the joint-encoding, joint-pooling cell of the same
    /// architecture; only set on independent-encoding, decoupled-pooling
    /// cells.
    pub delta_cap: Option<f64>,
    pub absent: bool,
}

type CellKey = (String, EncodingMode, Strategy, PoolerArch);

/// Summaries for every expected cell, in the order given; cells with no
/// rows are reported as absent.
pub fn summarize(rows: &[ResultRow], expected: &[CellKey]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.dataset.clone(), r.encoding, r.strategy, r.arch))
            .or_default()
            .push(r.test_acc);
    }
    let stats = |k: &CellKey| groups.get(k).map(|v| (mean(v), std_dev(v), v.len()));
    expected
        .iter()
        .map(|k| {
            let (dataset, encoding, strategy, arch) = k.clone();
            let s = stats(k);
            let delta_cap = if (encoding, strategy) == (EncodingMode::Ife, Strategy::Dcp) {
                let base = (dataset.clone(), EncodingMode::Jfe, Strategy::Jap, arch);
                match (s, stats(&base)) {
                    (Some((m, _, _)), Some((b, _, _))) => Some(m - b),
                    _ => None,
                }
            } else {
                None
            };
            CellSummary {
                dataset,
                encoding,
                strategy,
                arch,
                n_seeds: s.map_or(0, |x| x.2),
                mean_test: s.map_or(f64::NAN, |x| x.0),
                std_test: s.map_or(f64::NAN, |x| x.1),
                delta_cap,
                absent: s.is_none(),
            }
        })
        .collect()
}

pub fn summary_csv(cells: &[CellSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "encoding",
        "strategy",
        "arch",
        "n_seeds",
        "mean_test_acc",
        "std_test_acc",
        "delta_cap",
        "status",
    ])
    .expect("in-memory writer");
    for c in cells {
        let num = |v: f64| {
            if v.is_nan() {
                String::new()
            } else {
                format!("{v:.6}")
            }
        };
        w.write_record([
            c.dataset.clone(),
            c.encoding.to_string(),
            c.strategy.to_string(),
            c.arch.to_string(),
            c.n_seeds.to_string(),
            num(c.mean_test),
            num(c.std_test),
            c.delta_cap.map(num).unwrap_or_default(),
            if c.absent {
                "absent".into()
            } else {
                "ok".into()
            },
        ])
        .expect("in-memory writer");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

/// The evaluation grid for one dataset.
#[derive(Debug, Clone)]
pub struct MatrixSpec {
    pub dataset: String,
    pub strategies: Vec<Strategy>,
    pub archs: Vec<PoolerArch>,
    pub seeds: Vec<u64>,
    pub template: ProbeConfig,
    /// Search the learning rate per cell; otherwise use `template.lr`.
    pub search: Option<SearchSpec>,
}

/// Runs every `(encoding, strategy, arch, seed)` cell over the given
/// feature sets (one per encoding). Rows come back in grid order whatever
/// the thread count.
pub fn run_matrix(
    spec: &MatrixSpec,
    feature_sets: &[&FeatureSet],
) -> Result<Vec<ResultRow>, ProbeError> {
    let mut cells = Vec::new();
    for fs in feature_sets {
        for &strategy in &spec.strategies {
            for &arch in &spec.archs {
                cells.push((*fs, strategy, arch));
            }
        }
    }
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(fs, strategy, arch)| {
            let template = ProbeConfig {
                encoding: fs.mode,
                strategy,
                arch,
                ..spec.template.clone()
            };
            let (lr, reuse) = match &spec.search {
                Some(s) => {
                    let res = lr_search(&template, fs, s)?;
                    (res.chosen_lr, Some((s.seed, res.best_run)))
                }
                None => (template.lr, None),
            };
            spec.seeds
                .iter()
                .map(|&seed| {
                    let run = match &reuse {
                        Some((s, run)) if *s == seed => run.clone(),
                        _ => train_probe(
                            &ProbeConfig {
                                lr,
                                seed,
                                ..template.clone()
                            },
                            fs,
                        )?,
                    };
                    Ok(ResultRow {
                        dataset: spec.dataset.clone(),
                        encoding: fs.mode,
                        strategy,
                        arch,
                        seed,
                        lr,
                        val_acc: run.val_acc,
                        test_acc: run.test_acc,
                    })
                })
                .collect::<Result<Vec<_>, ProbeError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(mode: EncodingMode, n_per_split: usize) -> FeatureSet {
        // Two classes separated along the first feature axis.
        let make = |offset: usize| {
            let mut s = SplitFeatures::default();
            for i in 0..n_per_split {
                let label = (i + offset) % 2;
                let sign = if label == 0 { -1.0f32 } else { 1.0 };
                let data: Vec<f32> = (0..2 * 3 * 4)
                    .map(|k| {
                        if k % 4 == 0 {
                            sign * 2.0
                        } else {
                            ((k * 7 + i) % 5) as f32 * 0.1
                        }
                    })
                    .collect();
                s.x.push(Tensor::matrix(6, 4, data).unwrap());
                s.labels.push(label);
            }
            s
        };
        FeatureSet {
            mode,
            channels: 2,
            tokens: 3,
            dim: 4,
            classes: 2,
            train: make(0),
            val: make(1),
            test: make(0),
        }
    }

    fn cfg(arch: PoolerArch) -> ProbeConfig {
        ProbeConfig {
            encoding: EncodingMode::Ife,
            strategy: Strategy::Dcp,
            arch,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 15,
            seed: 1,
            hyper: PoolerHyper {
                heads: 2,
                prototypes: 3,
                queries: 2,
            },
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        let fs = toy(EncodingMode::Ife, 40);
        for arch in [PoolerArch::Mean, PoolerArch::AbMilp, PoolerArch::Mhca] {
            let run = train_probe(&cfg(arch), &fs).unwrap();
            assert!(run.train_acc >= 0.99, "{arch}: {}", run.train_acc);
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let fs = toy(EncodingMode::Ife, 16);
        let c = ProbeConfig {
            lr: 0.0,
            epochs: 3,
            ..cfg(PoolerArch::SimPool)
        };
        let run = train_probe(&c, &fs).unwrap();
        assert_eq!(run.model, ProbeModel::new(&c, 4, 2).unwrap());
    }

    #[test]
    fn deterministic_runs() {
        let fs = toy(EncodingMode::Ife, 16);
        let a = train_probe(&cfg(PoolerArch::Ep), &fs).unwrap();
        let b = train_probe(&cfg(PoolerArch::Ep), &fs).unwrap();
        assert!(a.same_result(&b));
    }

    #[test]
    fn encoding_mismatch_rejected() {
        let fs = toy(EncodingMode::Jfe, 4);
        assert!(matches!(
            train_probe(&cfg(PoolerArch::Mean), &fs),
            Err(ProbeError::EncodingMismatch { .. })
        ));
    }

    #[test]
    fn empty_split_rejected() {
        let mut fs = toy(EncodingMode::Ife, 4);
        let run = train_probe(
            &ProbeConfig {
                epochs: 1,
                ..cfg(PoolerArch::Mean)
            },
            &fs,
        )
        .unwrap();
        fs.val = SplitFeatures::default();
        assert_eq!(
            evaluate(&run, &fs, Split::Val),
            Err(ProbeError::EmptySplit(Split::Val))
        );
        assert!(matches!(
            lr_search(&cfg(PoolerArch::Mean), &fs, &SearchSpec::default()),
            Err(ProbeError::EmptySplit(Split::Val))
        ));
    }

    #[test]
    fn evaluate_matches_per_sample_recount() {
        let fs = toy(EncodingMode::Ife, 20);
        let run = train_probe(
            &ProbeConfig {
                epochs: 2,
                ..cfg(PoolerArch::ProtoBin)
            },
            &fs,
        )
        .unwrap();
        let mut hits = 0;
        for (x, &l) in fs.test.x.iter().zip(&fs.test.labels) {
            let logits = run.model.logits(x, 2).unwrap();
            let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            hits += usize::from(best == l);
        }
        assert_eq!(
            evaluate(&run, &fs, Split::Test).unwrap(),
            hits as f64 / 20.0
        );
    }

    #[test]
    fn coarse_grid_in_range() {
        let g = coarse_grid(&SearchSpec::default());
        assert_eq!(g.len(), 10);
        assert!(g.iter().all(|&v| (LR_MIN..=LR_MAX).contains(&v)));
        assert_eq!(g, coarse_grid(&SearchSpec::default()));
    }

    #[test]
    fn fine_neighbors_use_incumbent_decade() {
        let s = SearchSpec::default();
        assert_eq!(fine_neighbors(3e-4, &s), vec![2e-4, 4e-4]);
        assert_eq!(fine_neighbors(1e-5, &s), vec![2e-5]);
        assert_eq!(fine_neighbors(9.5e-3, &s), vec![8.5e-3]);
    }

    #[test]
    fn summary_marks_absent_and_delta() {
        let row = |enc, strat, seed, acc| ResultRow {
            dataset: "d".into(),
            encoding: enc,
            strategy: strat,
            arch: PoolerArch::Mhca,
            seed,
            lr: 1e-3,
            val_acc: acc,
            test_acc: acc,
        };
        let rows = vec![
            row(EncodingMode::Jfe, Strategy::Jap, 1, 0.5),
            row(EncodingMode::Jfe, Strategy::Jap, 2, 0.7),
            row(EncodingMode::Ife, Strategy::Dcp, 1, 0.9),
        ];
        let keys = vec![
            (
                "d".to_string(),
                EncodingMode::Jfe,
                Strategy::Jap,
                PoolerArch::Mhca,
            ),
            (
                "d".to_string(),
                EncodingMode::Ife,
                Strategy::Dcp,
                PoolerArch::Mhca,
            ),
            (
                "d".to_string(),
                EncodingMode::Ife,
                Strategy::Jap,
                PoolerArch::Mhca,
            ),
        ];
        let s = summarize(&rows, &keys);
        assert!((s[0].mean_test - 0.6).abs() < 1e-12);
        assert!((s[0].std_test - 0.1).abs() < 1e-12);
        assert!((s[1].delta_cap.unwrap() - 0.3).abs() < 1e-12);
        assert!(s[2].absent);
        assert!(summary_csv(&s).contains("absent"));
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ResultRow {
            dataset: "toy".into(),
            encoding: EncodingMode::Ife,
            strategy: Strategy::Dcp,
            arch: PoolerArch::AbMilp,
            seed: 42,
            lr: 2.5e-4,
            val_acc: 0.5,
            test_acc: 0.25,
        }];
        let text = results_csv(&rows);
        assert!(text.starts_with("dataset,encoding,strategy,arch,seed,lr,val_acc,test_acc\n"));
        let p = dir.path().join("results.csv");
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_results(&p).unwrap(), rows);
    }
}
