//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. The
//! end-to-end check (9) is soft: a miss prints FLAG and does not fail the
//! run. Everything else exits nonzero on failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use chanprobe::analysis::flops::{encoder_flops_at, pooler_params, pooler_relative_overhead};
use chanprobe::analysis::{pooler_flops, spearman, DiversityReport, TokenSource};
use chanprobe::encoder::{encode, extract_features, init_encoder, EncoderConfig, EncodingMode};
use chanprobe::numerics::gradcheck::{central_difference, relative_error};
use chanprobe::numerics::Tensor;
use chanprobe::pooling::{
    dcp_forward, jap_forward, Pooler, PoolerArch, PoolerHyper, PoolingWrapper, Strategy,
};
use chanprobe::probe::{
    coarse_grid, lr_search, train_probe, FeatureSet, ProbeConfig, ProbeModel, SearchSpec,
    SplitFeatures, LR_MAX, LR_MIN, SEARCH_SEED,
};
use chanprobe::store::{
    read_features, write_features, FeatureFileHeader, FeatureReader, StoreError, HEADER_SIZE,
};
use chanprobe::synthdata::{generate_dataset, generate_split, GeneratorConfig, Split};
use rand::Rng;

use common::*;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_param_parity() -> Check {
    let hp = PoolerHyper::default();
    for d in [8, 64, 384] {
        for arch in PoolerArch::ALL {
            let jap = PoolingWrapper::new(
                Strategy::Jap,
                Pooler::<f64>::new(arch, d, 1, hp).map_err(|e| e.to_string())?,
            );
            let dcp = PoolingWrapper::new(
                Strategy::Dcp,
                Pooler::<f64>::new(arch, d, 1, hp).map_err(|e| e.to_string())?,
            );
            ensure(
                jap.param_count() == dcp.param_count(),
                format!(
                    "{arch} D={d}: jap {} vs dcp {}",
                    jap.param_count(),
                    dcp.param_count()
                ),
            )?;
            ensure(
                jap.param_count() as u64 == pooler_params(arch, d, &hp),
                format!(
                    "{arch} D={d}: instantiated {} vs formula {}",
                    jap.param_count(),
                    pooler_params(arch, d, &hp)
                ),
            )?;
            let probe = |strategy| {
                let cfg = ProbeConfig {
                    arch,
                    strategy,
                    ..ProbeConfig::default()
                };
                ProbeModel::new(&cfg, d, 4).map(|m| m.param_count())
            };
            ensure(
                probe(Strategy::Jap).map_err(|e| e.to_string())?
                    == probe(Strategy::Dcp).map_err(|e| e.to_string())?,
                format!("{arch} D={d}: probe parameter counts differ"),
            )?;
        }
    }
    Ok(format!(
        "{} archs x D in {{8, 64, 384}}: DCP == JAP",
        PoolerArch::ALL.len()
    ))
}

fn c2_flop_parity() -> Check {
    let (c, n, d) = (8, 196, 384);
    let mut worst = (0.0f64, PoolerArch::Mean);
    for arch in PoolerArch::ALL {
        let rel = pooler_relative_overhead(arch, c, n, d);
        if rel > worst.0 {
            worst = (rel, arch);
        }
        ensure(
            rel <= 0.02,
            format!("{arch}: relative difference {rel:.5} > 0.02"),
        )?;
    }
    let jap = pooler_flops(PoolerArch::Mean, Strategy::Jap, c, n, d).flops;
    let dcp = pooler_flops(PoolerArch::Mean, Strategy::Dcp, c, n, d).flops;
    // DCP / JAP == 1 + 1/N, compared in integers.
    ensure(
        dcp * n as u64 == jap * (n as u64 + 1),
        format!("mean: dcp {dcp} jap {jap} not in ratio 1 + 1/{n}"),
    )?;
    Ok(format!(
        "max |DCP-JAP|/JAP = {:.4}% ({}); mean ratio = 1 + 1/{n} exactly",
        100.0 * worst.0,
        worst.1
    ))
}

fn c3_encoder_scaling() -> Check {
    let cfg = EncoderConfig {
        embed_dim: 384,
        depth: 12,
        heads: 6,
        ..EncoderConfig::default()
    };
    let n = 196;
    let mut parts = Vec::new();
    for c in [2usize, 4, 8, 16] {
        let j = encoder_flops_at(&cfg, c, n, EncodingMode::Jfe).attention_flops as f64;
        let i = encoder_flops_at(&cfg, c, n, EncodingMode::Ife).attention_flops as f64;
        let ratio = j / i;
        let rel = (ratio - c as f64).abs() / c as f64;
        ensure(
            rel <= 0.01,
            format!("C={c}: ratio {ratio:.4} off by {:.3}%", 100.0 * rel),
        )?;
        parts.push(format!("C={c}: {ratio:.3}"));
    }
    Ok(parts.join(", "))
}

fn c4_single_channel() -> Check {
    let mut rng = rng(4);
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let w = init_encoder::<f64>(&tiny_encoder(k)).map_err(|e| e.to_string())?;
        let img = random_image(1, 8, &mut rng);
        let j = encode(&img, &w, EncodingMode::Jfe).map_err(|e| e.to_string())?;
        let i = encode(&img, &w, EncodingMode::Ife).map_err(|e| e.to_string())?;
        worst = worst
            .max(j.patch.max_abs_diff(&i.patch))
            .max(j.cls.max_abs_diff(&i.cls));
    }
    ensure(worst <= 1e-9, format!("max |JFE - IFE| = {worst:e}"))?;
    Ok(format!("100 inputs, max |JFE - IFE| = {worst:e}"))
}

fn c5_mean_oracle() -> Check {
    let mut rng = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (c, n, d) = (
            rng.random_range(1..=6),
            rng.random_range(1..=12),
            rng.random_range(1..=8),
        );
        let x = random_tensor(&[c, n, d], 3.0, &mut rng);
        let pooler = Pooler::<f64>::new(PoolerArch::Mean, d, 0, PoolerHyper::default())
            .map_err(|e| e.to_string())?;
        let j = jap_forward(&pooler, &x).map_err(|e| e.to_string())?;
        let p = dcp_forward(&pooler, &x).map_err(|e| e.to_string())?;
        worst = worst.max(j.max_abs_diff(&p));
    }
    ensure(worst <= 1e-12, format!("max |DCP - JAP| = {worst:e}"))?;
    Ok(format!("1000 inputs, max |DCP - JAP| = {worst:e}"))
}

/// Cross-entropy recomputed outside the tape.
fn plain_loss(
    model: &ProbeModel,
    params: &[Tensor<f64>],
    x: &Tensor<f32>,
    label: usize,
    channels: usize,
) -> f64 {
    let mut m = model.clone();
    m.set_params(params.to_vec()).expect("same shapes");
    let logits = m.logits(x, channels).expect("forward");
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn c6_gradients() -> Check {
    let mut rng = rng(6);
    let (c, n, d, k) = (3, 4, 8, 3);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for arch in PoolerArch::ALL {
        for strategy in [Strategy::Jap, Strategy::Dcp] {
            let cfg = ProbeConfig {
                arch,
                strategy,
                seed: rng.random(),
                ..ProbeConfig::default()
            };
            let model = ProbeModel::new(&cfg, d, k).map_err(|e| e.to_string())?;
            let x = random_tensor(&[c * n, d], 1.5, &mut rng).cast::<f32>();
            let label = rng.random_range(0..k);
            let (_, grads, _) = model.sample_grad(&x, label, c).map_err(|e| e.to_string())?;
            let params = model.params();
            let total: usize = params.iter().map(Tensor::len).sum();
            for _ in 0..20 {
                let mut flat = rng.random_range(0..total);
                let mut t = 0;
                while flat >= params[t].len() {
                    flat -= params[t].len();
                    t += 1;
                }
                let numeric = central_difference(
                    |p| plain_loss(&model, p, &x, label, c),
                    &params,
                    t,
                    flat,
                    1e-3,
                );
                let analytic = grads[t].data()[flat];
                let err = relative_error(analytic, numeric);
                if err > worst.0 {
                    worst = (
                        err,
                        format!(
                            "{arch}/{strategy} tensor {t}[{flat}]: {analytic:e} vs {numeric:e}"
                        ),
                    );
                }
                checked += 1;
            }
        }
    }
    ensure(
        worst.0 <= 1e-4,
        format!("relative error {:e} at {}", worst.0, worst.1),
    )?;
    Ok(format!(
        "{checked} coordinates over 7 archs x 2 strategies, max rel err {:.2e} ({})",
        worst.0, worst.1
    ))
}

fn c7_invariance() -> Check {
    let mut rng = rng(7);
    let hp = PoolerHyper::default();
    let w = init_encoder::<f64>(&tiny_encoder(11)).map_err(|e| e.to_string())?;
    let d = w.config.embed_dim;
    let mut worst_channel = 0.0f64;
    let mut worst_row = 0.0f64;
    for trial in 0..5u64 {
        let img = random_image(4, 8, &mut rng);
        let order = shuffled(4, &mut rng);
        let a = encode(&img, &w, EncodingMode::Ife).map_err(|e| e.to_string())?;
        let b = encode(&permute_channels(&img, &order), &w, EncodingMode::Ife)
            .map_err(|e| e.to_string())?;
        for arch in PoolerArch::ALL {
            let pooler = Pooler::<f64>::new(arch, d, trial, hp).map_err(|e| e.to_string())?;
            let za = dcp_forward(&pooler, &a.patch).map_err(|e| e.to_string())?;
            let zb = dcp_forward(&pooler, &b.patch).map_err(|e| e.to_string())?;
            worst_channel = worst_channel.max(za.max_abs_diff(&zb));

            let m = rng.random_range(1..=9);
            let x = random_tensor(&[m, d], 2.0, &mut rng);
            let px = permute_rows(&x, &shuffled(m, &mut rng));
            let diff = pooler
                .pool(&x)
                .map_err(|e| e.to_string())?
                .max_abs_diff(&pooler.pool(&px).map_err(|e| e.to_string())?);
            worst_row = worst_row.max(diff);
        }
    }
    ensure(
        worst_channel < 1e-9,
        format!("IFE+DCP channel permutation changed output by {worst_channel:e}"),
    )?;
    ensure(
        worst_row < 1e-9,
        format!("row permutation changed pooler output by {worst_row:e}"),
    )?;

    // Independence: editing one channel leaves every other channel's features
    // bitwise unchanged, and each channel matches a solo encoding of itself.
    let img = random_image(4, 8, &mut rng);
    let base = encode(&img, &w, EncodingMode::Ife).map_err(|e| e.to_string())?;
    let mut edited = img.clone();
    for v in edited.channel_mut(2) {
        *v = 1.0 - *v;
    }
    let other = encode(&edited, &w, EncodingMode::Ife).map_err(|e| e.to_string())?;
    for c in 0..4 {
        let same = base.channel(c).data() == other.channel(c).data()
            && base.cls.row_slice(c) == other.cls.row_slice(c);
        ensure(
            same == (c != 2),
            format!("channel {c}: unexpected dependence on channel 2"),
        )?;
        let solo = permute_channels(&img, &[c]);
        let mut solo = solo;
        solo.channels = 1;
        let s = encode(&solo, &w, EncodingMode::Ife).map_err(|e| e.to_string())?;
        ensure(
            s.patch.data() == base.channel(c).data() && s.cls.data() == base.cls.row_slice(c),
            format!("channel {c}: solo encoding differs"),
        )?;
    }
    Ok(format!(
        "channel perm {worst_channel:e}, row perm {worst_row:e}, independence bitwise"
    ))
}

fn c8_diversity() -> Check {
    let enc = EncoderConfig::small();
    let w = init_encoder::<f64>(&enc).map_err(|e| e.to_string())?;
    let rhos = [0.0, 0.25, 0.5, 0.75, 1.0];
    let filters = [0.0, 0.75];
    // curves[mode][filter][rho]
    let mut curves = vec![vec![Vec::new(); filters.len()]; 2];
    for &rho in &rhos {
        let cfg = GeneratorConfig {
            redundancy: rho,
            n_train: 1000,
            n_val: 0,
            n_test: 0,
            ..GeneratorConfig::default()
        };
        let images = generate_split(&cfg, Split::Train).map_err(|e| e.to_string())?;
        for (mi, mode) in [EncodingMode::Ife, EncodingMode::Jfe]
            .into_iter()
            .enumerate()
        {
            let maps = extract_features(&images, &w, mode).map_err(|e| e.to_string())?;
            for (fi, &f) in filters.iter().enumerate() {
                let r = DiversityReport::compute("synthetic", &maps, TokenSource::Patch, f)
                    .map_err(|e| e.to_string())?;
                ensure(r.n_instances() == 1000, "expected 1000 instances")?;
                curves[mi][fi].push(r.mean_similarity());
            }
        }
    }
    let mut notes = Vec::new();
    for (fi, f) in filters.iter().enumerate() {
        let (ife, jfe) = (&curves[0][fi], &curves[1][fi]);
        ensure(
            ife[0] < jfe[0],
            format!(
                "filter {f}: rho=0 IFE {:.4} not below JFE {:.4}",
                ife[0], jfe[0]
            ),
        )?;
        ensure(
            ife[4] > 0.95 && jfe[4] > 0.95,
            format!("filter {f}: rho=1 IFE {:.4} JFE {:.4}", ife[4], jfe[4]),
        )?;
        for (name, curve) in [("IFE", ife), ("JFE", jfe)] {
            let s = spearman(&rhos, curve).unwrap_or(f64::NAN);
            ensure(
                s >= 0.9,
                format!("filter {f} {name}: Spearman {s:.3} over {curve:.4?}"),
            )?;
        }
        notes.push(format!(
            "filter {f}: rho=0 IFE {:.4} < JFE {:.4}, rho=1 {:.4}/{:.4}",
            ife[0], jfe[0], ife[4], jfe[4]
        ));
    }
    Ok(notes.join("; ") + "; monotone in rho")
}

fn c9_end_to_end() -> Check {
    let data = generate_dataset(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let w = init_encoder::<f64>(&EncoderConfig::small()).map_err(|e| e.to_string())?;
    let mut means = Vec::new();
    for (mode, strategy) in [
        (EncodingMode::Ife, Strategy::Dcp),
        (EncodingMode::Jfe, Strategy::Jap),
    ] {
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        for s in Split::ALL {
            let imgs = data.split(s);
            maps.push(extract_features(imgs, &w, mode).map_err(|e| e.to_string())?);
            labels.push(imgs.iter().map(|i| i.label).collect::<Vec<_>>());
        }
        let fs = FeatureSet::from_maps(
            [
                (&maps[0], &labels[0]),
                (&maps[1], &labels[1]),
                (&maps[2], &labels[2]),
            ],
            Some(data.config.classes),
        )
        .map_err(|e| e.to_string())?;
        drop(maps);
        let mut acc = Vec::new();
        for seed in [42, 43, 44] {
            let cfg = ProbeConfig {
                encoding: mode,
                strategy,
                arch: PoolerArch::Mhca,
                seed,
                ..ProbeConfig::default()
            };
            acc.push(train_probe(&cfg, &fs).map_err(|e| e.to_string())?.test_acc);
        }
        means.push(acc.iter().sum::<f64>() / acc.len() as f64);
    }
    let margin = 100.0 * (means[0] - means[1]);
    let msg = format!(
        "IFE+DCP {:.2}% vs JFE+JAP {:.2}% (margin {margin:+.2} points, need >= +5)",
        100.0 * means[0],
        100.0 * means[1]
    );
    ensure(margin >= 5.0, msg.clone())?;
    Ok(msg)
}

fn noise_features(seed: u64) -> FeatureSet {
    let mut rng = rng(seed);
    let (c, n, d) = (2, 3, 4);
    let mut split = |len: usize| SplitFeatures {
        x: (0..len)
            .map(|_| random_tensor(&[c * n, d], 1.0, &mut rng).cast::<f32>())
            .collect(),
        labels: (0..len).map(|i| i % 2).collect(),
    };
    FeatureSet {
        mode: EncodingMode::Ife,
        channels: c,
        tokens: n,
        dim: d,
        classes: 2,
        train: split(24),
        val: split(12),
        test: split(12),
    }
}

fn c10_protocol() -> Check {
    let spec = SearchSpec::default();
    ensure(
        spec.seed == SEARCH_SEED && SEARCH_SEED == 42,
        "search seed is not 42",
    )?;
    let grid = coarse_grid(&spec);
    ensure(grid.len() == 10, format!("{} coarse draws", grid.len()))?;
    ensure(
        grid.iter().all(|&lr| (LR_MIN..=LR_MAX).contains(&lr)) && LR_MIN == 1e-5 && LR_MAX == 1e-2,
        format!("draw outside [1e-5, 1e-2]: {grid:?}"),
    )?;
    ensure(grid == coarse_grid(&spec), "coarse grid not reproducible")?;

    let fs = noise_features(10);
    let template = ProbeConfig {
        arch: PoolerArch::Mean,
        epochs: 3,
        batch_size: 8,
        ..ProbeConfig::default()
    };
    let a = lr_search(&template, &fs, &spec).map_err(|e| e.to_string())?;
    let b = lr_search(&template, &fs, &spec).map_err(|e| e.to_string())?;
    ensure(
        a.chosen_lr.to_bits() == b.chosen_lr.to_bits(),
        "chosen LR differs between identical searches",
    )?;
    ensure(
        a.trials == b.trials,
        "trial sequence differs between identical searches",
    )?;
    let coarse: Vec<f64> = a.trials.iter().take(10).map(|t| t.lr).collect();
    ensure(coarse == grid, "search did not start from the coarse grid")?;
    Ok(format!(
        "10 draws in [{:.2e}, {:.2e}], chosen lr {:e} reproduced over {} trials",
        grid.iter().cloned().fold(f64::INFINITY, f64::min),
        grid.iter().cloned().fold(0.0, f64::max),
        a.chosen_lr,
        a.trials.len()
    ))
}

fn expect_code(path: &std::path::Path, code: &str) -> Result<(), String> {
    match FeatureReader::open(path) {
        Err(e) if e.code() == code => Ok(()),
        Err(e) => Err(format!(
            "{}: expected {code}, got {}",
            path.display(),
            e.code()
        )),
        Ok(_) => Err(format!("{}: expected {code}, file opened", path.display())),
    }
}

fn c11_store() -> Check {
    use chanprobe::encoder::FeatureMap;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = rng(11);
    let (c, n, d) = (3, 4, 5);
    let maps: Vec<(FeatureMap<f64>, usize)> = (0..1000)
        .map(|i| {
            let fm = FeatureMap {
                mode: EncodingMode::Ife,
                channels: c,
                tokens_per_channel: n,
                dim: d,
                patch: random_tensor(&[c, n, d], 10.0, &mut rng),
                cls: random_tensor(&[c, d], 10.0, &mut rng),
            };
            (fm, i % 7)
        })
        .collect();
    let path = dir.path().join("ok.mcif");
    let header = FeatureFileHeader::new(EncodingMode::Ife, c, n, d, 0xfeed);
    let written = write_features(&path, header, maps.iter().map(|(m, l)| (m, *l)))
        .map_err(|e| e.to_string())?;
    ensure(written == 1000, format!("wrote {written} records"))?;
    let (h, back, labels) = read_features(&path).map_err(|e| e.to_string())?;
    ensure(h.sample_count == 1000, "header count")?;
    for (k, ((orig, label), (got, got_label))) in
        maps.iter().zip(back.iter().zip(&labels)).enumerate()
    {
        let bits = |t: &Tensor<f64>| {
            t.data()
                .iter()
                .map(|&v| (v as f32).to_bits())
                .collect::<Vec<_>>()
        };
        let stored = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(
            bits(&orig.patch) == stored(&got.patch)
                && bits(&orig.cls) == stored(&got.cls)
                && label == got_label,
            format!("record {k} differs"),
        )?;
    }
    let mut reader = FeatureReader::open(&path).map_err(|e| e.to_string())?;
    for k in [999u64, 0, 517] {
        let (m, l) = reader.read(k).map_err(|e| e.to_string())?;
        ensure(
            m == back[k as usize] && l == labels[k as usize],
            format!("random access {k} differs"),
        )?;
    }

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let fixture = |name: &str, edit: &dyn Fn(&mut Vec<u8>)| -> Result<std::path::PathBuf, String> {
        let mut b = bytes.clone();
        edit(&mut b);
        let p = dir.path().join(name);
        std::fs::write(&p, b).map_err(|e| e.to_string())?;
        Ok(p)
    };
    let cases: Vec<(&str, &dyn Fn(&mut Vec<u8>), &str)> = vec![
        ("empty", &|b| b.clear(), "bad-magic"),
        ("magic", &|b| b[0] = b'X', "bad-magic"),
        ("version", &|b| b[4] = 2, "version-mismatch"),
        ("mode", &|b| b[8] = 9, "bad-mode"),
        (
            "partial",
            &|b| b[21..25].copy_from_slice(&u32::MAX.to_le_bytes()),
            "partial-file",
        ),
        ("width", &|b| b[25] = 4, "bad-label-width"),
        ("header-cut", &|b| b.truncate(20), "truncated"),
        ("tail-cut", &|b| b.truncate(b.len() - 3), "truncated"),
        ("trailing", &|b| b.push(0), "trailing-bytes"),
    ];
    for (name, edit, code) in &cases {
        expect_code(&fixture(name, *edit)?, code)?;
    }
    match FeatureReader::open(&dir.path().join("tail-cut")) {
        Err(StoreError::Truncated { sample: Some(999) }) => {}
        other => {
            return Err(format!(
                "tail truncation should name sample 999, got {:?}",
                other.err()
            ))
        }
    }
    let mismatch = |mode, hash, code: &str| match FeatureReader::open_expecting(&path, mode, hash) {
        Err(e) if e.code() == code => Ok(()),
        other => Err(format!(
            "expected {code}, got {:?}",
            other.err().map(|e| e.code())
        )),
    };
    mismatch(EncodingMode::Jfe, 0xfeed, "mode-mismatch")?;
    mismatch(EncodingMode::Ife, 0xbeef, "hash-mismatch")?;
    ensure(HEADER_SIZE == 34, "header size")?;
    Ok(format!(
        "1000 records bit-identical; {} corruption fixtures + 2 mismatches give their codes",
        cases.len()
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    soft: bool,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "parameter parity",
            soft: false,
            run: c1_param_parity,
        },
        Criterion {
            id: 2,
            name: "FLOP parity",
            soft: false,
            run: c2_flop_parity,
        },
        Criterion {
            id: 3,
            name: "encoder cost scaling",
            soft: false,
            run: c3_encoder_scaling,
        },
        Criterion {
            id: 4,
            name: "C=1 equivalence",
            soft: false,
            run: c4_single_channel,
        },
        Criterion {
            id: 5,
            name: "mean-pooler oracle",
            soft: false,
            run: c5_mean_oracle,
        },
        Criterion {
            id: 6,
            name: "gradient correctness",
            soft: false,
            run: c6_gradients,
        },
        Criterion {
            id: 7,
            name: "invariance suite",
            soft: false,
            run: c7_invariance,
        },
        Criterion {
            id: 8,
            name: "diversity direction",
            soft: false,
            run: c8_diversity,
        },
        Criterion {
            id: 9,
            name: "end-to-end directional (soft)",
            soft: true,
            run: c9_end_to_end,
        },
        Criterion {
            id: 10,
            name: "protocol reproducibility",
            soft: false,
            run: c10_protocol,
        },
        Criterion {
            id: 11,
            name: "store round-trip",
            soft: false,
            run: c11_store,
        },
    ];
    let only: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    println!("acceptance: {} criteria", criteria.len());
    let mut hard_failures = 0;
    for c in &criteria {
        if !only.is_empty() && !only.contains(&c.id) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) if c.soft => ("FLAG", d.as_str()),
            Err(d) => {
                hard_failures += 1;
                ("FAIL", d.as_str())
            }
        };
        println!("[{tag}] {:>2} {} ({secs:.1}s): {detail}", c.id, c.name);
    }
    if hard_failures > 0 {
        println!("acceptance: {hard_failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
