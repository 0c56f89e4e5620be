//! Binary containers for extracted features (`MCIF`) and generated samples
//! (`MCIS`).
//!
//! Feature file, all integers and floats little-endian:
//!
//! ```text
//! offset size field
//!      0    4 magic "MCIF"
//!      4    4 version (u32) = 1
//!      8    1 mode (u8): 0 = joint, 1 = independent
//!      9    4 C (u32)
//!     13    4 N (u32)
//!     17    4 D (u32)
//!     21    4 sample_count (u32); 0xFFFFFFFF while the file is being written
//!     25    1 label_width (u8) = 2
//!     26    8 encoder config hash (u64)
//!     34      records
//! ```
//!
//! Each record is the cls block (`D` floats under joint encoding, `C * D`
//! under independent), the patch block (`C * N * D` floats, channel-major)
//! and the label as a u16. Floats are IEEE-754 binary32.
//!
//! The sample container uses the same scheme with magic "MCIS", a header of
//! magic, version, C, H, W, sample_count (u32 each) and label_width (u8), and
//! records of `C * H * W` binary32 pixels followed by a u16 label.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncodingMode, FeatureMap};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, GeneratorConfig, MultiChannelImage, Split};

pub const FEATURE_MAGIC: [u8; 4] = *b"MCIF";
pub const SAMPLE_MAGIC: [u8; 4] = *b"MCIS";
pub const VERSION: u32 = 1;
pub const HEADER_SIZE: u64 = 34;
pub const SAMPLE_HEADER_SIZE: u64 = 25;
pub const LABEL_WIDTH: u8 = 2;
/// Sample count stored while a writer is still open or after it aborted.
pub const PARTIAL_MARKER: u32 = u32::MAX;

#[derive(Debug)]
pub enum StoreError {
    Io(std::io::Error),
    BadMagic {
        found: Vec<u8>,
    },
    VersionMismatch {
        found: u32,
    },
    /// The file ends inside record `sample` (or inside the header when
    /// `sample` is `None`).
    Truncated {
        sample: Option<u64>,
    },
    TrailingBytes {
        extra: u64,
    },
    Partial,
    BadMode(u8),
    BadLabelWidth(u8),
    HashMismatch {
        expected: u64,
        found: u64,
    },
    ModeMismatch {
        expected: EncodingMode,
        found: EncodingMode,
    },
    ShapeDrift {
        sample: u64,
        expected: String,
        got: String,
    },
    LabelOverflow(usize),
    IndexOutOfRange {
        index: u64,
        count: u64,
    },
    TooManySamples,
    Manifest(String),
}

impl StoreError {
    /// Stable identifier for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io(_) => "io",
            Self::BadMagic { .. } => "bad-magic",
            Self::VersionMismatch { .. } => "version-mismatch",
            Self::Truncated { .. } => "truncated",
            Self::TrailingBytes { .. } => "trailing-bytes",
            Self::Partial => "partial-file",
            Self::BadMode(_) => "bad-mode",
            Self::BadLabelWidth(_) => "bad-label-width",
            Self::HashMismatch { .. } => "hash-mismatch",
            Self::ModeMismatch { .. } => "mode-mismatch",
            Self::ShapeDrift { .. } => "shape-drift",
            Self::LabelOverflow(_) => "label-overflow",
            Self::IndexOutOfRange { .. } => "index-out-of-range",
            Self::TooManySamples => "too-many-samples",
            Self::Manifest(_) => "bad-manifest",
        }
    }
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "{e}"),
            Self::BadMagic { found } => write!(f, "bad magic bytes {found:?}"),
            Self::VersionMismatch { found } => {
                write!(f, "unsupported format version {found} (expected {VERSION})")
            }
            Self::Truncated { sample: Some(k) } => write!(f, "file truncated inside sample {k}"),
            Self::Truncated { sample: None } => write!(f, "file truncated inside the header"),
            Self::TrailingBytes { extra } => {
                write!(f, "{extra} unexpected bytes after the last record")
            }
            Self::Partial => write!(f, "file was not finalized (partial-file marker set)"),
            Self::BadMode(m) => write!(f, "unknown encoding mode byte {m}"),
            Self::BadLabelWidth(w) => write!(f, "unsupported label width {w}"),
            Self::HashMismatch { expected, found } => write!(
                f,
                "encoder config hash {found:016x} does not match requested {expected:016x}"
            ),
            Self::ModeMismatch { expected, found } => {
                write!(
                    f,
                    "file holds {found} features but {expected} were requested"
                )
            }
            Self::ShapeDrift {
                sample,
                expected,
                got,
            } => {
                write!(
                    f,
                    "sample {sample} has shape {got}, header declares {expected}"
                )
            }
            Self::LabelOverflow(l) => write!(f, "label {l} does not fit in 16 bits"),
            Self::IndexOutOfRange { index, count } => {
                write!(f, "sample index {index} out of range for {count} samples")
            }
            Self::TooManySamples => write!(f, "sample count exceeds the format limit"),
            Self::Manifest(msg) => write!(f, "dataset manifest: {msg}"),
        }
    }
}

impl std::error::Error for StoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn mode_byte(mode: EncodingMode) -> u8 {
    match mode {
        EncodingMode::Jfe => 0,
        EncodingMode::Ife => 1,
    }
}

fn mode_from_byte(b: u8) -> Result<EncodingMode, StoreError> {
    match b {
        0 => Ok(EncodingMode::Jfe),
        1 => Ok(EncodingMode::Ife),
        other => Err(StoreError::BadMode(other)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub mode: EncodingMode,
    pub channels: u32,
    pub tokens: u32,
    pub dim: u32,
    pub sample_count: u32,
    pub label_width: u8,
    pub config_hash: u64,
}

impl FeatureFileHeader {
    pub fn new(
        mode: EncodingMode,
        channels: usize,
        tokens: usize,
        dim: usize,
        config_hash: u64,
    ) -> Self {
        Self {
            mode,
            channels: channels as u32,
            tokens: tokens as u32,
            dim: dim as u32,
            sample_count: 0,
            label_width: LABEL_WIDTH,
            config_hash,
        }
    }

    pub fn cls_floats(&self) -> u64 {
        let rows = match self.mode {
            EncodingMode::Jfe => 1,
            EncodingMode::Ife => u64::from(self.channels),
        };
        rows * u64::from(self.dim)
    }

    pub fn patch_floats(&self) -> u64 {
        u64::from(self.channels) * u64::from(self.tokens) * u64::from(self.dim)
    }

    pub fn record_size(&self) -> u64 {
        4 * (self.cls_floats() + self.patch_floats()) + u64::from(self.label_width)
    }

    pub fn record_offset(&self, index: u64) -> u64 {
        HEADER_SIZE + index * self.record_size()
    }

    pub fn expected_file_size(&self) -> u64 {
        self.record_offset(u64::from(self.sample_count))
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE as usize] {
        let mut b = [0u8; HEADER_SIZE as usize];
        b[0..4].copy_from_slice(&FEATURE_MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8] = mode_byte(self.mode);
        b[9..13].copy_from_slice(&self.channels.to_le_bytes());
        b[13..17].copy_from_slice(&self.tokens.to_le_bytes());
        b[17..21].copy_from_slice(&self.dim.to_le_bytes());
        b[21..25].copy_from_slice(&self.sample_count.to_le_bytes());
        b[25] = self.label_width;
        b[26..34].copy_from_slice(&self.config_hash.to_le_bytes());
        b
    }

    /// Parses and validates a header; a finalized count is required.
    pub fn from_bytes(b: &[u8]) -> Result<Self, StoreError> {
        if b.len() < 4 || b[0..4] != FEATURE_MAGIC {
            return Err(StoreError::BadMagic {
                found: b[..b.len().min(4)].to_vec(),
            });
        }
        if b.len() < 8 {
            return Err(StoreError::Truncated { sample: None });
        }
        let version = u32_at(b, 4);
        if version != VERSION {
            return Err(StoreError::VersionMismatch { found: version });
        }
        if b.len() < HEADER_SIZE as usize {
            return Err(StoreError::Truncated { sample: None });
        }
        let mode = mode_from_byte(b[8])?;
        let sample_count = u32_at(b, 21);
        if sample_count == PARTIAL_MARKER {
            return Err(StoreError::Partial);
        }
        if b[25] != LABEL_WIDTH {
            return Err(StoreError::BadLabelWidth(b[25]));
        }
        Ok(Self {
            mode,
            channels: u32_at(b, 9),
            tokens: u32_at(b, 13),
            dim: u32_at(b, 17),
            sample_count,
            label_width: b[25],
            config_hash: u64::from_le_bytes(b[26..34].try_into().expect("8 bytes")),
        })
    }

    fn shape_string(&self) -> String {
        format!(
            "{} x {} x {} ({})",
            self.channels, self.tokens, self.dim, self.mode
        )
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn put_floats<S: Scalar>(out: &mut Vec<u8>, xs: &[S]) {
    for x in xs {
        out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
    }
}

fn get_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

/// Streaming writer. The header carries the partial-file marker until
/// [`FeatureWriter::finish`] succeeds; a writer that is dropped early or
/// aborts on shape drift leaves a file that readers reject.
pub struct FeatureWriter {
    header: FeatureFileHeader,
    out: BufWriter<File>,
    written: u64,
    path: PathBuf,
}

impl FeatureWriter {
    pub fn create(path: &Path, header: FeatureFileHeader) -> Result<Self, StoreError> {
        let mut h = header;
        h.sample_count = PARTIAL_MARKER;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&h.to_bytes())?;
        Ok(Self {
            header,
            out,
            written: 0,
            path: path.to_path_buf(),
        })
    }

    pub fn header(&self) -> &FeatureFileHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn push<S: Scalar>(
        &mut self,
        features: &FeatureMap<S>,
        label: usize,
    ) -> Result<(), StoreError> {
        let h = &self.header;
        let consistent = features.mode == h.mode
            && features.channels as u64 == u64::from(h.channels)
            && features.tokens_per_channel as u64 == u64::from(h.tokens)
            && features.dim as u64 == u64::from(h.dim)
            && features.cls.len() as u64 == h.cls_floats()
            && features.patch.len() as u64 == h.patch_floats();
        if !consistent {
            let got = format!(
                "{} x {} x {} ({})",
                features.channels, features.tokens_per_channel, features.dim, features.mode
            );
            self.out.flush()?;
            return Err(StoreError::ShapeDrift {
                sample: self.written,
                expected: h.shape_string(),
                got,
            });
        }
        let label = u16::try_from(label).map_err(|_| StoreError::LabelOverflow(label))?;
        if self.written + 1 >= u64::from(PARTIAL_MARKER) {
            return Err(StoreError::TooManySamples);
        }
        let mut rec = Vec::with_capacity(h.record_size() as usize);
        put_floats(&mut rec, features.cls.data());
        put_floats(&mut rec, features.patch.data());
        rec.extend_from_slice(&label.to_le_bytes());
        self.out.write_all(&rec)?;
        self.written += 1;
        Ok(())
    }

    /// Writes the final sample count and returns it.
    pub fn finish(mut self) -> Result<u64, StoreError> {
        self.out.flush()?;
        let mut file = self
            .out
            .into_inner()
            .map_err(|e| StoreError::Io(e.into_error()))?;
        file.seek(SeekFrom::Start(21))?;
        file.write_all(&(self.written as u32).to_le_bytes())?;
        file.sync_all()?;
        Ok(self.written)
    }
}

/// Writes all samples and finalizes the file.
pub fn write_features<'a, S: Scalar + 'a, I>(
    path: &Path,
    header: FeatureFileHeader,
    samples: I,
) -> Result<u64, StoreError>
where
    I: IntoIterator<Item = (&'a FeatureMap<S>, usize)>,
{
    let mut w = FeatureWriter::create(path, header)?;
    for (f, label) in samples {
        w.push(f, label)?;
    }
    w.finish()
}

/// Random-access reader over a finalized feature file.
#[derive(Debug)]
pub struct FeatureReader {
    header: FeatureFileHeader,
    file: BufReader<File>,
}

impl FeatureReader {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut head = vec![0u8; HEADER_SIZE.min(len) as usize];
        file.read_exact(&mut head)?;
        let header = FeatureFileHeader::from_bytes(&head)?;
        let expected = header.expected_file_size();
        if len < expected {
            let sample = (len - HEADER_SIZE) / header.record_size();
            return Err(StoreError::Truncated {
                sample: Some(sample),
            });
        }
        if len > expected {
            return Err(StoreError::TrailingBytes {
                extra: len - expected,
            });
        }
        Ok(Self {
            header,
            file: BufReader::new(file),
        })
    }

    /// Opens and checks the file against the caller's encoder.
    pub fn open_expecting(
        path: &Path,
        mode: EncodingMode,
        config_hash: u64,
    ) -> Result<Self, StoreError> {
        let r = Self::open(path)?;
        if r.header.mode != mode {
            return Err(StoreError::ModeMismatch {
                expected: mode,
                found: r.header.mode,
            });
        }
        if r.header.config_hash != config_hash {
            return Err(StoreError::HashMismatch {
                expected: config_hash,
                found: r.header.config_hash,
            });
        }
        Ok(r)
    }

    pub fn header(&self) -> &FeatureFileHeader {
        &self.header
    }

    pub fn len(&self) -> u64 {
        u64::from(self.header.sample_count)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read(&mut self, index: u64) -> Result<(FeatureMap<f32>, usize), StoreError> {
        if index >= self.len() {
            return Err(StoreError::IndexOutOfRange {
                index,
                count: self.len(),
            });
        }
        let h = self.header;
        self.file.seek(SeekFrom::Start(h.record_offset(index)))?;
        let mut rec = vec![0u8; h.record_size() as usize];
        self.file.read_exact(&mut rec).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => StoreError::Truncated {
                sample: Some(index),
            },
            _ => StoreError::Io(e),
        })?;
        let cls_bytes = 4 * h.cls_floats() as usize;
        let patch_bytes = 4 * h.patch_floats() as usize;
        let (c, n, d) = (h.channels as usize, h.tokens as usize, h.dim as usize);
        let cls_rows = h.cls_floats() as usize / d.max(1);
        let cls =
            Tensor::new(vec![cls_rows, d], get_floats(&rec[..cls_bytes])).expect("record layout");
        let patch = Tensor::new(
            vec![c, n, d],
            get_floats(&rec[cls_bytes..cls_bytes + patch_bytes]),
        )
        .expect("record layout");
        let label = u16::from_le_bytes([
            rec[cls_bytes + patch_bytes],
            rec[cls_bytes + patch_bytes + 1],
        ]);
        Ok((
            FeatureMap {
                mode: h.mode,
                channels: c,
                tokens_per_channel: n,
                dim: d,
                patch,
                cls,
            },
            usize::from(label),
        ))
    }

    pub fn read_all(&mut self) -> Result<(Vec<FeatureMap<f32>>, Vec<usize>), StoreError> {
        let mut feats = Vec::with_capacity(self.len() as usize);
        let mut labels = Vec::with_capacity(self.len() as usize);
        for k in 0..self.len() {
            let (f, l) = self.read(k)?;
            feats.push(f);
            labels.push(l);
        }
        Ok((feats, labels))
    }
}

/// Header and all records of a feature file.
pub fn read_features(
    path: &Path,
) -> Result<(FeatureFileHeader, Vec<FeatureMap<f32>>, Vec<usize>), StoreError> {
    let mut r = FeatureReader::open(path)?;
    let (f, l) = r.read_all()?;
    Ok((r.header, f, l))
}

/// Writes images to a sample container. Latent descriptors are not stored;
/// the dataset manifest records the generator config that reproduces them.
pub fn write_samples(path: &Path, images: &[MultiChannelImage]) -> Result<u64, StoreError> {
    let (c, hgt, wid) = images
        .first()
        .map(|im| (im.channels, im.height, im.width))
        .unwrap_or((0, 0, 0));
    if images.len() as u64 >= u64::from(PARTIAL_MARKER) {
        return Err(StoreError::TooManySamples);
    }
    let mut out = BufWriter::new(
        OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?,
    );
    out.write_all(&SAMPLE_MAGIC)?;
    for v in [VERSION, c as u32, hgt as u32, wid as u32, PARTIAL_MARKER] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&[LABEL_WIDTH])?;
    for (k, im) in images.iter().enumerate() {
        if (im.channels, im.height, im.width) != (c, hgt, wid) {
            out.flush()?;
            return Err(StoreError::ShapeDrift {
                sample: k as u64,
                expected: format!("{c} x {hgt} x {wid}"),
                got: format!("{} x {} x {}", im.channels, im.height, im.width),
            });
        }
        let label = u16::try_from(im.label).map_err(|_| StoreError::LabelOverflow(im.label))?;
        let mut rec = Vec::with_capacity(im.pixels.len() * 4 + 2);
        for p in &im.pixels {
            rec.extend_from_slice(&p.to_le_bytes());
        }
        rec.extend_from_slice(&label.to_le_bytes());
        out.write_all(&rec)?;
    }
    out.flush()?;
    let mut file = out
        .into_inner()
        .map_err(|e| StoreError::Io(e.into_error()))?;
    file.seek(SeekFrom::Start(20))?;
    file.write_all(&(images.len() as u32).to_le_bytes())?;
    file.sync_all()?;
    Ok(images.len() as u64)
}

pub fn read_samples(path: &Path) -> Result<Vec<MultiChannelImage>, StoreError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || bytes[0..4] != SAMPLE_MAGIC {
        return Err(StoreError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < SAMPLE_HEADER_SIZE as usize {
        return Err(StoreError::Truncated { sample: None });
    }
    let version = u32_at(&bytes, 4);
    if version != VERSION {
        return Err(StoreError::VersionMismatch { found: version });
    }
    let (c, h, w) = (
        u32_at(&bytes, 8) as usize,
        u32_at(&bytes, 12) as usize,
        u32_at(&bytes, 16) as usize,
    );
    let count = u32_at(&bytes, 20);
    if count == PARTIAL_MARKER {
        return Err(StoreError::Partial);
    }
    if bytes[24] != LABEL_WIDTH {
        return Err(StoreError::BadLabelWidth(bytes[24]));
    }
    let rec = (c * h * w * 4 + 2) as u64;
    let expected = SAMPLE_HEADER_SIZE + u64::from(count) * rec;
    let len = bytes.len() as u64;
    if len < expected {
        return Err(StoreError::Truncated {
            sample: Some((len - SAMPLE_HEADER_SIZE) / rec),
        });
    }
    if len > expected {
        return Err(StoreError::TrailingBytes {
            extra: len - expected,
        });
    }
    let body = &bytes[SAMPLE_HEADER_SIZE as usize..];
    Ok(body
        .chunks_exact(rec as usize)
        .map(|r| {
            let px = r.len() - 2;
            MultiChannelImage {
                channels: c,
                height: h,
                width: w,
                pixels: get_floats(&r[..px]),
                label: usize::from(u16::from_le_bytes([r[px], r[px + 1]])),
                latents: Vec::new(),
            }
        })
        .collect())
}

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: Split,
    pub file: String,
    /// Global sample indices `start..end`.
    pub start: usize,
    pub end: usize,
}

/// `dataset.json`: generator config echo, sample count and split layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_count: usize,
    pub config: GeneratorConfig,
    pub splits: Vec<SplitEntry>,
}

pub fn split_file_name(split: Split) -> String {
    format!("{}.mcis", split.name())
}

/// Writes `train.mcis`, `val.mcis`, `test.mcis` and `dataset.json` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest, StoreError> {
    std::fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for (split, range) in Dataset::split_indices(&data.config) {
        let file = split_file_name(split);
        write_samples(&dir.join(&file), data.split(split))?;
        splits.push(SplitEntry {
            split,
            file,
            start: range.start,
            end: range.end,
        });
    }
    let manifest = DatasetManifest {
        sample_count: data.config.total(),
        config: data.config.clone(),
        splits,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(DATASET_MANIFEST), text + "\n")?;
    Ok(manifest)
}

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest, StoreError> {
    let text = std::fs::read_to_string(dir.join(DATASET_MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, StoreError> {
    let manifest = load_dataset_manifest(dir)?;
    let mut data = Dataset {
        config: manifest.config.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.splits {
        let images = read_samples(&dir.join(&entry.file))?;
        if images.len() != entry.end - entry.start {
            return Err(StoreError::Manifest(format!(
                "{} holds {} samples, manifest lists {}",
                entry.file,
                images.len(),
                entry.end - entry.start
            )));
        }
        match entry.split {
            Split::Train => data.train = images,
            Split::Val => data.val = images,
            Split::Test => data.test = images,
        }
    }
    Ok(data)
}
