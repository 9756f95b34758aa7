//! Embedding banks: per-slice feature vectors grouped by scan, with optional
//! binary labels.
//!
//! A bank is stored column-wise (scan ids, labels, features) so it maps
//! directly onto the `.fbank` file layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FBNK"
//! 4       4     version (u32) = 1
//! 8       4     feature_dim (u32)
//! 12      8     num_records (u64)
//! 20      1     has_labels (u8, 0 | 1)
//! 21      8n    scan ids (u64)
//! ..      n     labels (u8), only when has_labels = 1
//! ..      4nd   features (f32), record-major
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FBNK";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

/// Width of the frozen image-encoder embeddings the toolkit was designed for.
pub const ENCODER_FEATURE_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?} at offset {offset}, expected \"FBNK\"")]
    BadMagic { offset: usize, found: [u8; 4] },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },
    #[error("truncated at offset {offset}: need {needed} bytes, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("non-finite feature value at offset {offset}")]
    NonFiniteFeature { offset: usize },
    #[error("invalid label {value} at offset {offset}")]
    InvalidLabel { offset: usize, value: u8 },
    #[error("invalid has_labels flag {value} at offset {offset}")]
    InvalidLabelFlag { offset: usize, value: u8 },
    #[error("{extra} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("feature_dim must be positive")]
    ZeroDimension,
    #[error("record {index} has {found} features, bank dimension is {expected}")]
    RecordDimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {index} has non-finite feature {feature}")]
    NonFiniteRecord { index: usize, feature: usize },
    #[error("record {index} has label {value}; labels must be 0 or 1")]
    RecordLabel { index: usize, value: u8 },
    #[error("bank mixes labeled and unlabeled records")]
    MixedLabels,
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("merge inputs must be labeled")]
    UnlabeledInput,
    #[error("split fraction {fraction} leaves one side empty ({scans} scans)")]
    EmptySplit { fraction: f64, scans: usize },
    #[error("cannot split an empty bank")]
    EmptyBank,
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One slice embedding with its scan and optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub scan_id: u64,
    pub label: Option<u8>,
    pub feature: Vec<f32>,
}

/// Borrowed view of a record inside a bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub scan_id: u64,
    pub label: Option<u8>,
    pub feature: &'a [f32],
}

/// An ordered collection of slice embeddings sharing one feature dimension.
///
/// Either every record carries a label or none does.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    feature_dim: usize,
    scan_ids: Vec<u64>,
    labels: Option<Vec<u8>>,
    features: Vec<f32>,
}

impl FeatureBank {
    /// Empty bank of the given dimension.
    pub fn empty(feature_dim: usize, labeled: bool) -> Result<Self, BankError> {
        if feature_dim == 0 {
            return Err(BankError::ZeroDimension);
        }
        Ok(Self {
            feature_dim,
            scan_ids: Vec::new(),
            labels: labeled.then(Vec::new),
            features: Vec::new(),
        })
    }

    /// Builds a bank from records, checking every invariant.
    ///
    /// An empty record list produces an unlabeled empty bank; use
    /// [`FeatureBank::empty`] to choose the flag explicitly.
    pub fn from_records(feature_dim: usize, records: Vec<SampleRecord>) -> Result<Self, BankError> {
        let labeled = records.first().is_some_and(|r| r.label.is_some());
        let mut bank = Self::empty(feature_dim, labeled)?;
        bank.features.reserve(records.len() * feature_dim);
        for (index, record) in records.into_iter().enumerate() {
            bank.push_checked(index, record)?;
        }
        Ok(bank)
    }

    /// Builds a bank from columnar parts, checking every invariant.
    pub fn from_parts(
        feature_dim: usize,
        scan_ids: Vec<u64>,
        labels: Option<Vec<u8>>,
        features: Vec<f32>,
    ) -> Result<Self, BankError> {
        if feature_dim == 0 {
            return Err(BankError::ZeroDimension);
        }
        let n = scan_ids.len();
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(BankError::MixedLabels);
            }
            if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
                return Err(BankError::RecordLabel { index, value });
            }
        }
        if features.len() != n * feature_dim {
            return Err(BankError::RecordDimension {
                index: features.len() / feature_dim,
                expected: feature_dim,
                found: features.len() % feature_dim,
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(BankError::NonFiniteRecord {
                index: pos / feature_dim,
                feature: pos % feature_dim,
            });
        }
        Ok(Self {
            feature_dim,
            scan_ids,
            labels,
            features,
        })
    }

    fn push_checked(&mut self, index: usize, record: SampleRecord) -> Result<(), BankError> {
        if record.feature.len() != self.feature_dim {
            return Err(BankError::RecordDimension {
                index,
                expected: self.feature_dim,
                found: record.feature.len(),
            });
        }
        if let Some(feature) = record.feature.iter().position(|v| !v.is_finite()) {
            return Err(BankError::NonFiniteRecord { index, feature });
        }
        match (&mut self.labels, record.label) {
            (Some(labels), Some(value)) => {
                if value > 1 {
                    return Err(BankError::RecordLabel { index, value });
                }
                labels.push(value);
            }
            (None, None) => {}
            _ => return Err(BankError::MixedLabels),
        }
        self.scan_ids.push(record.scan_id);
        self.features.extend_from_slice(&record.feature);
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.scan_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scan_ids.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn scan_ids(&self) -> &[u64] {
        &self.scan_ids
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Record-major feature matrix, `len() * feature_dim()` values.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, index: usize) -> &[f32] {
        let start = index * self.feature_dim;
        &self.features[start..start + self.feature_dim]
    }

    pub fn get(&self, index: usize) -> Option<Sample<'_>> {
        (index < self.len()).then(|| Sample {
            scan_id: self.scan_ids[index],
            label: self.labels.as_ref().map(|l| l[index]),
            feature: self.feature(index),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i).expect("index in range"))
    }

    pub fn to_records(&self) -> Vec<SampleRecord> {
        self.iter()
            .map(|s| SampleRecord {
                scan_id: s.scan_id,
                label: s.label,
                feature: s.feature.to_vec(),
            })
            .collect()
    }

    /// Distinct scan ids in ascending order.
    pub fn distinct_scans(&self) -> Vec<u64> {
        self.scan_ids
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Copy of the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureBank {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        FeatureBank {
            feature_dim: self.feature_dim,
            scan_ids: indices.iter().map(|&i| self.scan_ids[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            features,
        }
    }

    /// Same records with labels removed.
    pub fn without_labels(&self) -> FeatureBank {
        FeatureBank {
            labels: None,
            ..self.clone()
        }
    }

    /// Same records with the given labels attached.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<FeatureBank, BankError> {
        FeatureBank::from_parts(
            self.feature_dim,
            self.scan_ids.clone(),
            Some(labels),
            self.features.clone(),
        )
    }

    /// Exact size of this bank's `.fbank` encoding.
    pub fn encoded_len(&self) -> usize {
        let n = self.len();
        HEADER_LEN + 8 * n + if self.is_labeled() { n } else { 0 } + 4 * n * self.feature_dim
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.push(u8::from(self.is_labeled()));
        for id in &self.scan_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            out.extend_from_slice(labels);
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BankError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(BankError::BadMagic {
                offset: 0,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(BankError::UnsupportedVersion { offset: 4, version });
        }
        let feature_dim = cur.u32()? as usize;
        if feature_dim == 0 {
            return Err(BankError::ZeroDimension);
        }
        let n = cur.u64()?;
        let flag_offset = cur.pos;
        let has_labels = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            value => {
                return Err(BankError::InvalidLabelFlag {
                    offset: flag_offset,
                    value,
                })
            }
        };

        // Check the declared size before allocating anything proportional to it.
        let per_record = 8 + usize::from(has_labels) + 4 * feature_dim;
        let needed = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(per_record))
            .unwrap_or(usize::MAX);
        if bytes.len() - cur.pos < needed {
            return Err(BankError::Truncated {
                offset: bytes.len(),
                needed: HEADER_LEN.saturating_add(needed),
                len: bytes.len(),
            });
        }
        let n = n as usize;

        let mut scan_ids = Vec::with_capacity(n);
        for _ in 0..n {
            scan_ids.push(cur.u64()?);
        }
        let labels = if has_labels {
            let start = cur.pos;
            let raw = cur.take(n)?;
            if let Some(i) = raw.iter().position(|&l| l > 1) {
                return Err(BankError::InvalidLabel {
                    offset: start + i,
                    value: raw[i],
                });
            }
            Some(raw.to_vec())
        } else {
            None
        };
        let mut features = Vec::with_capacity(n * feature_dim);
        for _ in 0..n * feature_dim {
            let offset = cur.pos;
            let v = f32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(BankError::NonFiniteFeature { offset });
            }
            features.push(v);
        }
        if cur.pos != bytes.len() {
            return Err(BankError::TrailingBytes {
                offset: cur.pos,
                extra: bytes.len() - cur.pos,
            });
        }
        Ok(Self {
            feature_dim,
            scan_ids,
            labels,
            features,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], BankError> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(BankError::Truncated {
                offset: self.pos,
                needed: len,
                len: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, BankError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, BankError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<(), BankError> {
    fs::write(path, bank.to_bytes())?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank, BankError> {
    FeatureBank::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub label: Option<u8>,
}

/// Maps scan ids back to scan names and scan-level labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanManifest {
    pub entries: BTreeMap<u64, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    scan_id: u64,
    name: String,
    label: Option<u8>,
}

impl ScanManifest {
    pub fn insert(&mut self, scan_id: u64, name: impl Into<String>, label: Option<u8>) {
        self.entries.insert(
            scan_id,
            ManifestEntry {
                name: name.into(),
                label,
            },
        );
    }

    pub fn get(&self, scan_id: u64) -> Option<&ManifestEntry> {
        self.entries.get(&scan_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same names with every label cleared.
    pub fn without_labels(&self) -> ScanManifest {
        ScanManifest {
            entries: self
                .entries
                .iter()
                .map(|(&id, e)| {
                    (
                        id,
                        ManifestEntry {
                            name: e.name.clone(),
                            label: None,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that every scan of a labeled bank is present with a matching
    /// label on each of its slices.
    pub fn check_bank(&self, bank: &FeatureBank) -> Result<(), BankError> {
        let Some(labels) = bank.labels() else {
            return Ok(());
        };
        for (i, (&scan_id, &label)) in bank.scan_ids().iter().zip(labels).enumerate() {
            match self.get(scan_id) {
                None => {
                    return Err(BankError::Manifest(format!(
                        "scan {scan_id} (record {i}) missing from manifest"
                    )))
                }
                Some(e) if e.label != Some(label) => {
                    return Err(BankError::Manifest(format!(
                        "record {i} of scan {scan_id} has label {label}, manifest says {:?}",
                        e.label
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), BankError> {
        let mut w = csv::Writer::from_writer(writer);
        for (&scan_id, e) in &self.entries {
            w.serialize(ManifestRow {
                scan_id,
                name: e.name.clone(),
                label: e.label,
            })?;
        }
        if self.entries.is_empty() {
            w.write_record(["scan_id", "name", "label"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, BankError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["scan_id", "name", "label"] {
            return Err(BankError::Manifest(format!(
                "expected header scan_id,name,label, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut manifest = ScanManifest::default();
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            if matches!(row.label, Some(l) if l > 1) {
                return Err(BankError::Manifest(format!(
                    "scan {} has label {:?}",
                    row.scan_id, row.label
                )));
            }
            if manifest.entries.contains_key(&row.scan_id) {
                return Err(BankError::Manifest(format!(
                    "duplicate scan_id {}",
                    row.scan_id
                )));
            }
            manifest.insert(row.scan_id, row.name, row.label);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        self.write_csv(fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::read_csv(fs::File::open(path)?)
    }
}

/// Parameters of the two-cluster synthetic bank generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_scans_per_class: usize,
    /// Inclusive range of slices per scan.
    pub slices_per_scan: (usize, usize),
    pub feature_dim: usize,
    /// Euclidean distance between the two class means.
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Fraction of scans whose label is flipped.
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_scans_per_class: 20,
            slices_per_scan: (10, 20),
            feature_dim: ENCODER_FEATURE_DIM,
            class_separation: 4.0,
            noise_sigma: 1.0,
            label_noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), BankError> {
        let bad = |msg: &str| Err(BankError::InvalidSynthConfig(msg.to_string()));
        let (lo, hi) = self.slices_per_scan;
        if self.num_scans_per_class == 0 {
            return bad("num_scans_per_class must be positive");
        }
        if lo == 0 || hi < lo {
            return bad("slices_per_scan must be a range with minimum >= 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return bad("class_separation must be finite and nonnegative");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad("noise_sigma must be finite and positive");
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return bad("label_noise_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Generates a labeled bank of two isotropic Gaussian clusters.
///
/// Class means sit at `±separation/2` along the all-ones direction. Scans
/// are numbered from 0; the first `num_scans_per_class` are class 0. Every
/// slice of a scan shares the scan's (possibly flipped) label.
pub fn synth_bank(config: &SynthConfig) -> Result<(FeatureBank, ScanManifest), BankError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.feature_dim;
    let num_scans = 2 * config.num_scans_per_class;
    let offset = config.class_separation / 2.0 / (dim as f64).sqrt();
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");

    let mut labels: Vec<u8> = (0..num_scans)
        .map(|s| u8::from(s >= config.num_scans_per_class))
        .collect();
    let true_labels = labels.clone();
    let flips = (config.label_noise_rate * num_scans as f64).round() as usize;
    let mut order: Vec<usize> = (0..num_scans).collect();
    order.shuffle(&mut rng);
    for &s in &order[..flips] {
        labels[s] ^= 1;
    }

    let mut records = Vec::new();
    let mut manifest = ScanManifest::default();
    let (lo, hi) = config.slices_per_scan;
    for scan in 0..num_scans {
        let scan_id = scan as u64;
        let sign = if true_labels[scan] == 1 { 1.0 } else { -1.0 };
        let slices = rng.random_range(lo..=hi);
        for _ in 0..slices {
            let feature = (0..dim)
                .map(|_| (sign * offset + noise.sample(&mut rng)) as f32)
                .collect();
            records.push(SampleRecord {
                scan_id,
                label: Some(labels[scan]),
                feature,
            });
        }
        manifest.insert(scan_id, format!("scan_{scan:05}"), Some(labels[scan]));
    }
    let bank = FeatureBank::from_records(dim, records)?;
    Ok((bank, manifest))
}

/// Splits a bank by scan: every slice of a scan lands on the same side.
///
/// The first part receives `round(fraction * scans)` randomly chosen scans.
/// Record order within each part follows the input.
pub fn split_bank(
    bank: &FeatureBank,
    fraction: f64,
    seed: u64,
) -> Result<(FeatureBank, FeatureBank), BankError> {
    if bank.is_empty() {
        return Err(BankError::EmptyBank);
    }
    let mut scans = bank.distinct_scans();
    let take = (fraction * scans.len() as f64).round();
    if !(fraction > 0.0 && fraction < 1.0) || take < 1.0 || take >= scans.len() as f64 {
        return Err(BankError::EmptySplit {
            fraction,
            scans: scans.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scans.shuffle(&mut rng);
    let first: HashSet<u64> = scans[..take as usize].iter().copied().collect();
    let (a, b): (Vec<usize>, Vec<usize>) =
        (0..bank.len()).partition(|&i| first.contains(&bank.scan_ids[i]));
    Ok((bank.select(&a), bank.select(&b)))
}

/// Concatenates two labeled banks: `a`'s records, then `b`'s.
///
/// An empty bank counts as labeled regardless of its flag.
pub fn merge_banks(a: &FeatureBank, b: &FeatureBank) -> Result<FeatureBank, BankError> {
    if a.feature_dim != b.feature_dim {
        return Err(BankError::DimensionMismatch {
            left: a.feature_dim,
            right: b.feature_dim,
        });
    }
    let unlabeled = |x: &FeatureBank| !x.is_empty() && !x.is_labeled();
    if unlabeled(a) || unlabeled(b) {
        return Err(BankError::UnlabeledInput);
    }
    let mut labels = Vec::with_capacity(a.len() + b.len());
    labels.extend_from_slice(a.labels().unwrap_or_default());
    labels.extend_from_slice(b.labels().unwrap_or_default());
    Ok(FeatureBank {
        feature_dim: a.feature_dim,
        scan_ids: [a.scan_ids.as_slice(), b.scan_ids.as_slice()].concat(),
        labels: Some(labels),
        features: [a.features.as_slice(), b.features.as_slice()].concat(),
    })
}
