//! EEG/image dataset ingestion: the line-delimited manifest, the `EEG1`
//! trial container, stratified 80/10/10 splitting and a synthetic
//! desk-scale dataset on which EEG/image alignment is learnable.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{class_image, ImageError, RgbImage};
use crate::util::seeded_rng;

pub const EEG_MAGIC: &[u8; 4] = b"EEG1";
pub const EEG_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: unknown split tag {tag:?}")]
    UnknownSplit { path: String, line: usize, tag: String },
    #[error("{path}:{line}: duplicate trial id {trial_id:?}")]
    DuplicateId { path: String, line: usize, trial_id: String },
    #[error("{path}:{line}: referenced file {missing} does not exist")]
    MissingFile { path: String, line: usize, missing: String },
    #[error("bad EEG container magic in {0}")]
    BadMagic(String),
    #[error("truncated EEG payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("non-finite EEG sample at channel {channel}, sample {sample}")]
    NonFinite { channel: usize, sample: usize },
    #[error("invalid trial: {0}")]
    InvalidTrial(String),
    #[error("split ratios sum to {0}, expected 1")]
    BadRatios(f64),
    #[error("group {group} has {count} entries, needs at least {needed} to populate every split")]
    TooFewEntries { group: String, count: usize, needed: usize },
    #[error("invalid synthetic dataset request: {0}")]
    InvalidSynth(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

/// Raw `C x T` matrix read from an `EEG1` container, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f32>,
}

/// One multichannel recording with its label and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EegTrial {
    trial_id: String,
    subject_id: u32,
    class_label: usize,
    channels: usize,
    samples: usize,
    data: Vec<f32>,
    split: Split,
}

impl EegTrial {
    pub fn new(
        trial_id: impl Into<String>,
        subject_id: u32,
        class_label: usize,
        channels: usize,
        samples: usize,
        data: Vec<f32>,
        split: Split,
    ) -> Result<Self, DatasetError> {
        if channels == 0 || samples == 0 {
            return Err(DatasetError::InvalidTrial("C and T must be positive".into()));
        }
        if data.len() != channels * samples {
            return Err(DatasetError::InvalidTrial(format!(
                "data has {} values, expected {channels}x{samples}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite { channel: i / samples, sample: i % samples });
        }
        Ok(Self { trial_id: trial_id.into(), subject_id, class_label, channels, samples, data, split })
    }

    pub fn from_recording(entry: &ManifestEntry, rec: EegRecording) -> Result<Self, DatasetError> {
        Self::new(
            entry.trial_id.clone(),
            entry.subject_id,
            entry.class_label,
            rec.channels,
            rec.samples,
            rec.data,
            entry.split,
        )
    }

    pub fn trial_id(&self) -> &str {
        &self.trial_id
    }
    pub fn subject_id(&self) -> u32 {
        self.subject_id
    }
    pub fn class_label(&self) -> usize {
        self.class_label
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn samples(&self) -> usize {
        self.samples
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn recording(&self) -> EegRecording {
        EegRecording { channels: self.channels, samples: self.samples, data: self.data.clone() }
    }
}

/// A stimulus image and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusImage {
    pub image_id: String,
    pub class_label: usize,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trial_id: String,
    pub subject_id: u32,
    pub class_label: usize,
    pub eeg_path: String,
    pub image_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    trial_id: String,
    subject_id: u32,
    class_label: usize,
    eeg_path: String,
    image_path: String,
    split: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassNamesLine {
    class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class_label).or_insert(0) += 1;
        }
        counts
    }

    pub fn load_trial(&self, entry: &ManifestEntry) -> Result<EegTrial, DatasetError> {
        let rec = read_eeg(&self.resolve(&entry.eeg_path))?;
        EegTrial::from_recording(entry, rec)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<StimulusImage, DatasetError> {
        let image = RgbImage::read_ppm(&self.resolve(&entry.image_path))?;
        Ok(StimulusImage { image_id: entry.image_path.clone(), class_label: entry.class_label, image })
    }

    /// Serializes the manifest: a `class_names` header line followed by one
    /// JSON object per entry.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ClassNamesLine { class_names: self.class_names.clone() })
            .expect("class names serialize");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }
}

/// Loads and validates a line-delimited manifest.
///
/// Every non-blank line is a JSON object with the six entry fields. An
/// optional first line `{"class_names": [...]}` names the classes; without
/// it classes are named `class_<k>` up to the largest label seen. Relative
/// paths resolve against the manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let shown = path.display().to_string();
    let mut class_names: Option<Vec<String>> = None;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if entries.is_empty() && class_names.is_none() && line.contains("\"class_names\"") {
            let header: ClassNamesLine = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                path: shown.clone(),
                line: line_no,
                message: e.to_string(),
            })?;
            class_names = Some(header.class_names);
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            path: shown.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        let split = raw.split.parse::<Split>().map_err(|tag| DatasetError::UnknownSplit {
            path: shown.clone(),
            line: line_no,
            tag,
        })?;
        if raw.subject_id == 0 {
            return Err(DatasetError::Parse {
                path: shown.clone(),
                line: line_no,
                message: "subject_id must be >= 1".into(),
            });
        }
        if !seen.insert(raw.trial_id.clone()) {
            return Err(DatasetError::DuplicateId { path: shown, line: line_no, trial_id: raw.trial_id });
        }
        let entry = ManifestEntry {
            trial_id: raw.trial_id,
            subject_id: raw.subject_id,
            class_label: raw.class_label,
            eeg_path: raw.eeg_path,
            image_path: raw.image_path,
            split,
        };
        for referenced in [&entry.eeg_path, &entry.image_path] {
            let resolved =
                if Path::new(referenced).is_absolute() { PathBuf::from(referenced) } else { root.join(referenced) };
            if !resolved.exists() {
                return Err(DatasetError::MissingFile {
                    path: shown,
                    line: line_no,
                    missing: resolved.display().to_string(),
                });
            }
        }
        entries.push((line_no, entry));
    }

    let max_label = entries.iter().map(|(_, e)| e.class_label).max();
    let class_names = match class_names {
        Some(names) => {
            if let Some((line, e)) = entries.iter().find(|(_, e)| e.class_label >= names.len()) {
                return Err(DatasetError::Parse {
                    path: shown,
                    line: *line,
                    message: format!("class_label {} out of range for {} classes", e.class_label, names.len()),
                });
            }
            names
        }
        None => (0..max_label.map_or(0, |m| m + 1)).map(|k| format!("class_{k}")).collect(),
    };
    Ok(DatasetManifest { root, entries: entries.into_iter().map(|(_, e)| e).collect(), class_names })
}

pub fn encode_eeg(rec: &EegRecording) -> Vec<u8> {
    let mut out = Vec::with_capacity(EEG_HEADER_LEN + rec.data.len() * 4);
    out.extend_from_slice(EEG_MAGIC);
    out.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    out.extend_from_slice(&(rec.samples as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in &rec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_eeg(bytes: &[u8], origin: &str) -> Result<EegRecording, DatasetError> {
    if bytes.len() < EEG_HEADER_LEN || &bytes[..4] != EEG_MAGIC {
        return Err(DatasetError::BadMagic(origin.to_string()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (channels, samples) = (word(4), word(8));
    if channels == 0 || samples == 0 {
        return Err(DatasetError::InvalidTrial(format!("{origin}: header declares C={channels}, T={samples}")));
    }
    let expected = channels * samples * 4;
    let payload = &bytes[EEG_HEADER_LEN..];
    if payload.len() < expected {
        return Err(DatasetError::Truncated { path: origin.to_string(), expected, found: payload.len() });
    }
    let data: Vec<f32> =
        payload[..expected].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(DatasetError::NonFinite { channel: i / samples, sample: i % samples });
    }
    Ok(EegRecording { channels, samples, data })
}

pub fn read_eeg(path: &Path) -> Result<EegRecording, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_eeg(&bytes, &path.display().to_string())
}

pub fn write_eeg(rec: &EegRecording, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, encode_eeg(rec)).map_err(io_err(path))
}

/// Train/val/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Grouping used for stratification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratify {
    #[default]
    Class,
    Subject,
}

/// Largest-remainder allocation of `n` items, with every split of positive
/// ratio guaranteed at least one item.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = ideal[i].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Deterministic stratified split assignment.
///
/// Within each group (class or subject) entries are ordered by trial id,
/// shuffled with a seeded RNG and cut according to `ratios`.
pub fn make_splits(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
    stratify: Stratify,
) -> Result<DatasetManifest, DatasetError> {
    let r = ratios.as_array();
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || r.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(DatasetError::BadRatios(sum));
    }
    let needed = r.iter().filter(|&&x| x > 0.0).count();

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let key = match stratify {
            Stratify::Class => e.class_label,
            Stratify::Subject => e.subject_id as usize,
        };
        groups.entry(key).or_default().push(i);
    }

    let mut out = manifest.clone();
    for (group_index, (key, mut members)) in groups.into_iter().enumerate() {
        if members.len() < needed {
            return Err(DatasetError::TooFewEntries {
                group: format!("{stratify:?} {key}").to_lowercase(),
                count: members.len(),
                needed,
            });
        }
        members.sort_by(|&a, &b| manifest.entries[a].trial_id.cmp(&manifest.entries[b].trial_id));
        let mut rng = seeded_rng(seed, group_index as u64);
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), r);
        let mut cursor = 0;
        for (split, count) in Split::ALL.iter().zip(counts) {
            for &m in &members[cursor..cursor + count] {
                out.entries[m].split = *split;
            }
            cursor += count;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub noise_sigma: f64,
    pub image_side: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            trials_per_class: 20,
            channels: 8,
            samples: 32,
            noise_sigma: 0.1,
            image_side: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<EegTrial>,
    /// One image per class, indexed by class label.
    pub images: Vec<StimulusImage>,
    pub templates: Vec<Vec<f32>>,
}

impl SyntheticDataset {
    pub fn image_for(&self, trial: &EegTrial) -> &StimulusImage {
        &self.images[trial.class_label()]
    }

    pub fn trials_in(&self, split: Split) -> impl Iterator<Item = &EegTrial> {
        self.trials.iter().filter(move |t| t.split() == split)
    }

    /// Writes manifest, EEG containers and class images under `dir`,
    /// returning the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, DatasetError> {
        for sub in ["eeg", "images"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        for (trial, entry) in self.trials.iter().zip(&self.manifest.entries) {
            write_eeg(&trial.recording(), &dir.join(&entry.eeg_path))?;
        }
        for (k, img) in self.images.iter().enumerate() {
            img.image.write_ppm(&dir.join(class_image_path(k)))?;
        }
        let path = dir.join("manifest.jsonl");
        let mut manifest = self.manifest.clone();
        manifest.root = dir.to_path_buf();
        manifest.write(&path)?;
        Ok(path)
    }
}

fn class_image_path(class: usize) -> String {
    format!("images/class_{class:03}.ppm")
}

/// Generates a synthetic dataset: every class has a fixed Gaussian template
/// matrix, each trial is its class template plus `N(0, sigma^2)` noise, and
/// each class has one procedural image. Splits follow 80/10/10 per class
/// whenever each class has at least three trials; otherwise all trials are
/// assigned to train.
pub fn synth_dataset(config: &SynthConfig) -> Result<SyntheticDataset, DatasetError> {
    let SynthConfig { num_classes, trials_per_class, channels, samples, noise_sigma, image_side, seed } = *config;
    if num_classes == 0 || trials_per_class == 0 || channels == 0 || samples == 0 || image_side == 0 {
        return Err(DatasetError::InvalidSynth("all counts must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DatasetError::InvalidSynth(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut template_rng = seeded_rng(seed, 1);
    let templates: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| {
            (0..channels * samples)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut template_rng);
                    v as f32
                })
                .collect()
        })
        .collect();

    let mut noise_rng = seeded_rng(seed, 2);
    let mut entries = Vec::with_capacity(num_classes * trials_per_class);
    let mut raw = Vec::with_capacity(num_classes * trials_per_class);
    for (class, template) in templates.iter().enumerate() {
        for i in 0..trials_per_class {
            let trial_id = format!("c{class:03}_t{i:04}");
            let data: Vec<f32> = template
                .iter()
                .map(|&t| {
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    (t as f64 + noise_sigma * n) as f32
                })
                .collect();
            let subject_id = (i % 6) as u32 + 1;
            entries.push(ManifestEntry {
                trial_id: trial_id.clone(),
                subject_id,
                class_label: class,
                eeg_path: format!("eeg/{trial_id}.eeg"),
                image_path: class_image_path(class),
                split: Split::Train,
            });
            raw.push((trial_id, subject_id, class, data));
        }
    }
    let mut manifest = DatasetManifest {
        root: PathBuf::new(),
        entries,
        class_names: (0..num_classes).map(|k| format!("class_{k}")).collect(),
    };
    if trials_per_class >= 3 {
        manifest = make_splits(&manifest, SplitRatios::default(), seed, Stratify::Class)?;
    }
    let trials = raw
        .into_iter()
        .zip(&manifest.entries)
        .map(|((id, subject, class, data), entry)| {
            EegTrial::new(id, subject, class, channels, samples, data, entry.split)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images = (0..num_classes)
        .map(|k| StimulusImage { image_id: class_image_path(k), class_label: k, image: class_image(k, image_side) })
        .collect();
    Ok(SyntheticDataset { manifest, trials, images, templates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, class: usize, subject: u32) -> ManifestEntry {
        ManifestEntry {
            trial_id: id.into(),
            subject_id: subject,
            class_label: class,
            eeg_path: "x.eeg".into(),
            image_path: "x.ppm".into(),
            split: Split::Train,
        }
    }

    fn manifest_of(classes: usize, per_class: usize) -> DatasetManifest {
        let entries = (0..classes)
            .flat_map(|c| (0..per_class).map(move |i| entry(&format!("t{c}_{i}"), c, (i % 6) as u32 + 1)))
            .collect();
        DatasetManifest { root: PathBuf::new(), entries, class_names: (0..classes).map(|c| c.to_string()).collect() }
    }

    fn split_counts(m: &DatasetManifest, class: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for e in m.entries.iter().filter(|e| e.class_label == class) {
            c[e.split as usize] += 1;
        }
        c
    }

    fn write_fixture(dir: &Path, lines: &[String]) -> PathBuf {
        fs::write(dir.join("a.eeg"), encode_eeg(&EegRecording { channels: 1, samples: 1, data: vec![0.0] })).unwrap();
        RgbImage::filled(1, 1, [0, 0, 0]).write_ppm(&dir.join("a.ppm")).unwrap();
        let path = dir.join("manifest.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn line(id: &str, split: &str) -> String {
        format!(
            r#"{{"trial_id":"{id}","subject_id":1,"class_label":0,"eeg_path":"a.eeg","image_path":"a.ppm","split":"{split}"}}"#
        )
    }

    #[test]
    fn loads_three_line_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &[line("a", "train"), line("b", "val"), line("c", "test")]);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.class_names, vec!["class_0"]);
        assert_eq!(m.entries[1].split, Split::Val);
    }

    #[test]
    fn duplicate_id_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &[line("a", "train"), line("a", "val")]);
        match load_manifest(&path) {
            Err(DatasetError::DuplicateId { line, trial_id, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(trial_id, "a");
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_split_and_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &[line("a", "train"), line("b", "holdout")]);
        assert!(matches!(load_manifest(&path), Err(DatasetError::UnknownSplit { line: 2, .. })));
        let path = write_fixture(dir.path(), &[line("a", "train"), "{not json".into()]);
        assert!(matches!(load_manifest(&path), Err(DatasetError::Parse { line: 2, .. })));
        assert!(matches!(load_manifest(&dir.path().join("nope.jsonl")), Err(DatasetError::Io { .. })));
    }

    #[test]
    fn missing_referenced_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = line("a", "train").replace("a.eeg", "missing.eeg");
        let path = write_fixture(dir.path(), &[bad]);
        assert!(matches!(load_manifest(&path), Err(DatasetError::MissingFile { line: 1, .. })));
    }

    #[test]
    fn eeg_header_echo() {
        let rec = EegRecording { channels: 2, samples: 4, data: (0..8).map(|v| v as f32).collect() };
        let bytes = encode_eeg(&rec);
        assert_eq!(bytes.len(), 16 + 32);
        assert_eq!(&bytes[..4], b"EEG1");
        let back = decode_eeg(&bytes, "mem").unwrap();
        assert_eq!((back.channels, back.samples), (2, 4));
        assert_eq!(back, rec);
    }

    #[test]
    fn eeg_full_size_payload() {
        // 128 x 500 x 4 bytes = 256000 bytes of payload
        let rec = EegRecording { channels: 128, samples: 500, data: vec![0.5; 64000] };
        let bytes = encode_eeg(&rec);
        assert_eq!(bytes.len() - EEG_HEADER_LEN, 256_000);
        assert_eq!(decode_eeg(&bytes, "mem").unwrap().data.len(), 64000);
    }

    #[test]
    fn eeg_errors() {
        let rec = EegRecording { channels: 2, samples: 4, data: vec![1.0; 8] };
        let bytes = encode_eeg(&rec);
        assert!(matches!(decode_eeg(&bytes[..bytes.len() - 1], "m"), Err(DatasetError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_eeg(&bad, "m"), Err(DatasetError::BadMagic(_))));
        let mut nan = bytes.clone();
        nan[16 + 4 * 5..16 + 4 * 6].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_eeg(&nan, "m"), Err(DatasetError::NonFinite { channel: 1, sample: 1 })));
    }

    #[test]
    fn splits_fifty_per_class() {
        let m = make_splits(&manifest_of(40, 50), SplitRatios::default(), 3, Stratify::Class).unwrap();
        for c in 0..40 {
            assert_eq!(split_counts(&m, c), [40, 5, 5]);
        }
    }

    #[test]
    fn splits_ten_entries_one_class() {
        let m = make_splits(&manifest_of(1, 10), SplitRatios::default(), 0, Stratify::Class).unwrap();
        assert_eq!(split_counts(&m, 0), [8, 1, 1]);
    }

    #[test]
    fn splits_are_deterministic_and_seed_dependent() {
        let base = manifest_of(4, 20);
        let a = make_splits(&base, SplitRatios::default(), 11, Stratify::Class).unwrap();
        let b = make_splits(&base, SplitRatios::default(), 11, Stratify::Class).unwrap();
        let c = make_splits(&base, SplitRatios::default(), 12, Stratify::Class).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_errors() {
        let bad = SplitRatios { train: 0.8, val: 0.1, test: 0.2 };
        assert!(matches!(make_splits(&manifest_of(1, 10), bad, 0, Stratify::Class), Err(DatasetError::BadRatios(_))));
        assert!(matches!(
            make_splits(&manifest_of(1, 2), SplitRatios::default(), 0, Stratify::Class),
            Err(DatasetError::TooFewEntries { .. })
        ));
    }

    #[test]
    fn subject_stratification_balances_subjects() {
        let m = make_splits(&manifest_of(2, 30), SplitRatios::default(), 5, Stratify::Subject).unwrap();
        for subject in 1..=6 {
            let mut c = [0; 3];
            for e in m.entries.iter().filter(|e| e.subject_id == subject) {
                c[e.split as usize] += 1;
            }
            assert_eq!(c, [8, 1, 1]);
        }
    }

    #[test]
    fn manifest_jsonl_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&SynthConfig { num_classes: 3, trials_per_class: 5, ..Default::default() }).unwrap();
        let path = ds.write_to(dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries, ds.manifest.entries);
        assert_eq!(m.class_names.len(), 3);
        let t = m.load_trial(&m.entries[4]).unwrap();
        assert_eq!(&t, &ds.trials[4]);
        assert_eq!(m.load_image(&m.entries[4]).unwrap().image, ds.images[0].image);
    }

    #[test]
    fn forty_class_manifest_loads_with_balanced_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&SynthConfig {
            num_classes: 40,
            trials_per_class: 50,
            channels: 2,
            samples: 2,
            image_side: 4,
            ..Default::default()
        })
        .unwrap();
        let m = load_manifest(&ds.write_to(dir.path()).unwrap()).unwrap();
        assert_eq!(m.entries.len(), 2000);
        assert!(m.class_counts().values().all(|&n| n == 50));
        assert_eq!(m.class_counts().len(), 40);
    }

    #[test]
    fn synth_counts_and_zero_noise() {
        let cfg = SynthConfig {
            num_classes: 4,
            trials_per_class: 10,
            channels: 8,
            samples: 32,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        assert_eq!(ds.trials.len(), 40);
        assert_eq!(ds.images.len(), 4);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(ds.images[i].image, ds.images[j].image);
            }
        }
        for c in 0..4 {
            let class: Vec<_> = ds.trials.iter().filter(|t| t.class_label() == c).collect();
            assert!(class.iter().all(|t| t.data() == class[0].data()));
        }
    }

    #[test]
    fn synth_is_bit_reproducible() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.manifest, b.manifest);
        let c = synth_dataset(&SynthConfig { seed: cfg.seed + 1, ..cfg }).unwrap();
        assert_ne!(a.trials, c.trials);
    }

    #[test]
    fn synth_nearest_template_oracle_is_perfect() {
        // brute-force nearest-neighbour over class templates
        let ds =
            synth_dataset(&SynthConfig { noise_sigma: 0.1, channels: 8, samples: 32, ..Default::default() }).unwrap();
        let mut correct = 0;
        let train: Vec<_> = ds.trials_in(Split::Train).collect();
        for t in &train {
            let best = (0..ds.templates.len())
                .min_by(|&a, &b| {
                    let da: f64 = ds.templates[a].iter().zip(t.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                    let db: f64 = ds.templates[b].iter().zip(t.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += (best == t.class_label()) as usize;
        }
        assert_eq!(correct, train.len());
    }

    proptest! {
        #[test]
        fn splits_partition_the_entry_set(classes in 1usize..6, per_class in 3usize..30, seed in any::<u64>()) {
            let base = manifest_of(classes, per_class);
            let split = make_splits(&base, SplitRatios::default(), seed, Stratify::Class).unwrap();
            let mut before: Vec<_> = base.entries.iter().map(|e| e.trial_id.clone()).collect();
            let mut after: Vec<_> = split.entries.iter().map(|e| e.trial_id.clone()).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
            for c in 0..classes {
                let counts = split_counts(&split, c);
                prop_assert!(counts.iter().all(|&n| n >= 1));
                let n = per_class as f64;
                prop_assert!((counts[0] as f64 - 0.8 * n).abs() <= 1.0 + 1e-9 || per_class < 10);
                prop_assert!((counts[1] as f64 - 0.1 * n).abs() <= 1.0 + 1e-9);
            }
        }

        #[test]
        fn eeg_container_round_trip(channels in 1usize..6, samples in 1usize..12, seed in any::<u32>()) {
            let data: Vec<f32> = (0..channels * samples)
                .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed)) as f32 / 1e6 - 2000.0)
                .collect();
            let rec = EegRecording { channels, samples, data };
            prop_assert_eq!(decode_eeg(&encode_eeg(&rec), "p").unwrap(), rec);
        }
    }
}
