//! Dataset boundary: the binary feature container, the JSON manifest, the
//! synthetic cross-modal generator and in-memory graph datasets.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! "HGAV" | version u32 | n_audio u32 | d_audio u32 | n_video u32 | d_video u32
//! audio block: n_audio * d_audio f32, row-major
//! video block: n_video * d_video f32, row-major
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_hetero_graph, EdgeRules, HeteroGraph};
use crate::tensor::{rng_from_seed, Rng, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"HGAV";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5;

pub const MANIFEST_VERSION: u32 = 1;

/// Per-segment embeddings of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureContainer {
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
}

impl FeatureContainer {
    pub fn new(audio: Tensor<f32>, video: Tensor<f32>) -> Result<Self> {
        if !audio.is_finite() || !video.is_finite() {
            return Err(Error::Format("container features must be finite".into()));
        }
        Ok(FeatureContainer { audio, video })
    }

    pub fn n_audio(&self) -> usize {
        self.audio.rows()
    }

    pub fn n_video(&self) -> usize {
        self.video.rows()
    }

    pub fn d_audio(&self) -> usize {
        self.audio.cols()
    }

    pub fn d_video(&self) -> usize {
        self.video.cols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.audio.is_finite() || !self.video.is_finite() {
            return Err(Error::Format("container features must be finite".into()));
        }
        let dims = [self.n_audio(), self.d_audio(), self.n_video(), self.d_video()];
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.audio.len() + self.video.len()));
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in self.audio.data().iter().chain(self.video.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Format(format!("bad container magic {:?}", &bytes[..4])));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        let version = word(0);
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let (n_a, d_a, n_v, d_v) = (word(1) as u64, word(2) as u64, word(3) as u64, word(4) as u64);
        let expected = HEADER_LEN as u64 + 4 * (n_a * d_a + n_v * d_v);
        if bytes.len() as u64 != expected {
            return Err(Error::Length {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let audio_len = (n_a * d_a) as usize;
        let audio: Vec<f32> = floats.by_ref().take(audio_len).collect();
        let video: Vec<f32> = floats.collect();
        let audio = Tensor::from_vec(n_a as usize, d_a as usize, audio)?;
        let video = Tensor::from_vec(n_v as usize, d_v as usize, video)?;
        FeatureContainer::new(audio, video)
    }
}

pub fn write_container(path: &Path, container: &FeatureContainer) -> Result<()> {
    let bytes = container.to_bytes()?;
    fs::write(path, bytes).map_err(Error::at_path(path))
}

pub fn read_container(path: &Path) -> Result<FeatureContainer> {
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    FeatureContainer::from_bytes(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub container_path: PathBuf,
    /// Indices of the positive classes.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", self.version)));
        }
        if self.items.is_empty() {
            return Err(Error::Dataset("empty dataset: manifest lists no items".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Dataset(format!(
                "manifest declares {} classes but names {}",
                self.num_classes,
                self.class_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate item id `{}`", item.id)));
            }
            if let Some(bad) = item.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::Dataset(format!(
                    "item `{}`: label {bad} out of range for {} classes",
                    item.id, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(Error::at_path(path))
    }
}

/// One labelled clip.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub graph: HeteroGraph<f32>,
    /// Multi-hot targets, one entry per class.
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Builds graphs for in-memory containers; `containers[k]` belongs to
    /// `manifest.items[k]`.
    pub fn from_containers(manifest: &DatasetManifest, containers: Vec<FeatureContainer>, rules: &EdgeRules) -> Result<Self> {
        manifest.validate()?;
        if containers.len() != manifest.items.len() {
            return Err(Error::Dataset(format!(
                "{} containers for {} manifest items",
                containers.len(),
                manifest.items.len()
            )));
        }
        let mut samples = Vec::with_capacity(containers.len());
        let mut errors = Vec::new();
        for (item, c) in manifest.items.iter().zip(containers) {
            let mut labels = vec![false; manifest.num_classes];
            for &l in &item.labels {
                labels[l] = true;
            }
            match build_hetero_graph(c.audio, c.video, rules) {
                Ok(graph) => samples.push(Sample {
                    id: item.id.clone(),
                    graph,
                    labels,
                }),
                Err(e) => errors.push(format!("`{}`: {e}", item.id)),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Dataset(errors.join("; ")));
        }
        let ds = Dataset {
            num_classes: manifest.num_classes,
            class_names: manifest.class_names.clone(),
            samples,
        };
        ds.check_dims()?;
        Ok(ds)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// `(d_audio, d_video)` shared by every sample.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        Ok((first.graph.d_audio(), first.graph.d_video()))
    }

    fn check_dims(&self) -> Result<()> {
        let (d_a, d_v) = self.dims()?;
        for s in &self.samples {
            if s.graph.d_audio() != d_a || s.graph.d_video() != d_v {
                return Err(Error::Dataset(format!(
                    "item `{}` has feature dims (audio {}, video {}), expected ({d_a}, {d_v})",
                    s.id,
                    s.graph.d_audio(),
                    s.graph.d_video()
                )));
            }
        }
        Ok(())
    }

    /// `(n_audio, n_video)` when every sample has the same node counts.
    pub fn uniform_counts(&self) -> Option<(usize, usize)> {
        let first = self.samples.first()?;
        let counts = (first.graph.n_audio(), first.graph.n_video());
        self.samples
            .iter()
            .all(|s| (s.graph.n_audio(), s.graph.n_video()) == counts)
            .then_some(counts)
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Item ids whose node counts differ from `(n_audio, n_video)`.
    pub fn count_mismatches(&self, n_audio: usize, n_video: usize) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.graph.n_audio() != n_audio || s.graph.n_video() != n_video)
            .map(|s| s.id.as_str())
            .collect()
    }
}

/// Reads a manifest and every container it lists, then builds one graph per
/// item. All per-item failures are reported together.
pub fn load_dataset(manifest_path: &Path, rules: &EdgeRules) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest.validate()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut containers = Vec::with_capacity(manifest.items.len());
    let mut errors = Vec::new();
    for item in &manifest.items {
        match read_container(&base.join(&item.container_path)) {
            Ok(c) => containers.push(c),
            Err(e) => errors.push(format!("`{}`: {e}", item.id)),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Dataset(errors.join("; ")));
    }
    Dataset::from_containers(&manifest, containers, rules)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Class evidence sits in the audio features alone.
    AudioOnlySolvable,
    /// Class evidence is the phase agreement between time-aligned audio and
    /// video; each modality on its own is label-independent.
    FusionRequired,
}

impl SynthMode {
    pub const NAMES: [&'static str; 2] = ["audio_only_solvable", "fusion_required"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_items: usize,
    pub n_audio: usize,
    pub n_video: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub mode: SynthMode,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_items: 400,
            n_audio: 10,
            n_video: 25,
            d_audio: 16,
            d_video: 32,
            num_classes: 4,
            noise_sigma: 0.2,
            mode: SynthMode::FusionRequired,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_audio", self.n_audio),
            ("n_video", self.n_video),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be >= 1")));
            }
        }
        if self.d_audio < self.num_classes || self.d_video < self.num_classes {
            return Err(Error::Config(format!(
                "synthetic feature dims (audio {}, video {}) must be >= num_classes {}",
                self.d_audio, self.d_video, self.num_classes
            )));
        }
        // a full sinusoid period needs at least three samples to sum to zero
        if self.n_audio < 3 || self.n_video < 3 {
            return Err(Error::Config("synthetic node counts must be >= 3".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A generated dataset, not yet written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub containers: Vec<FeatureContainer>,
}

impl SyntheticData {
    pub fn to_dataset(&self, rules: &EdgeRules) -> Result<Dataset> {
        Dataset::from_containers(&self.manifest, self.containers.clone(), rules)
    }

    /// Writes `manifest.json` plus one container per item under `dir/items`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let items = dir.join("items");
        fs::create_dir_all(&items).map_err(Error::at_path(&items))?;
        for (item, c) in self.manifest.items.iter().zip(&self.containers) {
            write_container(&dir.join(&item.container_path), c)?;
        }
        let manifest_path = dir.join("manifest.json");
        self.manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }
}

/// `count` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussians).
fn orthonormal(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// One cycle across the clip, sampled at segment centres.
fn wave(pos: usize, n: usize, phase: f64) -> f64 {
    (2.0 * PI * (pos as f64 + 0.5) / n as f64 + phase).sin()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let audio_dirs = orthonormal(spec.num_classes, spec.d_audio, &mut rng);
    let video_dirs = orthonormal(spec.num_classes, spec.d_video, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut items = Vec::with_capacity(spec.n_items);
    let mut containers = Vec::with_capacity(spec.n_items);
    for k in 0..spec.n_items {
        let mut audio = vec![vec![0.0f64; spec.d_audio]; spec.n_audio];
        let mut video = vec![vec![0.0f64; spec.d_video]; spec.n_video];
        let mut labels = Vec::new();
        for c in 0..spec.num_classes {
            let positive = rng.random_bool(0.5);
            if positive {
                labels.push(c);
            }
            let audio_phase = rng.random_range(0.0..2.0 * PI);
            let video_phase = match spec.mode {
                // anti-phase video marks a negative
                SynthMode::FusionRequired => audio_phase + if positive { 0.0 } else { PI },
                SynthMode::AudioOnlySolvable => rng.random_range(0.0..2.0 * PI),
            };
            let offset = match spec.mode {
                SynthMode::AudioOnlySolvable if positive => 1.0,
                _ => 0.0,
            };
            for (i, row) in audio.iter_mut().enumerate() {
                let a = offset + wave(i, spec.n_audio, audio_phase);
                row.iter_mut().zip(&audio_dirs[c]).for_each(|(x, u)| *x += a * u);
            }
            for (j, row) in video.iter_mut().enumerate() {
                let a = wave(j, spec.n_video, video_phase);
                row.iter_mut().zip(&video_dirs[c]).for_each(|(x, u)| *x += a * u);
            }
        }
        let mut to_tensor = |rows: Vec<Vec<f64>>, cols: usize| {
            let n = rows.len();
            let data = rows
                .into_iter()
                .flatten()
                .map(|x| {
                    let jitter = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (x + jitter) as f32
                })
                .collect();
            Tensor::from_vec(n, cols, data)
        };
        let audio = to_tensor(audio, spec.d_audio)?;
        let video = to_tensor(video, spec.d_video)?;
        let id = format!("item_{k:05}");
        items.push(ManifestItem {
            container_path: PathBuf::from(format!("items/{id}.hgav")),
            id,
            labels,
        });
        containers.push(FeatureContainer::new(audio, video)?);
    }
    Ok(SyntheticData {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            num_classes: spec.num_classes,
            class_names: (0..spec.num_classes).map(|c| format!("class_{c}")).collect(),
            items,
        },
        containers,
    })
}
