//! On-disk formats: binary feature files and the JSON annotation, text-embedding,
//! prediction and split files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::c2f::{fuse_templates, TextBank};
use crate::data::{ActionInstance, AnnotationSet, FeatureMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::Detection;
use crate::geometry::Interval;
use crate::numerics::Tensor2D;

pub const FEATURE_MAGIC: &[u8; 4] = b"OVTF";
pub const FORMAT_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 4 + 4 + 4 + 4 + 8;

pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER + f.values.len() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.len() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    out.extend_from_slice(&f.rate.to_le_bytes());
    for v in f.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureMatrix, String> {
    if bytes.len() < FEATURE_HEADER {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let rate = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format!("{rows}x{cols} overflows"))?;
    let payload = &bytes[FEATURE_HEADER..];
    if payload.len() != expected {
        return Err(format!("payload is {} bytes, header implies {expected}", payload.len()));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let values = Tensor2D::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
    FeatureMatrix::new(values, rate).map_err(|e| e.to_string())
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|reason| Error::Format { path: path.into(), reason })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub t_s: f64,
    pub t_e: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub duration_sec: f64,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: u32,
    pub categories: Vec<String>,
    pub videos: BTreeMap<String, VideoEntry>,
}

impl AnnotationFile {
    pub fn from_sets(vocab: &Vocabulary, sets: &BTreeMap<String, AnnotationSet>) -> Self {
        let videos = sets
            .iter()
            .map(|(id, set)| {
                let annotations = set
                    .instances
                    .iter()
                    .map(|i| AnnotationEntry {
                        t_s: i.interval.t_s,
                        t_e: i.interval.t_e,
                        label: vocab.name(i.category).to_string(),
                    })
                    .collect();
                (id.clone(), VideoEntry { duration_sec: set.duration, annotations })
            })
            .collect();
        AnnotationFile { version: FORMAT_VERSION, categories: vocab.names().to_vec(), videos }
    }

    /// Vocabulary and validated per-video annotations.
    pub fn into_sets(self) -> Result<(Vocabulary, BTreeMap<String, AnnotationSet>)> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Config(format!("annotation file version {}", self.version)));
        }
        let vocab = Vocabulary::new(self.categories)?;
        let mut sets = BTreeMap::new();
        for (id, video) in self.videos {
            let instances = video
                .annotations
                .iter()
                .map(|a| {
                    Ok(ActionInstance { interval: Interval::new(a.t_s, a.t_e)?, category: vocab.id(&a.label)? })
                })
                .collect::<Result<Vec<_>>>()?;
            let set = AnnotationSet { duration: video.duration_sec, instances };
            set.validate(vocab.len()).map_err(|e| Error::Contract(format!("video {id}: {e}")))?;
            sets.insert(id, set);
        }
        Ok((vocab, sets))
    }
}

pub fn read_annotations(path: &Path) -> Result<(Vocabulary, BTreeMap<String, AnnotationSet>)> {
    read_json::<AnnotationFile>(path)?
        .into_sets()
        .map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextCategory {
    pub name: String,
    pub templates: Vec<Vec<f64>>,
}

/// Per-category template embeddings, in vocabulary order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextFile {
    pub version: u32,
    pub dim: usize,
    pub categories: Vec<TextCategory>,
}

impl TextFile {
    /// Fused bank over the whole vocabulary, checked against its names.
    pub fn into_bank(self, vocab: &Vocabulary) -> Result<TextBank> {
        let names: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        if names != vocab.names().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Vocabulary("text embeddings do not follow the annotation vocabulary".into()));
        }
        let templates = self
            .categories
            .iter()
            .map(|c| {
                if c.templates.iter().any(|t| t.len() != self.dim) {
                    return Err(Error::Dimension(format!("template of {} is not {}-dimensional", c.name, self.dim)));
                }
                Tensor2D::from_rows(&c.templates, self.dim)
            })
            .collect::<Result<Vec<_>>>()?;
        fuse_templates((0..vocab.len()).collect(), templates)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub t_s: f64,
    pub t_e: f64,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub videos: BTreeMap<String, Vec<PredictionEntry>>,
}

impl PredictionFile {
    pub fn from_detections(vocab: &Vocabulary, dets: &BTreeMap<String, Vec<Detection>>) -> Self {
        let videos = dets
            .iter()
            .map(|(id, list)| {
                let entries = list
                    .iter()
                    .map(|d| PredictionEntry {
                        t_s: d.interval.t_s,
                        t_e: d.interval.t_e,
                        label: vocab.name(d.category).to_string(),
                        score: d.score,
                    })
                    .collect();
                (id.clone(), entries)
            })
            .collect();
        PredictionFile { videos }
    }

    pub fn into_detections(self, vocab: &Vocabulary) -> Result<BTreeMap<String, Vec<Detection>>> {
        self.videos
            .into_iter()
            .map(|(id, list)| {
                let dets = list
                    .iter()
                    .map(|p| {
                        Ok(Detection {
                            interval: Interval::new(p.t_s, p.t_e)?,
                            category: vocab.id(&p.label)?,
                            score: p.score,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((id, dets))
            })
            .collect()
    }
}

/// Locations of a corpus directory's files.
#[derive(Clone, Debug)]
pub struct CorpusPaths {
    root: std::path::PathBuf,
}

impl CorpusPaths {
    pub fn new(root: impl Into<std::path::PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn annotations(&self, subset: &str) -> std::path::PathBuf {
        self.root.join(format!("{subset}.json"))
    }

    pub fn text(&self) -> std::path::PathBuf {
        self.root.join("text.json")
    }

    pub fn features_dir(&self) -> std::path::PathBuf {
        self.root.join("features")
    }

    pub fn video_features(&self, id: &str) -> std::path::PathBuf {
        self.features_dir().join(format!("{id}.vid.bin"))
    }

    pub fn image_features(&self, id: &str) -> std::path::PathBuf {
        self.features_dir().join(format!("{id}.img.bin"))
    }
}
