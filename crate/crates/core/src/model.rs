//! Temporal feature pyramid, the three per-position heads, and the projection layer.
//!
//! The backbone is a plain convolutional pyramid: level 0 is a stride-1 conv over
//! the video features, each further level halves the length with a stride-2 conv.
//! The localizer, base classifier and presence heads share their input but not
//! their weights; each head is applied to every level with the same weights.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geometry::{OnsetOffset, PyramidLayout};
use crate::numerics::{ConvSpec, Graph, NodeId, Tensor2D};

/// Classifier and presence output biases start at `ln(0.1 / 0.9)`.
pub const PRIOR_BIAS: f64 = -2.19;
pub const NORM_EPS: f64 = 1e-12;

const HEAD_CONV: ConvSpec = ConvSpec::new(3, 1, 1);
const HEAD_OUT: ConvSpec = ConvSpec::new(1, 1, 0);
const DOWNSAMPLE: ConvSpec = ConvSpec::new(3, 2, 1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_vid: usize,
    pub d_fpn: usize,
    pub d_img: usize,
    pub d_text: usize,
    pub levels: usize,
    pub strides: Vec<usize>,
    pub n_base: usize,
    pub head_width: usize,
    pub proj_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with pyramid strides `1, 2, 4, ...` and head widths equal to `d_fpn`.
    pub fn new(d_vid: usize, d_fpn: usize, d_img: usize, levels: usize, n_base: usize, seed: u64) -> Self {
        Self {
            d_vid,
            d_fpn,
            d_img,
            d_text: d_img,
            levels,
            strides: (0..levels).map(|l| 1 << l).collect(),
            n_base,
            head_width: d_fpn,
            proj_hidden: d_img,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_vid, self.d_fpn, self.d_img, self.d_text, self.n_base, self.head_width, self.proj_hidden];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.d_img != self.d_text {
            return Err(Error::Config(format!("image dim {} differs from text dim {}", self.d_img, self.d_text)));
        }
        if self.levels == 0 || self.strides.len() != self.levels {
            return Err(Error::Config(format!("{} levels with strides {:?}", self.levels, self.strides)));
        }
        if self.strides[0] != 1 || self.strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "strides must start at 1 and double per level, got {:?}",
                self.strides
            )));
        }
        Ok(())
    }

    /// Per-level lengths for a `t_vid`-row input.
    pub fn level_lengths(&self, t_vid: usize) -> Result<Vec<usize>> {
        let min = 1usize << (self.levels - 1);
        if t_vid < min {
            return Err(Error::Config(format!("{t_vid} snippets are too few for {} pyramid levels", self.levels)));
        }
        let mut lens = vec![t_vid];
        for _ in 1..self.levels {
            let prev = *lens.last().unwrap();
            lens.push(DOWNSAMPLE.output_len(prev)?);
        }
        Ok(lens)
    }

    pub fn layout(&self, t_vid: usize, snippet_sec: f64) -> Result<PyramidLayout> {
        PyramidLayout::new(self.level_lengths(t_vid)?, self.strides.clone(), snippet_sec)
    }

    /// Shapes of every parameter tensor, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            let din = if l == 0 { self.d_vid } else { self.d_fpn };
            out.push((format!("backbone.{l}.weight"), 3 * din, self.d_fpn));
            out.push((format!("backbone.{l}.bias"), 1, self.d_fpn));
        }
        let w = self.head_width;
        for (head, n_out) in [("loc", 2), ("cls", self.n_base), ("aps", 1)] {
            out.push((format!("{head}.conv1.weight"), 3 * self.d_fpn, w));
            out.push((format!("{head}.conv1.bias"), 1, w));
            out.push((format!("{head}.conv2.weight"), 3 * w, w));
            out.push((format!("{head}.conv2.bias"), 1, w));
            out.push((format!("{head}.out.weight"), w, n_out));
            out.push((format!("{head}.out.bias"), 1, n_out));
        }
        out.push(("proj.fc1.weight".into(), self.d_img, self.proj_hidden));
        out.push(("proj.fc1.bias".into(), 1, self.proj_hidden));
        out.push(("proj.fc2.weight".into(), self.proj_hidden, self.d_img));
        out.push(("proj.fc2.bias".into(), 1, self.d_img));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, r, c)| r * c).sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(&json));
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor2D)>,
}

impl ModelParams {
    /// Uniform weights in `±sqrt(1 / fan_in)`, zero biases, prior bias on the
    /// classifier and presence outputs.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let t = if name.ends_with(".weight") {
                    let bound = (1.0 / rows as f64).sqrt();
                    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor2D::from_vec(rows, cols, data).expect("shape")
                } else if name == "cls.out.bias" || name == "aps.out.bias" {
                    Tensor2D::filled(rows, cols, PRIOR_BIAS)
                } else {
                    Tensor2D::zeros(rows, cols)
                };
                (name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn from_entries(config: &ModelConfig, entries: Vec<(String, Tensor2D)>) -> Result<Self> {
        let shapes = config.param_shapes();
        if shapes.len() != entries.len() {
            return Err(Error::Dimension(format!("{} tensors for {} parameters", entries.len(), shapes.len())));
        }
        for ((name, r, c), (n, t)) in shapes.iter().zip(&entries) {
            if name != n || t.shape() != (*r, *c) {
                return Err(Error::Dimension(format!(
                    "parameter {n} {:?} does not match expected {name} ({r}, {c})",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NumericalInstability(format!("parameter {n} has non-finite entries")));
            }
        }
        Ok(Self { entries })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor2D)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds every tensor to `graph`, trainable or frozen.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> ParamNodes {
        let ids = self
            .entries
            .iter()
            .map(|(n, t)| {
                let id = if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) };
                (n.clone(), id)
            })
            .collect();
        ParamNodes { ids }
    }
}

/// Graph node of each registered parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    ids: HashMap<String, NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| Error::Contract(format!("parameter {name} not registered")))
    }

    pub fn name_of(&self, id: NodeId) -> Option<&str> {
        self.ids.iter().find(|(_, v)| **v == id).map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Pyramid levels from `f_vid`. Level 0 keeps the input length.
pub fn backbone_forward(
    graph: &mut Graph,
    params: &ParamNodes,
    f_vid: NodeId,
    config: &ModelConfig,
) -> Result<Vec<NodeId>> {
    let (t_vid, d) = graph.value(f_vid).shape();
    if d != config.d_vid {
        return Err(Error::Dimension(format!("video features have {d} columns, model expects {}", config.d_vid)));
    }
    config.level_lengths(t_vid)?;
    let mut levels = Vec::with_capacity(config.levels);
    let mut x = f_vid;
    for l in 0..config.levels {
        let spec = if l == 0 { HEAD_CONV } else { DOWNSAMPLE };
        let w = params.id(&format!("backbone.{l}.weight"))?;
        let b = params.id(&format!("backbone.{l}.bias"))?;
        let c = graph.conv1d(x, w, b, spec)?;
        x = graph.relu(c)?;
        levels.push(x);
    }
    Ok(levels)
}

/// Graph nodes of the three head outputs, rows concatenated over levels.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `T_fpn x 2`, rectified.
    pub onset_offset: NodeId,
    /// `T_fpn x n_base`, sigmoid.
    pub p_base: NodeId,
    /// `T_fpn x 1`, sigmoid.
    pub p_aps: NodeId,
}

fn head(graph: &mut Graph, params: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
    let p = |s: &str| params.id(&format!("{name}.{s}"));
    let h = graph.conv1d(x, p("conv1.weight")?, p("conv1.bias")?, HEAD_CONV)?;
    let h = graph.relu(h)?;
    let h = graph.conv1d(h, p("conv2.weight")?, p("conv2.bias")?, HEAD_CONV)?;
    let h = graph.relu(h)?;
    graph.conv1d(h, p("out.weight")?, p("out.bias")?, HEAD_OUT)
}

pub fn heads_forward(graph: &mut Graph, params: &ParamNodes, levels: &[NodeId], config: &ModelConfig) -> Result<HeadNodes> {
    for &l in levels {
        if graph.value(l).cols() != config.d_fpn {
            return Err(Error::Dimension(format!(
                "pyramid level has {} columns, heads expect {}",
                graph.value(l).cols(),
                config.d_fpn
            )));
        }
    }
    let mut run = |name: &str| -> Result<NodeId> {
        let outs = levels.iter().map(|&l| head(graph, params, name, l)).collect::<Result<Vec<_>>>()?;
        graph.concat_rows(&outs)
    };
    let loc = run("loc")?;
    let cls = run("cls")?;
    let aps = run("aps")?;
    Ok(HeadNodes {
        onset_offset: graph.relu(loc)?,
        p_base: graph.sigmoid(cls)?,
        p_aps: graph.sigmoid(aps)?,
    })
}

/// affine → rectifier → affine, then unit-norm rows.
pub fn proj_forward(graph: &mut Graph, params: &ParamNodes, f_np: NodeId) -> Result<NodeId> {
    let h = graph.affine(f_np, params.id("proj.fc1.weight")?, params.id("proj.fc1.bias")?)?;
    let h = graph.relu(h)?;
    let y = graph.affine(h, params.id("proj.fc2.weight")?, params.id("proj.fc2.bias")?)?;
    graph.normalize_rows(y, NORM_EPS)
}

/// Head outputs copied out of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadsOutput {
    pub onset_offset: Vec<OnsetOffset>,
    pub p_base: Tensor2D,
    pub p_aps: Vec<f64>,
}

impl HeadsOutput {
    pub fn read(graph: &Graph, nodes: &HeadNodes) -> Self {
        let oo = graph.value(nodes.onset_offset);
        Self {
            onset_offset: oo.iter_rows().map(|r| OnsetOffset { d_on: r[0], d_off: r[1] }).collect(),
            p_base: graph.value(nodes.p_base).clone(),
            p_aps: graph.value(nodes.p_aps).data().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.p_aps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_aps.is_empty()
    }
}

/// Config and parameters together, for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    /// Runs backbone and heads on one video.
    pub fn heads(&self, f_vid: &FeatureMatrix) -> Result<(HeadsOutput, PyramidLayout)> {
        let mut g = Graph::new();
        let nodes = self.params.register(&mut g, false);
        let x = g.constant(f_vid.values.clone());
        let levels = backbone_forward(&mut g, &nodes, x, &self.config)?;
        let heads = heads_forward(&mut g, &nodes, &levels, &self.config)?;
        let layout = self.config.layout(f_vid.len(), f_vid.row_sec())?;
        Ok((HeadsOutput::read(&g, &heads), layout))
    }

    /// Projects pooled proposal features into the text space.
    pub fn project(&self, f_np: &Tensor2D) -> Result<Tensor2D> {
        if f_np.cols() != self.config.d_img {
            return Err(Error::Dimension(format!(
                "proposal features have {} columns, projection expects {}",
                f_np.cols(),
                self.config.d_img
            )));
        }
        let mut g = Graph::new();
        let nodes = self.params.register(&mut g, false);
        let x = g.constant(f_np.clone());
        let y = proj_forward(&mut g, &nodes, x)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(self);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes).map_err(|reason| Error::Format { path: path.into(), reason })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OVTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout, all integers little-endian:
/// magic, u32 version, 32-byte config digest, u32 + config JSON,
/// u32 tensor count, then per tensor u32 + name, u32 rows, u32 cols, f64 payload.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = Vec::with_capacity(64 + json.len() + model.params.scalar_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.digest());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(|e| e.to_string())?;
    let json_len = read_u32(&mut r)? as usize;
    let json = take(&mut r, json_len)?;
    let config: ModelConfig = serde_json::from_slice(json).map_err(|e| e.to_string())?;
    if config.digest() != digest {
        return Err("config digest mismatch".into());
    }
    let n = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(take(&mut r, name_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let payload = take(&mut r, rows * cols * 8)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor2D::from_vec(rows, cols, data).map_err(|e| e.to_string())?));
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", r.len()));
    }
    let params = ModelParams::from_entries(&config, entries).map_err(|e| e.to_string())?;
    Ok(Model { config, params })
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err(format!("truncated: wanted {n} bytes, {} left", r.len()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
