//! Model directories: `manifest.json` plus one headerless little-endian file
//! per tensor (`<name>.f32bin` or `<name>.i8bin`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitlower::{ExtractionPlan, LayerShifts};
use crate::error::{Error, Result};
use crate::kernels::{default_groups, ActScales, FeatureGroup};
use crate::layout::ChannelPermutation;
use crate::netsim::graph::{LayerQuant, MatmulKind, MatmulLayer, NetworkGraph, Op, QuantConfig, RatioBoundary, Selection};
use crate::qtensor::{Axes, ChannelRange, FloatTensor};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = read_bin(path, expected * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_i8(path: &Path, data: &[i8]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_i8(path: &Path, expected: usize) -> Result<Vec<i8>> {
    Ok(read_bin(path, expected)?.into_iter().map(|b| b as i8).collect())
}

fn read_bin(path: &Path, expected_bytes: usize) -> Result<Vec<u8>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                stage: "demo",
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() != expected_bytes {
        return Err(Error::Manifest(format!(
            "{} has {} bytes, expected {expected_bytes}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Pretty JSON with a trailing newline. Field order follows the types and
/// maps are ordered, so equal values give equal bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub axes: Axes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantEntry {
    act_range: ChannelRange,
    act_scales: ActScales,
    weight_codes: TensorRef,
    weight_scales: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeEntry {
    name: String,
    input: usize,
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<MatmulKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gather: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub file: String,
    pub count: usize,
    pub sample_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    group_size: usize,
    keep_ends_8bit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantConfig>,
    nodes: Vec<NodeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bit_lowering: Option<ExtractionPlan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    selections: Vec<Selection>,
    /// Feature-group order of every matmul whose inputs were permuted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layout: Vec<ChannelPermutation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    ratio_boundaries: Vec<RatioBoundary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    active_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    datasets: BTreeMap<String, DatasetRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FloatTensor>,
    pub labels: Option<Vec<usize>>,
}

/// A network with its named sample sets, as stored in one directory.
#[derive(Debug, Clone)]
pub struct ModelDir {
    pub net: NetworkGraph,
    pub datasets: BTreeMap<String, Dataset>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

impl ModelDir {
    pub fn new(net: NetworkGraph) -> Self {
        ModelDir {
            net,
            datasets: BTreeMap::new(),
        }
    }

    pub fn dataset(&self, name: &str) -> Result<&Dataset> {
        self.datasets.get(name).ok_or_else(|| Error::MissingArtifact {
            artifact: format!("dataset `{name}`"),
            stage: "demo",
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let net = &self.net;
        let mut nodes = Vec::with_capacity(net.nodes.len());
        let mut layout = Vec::new();
        for node in &net.nodes {
            let stem = file_stem(&node.name);
            let mut e = NodeEntry {
                name: node.name.clone(),
                input: node.input,
                op: node.op.kind_name().to_string(),
                conv: None,
                weight: None,
                bias: None,
                quant: None,
                skip: None,
                gather: None,
            };
            match &node.op {
                Op::Matmul(m) => {
                    if matches!(m.kind, MatmulKind::Conv2d { .. }) {
                        e.conv = Some(m.kind);
                    }
                    let w = format!("{stem}.weight.f32bin");
                    write_f32(&dir.join(&w), m.weight.data())?;
                    e.weight = Some(TensorRef { file: w, shape: m.weight.shape().to_vec(), axes: m.weight.axes() });
                    let b = format!("{stem}.bias.f32bin");
                    write_f32(&dir.join(&b), &m.bias)?;
                    e.bias = Some(TensorRef { file: b, shape: vec![m.bias.len()], axes: Axes::default() });
                    if let Some(q) = &m.quant {
                        let c = format!("{stem}.weight.i8bin");
                        write_i8(&dir.join(&c), &q.weight_codes)?;
                        e.quant = Some(QuantEntry {
                            act_range: q.act_range.clone(),
                            act_scales: q.act_scales.clone(),
                            weight_codes: TensorRef { file: c, shape: m.weight.shape().to_vec(), axes: m.weight.axes() },
                            weight_scales: q.weight_scales.clone(),
                        });
                    }
                    let order: Vec<usize> = m.groups.iter().map(|g| g.origin).collect();
                    if order.iter().enumerate().any(|(k, &o)| k != o) {
                        let base = default_groups(m.features(), net.group_size);
                        layout.push(ChannelPermutation::from_group_order(&node.name, &base, order)?);
                    }
                }
                Op::Add { skip } => e.skip = Some(*skip),
                Op::Reorder { gather } => e.gather = Some(gather.clone()),
                Op::Relu | Op::Gelu | Op::GlobalAvgPool => {}
            }
            nodes.push(e);
        }
        let mut datasets = BTreeMap::new();
        for (name, d) in &self.datasets {
            let file = format!("data.{}.f32bin", file_stem(name));
            let sample_shape = d.samples.first().map_or_else(|| net.input_shape.clone(), |s| s.shape().to_vec());
            if d.samples.iter().any(|s| s.shape() != sample_shape.as_slice()) {
                return Err(Error::InvalidConfig(format!("dataset {name} mixes sample shapes")));
            }
            let flat: Vec<f32> = d.samples.iter().flat_map(|s| s.data().iter().copied()).collect();
            write_f32(&dir.join(&file), &flat)?;
            datasets.insert(
                name.clone(),
                DatasetRef { file, count: d.samples.len(), sample_shape, labels: d.labels.clone() },
            );
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            input_shape: net.input_shape.clone(),
            group_size: net.group_size,
            keep_ends_8bit: net.keep_ends_8bit,
            input_order: net.input_order.clone(),
            quant: net.quant,
            nodes,
            bit_lowering: net.extraction_plan(),
            selections: net.selections.clone(),
            layout,
            ratio_boundaries: net.boundaries.clone(),
            active_ratio: net.active_ratio,
            datasets,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                stage: "demo",
            });
        }
        let m: Manifest = read_json(&path)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!("unsupported format version {}", m.format_version)));
        }
        let layout: BTreeMap<&str, &ChannelPermutation> = m.layout.iter().map(|p| (p.layer.as_str(), p)).collect();
        let mut shifts = m.bit_lowering.as_ref().map(|p| p.layers.iter());

        let mut net = NetworkGraph::new(m.input_shape.clone(), m.group_size);
        net.keep_ends_8bit = m.keep_ends_8bit;
        net.input_order = m.input_order.clone();
        for e in &m.nodes {
            let op = match e.op.as_str() {
                "linear" | "conv2d" => {
                    let layer = load_matmul(dir, e, m.group_size, layout.get(e.name.as_str()).copied())?;
                    let layer = match (layer, shifts.as_mut()) {
                        (mut l, Some(it)) if l.quant.is_some() => {
                            let s: &LayerShifts = it
                                .next()
                                .ok_or_else(|| Error::Manifest("bit_lowering has too few layers".into()))?;
                            l.quant.as_mut().expect("checked").shifts = s.clone();
                            l.refresh_nibbles();
                            l
                        }
                        (l, _) => l,
                    };
                    Op::Matmul(layer)
                }
                "relu" => Op::Relu,
                "gelu" => Op::Gelu,
                "global_avg_pool" => Op::GlobalAvgPool,
                "add" => Op::Add {
                    skip: e.skip.ok_or_else(|| Error::Manifest(format!("add node {} has no skip", e.name)))?,
                },
                "reorder" => Op::Reorder {
                    gather: e.gather.clone().ok_or_else(|| Error::Manifest(format!("reorder node {} has no gather", e.name)))?,
                },
                other => return Err(Error::Manifest(format!("unknown op `{other}`"))),
            };
            net.push_from(e.name.clone(), e.input, op);
        }
        net.quant = m.quant;
        if net.quant.is_some() && !net.is_quantized() {
            return Err(Error::Manifest("quant config present but some layers lack quantized state".into()));
        }
        net.selections = m.selections.clone();
        net.boundaries = m.ratio_boundaries.clone();
        net.active_ratio = m.active_ratio;
        net.validate()?;

        let mut datasets = BTreeMap::new();
        for (name, d) in &m.datasets {
            let n: usize = d.sample_shape.iter().product();
            let flat = read_f32(&dir.join(&d.file), n * d.count)?;
            let samples = flat
                .chunks(n.max(1))
                .take(d.count)
                .map(|c| FloatTensor::new(d.sample_shape.clone(), c.to_vec(), Axes::activation()))
                .collect::<Result<Vec<_>>>()?;
            if d.labels.as_ref().is_some_and(|l| l.len() != d.count) {
                return Err(Error::Manifest(format!("dataset {name} label count mismatch")));
            }
            datasets.insert(name.clone(), Dataset { samples, labels: d.labels.clone() });
        }
        Ok(ModelDir { net, datasets })
    }
}

fn load_matmul(dir: &Path, e: &NodeEntry, group_size: usize, perm: Option<&ChannelPermutation>) -> Result<MatmulLayer> {
    let missing = |what: &str| Error::Manifest(format!("matmul node {} has no {what}", e.name));
    let wr = e.weight.as_ref().ok_or_else(|| missing("weight"))?;
    let br = e.bias.as_ref().ok_or_else(|| missing("bias"))?;
    let n: usize = wr.shape.iter().product();
    let weight = FloatTensor::new(wr.shape.clone(), read_f32(&dir.join(&wr.file), n)?, wr.axes)?;
    let bias = read_f32(&dir.join(&br.file), wr.shape[0])?;
    let kind = match (e.op.as_str(), e.conv) {
        ("linear", _) => MatmulKind::Linear,
        (_, Some(k @ MatmulKind::Conv2d { .. })) => k,
        _ => return Err(missing("conv geometry")),
    };
    // Validates shapes against the kind before groups are replaced.
    let mut layer = MatmulLayer::new(kind, weight, bias, group_size)?;
    if let Some(p) = perm {
        let base = default_groups(layer.features(), group_size);
        let mut start = 0;
        let groups: Vec<FeatureGroup> = p
            .group_order
            .iter()
            .map(|&gi| {
                let g = base.get(gi).map(|b| FeatureGroup { start, len: b.len, origin: b.origin });
                start += g.map_or(0, |g| g.len);
                g
            })
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Manifest(format!("layout of {} names an unknown group", e.name)))?;
        if ChannelPermutation::from_group_order(&e.name, &base, p.group_order.clone())? != *p {
            return Err(Error::Manifest(format!("layout of {} is inconsistent", e.name)));
        }
        layer = MatmulLayer::with_groups(layer.kind, layer.weight, layer.bias, groups);
    }
    if let Some(q) = &e.quant {
        let codes = read_i8(&dir.join(&q.weight_codes.file), n)?;
        if q.weight_scales.len() != layer.outputs() || q.act_range.channels() != layer.features() {
            return Err(Error::Manifest(format!("quantized state of {} has wrong sizes", e.name)));
        }
        if let ActScales::PerGroup(v) = &q.act_scales {
            if v.len() != layer.groups.len() {
                return Err(Error::Manifest(format!("activation scales of {} have wrong length", e.name)));
            }
        }
        layer.quant = Some(LayerQuant {
            act_range: q.act_range.clone(),
            act_scales: q.act_scales.clone(),
            weight_codes: codes,
            weight_scales: q.weight_scales.clone(),
            shifts: LayerShifts::naive(&e.name, layer.groups.len(), layer.outputs()),
            nibbles: Vec::new(),
        });
        layer.refresh_nibbles();
    }
    Ok(layer)
}

/// Output directory: explicit flag, then `MIXQ_OUT_DIR`, then `./mixq-out`.
pub fn default_out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("MIXQ_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mixq-out"))
}
