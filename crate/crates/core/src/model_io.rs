//! Model serialization (`.ifm`), parameter counting, and run manifests.
//!
//! An `.ifm` file is an ASCII decimal header byte-length plus `'\n'`, a
//! newline-terminated UTF-8 JSON header describing nodes/edges/shapes, and a
//! raw little-endian f32 payload holding every parameter tensor in header
//! declaration order. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, ModelGraph, NodeId, Param};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_shape: Vec<usize>,
    inputs: Vec<NodeId>,
    output: NodeId,
    edges: Vec<(NodeId, NodeId)>,
    nodes: Vec<NodeHeader>,
    params: Vec<ParamHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeHeader {
    id: NodeId,
    kind: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    node: NodeId,
    name: String,
    shape: Vec<usize>,
    byte_len: usize,
}

/// Parameter tensors of a node in payload declaration order.
pub fn node_params(kind: &LayerKind) -> Vec<(Param, &Tensor)> {
    match kind {
        LayerKind::Linear { weight, bias, .. } => {
            let mut v = vec![(Param::Weight, weight)];
            if let Some(b) = bias {
                v.push((Param::Bias, b));
            }
            v
        }
        LayerKind::Conv2d { weight, bias, .. } => {
            vec![(Param::Weight, weight), (Param::Bias, bias)]
        }
        LayerKind::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => vec![
            (Param::Gamma, gamma),
            (Param::Beta, beta),
            (Param::RunningMean, running_mean),
            (Param::RunningVar, running_var),
        ],
        _ => vec![],
    }
}

pub fn node_params_mut(kind: &mut LayerKind) -> Vec<(Param, &mut Tensor)> {
    match kind {
        LayerKind::Linear { weight, bias, .. } => {
            let mut v = vec![(Param::Weight, weight)];
            if let Some(b) = bias {
                v.push((Param::Bias, b));
            }
            v
        }
        LayerKind::Conv2d { weight, bias, .. } => {
            vec![(Param::Weight, weight), (Param::Bias, bias)]
        }
        LayerKind::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => vec![
            (Param::Gamma, gamma),
            (Param::Beta, beta),
            (Param::RunningMean, running_mean),
            (Param::RunningVar, running_var),
        ],
        _ => vec![],
    }
}

fn kind_header(kind: &LayerKind) -> (String, BTreeMap<String, f64>) {
    let mut attrs = BTreeMap::new();
    match kind {
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
            ..
        } => {
            attrs.insert("in_features".into(), *in_features as f64);
            attrs.insert("out_features".into(), *out_features as f64);
            attrs.insert("bias".into(), if bias.is_some() { 1.0 } else { 0.0 });
        }
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            ..
        } => {
            attrs.insert("in_ch".into(), *in_ch as f64);
            attrs.insert("out_ch".into(), *out_ch as f64);
            attrs.insert("kernel".into(), *kernel as f64);
            attrs.insert("stride".into(), *stride as f64);
            attrs.insert("padding".into(), *padding as f64);
        }
        LayerKind::BatchNorm {
            channels, epsilon, ..
        } => {
            attrs.insert("channels".into(), *channels as f64);
            attrs.insert("epsilon".into(), *epsilon as f64);
        }
        LayerKind::AvgPool { window } | LayerKind::MaxPool { window } => {
            attrs.insert("window".into(), *window as f64);
        }
        _ => {}
    }
    (kind.name().to_string(), attrs)
}

fn kind_from_header(h: &NodeHeader) -> Result<LayerKind> {
    let get = |k: &str| -> Result<usize> {
        h.attrs
            .get(k)
            .map(|v| *v as usize)
            .ok_or_else(|| Error::Format(format!("node {}: missing attr '{k}'", h.id)))
    };
    Ok(match h.kind.as_str() {
        "linear" => {
            let (inf, outf) = (get("in_features")?, get("out_features")?);
            LayerKind::Linear {
                in_features: inf,
                out_features: outf,
                weight: Tensor::zeros(vec![outf, inf]),
                bias: (get("bias")? == 1).then(|| Tensor::zeros(vec![outf])),
            }
        }
        "conv2d" => {
            let (ic, oc, k) = (get("in_ch")?, get("out_ch")?, get("kernel")?);
            LayerKind::Conv2d {
                in_ch: ic,
                out_ch: oc,
                kernel: k,
                stride: get("stride")?,
                padding: get("padding")?,
                weight: Tensor::zeros(vec![oc, ic, k, k]),
                bias: Tensor::zeros(vec![oc]),
            }
        }
        "batchnorm" => {
            let c = get("channels")?;
            let eps = h
                .attrs
                .get("epsilon")
                .copied()
                .ok_or_else(|| Error::Format(format!("node {}: missing epsilon", h.id)))?;
            LayerKind::BatchNorm {
                channels: c,
                gamma: Tensor::zeros(vec![c]),
                beta: Tensor::zeros(vec![c]),
                running_mean: Tensor::zeros(vec![c]),
                running_var: Tensor::zeros(vec![c]),
                epsilon: eps as f32,
            }
        }
        "relu" => LayerKind::ReLU,
        "add" => LayerKind::Add,
        "avgpool" => LayerKind::AvgPool { window: get("window")? },
        "maxpool" => LayerKind::MaxPool { window: get("window")? },
        "flatten" => LayerKind::Flatten,
        other => return Err(Error::Format(format!("unknown layer kind '{other}'"))),
    })
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    for node in &model.nodes {
        for (p, t) in node_params(&node.kind) {
            params.push(ParamHeader {
                node: node.id,
                name: p.name().to_string(),
                shape: t.shape().to_vec(),
                byte_len: t.len() * 4,
            });
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        input_shape: model.input_shape.clone(),
        inputs: model.inputs.clone(),
        output: model.output,
        edges: model.edges.clone(),
        nodes: model
            .nodes
            .iter()
            .map(|n| {
                let (kind, attrs) = kind_header(&n.kind);
                NodeHeader { id: n.id, kind, attrs }
            })
            .collect(),
        params,
    };
    let mut json = serde_json::to_string(&header)?;
    json.push('\n');
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{}\n", json.len())?;
    w.write_all(json.as_bytes())?;
    for node in &model.nodes {
        for (_, t) in node_params(&node.kind) {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| Error::Format("truncated header length".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        len_line.push(byte[0]);
    }
    let header_len: usize = std::str::from_utf8(&len_line)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("invalid header length prefix".into()))?;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for nh in &header.nodes {
        nodes.push(LayerNode {
            id: nh.id,
            kind: kind_from_header(nh)?,
        });
    }
    let mut model = ModelGraph {
        nodes,
        edges: header.edges,
        inputs: header.inputs,
        output: header.output,
        input_shape: header.input_shape,
    };
    // payload, in header declaration order
    let mut cursor = 0usize;
    for ph in &header.params {
        let elems: usize = ph.shape.iter().product();
        if ph.byte_len != elems * 4 {
            return Err(Error::Format(format!(
                "param {}/{}: byte length {} disagrees with shape {:?}",
                ph.node, ph.name, ph.byte_len, ph.shape
            )));
        }
        let mut buf = vec![0u8; ph.byte_len];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated payload at {}/{}", ph.node, ph.name)))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let node = model
            .nodes
            .get_mut(ph.node)
            .ok_or_else(|| Error::Format(format!("param for unknown node {}", ph.node)))?;
        let slot = node_params_mut(&mut node.kind)
            .into_iter()
            .find(|(p, _)| p.name() == ph.name)
            .ok_or_else(|| {
                Error::Format(format!("node {} has no param '{}'", ph.node, ph.name))
            })?
            .1;
        if slot.shape() != ph.shape.as_slice() {
            return Err(Error::Format(format!(
                "param {}/{}: shape {:?} disagrees with node declaration {:?}",
                ph.node,
                ph.name,
                ph.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::new(ph.shape.clone(), data)?;
        cursor += ph.byte_len;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format(format!(
            "payload longer than declared ({cursor} bytes expected)"
        )));
    }
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_layer: BTreeMap<NodeId, usize>,
}

/// Counts every weight, bias, and BN affine/statistic entry exactly once.
pub fn count_params(model: &ModelGraph) -> ParamCount {
    let mut per_layer = BTreeMap::new();
    let mut total = 0;
    for node in &model.nodes {
        let n: usize = node_params(&node.kind).iter().map(|(_, t)| t.len()).sum();
        if n > 0 {
            per_layer.insert(node.id, n);
        }
        total += n;
    }
    ParamCount { total, per_layer }
}

/// FNV-1a over a file's raw bytes, for run manifests.
pub fn file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    pub dataset_hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}
