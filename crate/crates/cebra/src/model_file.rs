//! Model files: magic `CBRM`, `u32` version, `u64` header length, a JSON
//! header describing every encoder (architecture, seed, layer list, parameter
//! shapes), then all parameters as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use cebra_core::encoder::{ArchSpec, Architecture, EncoderModel};
use cebra_core::tensor::{LayerKind, LayerSpec, Tensor};
use cebra_core::trainer::model_id;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CBRM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub version: u32,
    pub model_id: String,
    pub encoders: Vec<EncoderHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHeader {
    pub architecture: String,
    pub receptive_field: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub normalize_output: bool,
    pub seed: u64,
    pub layers: Vec<LayerHeader>,
    /// Shapes of each layer's parameter tensors.
    pub params: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub kind: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub skip_span: usize,
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Linear => "linear",
        LayerKind::Conv1d => "conv1d",
        LayerKind::Gelu => "gelu",
        LayerKind::SkipAdd => "skip_add",
        LayerKind::L2Normalize => "l2_normalize",
        LayerKind::DownsampleConv => "downsample_conv",
    }
}

fn layer_header(l: &LayerSpec) -> LayerHeader {
    LayerHeader {
        kind: kind_name(l.kind).into(),
        in_dim: l.in_dim,
        out_dim: l.out_dim,
        kernel_size: l.kernel_size,
        stride: l.stride,
        skip_span: l.skip_span,
    }
}

pub fn header(encoders: &[EncoderModel]) -> ModelHeader {
    ModelHeader {
        version: VERSION,
        model_id: model_id(encoders),
        encoders: encoders
            .iter()
            .map(|e| {
                let a = e.arch();
                EncoderHeader {
                    architecture: a.architecture.name().into(),
                    receptive_field: a.receptive_field(),
                    input_dim: a.input_dim,
                    hidden_dim: a.hidden_dim,
                    output_dim: a.output_dim,
                    normalize_output: a.normalize_output,
                    seed: e.seed(),
                    layers: e.layers().iter().map(layer_header).collect(),
                    params: e
                        .params()
                        .iter()
                        .map(|g| g.iter().map(|t| t.shape().to_vec()).collect())
                        .collect(),
                }
            })
            .collect(),
    }
}

pub fn encode(encoders: &[EncoderModel]) -> Vec<u8> {
    let json = serde_json::to_vec_pretty(&header(encoders)).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in encoders {
        for t in e.params().iter().flatten() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<EncoderModel>> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a model file (missing CBRM magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported model version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size".into()))?;
    let head: ModelHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(format!("model header: {e}")))?;
    if head.encoders.is_empty() {
        return Err(bad("model holds no encoders".into()));
    }
    let mut blob = bytes[end..].chunks_exact(8);
    if bytes[end..].len() % 8 != 0 {
        return Err(bad("parameter blob is not a whole number of f64 values".into()));
    }
    let mut encoders = Vec::with_capacity(head.encoders.len());
    for (i, eh) in head.encoders.iter().enumerate() {
        let architecture = Architecture::from_name(&eh.architecture).map_err(|e| bad(format!("encoder {i}: {e}")))?;
        let arch = ArchSpec {
            architecture,
            input_dim: eh.input_dim,
            hidden_dim: eh.hidden_dim,
            output_dim: eh.output_dim,
            normalize_output: eh.normalize_output,
        };
        let mut params = Vec::with_capacity(eh.params.len());
        for shapes in &eh.params {
            let mut group = Vec::with_capacity(shapes.len());
            for shape in shapes {
                let count: usize = shape.iter().product();
                let data: Vec<f64> = blob
                    .by_ref()
                    .take(count)
                    .map(|w| f64::from_le_bytes(w.try_into().unwrap()))
                    .collect();
                if data.len() != count {
                    return Err(bad(format!("encoder {i}: parameter blob ends early")));
                }
                group.push(Tensor::new(shape.clone(), data).map_err(|e| bad(format!("encoder {i}: {e}")))?);
            }
            params.push(group);
        }
        let model = EncoderModel::from_parts(arch, eh.seed, params).map_err(|e| bad(format!("encoder {i}: {e}")))?;
        let layers: Vec<LayerHeader> = model.layers().iter().map(layer_header).collect();
        if layers != eh.layers {
            return Err(bad(format!("encoder {i}: layer list does not match architecture {}", eh.architecture)));
        }
        encoders.push(model);
    }
    if blob.next().is_some() {
        return Err(bad("trailing bytes after the parameter blob".into()));
    }
    if model_id(&encoders) != head.model_id {
        return Err(bad("parameters do not match the recorded model id".into()));
    }
    Ok(encoders)
}

pub fn write_model(encoders: &[EncoderModel], path: &Path) -> Result<()> {
    fs::write(path, encode(encoders)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<Vec<EncoderModel>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
