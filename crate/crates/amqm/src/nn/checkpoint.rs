//! Checkpoint files: magic "AMQM", version, input dims, class count,
//! layer table, then per-layer weight/bias arrays as 32-bit
//! little-endian reals, closed by a 64-bit FNV-1a checksum of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{ActShape, LayerSpec, ModelConfig, ParamPair, Parameters};
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMQM";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_DROPOUT: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_FC: u8 = 5;
const TAG_SOFTMAX: u8 = 6;

/// Serializes a model to the checkpoint wire format.
pub fn checkpoint_bytes(config: &ModelConfig, params: &Parameters) -> Result<Vec<u8>> {
    config.validate()?;
    if params.layers.len() != config.layers.len() {
        return Err(Error::shape(
            "parameters do not align with the config being saved",
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [
        config.input_channels,
        config.input_height,
        config.input_width,
        config.n_classes,
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(config.layers.len() as u32).to_le_bytes());
    for layer in &config.layers {
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                out.push(TAG_CONV);
                for v in [*out_channels, *kernel, *stride, *pad] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            LayerSpec::Relu => out.push(TAG_RELU),
            LayerSpec::MaxPool2x2 => out.push(TAG_POOL),
            LayerSpec::Dropout { rate } => {
                out.push(TAG_DROPOUT);
                out.extend_from_slice(&rate.to_le_bytes());
            }
            LayerSpec::Flatten => out.push(TAG_FLATTEN),
            LayerSpec::FullyConnected { out_features } => {
                out.push(TAG_FC);
                out.extend_from_slice(&(*out_features as u32).to_le_bytes());
            }
            LayerSpec::Softmax => out.push(TAG_SOFTMAX),
        }
    }
    for (layer, slot) in config.layers.iter().zip(&params.layers) {
        let needs = matches!(
            layer,
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }
        );
        match (needs, slot) {
            (false, None) => {}
            (true, Some(pair)) => {
                for &v in pair.weights.data().iter().chain(pair.bias.data()) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            _ => {
                return Err(Error::shape(
                    "parameter slots do not match the layer table",
                ))
            }
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(config: &ModelConfig, params: &Parameters, path: &Path) -> Result<()> {
    crate::write_atomic(path, &checkpoint_bytes(config, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Parameters)> {
    parse_checkpoint(&fs::read(path)?)
}

/// Parses checkpoint bytes, verifying magic, version, the shape chain,
/// and the trailing checksum. Errors carry the byte offset where parsing
/// stopped.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Parameters)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version_at = r.pos;
    let version = r.u32("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            version_at as u64,
            format!("unsupported format version {version}"),
        ));
    }
    let input_channels = r.u32("input channels")? as usize;
    let input_height = r.u32("input height")? as usize;
    let input_width = r.u32("input width")? as usize;
    let n_classes = r.u32("class count")? as usize;
    let layer_count = r.u32("layer count")? as usize;
    if layer_count > 10_000 {
        return Err(Error::format(
            (r.pos - 4) as u64,
            format!("implausible layer count {layer_count}"),
        ));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag_at = r.pos;
        let tag = r.u8("layer tag")?;
        layers.push(match tag {
            TAG_CONV => LayerSpec::Conv {
                out_channels: r.u32("conv channels")? as usize,
                kernel: r.u32("conv kernel")? as usize,
                stride: r.u32("conv stride")? as usize,
                pad: r.u32("conv pad")? as usize,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_POOL => LayerSpec::MaxPool2x2,
            TAG_DROPOUT => LayerSpec::Dropout {
                rate: r.f64("dropout rate")?,
            },
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_FC => LayerSpec::FullyConnected {
                out_features: r.u32("fc width")? as usize,
            },
            TAG_SOFTMAX => LayerSpec::Softmax,
            other => {
                return Err(Error::format(
                    tag_at as u64,
                    format!("unknown layer tag {other}"),
                ))
            }
        });
    }
    let config = ModelConfig {
        input_channels,
        input_height,
        input_width,
        n_classes,
        layers,
    };
    let shapes = config.shape_chain().map_err(|e| {
        Error::format(r.pos as u64, format!("layer table is inconsistent: {e}"))
    })?;

    let mut param_layers = Vec::with_capacity(config.layers.len());
    for (i, layer) in config.layers.iter().enumerate() {
        param_layers.push(match (layer, shapes[i]) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                },
                ActShape::Map(c_in, _, _),
            ) => Some(ParamPair {
                weights: r.tensor(vec![*out_channels, c_in, *kernel, *kernel], "conv weights")?,
                bias: r.tensor(vec![*out_channels], "conv bias")?,
            }),
            (LayerSpec::FullyConnected { out_features }, ActShape::Flat(n_in)) => {
                Some(ParamPair {
                    weights: r.tensor(vec![*out_features, n_in], "fc weights")?,
                    bias: r.tensor(vec![*out_features], "fc bias")?,
                })
            }
            _ => None,
        });
    }

    let checksum_at = r.pos;
    let stored = r.u64("trailing checksum")?;
    let actual = fnv1a64(&bytes[..checksum_at]);
    if stored != actual {
        return Err(Error::format(
            checksum_at as u64,
            format!("checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"),
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the checksum", bytes.len() - r.pos),
        ));
    }
    Ok((config, Parameters::from_layers(param_layers)))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "file truncated reading {what}: wanted {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        let start = self.pos;
        let raw = self.take(count * 4, what)?;
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::format(
                    (start + i * 4) as u64,
                    format!("non-finite value in {what}"),
                ));
            }
            data.push(v);
        }
        Tensor::new(shape, data)
            .map_err(|e| Error::format(start as u64, format!("bad {what}: {e}")))
    }
}
