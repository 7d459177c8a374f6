//! `SQFM` model checkpoints.
//!
//! ```text
//! "SQFM" | version u32 | ndims u32 | input dims u32.. | layer count u32
//! per layer: tag u8 | hyper count u32 | hypers u32.. | tensor count u32
//!            | per tensor: ndims u32 | dims u32.. | values f64 LE..
//! record count u32 | per record: name (u32 len + UTF-8) | u64 len | payload
//! ```
//!
//! Tags: 0 conv (out_channels, kernel, stride, padding), 1 max-pool (window,
//! stride), 2 PReLU, 3 fully-connected (out_features). Named records carry opaque
//! payloads such as centers, classifier heads and optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{EmbeddingModel, LayerSpec};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{bail, Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: EmbeddingModel<T>,
    pub records: BTreeMap<String, Vec<u8>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: EmbeddingModel<T>) -> Self {
        Checkpoint {
            model,
            records: BTreeMap::new(),
        }
    }
}

pub(crate) fn write_tensor<T: Scalar>(w: &mut ByteWriter, t: &Tensor<T>) {
    w.u32(t.ndim());
    for &d in t.shape() {
        w.u32(d);
    }
    for &v in t.data() {
        w.f64(v.as_f64());
    }
}

pub(crate) fn read_tensor<T: Scalar>(r: &mut ByteReader) -> Result<Tensor<T>> {
    let ndims = r.u32()?;
    let shape: Vec<usize> = (0..ndims).map(|_| r.u32()).collect::<Result<_>>()?;
    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(len) = len.filter(|&l| l.saturating_mul(8) <= r.remaining()) else {
        bail!(Format, "tensor of shape {shape:?} exceeds the remaining input");
    };
    let data = (0..len).map(|_| r.f64().map(T::lit)).collect::<Result<Vec<T>>>()?;
    Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("bad tensor: {e}")))
}

pub fn checkpoint_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let model = &ckpt.model;
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.u32(model.input_shape().len());
    for &d in model.input_shape() {
        w.u32(d);
    }
    w.u32(model.num_layers());
    for layer in model.layers() {
        let (tag, hypers): (u8, Vec<usize>) = match layer.spec() {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => (0, vec![out_channels, kernel, stride, padding]),
            LayerSpec::MaxPool { window, stride } => (1, vec![window, stride]),
            LayerSpec::PRelu => (2, vec![]),
            LayerSpec::FullyConnected { out_features } => (3, vec![out_features]),
        };
        w.u8(tag);
        w.u32(hypers.len());
        for h in hypers {
            w.u32(h);
        }
        let params = layer.params();
        w.u32(params.len());
        for p in params {
            write_tensor(&mut w, p);
        }
    }
    w.u32(ckpt.records.len());
    for (name, payload) in &ckpt.records {
        w.str(name);
        w.u64(payload.len() as u64);
        w.bytes(payload);
    }
    w.into_inner()
}

fn hypers_for(tag: u8, h: &[usize]) -> Result<LayerSpec> {
    Ok(match (tag, h) {
        (0, &[out_channels, kernel, stride, padding]) => LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        },
        (1, &[window, stride]) => LayerSpec::MaxPool { window, stride },
        (2, &[]) => LayerSpec::PRelu,
        (3, &[out_features]) => LayerSpec::FullyConnected { out_features },
        _ => bail!(Format, "unknown layer tag {tag} with {} parameters", h.len()),
    })
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        bail!(Format, "not an SQFM checkpoint");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        bail!(Format, "unsupported SQFM version {version}");
    }
    let ndims = r.u32()?;
    let input_shape: Vec<usize> = (0..ndims).map(|_| r.u32()).collect::<Result<_>>()?;
    let count = r.u32()?;
    let mut specs = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let tag = r.u8()?;
        let nh = r.u32()?;
        let hypers: Vec<usize> = (0..nh.min(8)).map(|_| r.u32()).collect::<Result<_>>()?;
        if nh > 8 {
            bail!(Format, "layer with {nh} hyperparameters");
        }
        specs.push(hypers_for(tag, &hypers)?);
        let nt = r.u32()?;
        for _ in 0..nt {
            tensors.push(read_tensor::<T>(&mut r)?);
        }
    }
    // Rebuild the geometry, then overwrite every parameter from the file.
    let mut model = EmbeddingModel::new(&input_shape, &specs, super::WeightInit::Xavier, &mut Rng::new(0))
        .map_err(|e| Error::Format(format!("invalid architecture: {e}")))?;
    model
        .set_params(tensors)
        .map_err(|e| Error::Format(format!("parameters do not fit architecture: {e}")))?;

    let nrec = r.u32()?;
    let mut records = BTreeMap::new();
    for _ in 0..nrec {
        let name = r.str()?;
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| Error::Format("record too large".into()))?;
        let payload = r.take(len)?.to_vec();
        if records.insert(name.clone(), payload).is_some() {
            bail!(Format, "duplicate record {name:?}");
        }
    }
    r.finish()?;
    Ok(Checkpoint { model, records })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
