use std::fs;
use std::path::Path;

use super::{Dataset, LabelSpace, Source};
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Pixel bytes map to `(v - 127.5) / 128`, so 0 -> -0.99609375 and 255 -> 0.99609375.
fn normalize(v: u8) -> f64 {
    (v as f64 - 127.5) / 128.0
}

fn denormalize(v: f64) -> Result<u8> {
    let raw = v * 128.0 + 127.5;
    let byte = raw.round();
    if (raw - byte).abs() > 1e-6 || !(0.0..=255.0).contains(&byte) {
        bail!(Format, "value {v} does not correspond to a pixel byte");
    }
    Ok(byte as u8)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        bail!(
            Format,
            "bad {what} magic number {found:#010x}, expected {magic:#010x}"
        );
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let offset = 4 + 4 * ndim;
    let payload: usize = dims.iter().product();
    if bytes.len() != offset + payload {
        bail!(
            Format,
            "{what} payload is {} bytes, header declares {payload}",
            bytes.len() - offset.min(bytes.len())
        );
    }
    Ok((dims, offset))
}

/// Parses in-memory IDX image and label files into an identity-only dataset.
///
/// The label space has `max_label + 1` identity classes (10 for MNIST).
pub fn parse_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let (idims, ioff) = header(images, IDX_IMAGES_MAGIC, "image file")?;
    let (ldims, loff) = header(labels, IDX_LABELS_MAGIC, "label file")?;
    let (count, rows, cols) = (idims[0], idims[1], idims[2]);
    if ldims[0] != count {
        bail!(
            Consistency,
            "image file holds {count} samples but label file holds {}",
            ldims[0]
        );
    }
    let label_bytes = &labels[loff..];
    let classes = label_bytes.iter().copied().max().map_or(1, |m| m as usize + 1);
    let mut ds = Dataset::empty(&[rows, cols, 1], LabelSpace::new(classes, 0)?);
    let pixels = rows * cols;
    ds.images.reserve(count * pixels);
    for (i, &label) in label_bytes.iter().enumerate() {
        let raw = &images[ioff + i * pixels..ioff + (i + 1) * pixels];
        ds.images.extend(raw.iter().map(|&b| T::lit(normalize(b))));
        ds.labels.push(label as usize);
        ds.sources.push(Source::Identity);
        ds.true_classes.push(label as usize);
    }
    Ok(ds)
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

/// Serializes an `H x W x 1` dataset back to IDX image and label bytes.
///
/// Inverts the pixel normalization exactly; labels are the stored class labels.
pub fn idx_bytes<T: Scalar>(ds: &Dataset<T>) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds.sample_shape();
    if shape.len() != 3 || shape[2] != 1 {
        bail!(Shape, "IDX export needs H x W x 1 samples, got {shape:?}");
    }
    let mut images = Vec::with_capacity(16 + ds.raw_images().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), shape[0], shape[1]] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in ds.raw_images() {
        images.push(denormalize(v.as_f64())?);
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in ds.labels() {
        let byte = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}

pub fn write_idx<T: Scalar>(ds: &Dataset<T>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = idx_bytes(ds)?;
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
