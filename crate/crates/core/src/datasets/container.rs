//! `SQFD` dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SQFD" | version u32 | C u32 | N u32 | count u64
//! per sample: label u32 | source u8 | true_class u32 | ndims u32 | dims u32.. | values f64 LE..
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, LabelSpace, Source};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

pub const CONTAINER_MAGIC: &[u8; 4] = b"SQFD";
pub const CONTAINER_VERSION: u32 = 1;

pub fn container_bytes<T: Scalar>(ds: &Dataset<T>) -> Vec<u8> {
    let shape = ds.sample_shape();
    let per = 4 + 1 + 4 + 4 + 4 * shape.len() + 8 * ds.sample_len();
    let mut w = ByteWriter::new();
    w.buf.reserve(24 + per * ds.len());
    w.bytes(CONTAINER_MAGIC);
    w.u32(CONTAINER_VERSION as usize);
    let ls = ds.label_space();
    w.u32(ls.num_identities());
    w.u32(ls.total());
    w.u64(ds.len() as u64);
    for s in ds.iter() {
        w.u32(s.label);
        w.u8(s.source.z());
        w.u32(s.true_class);
        w.u32(shape.len());
        for &d in shape {
            w.u32(d);
        }
        for v in s.image {
            w.f64(v.as_f64());
        }
    }
    w.into_inner()
}

pub fn write_container<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    fs::write(path, container_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn parse_container<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CONTAINER_MAGIC {
        bail!(Format, "not an SQFD container");
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION as usize {
        bail!(Format, "unsupported SQFD version {version}");
    }
    let c = r.u32()?;
    let n = r.u32()?;
    if n < c {
        bail!(Format, "class total {n} smaller than identity count {c}");
    }
    let space = LabelSpace::new(c, n - c)?;
    let count = r.u64()? as usize;
    let mut ds: Option<Dataset<T>> = None;
    let mut image = Vec::new();
    for _ in 0..count {
        let label = r.u32()?;
        let source = Source::from_z(r.u8()?)?;
        let true_class = r.u32()?;
        let ndims = r.u32()?;
        let shape: Vec<usize> = (0..ndims).map(|_| r.u32()).collect::<Result<_>>()?;
        let ds = ds.get_or_insert_with(|| Dataset::empty(&shape, space));
        image.clear();
        for _ in 0..shape.iter().product::<usize>() {
            image.push(T::lit(r.f64()?));
        }
        ds.push_raw(&image, &shape, label, source, true_class)?;
    }
    r.finish()?;
    Ok(ds.unwrap_or_else(|| Dataset::empty(&[], space)))
}

pub fn read_container<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container(&bytes)
}
