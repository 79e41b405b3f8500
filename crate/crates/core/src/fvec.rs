//! FVEC1 binary interchange format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic     6 bytes  "FVEC1\0"
//! n         u32
//! h         u32
//! C         u32
//! has_group u8       0 or 1
//! n records: u32 label, [i32 group if has_group], h x f32 features
//! ```
//!
//! Features are stored as `f32`; everything in memory is `f64`.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::FeatureMatrix;

pub const MAGIC: &[u8; 6] = b"FVEC1\0";
const HEADER_LEN: usize = 6 + 4 + 4 + 4 + 1;

/// Contents of an FVEC1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct FvecData {
    pub features: FeatureMatrix,
    pub labels: Vec<u32>,
    pub groups: Option<Vec<i32>>,
    pub class_count: u32,
}

impl FvecData {
    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| y as usize).collect()
    }

    /// Group ids as indices; negative ids are rejected on read so this cannot fail.
    pub fn groups_usize(&self) -> Option<Vec<usize>> {
        self.groups
            .as_ref()
            .map(|g| g.iter().map(|&v| v as usize).collect())
    }
}

/// Serializes to the FVEC1 byte layout.
pub fn encode_fvec(
    features: &FeatureMatrix,
    labels: &[u32],
    groups: Option<&[i32]>,
    class_count: u32,
) -> Result<Vec<u8>> {
    let (n, h) = (features.n_samples(), features.feature_dim());
    if n == 0 {
        return Err(Error::Empty("cannot write an FVEC1 file with n = 0".into()));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "fvec labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(g) = groups {
        if g.len() != n {
            return Err(Error::DimensionMismatch {
                context: "fvec groups",
                expected: n,
                actual: g.len(),
            });
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {class_count} classes"
        )));
    }

    let record_len = 4 + if groups.is_some() { 4 } else { 0 } + 4 * h;
    let mut buf = Vec::with_capacity(HEADER_LEN + n * record_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&class_count.to_le_bytes());
    buf.push(u8::from(groups.is_some()));
    let values = features.values();
    for i in 0..n {
        buf.extend_from_slice(&labels[i].to_le_bytes());
        if let Some(g) = groups {
            buf.extend_from_slice(&g[i].to_le_bytes());
        }
        for &v in values.row(i) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_fvec(
    path: impl AsRef<Path>,
    features: &FeatureMatrix,
    labels: &[u32],
    groups: Option<&[i32]>,
    class_count: u32,
) -> Result<()> {
    let bytes = encode_fvec(features, labels, groups, class_count)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: k,
                len: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn i32(&mut self) -> Result<i32> {
        self.array().map(i32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }
}

pub fn decode_fvec(bytes: &[u8]) -> Result<FvecData> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len()).map_err(|_| Error::BadMagic {
        found: bytes.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.to_vec(),
        });
    }
    let n = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let class_count = cur.u32()?;
    let has_group = match cur.take(1)?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::InvalidArgument(format!(
                "has_group flag must be 0 or 1, found {other}"
            )))
        }
    };
    if n == 0 {
        return Err(Error::Empty("FVEC1 file declares n = 0".into()));
    }
    if h == 0 {
        return Err(Error::InvalidArgument("FVEC1 file declares h = 0".into()));
    }

    let mut labels = Vec::with_capacity(n);
    let mut groups = has_group.then(|| Vec::with_capacity(n));
    let mut values = Vec::with_capacity(n.saturating_mul(h).min(1 << 28));
    for record in 0..n {
        let label = cur.u32()?;
        if label >= class_count {
            return Err(Error::LabelOutOfRange {
                record,
                label,
                class_count,
            });
        }
        labels.push(label);
        if let Some(g) = groups.as_mut() {
            let group = cur.i32()?;
            if group < 0 {
                return Err(Error::NegativeGroup { record, group });
            }
            g.push(group);
        }
        for feature in 0..h {
            let value = cur.f32()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    record,
                    feature,
                    value,
                });
            }
            values.push(f64::from(value));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    let matrix = Array2::from_shape_vec((n, h), values).expect("record layout fixes the shape");
    Ok(FvecData {
        features: FeatureMatrix::from_trusted(matrix),
        labels,
        groups,
        class_count,
    })
}

pub fn read_fvec(path: impl AsRef<Path>) -> Result<FvecData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fvec(&bytes)
}
