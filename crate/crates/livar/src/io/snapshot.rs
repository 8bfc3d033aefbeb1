//! Binary model snapshots.
//!
//! Little-endian layout:
//!
//! ```text
//! "LVAR"  version:u32  L:u32  C:u32  dims[L+1]:u32
//! per layer l = 1..L:  W^l, A^l, B^l
//! head weights (C × feature_dim), bias (1 × C)
//! ```
//!
//! where every matrix is `rows:u32 cols:u32` followed by `rows·cols` f64
//! values in row-major order.

use std::io::{self, Read, Write};

use livar_core::lora::LoraAdapter;
use livar_core::model::{ClassifierHead, ToyBackbone};
use livar_core::Matrix;

pub const MAGIC: &[u8; 4] = b"LVAR";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("matrix {index} has shape {found:?}, expected {expected}")]
    Shape {
        index: usize,
        found: (usize, usize),
        expected: String,
    },
    #[error(transparent)]
    Model(#[from] livar_core::Error),
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_matrix<W: Write>(w: &mut W, m: &Matrix) -> io::Result<()> {
    put_u32(w, m.rows())?;
    put_u32(w, m.cols())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_matrix<R: Read>(r: &mut R, index: usize, expected: Option<(usize, usize)>) -> Result<Matrix, SnapshotError> {
    let rows = get_u32(r)?;
    let cols = get_u32(r)?;
    if let Some(e) = expected {
        if (rows, cols) != e {
            return Err(SnapshotError::Shape {
                index,
                found: (rows, cols),
                expected: format!("{e:?}"),
            });
        }
    }
    let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Matrix::from_vec(rows, cols, data)?)
}

pub fn write_snapshot<W: Write>(w: &mut W, backbone: &ToyBackbone, head: &ClassifierHead) -> io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, backbone.num_layers())?;
    put_u32(w, head.num_classes())?;
    for d in backbone.dims() {
        put_u32(w, d)?;
    }
    for (frozen, ad) in backbone.frozen_weights().iter().zip(backbone.adapters()) {
        put_matrix(w, frozen)?;
        put_matrix(w, &ad.a)?;
        put_matrix(w, &ad.b)?;
    }
    put_matrix(w, &head.weights)?;
    put_u32(w, 1)?;
    put_u32(w, head.bias.len())?;
    for v in &head.bias {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<(ToyBackbone, ClassifierHead), SnapshotError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SnapshotError::Magic(magic));
    }
    let version = get_u32(r)? as u32;
    if version != VERSION {
        return Err(SnapshotError::Version(version));
    }
    let layers = get_u32(r)?;
    let classes = get_u32(r)?;
    let dims = (0..=layers).map(|_| get_u32(r)).collect::<io::Result<Vec<_>>>()?;

    let mut frozen = Vec::with_capacity(layers);
    let mut adapters = Vec::with_capacity(layers);
    let mut index = 0;
    for l in 0..layers {
        let (d, k) = (dims[l + 1], dims[l]);
        frozen.push(get_matrix(r, index, Some((d, k)))?);
        let a = get_matrix(r, index + 1, None)?;
        let b = get_matrix(r, index + 2, None)?;
        adapters.push(LoraAdapter::from_factors(a, b)?);
        index += 3;
    }
    let backbone = ToyBackbone::new(frozen, adapters)?;
    let weights = get_matrix(r, index, Some((classes, dims[layers])))?;
    let bias = get_matrix(r, index + 1, Some((1, classes)))?.into_vec();
    let head = ClassifierHead::new(weights, bias)?;
    Ok((backbone, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use livar_core::fed::GlobalState;

    #[test]
    fn header_layout() {
        let s = GlobalState::init(&[3, 5, 4], 2, 1, 0).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &s.backbone, &s.head).unwrap();
        assert_eq!(&buf[0..4], b"LVAR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..28], &[3, 0, 0, 0, 5, 0, 0, 0, 4, 0, 0, 0]);
        // first matrix: W^1 is 5 × 3
        assert_eq!(&buf[28..36], &[5, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&buf[36..44], &s.backbone.frozen_weights()[0].get(0, 0).to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let s = GlobalState::init(&[3, 5, 4], 2, 1, 0).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &s.backbone, &s.head).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_snapshot(&mut bad.as_slice()),
            Err(SnapshotError::Magic(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_snapshot(&mut bad.as_slice()),
            Err(SnapshotError::Version(9))
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_snapshot(&mut &truncated[..]), Err(SnapshotError::Io(_))));
    }
}
