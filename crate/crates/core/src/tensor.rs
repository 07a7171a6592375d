use std::path::Path;

use crate::bytesio::{self, Reader};
use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals. Invariants: every extent is
/// positive and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {count} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor value at flat index {pos} is {}",
                values[pos]
            )));
        }
        Ok(Tensor { shape, values })
    }

    /// Zero-filled tensor. Panics on a zero extent; callers pass shapes that
    /// were already validated.
    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape).expect("zeros() requires positive extents");
        let count = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; count],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    /// Row-major offset of a 3-d index. Debug-checked; hot loops do their own
    /// arithmetic.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.values[(c * h + y) * w + x]
    }

    /// Mirrors a rank-3 tensor along its last (width) axis.
    pub fn flipped_w(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "horizontal flip needs a rank-3 tensor, got rank {}",
                self.shape.len()
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = self.values.clone();
        for ci in 0..c {
            for y in 0..h {
                let row = (ci * h + y) * w;
                out[row..row + w].reverse();
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            values: out,
        })
    }

    /// Checks that every value is finite; `what` names the tensor in errors.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what}: value at flat index {pos} is {}",
                self.values[pos]
            )));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::ShapeMismatch("tensor shape must not be empty".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::ShapeMismatch(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

const FRAME_MAGIC: &[u8; 4] = b"ATIM";

/// Writes a frame tensor: magic, u32 rank, u32 extents, 32-bit LE reals.
pub fn write_frame_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(8 + tensor.shape.len() * 4 + tensor.count() * 4);
    out.extend_from_slice(FRAME_MAGIC);
    bytesio::put_usize_as_u32(&mut out, tensor.shape.len(), "tensor rank")?;
    for &e in &tensor.shape {
        bytesio::put_usize_as_u32(&mut out, e, "tensor extent")?;
    }
    for &v in &tensor.values {
        bytesio::put_f32(&mut out, v as f32);
    }
    bytesio::write_file(path, &out)
}

/// Reads a frame tensor written by [`write_frame_file`].
pub fn read_frame_file(path: &Path) -> Result<Tensor> {
    let buf = bytesio::read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(FRAME_MAGIC)?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.error(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.u32()? as usize;
        if e == 0 {
            return Err(r.error("zero extent in tensor shape"));
        }
        shape.push(e);
    }
    let count: usize = shape.iter().product();
    let _ = r.checked_count(count as u32, 4, "tensor value")?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f32()? as f64);
    }
    r.finish()?;
    Tensor::new(shape, values).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn new_rejects_count_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn flip_reverses_each_row() {
        let t = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = t.flipped_w().unwrap();
        assert_eq!(f.values(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        // An involution: flipping twice restores the original.
        assert_eq!(f.flipped_w().unwrap(), t);
    }

    #[test]
    fn flip_requires_rank_3() {
        let t = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(t.flipped_w().is_err());
    }

    #[test]
    fn frame_file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.atim");
        let b = dir.path().join("b.atim");
        // Values chosen exactly representable in f32 so the f64 round trip
        // is lossless.
        let t = Tensor::new(vec![1, 2, 2], vec![0.5, -1.25, 3.0, 0.0]).unwrap();
        write_frame_file(&a, &t).unwrap();
        let back = read_frame_file(&a).unwrap();
        assert_eq!(back, t);
        write_frame_file(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn frame_file_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.atim");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_frame_file(&p).is_err());

        let t = Tensor::new(vec![1, 2, 2], vec![0.5, 1.0, 2.0, 3.0]).unwrap();
        write_frame_file(&p, &t).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 2]).unwrap();
        assert!(read_frame_file(&p).is_err());
    }

    #[test]
    fn frame_file_rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trail.atim");
        let t = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        write_frame_file(&p, &t).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_frame_file(&p).is_err());
    }
}
