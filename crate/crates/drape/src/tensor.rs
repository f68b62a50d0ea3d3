//! Dense f64 tensors, row-major, with value semantics.
//!
//! A `Tensor` is an immutable (shape, data) pair behind an `Arc`, so clones
//! are cheap and values are safe to share across threads. Differentiable
//! computation lives in [`crate::autodiff`]; the arithmetic here is the plain
//! untracked path used by the samplers.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]) }
    }

    /// 1-d tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("Tensor::item", format!("expected 1 element, got shape {:?}", self.shape)))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// L2 distance to another tensor of the same shape.
    pub fn l2_distance(&self, other: &Tensor) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Mean over the leading (channel) axis of a [C, H, W] tensor -> [H, W].
    pub fn channel_mean(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::shape("channel_mean", format!("expected [C,H,W], got {:?}", self.shape)));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            let plane = &self.data[ch * hw..(ch + 1) * hw];
            for (o, &v) in out.iter_mut().zip(plane.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / c as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        Tensor::new(vec![h, w], out)
    }

    /// Subtracts the mean and divides by the population standard deviation.
    /// Errors when the values have (numerically) zero variance.
    pub fn standardize(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if !(var > 1e-24) {
            return Err(Error::DegenerateDifference);
        }
        let std = var.sqrt();
        Ok(self.map(|v| (v - mean) / std))
    }

    /// Exact bit equality of shape and payload.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Writes the raw container: a text header `TNSR v1 <ndim> <d0> <d1> ...`
    /// followed by the values as little-endian f64 in row-major order.
    pub fn write_tnsr(&self, w: &mut impl Write) -> Result<()> {
        let mut header = format!("TNSR v1 {}", self.shape.len());
        for d in &self.shape {
            header.push_str(&format!(" {}", d));
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tnsr(r: &mut impl BufRead) -> Result<Tensor> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut it = line.split_whitespace();
        let magic = it.next().unwrap_or("");
        let version = it.next().unwrap_or("");
        if magic != "TNSR" || version != "v1" {
            return Err(Error::format("tnsr", format!("bad header line {:?}", line.trim_end())));
        }
        let ndim: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("tnsr", "missing rank"))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("tnsr", "missing dimension"))?;
            shape.push(d);
        }
        if it.next().is_some() {
            return Err(Error::format("tnsr", "trailing tokens in header"));
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("tnsr", "truncated payload"))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn save_tnsr(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tnsr(&mut f)
    }

    pub fn load_tnsr(path: &std::path::Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_tnsr(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        assert!(a.add(&Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn standardize_hand_oracle() {
        // mean 0, population std 1 -> unchanged
        let t = Tensor::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        let s = t.standardize().unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, -1.0, -1.0]);
        assert!(Tensor::filled(&[4], 3.0).standardize().is_err());
    }

    #[test]
    fn channel_mean_small() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let m = t.channel_mean().unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[2.0, 4.0]);
    }

    #[test]
    fn tnsr_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, f64::MIN_POSITIVE, 0.0, 42.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert!(buf.starts_with(b"TNSR v1 2 2 3\n"));
        let back = Tensor::read_tnsr(&mut std::io::Cursor::new(&buf)).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn tnsr_rejects_truncation() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(Tensor::read_tnsr(&mut std::io::Cursor::new(&buf)).is_err());
    }
}
