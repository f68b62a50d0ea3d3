//! Serialized network weights: a text manifest followed by named TNSR blobs.
//!
//! The writer is canonical (fixed field order, shortest round-trip float
//! formatting), so deserialize-then-serialize reproduces the bytes exactly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMeta {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
}

/// Named weight tensors in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(!self.entries.iter().any(|(n, _)| n == name), "duplicate param {name}");
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn replace_all(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.entries.len());
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            *slot = t;
        }
    }
}

/// On-disk checkpoint: architecture fields, training metadata, weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub fields: Vec<(String, String)>,
    pub meta: TrainMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn field(&self, name: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing field {name:?}")))
    }

    pub fn field_usize(&self, name: &str) -> Result<usize> {
        self.field(name)?
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("checkpoint field {name:?} is not an integer")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "CKPT v1")?;
        writeln!(w, "kind {}", self.kind)?;
        for (name, value) in &self.fields {
            writeln!(w, "field {} {}", name, value)?;
        }
        writeln!(w, "meta_steps {}", self.meta.steps)?;
        writeln!(w, "meta_final_loss {}", self.meta.final_loss)?;
        writeln!(w, "meta_seed {}", self.meta.seed)?;
        writeln!(w, "tensors {}", self.params.len())?;
        for (name, tensor) in self.params.iter() {
            writeln!(w, "tensor {}", name)?;
            tensor.write_tnsr(w)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl BufRead) -> Result<Checkpoint> {
        let mut line = String::new();
        let next = |r: &mut dyn BufRead, line: &mut String| -> Result<String> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::format("ckpt", "unexpected end of file"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next(r, &mut line)? != "CKPT v1" {
            return Err(Error::format("ckpt", "bad magic line"));
        }
        let kind_line = next(r, &mut line)?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::format("ckpt", "expected kind line"))?
            .to_string();

        let mut fields = Vec::new();
        let mut cur = next(r, &mut line)?;
        while let Some(rest) = cur.strip_prefix("field ") {
            let (name, value) = rest
                .split_once(' ')
                .ok_or_else(|| Error::format("ckpt", "malformed field line"))?;
            fields.push((name.to_string(), value.to_string()));
            cur = next(r, &mut line)?;
        }
        let steps: usize = cur
            .strip_prefix("meta_steps ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("ckpt", "expected meta_steps"))?;
        let final_loss: f64 = next(r, &mut line)?
            .strip_prefix("meta_final_loss ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("ckpt", "expected meta_final_loss"))?;
        let seed: u64 = next(r, &mut line)?
            .strip_prefix("meta_seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("ckpt", "expected meta_seed"))?;
        let count: usize = next(r, &mut line)?
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("ckpt", "expected tensor count"))?;

        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = next(r, &mut line)?
                .strip_prefix("tensor ")
                .ok_or_else(|| Error::format("ckpt", "expected tensor name line"))?
                .to_string();
            let tensor = Tensor::read_tnsr(r)?;
            params.push(&name, tensor);
        }
        Ok(Checkpoint {
            kind,
            fields,
            meta: TrainMeta { steps, final_loss, seed },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.push("layer.w", Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 1e-17]).unwrap());
        params.push("layer.b", Tensor::from_vec(vec![0.5, -0.5]));
        Checkpoint {
            kind: "denoiser".into(),
            fields: vec![("image".into(), "32".into()), ("labels".into(), "8".into())],
            meta: TrainMeta { steps: 100, final_loss: 0.012345678901234567, seed: 7 },
            params,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::read(&mut std::io::Cursor::new(&bytes)).unwrap();
        let bytes2 = back.to_bytes().unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(back.kind, "denoiser");
        assert_eq!(back.field_usize("image").unwrap(), 32);
        assert_eq!(back.meta, ckpt.meta);
        assert!(back.params.get("layer.w").unwrap().bits_eq(ckpt.params.get("layer.w").unwrap()));
    }

    #[test]
    fn truncated_file_errors() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::read(&mut std::io::Cursor::new(cut)).is_err());
    }
}
