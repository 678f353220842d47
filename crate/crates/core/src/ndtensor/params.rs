use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"APO1";

/// A named trainable tensor together with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters. Iteration follows insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter with a zeroed gradient slot. Returns its position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        let pos = self.entries.len();
        self.index.insert(name.clone(), pos);
        self.entries.push(ParamEntry { name, value, grad });
        Ok(pos)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, pos: usize) -> &ParamEntry {
        &self.entries[pos]
    }

    pub fn entry_mut(&mut self, pos: usize) -> &mut ParamEntry {
        &mut self.entries[pos]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.position(name).map(|p| &self.entries[p])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.position(name).map(|p| &mut self.entries[p])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.get(name)
            .map(|e| &e.value)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `other`'s gradients into this set's gradient slots, entry by entry
    /// in insertion order. Both sets must have the same layout.
    pub fn merge_grads(&mut self, other: &ParamSet) -> Result<(), TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::LayoutMismatch);
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name {
                return Err(TensorError::LayoutMismatch);
            }
            mine.grad.axpy(1.0, &theirs.grad)?;
        }
        Ok(())
    }

    /// True when every value is bitwise identical to `other`'s.
    pub fn values_bit_identical(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest absolute difference between corresponding values.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| TensorError::Checkpoint(format!("name too long: {}", e.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            let rank = u8::try_from(e.value.rank())
                .map_err(|_| TensorError::Checkpoint(format!("rank too large: {}", e.name)))?;
            w.write_all(&[rank])?;
            for &extent in e.value.shape() {
                let extent = u32::try_from(extent)
                    .map_err(|_| TensorError::Checkpoint(format!("extent too large: {}", e.name)))?;
                w.write_all(&extent.to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(TensorError::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail for a well-formed set");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Checkpoint("truncated checkpoint".into()),
        _ => TensorError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, TensorError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
