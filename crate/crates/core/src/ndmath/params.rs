use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_len("tensor data", shape.iter().product(), data.len())?;
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Parameter checkpoint: flat arrays keyed by parameter name, with shapes
/// recorded alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A fixed collection of named tensors: model parameters, their gradients,
/// or optimizer state of the same shape.
pub trait ParamSet: Clone {
    fn kind(&self) -> &'static str;

    fn tensors(&self) -> Vec<(&'static str, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn fill(&mut self, v: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.fill(v);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.num_params(), flat.len())?;
        let mut at = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += scale * b);
        }
    }

    /// Cheap order-sensitive digest of every value; changes whenever any
    /// parameter changes.
    fn fingerprint(&self) -> u64 {
        // Four independent lanes keep the multiply chain short.
        let mut lanes: [u64; 4] = [0xcbf2_9ce4_8422_2325, 1, 2, 3];
        for (_, t) in self.tensors() {
            for (i, v) in t.data.iter().enumerate() {
                let h = &mut lanes[i & 3];
                *h = (*h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3).rotate_left(17);
            }
            lanes[0] ^= t.data.len() as u64;
        }
        lanes.iter().fold(0, |acc, h| (acc ^ h).wrapping_mul(0x0100_0000_01b3))
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut shapes = BTreeMap::new();
        let mut params = BTreeMap::new();
        for (name, t) in self.tensors() {
            shapes.insert(name.to_string(), t.shape.clone());
            params.insert(name.to_string(), t.data.clone());
        }
        Checkpoint { kind: self.kind().to_string(), shapes, params }
    }

    /// Overwrites values from `ckpt`; every name and shape must match.
    fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != self.kind() {
            return Err(Error::Checkpoint(format!("kind {} does not match {}", ckpt.kind, self.kind())));
        }
        let expected = self.tensors().len();
        if ckpt.params.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", ckpt.params.len())));
        }
        for (name, t) in self.tensors_mut() {
            let shape = ckpt.shapes.get(name).ok_or_else(|| Error::Checkpoint(format!("missing shape for {name}")))?;
            let data = ckpt.params.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if *shape != t.shape || data.len() != t.len() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}: {shape:?} vs {:?}", t.shape)));
            }
            t.data.copy_from_slice(data);
        }
        Ok(())
    }
}
