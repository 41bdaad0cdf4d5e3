//! Uniform access to a model's named parameter arrays. Checkpointing, Adam,
//! content hashing, and finite-difference probing all work through this view
//! so they stay independent of any particular model layout.

use sha2::{Digest, Sha256};

use crate::nn::transformer::StackWeights;
use crate::scalar::Real;

pub struct ArrayRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ArrayMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// A model exposing its parameters as named arrays in a stable order.
pub trait ParamContainer<T: Real> {
    fn arrays(&self) -> Vec<ArrayRef<'_, T>>;
    fn arrays_mut(&mut self) -> Vec<ArrayMut<'_, T>>;

    fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.data.len()).sum()
    }

    fn get_flat(&self, mut idx: usize) -> T {
        for a in self.arrays() {
            if idx < a.data.len() {
                return a.data[idx];
            }
            idx -= a.data.len();
        }
        panic!("flat index out of range");
    }

    fn set_flat(&mut self, mut idx: usize, value: T) {
        for a in self.arrays_mut() {
            if idx < a.data.len() {
                a.data[idx] = value;
                return;
            }
            idx -= a.data.len();
        }
        panic!("flat index out of range");
    }

    /// Name and offset of a flat index, for diagnostics.
    fn locate_flat(&self, mut idx: usize) -> (String, usize) {
        for a in self.arrays() {
            if idx < a.data.len() {
                return (a.name, idx);
            }
            idx -= a.data.len();
        }
        panic!("flat index out of range");
    }

    /// SHA-256 over array names, shapes, and little-endian payloads.
    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for a in self.arrays() {
            hasher.update(a.name.as_bytes());
            for &s in &a.shape {
                hasher.update((s as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(a.data.len() * 8);
            for &x in a.data {
                x.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        hex(&hasher.finalize())
    }

    fn all_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|a| a.data.iter().all(|x| x.is_finite()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// dst += c · src, matched array by array.
pub fn axpy_into<T: Real, C: ParamContainer<T>>(dst: &mut C, src: &C, c: f64) {
    let cc = T::from_f64_c(c);
    let src_arrays = src.arrays();
    for (d, s) in dst.arrays_mut().into_iter().zip(src_arrays.iter()) {
        debug_assert_eq!(d.name, s.name);
        for (dv, &sv) in d.data.iter_mut().zip(s.data.iter()) {
            *dv = *dv + cc * sv;
        }
    }
}

/// Append a transformer stack's arrays under `prefix` (e.g. "l0.wq").
pub fn stack_arrays<'a, T: Real>(prefix: &str, stack: &'a StackWeights<T>, out: &mut Vec<ArrayRef<'a, T>>) {
    for (i, b) in stack.blocks.iter().enumerate() {
        for (tag, m) in [
            ("wq", &b.wq),
            ("wk", &b.wk),
            ("wv", &b.wv),
            ("wo", &b.wo),
            ("w1", &b.w1),
            ("w2", &b.w2),
        ] {
            out.push(ArrayRef {
                name: format!("{prefix}l{i}.{tag}"),
                shape: vec![m.rows, m.cols],
                data: &m.data,
            });
        }
    }
}

pub fn stack_arrays_mut<'a, T: Real>(
    prefix: &str,
    stack: &'a mut StackWeights<T>,
    out: &mut Vec<ArrayMut<'a, T>>,
) {
    for (i, b) in stack.blocks.iter_mut().enumerate() {
        for (tag, m) in [
            ("wq", &mut b.wq),
            ("wk", &mut b.wk),
            ("wv", &mut b.wv),
            ("wo", &mut b.wo),
            ("w1", &mut b.w1),
            ("w2", &mut b.w2),
        ] {
            out.push(ArrayMut {
                name: format!("{prefix}l{i}.{tag}"),
                shape: vec![m.rows, m.cols],
                data: &mut m.data,
            });
        }
    }
}
