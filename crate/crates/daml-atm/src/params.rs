//! Named, flat-indexable parameter collections.
//!
//! All trainable tensors of a model live in one contiguous `Vec<f64>` with a
//! shared [`ParamLayout`] mapping names to slices. Optimizer steps, meta
//! updates, checksums, finite-difference probes and dual-number lifting are
//! then plain vector operations on the flat storage.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Dual;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Immutable name → (shape, flat range) registry shared by all parameter
/// sets of one model family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(shapes: Vec<(String, usize, usize)>) -> Self {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut index = BTreeMap::new();
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            index.insert(name.clone(), entries.len());
            entries.push(LayoutEntry {
                name,
                rows,
                cols,
                offset,
            });
            offset += entries.last().unwrap().rows * entries.last().unwrap().cols;
        }
        ParamLayout {
            entries,
            index,
            total: offset,
        }
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        let e = self
            .entry(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        e.offset..e.offset + e.rows * e.cols
    }
}

/// Metadata carried with every parameter set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamMeta {
    pub kind: String,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// A named, flat-indexable collection of model parameters.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
    pub meta: ParamMeta,
    frozen: bool,
}

impl ParamSet {
    pub fn zeros(layout: Arc<ParamLayout>, meta: ParamMeta) -> Self {
        let n = layout.total();
        ParamSet {
            layout,
            data: vec![0.0; n],
            meta,
            frozen: false,
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn thaw(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// FNV-1a over the raw bit patterns; used by the freeze and
    /// immutability checks.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.data)
    }

    /// `self += alpha * g`, in place.
    pub fn axpy(&mut self, alpha: f64, g: &[f64]) {
        debug_assert_eq!(self.data.len(), g.len());
        for (p, &gi) in self.data.iter_mut().zip(g) {
            *p += alpha * gi;
        }
    }

    /// Lift to dual numbers with the given tangent direction.
    pub fn lift_dual(&self, tangent: &[f64]) -> Vec<Dual> {
        debug_assert_eq!(self.data.len(), tangent.len());
        self.data
            .iter()
            .zip(tangent)
            .map(|(&re, &du)| Dual::new(re, du))
            .collect()
    }
}

pub fn checksum_f64(data: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &x in data {
        let bits = x.to_bits();
        for shift in [0u32, 8, 16, 24, 32, 40, 48, 56] {
            h ^= (bits >> shift) & 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![
            ("a.w".into(), 2, 3),
            ("a.b".into(), 1, 3),
            ("b.w".into(), 3, 1),
        ]))
    }

    fn meta() -> ParamMeta {
        ParamMeta {
            kind: "test".into(),
            model_dim: 3,
            vocab_size: 0,
            seed: 1,
        }
    }

    #[test]
    fn ranges_are_disjoint_and_cover() {
        let l = layout();
        assert_eq!(l.total(), 6 + 3 + 3);
        assert_eq!(l.range("a.w"), 0..6);
        assert_eq!(l.range("a.b"), 6..9);
        assert_eq!(l.range("b.w"), 9..12);
    }

    #[test]
    fn checksum_detects_any_bit_change() {
        let l = layout();
        let mut p = ParamSet::zeros(l, meta());
        let c0 = p.checksum();
        p.data[7] = 1e-300;
        assert_ne!(c0, p.checksum());
    }

    #[test]
    fn named_views_alias_flat_storage() {
        let l = layout();
        let mut p = ParamSet::zeros(l, meta());
        p.get_mut("a.b")[1] = 5.0;
        assert_eq!(p.data[7], 5.0);
    }
}
