use std::collections::BTreeMap;

use crate::expansion::{OperatorBundle, Orientation};
use crate::model::ModelParams;
use crate::numerics::Real;

use super::TrainMode;

/// Trainability of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamMask {
    Full,
    Frozen,
    /// Per-coordinate flags in row-major order.
    Slices(Vec<bool>),
}

impl ParamMask {
    pub fn trainable(&self, i: usize) -> bool {
        match self {
            ParamMask::Full => true,
            ParamMask::Frozen => false,
            ParamMask::Slices(b) => b[i],
        }
    }

    pub fn count(&self, len: usize) -> usize {
        match self {
            ParamMask::Full => len,
            ParamMask::Frozen => 0,
            ParamMask::Slices(b) => b.iter().filter(|&&x| x).count(),
        }
    }
}

/// Masks for every model and operator tensor, by name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainabilityMask {
    pub masks: BTreeMap<String, ParamMask>,
    /// Coordinate total per tensor, for the fraction.
    pub sizes: BTreeMap<String, usize>,
}

impl TrainabilityMask {
    pub fn get(&self, name: &str) -> &ParamMask {
        self.masks.get(name).unwrap_or(&ParamMask::Full)
    }

    pub fn trainable_count(&self) -> usize {
        self.masks.iter().map(|(n, m)| m.count(self.sizes[n])).sum()
    }

    pub fn total_count(&self) -> usize {
        self.sizes.values().sum()
    }

    /// Trainable coordinates over all model and operator coordinates.
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_count() as f64 / self.total_count().max(1) as f64
    }
}

/// Full mode trains everything; partial mode trains the `P ∪ N` slices of
/// each expanded matrix and the operator parameters, nothing else.
pub fn build_trainability_mask<T: Real>(
    params: &ModelParams<T>,
    bundle: &OperatorBundle<T>,
    mode: TrainMode,
) -> TrainabilityMask {
    let mut out = TrainabilityMask::default();
    let default = match mode {
        TrainMode::Full => ParamMask::Full,
        TrainMode::Partial => ParamMask::Frozen,
    };
    for (name, t) in params.named() {
        out.sizes.insert(name.clone(), t.len());
        out.masks.insert(name, default.clone());
    }
    for (name, t) in bundle.named() {
        out.sizes.insert(name.clone(), t.len());
        out.masks.insert(name, ParamMask::Full);
    }
    if mode == TrainMode::Full {
        return out;
    }
    for op in bundle.live() {
        let name = ModelParams::<T>::matrix_name(op.target.layer, op.target.kind);
        let (rows, cols) = params.layers[op.target.layer].matrix(op.target.kind).shape2().expect("matrix");
        let mut bits = match out.masks.remove(&name) {
            Some(ParamMask::Slices(b)) => b,
            _ => vec![false; rows * cols],
        };
        for &i in op.p_idx.iter().chain(&op.n_idx) {
            match op.orientation {
                Orientation::Column => (0..rows).for_each(|r| bits[r * cols + i] = true),
                Orientation::Row => bits[i * cols..(i + 1) * cols].iter_mut().for_each(|b| *b = true),
            }
        }
        out.masks.insert(name, ParamMask::Slices(bits));
    }
    out
}
