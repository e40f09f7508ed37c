//! Low-rank adapters. The base model is frozen; every linear weight matrix
//! gets a pair of factors A (rank x in) and B (out x rank), and the
//! effective weight is `w + (alpha / rank) * B A`. B starts at zero so an
//! adapted model is indistinguishable from its base until training moves
//! the factors.

use std::collections::HashMap;

use ndarray::{Array2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, Seq2Seq, Seq2SeqParams, TensorView, TensorViewMut};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, alpha: 32.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LoraEntry<T> {
    pub name: String,
    /// rank x in.
    pub a: Array2<T>,
    /// out x rank, zero at creation.
    pub b: Array2<T>,
}

/// Adapter factors for every linear weight of one base model, tied to that
/// base by its parameter checksum.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T> {
    rank: usize,
    alpha: f32,
    base_checksum: String,
    entries: Vec<LoraEntry<T>>,
}

/// Factor gradients in entry order.
pub struct LoraGrads<T> {
    pub entries: Vec<(Array2<T>, Array2<T>)>,
}

impl<T: NdFloat> LoraAdapter<T> {
    /// Builds factors for every weight matrix of a linear map in the base
    /// model (attention projections, feed-forward weights, and the untied
    /// output head when present). Embeddings, norms, and biases stay
    /// unadapted.
    pub fn attach(
        base: &Seq2SeqParams<T>,
        config: &LoraConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if config.rank == 0 {
            return Err(ModelError::ZeroField { field: "rank" });
        }
        let mut shapes = Vec::new();
        base.visit(&mut |name, view| {
            if let TensorView::M(m) = view {
                if name.ends_with(".w") {
                    shapes.push((name, m.nrows(), m.ncols()));
                }
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(shapes.len());
        for (name, out_dim, in_dim) in shapes {
            if config.rank > out_dim.min(in_dim) {
                return Err(ModelError::RankTooLarge {
                    rank: config.rank,
                    d_in: in_dim,
                    d_out: out_dim,
                });
            }
            let bound = 1.0 / (in_dim as f64).sqrt();
            let a = Array2::from_shape_fn((config.rank, in_dim), |_| {
                T::from(rng.random_range(-bound..bound)).unwrap()
            });
            let b = Array2::zeros((out_dim, config.rank));
            entries.push(LoraEntry { name, a, b });
        }
        Ok(Self {
            rank: config.rank,
            alpha: config.alpha,
            base_checksum: base.checksum(),
            entries,
        })
    }

    pub(crate) fn from_parts(
        rank: usize,
        alpha: f32,
        base_checksum: String,
        entries: Vec<LoraEntry<T>>,
    ) -> Self {
        Self {
            rank,
            alpha,
            base_checksum,
            entries,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn base_checksum(&self) -> &str {
        &self.base_checksum
    }

    pub fn entries(&self) -> &[LoraEntry<T>] {
        &self.entries
    }

    /// Total adapter parameters: rank * (in + out) summed over entries.
    pub fn trainable_params(&self) -> usize {
        self.entries.iter().map(|e| e.a.len() + e.b.len()).sum()
    }

    fn scaling(&self) -> T {
        T::from(f64::from(self.alpha) / self.rank as f64).unwrap()
    }

    /// Materialises the adapted model. The base is untouched; entries whose
    /// B factor is still all zero are skipped so a fresh adapter reproduces
    /// the base bit for bit.
    pub fn apply(&self, base: &Seq2Seq<T>) -> Result<Seq2Seq<T>, ModelError> {
        let found = base.params().checksum();
        if found != self.base_checksum {
            return Err(ModelError::AdapterMismatch {
                expected: self.base_checksum.clone(),
                found,
            });
        }
        let scale = self.scaling();
        let mut adapted = base.clone();
        for entry in &self.entries {
            if entry.b.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let delta = entry.b.dot(&entry.a) * scale;
            let mut hit = false;
            adapted.params_mut().visit_mut(&mut |name, view| {
                if name == entry.name {
                    if let TensorViewMut::M(m) = view {
                        *m += &delta;
                        hit = true;
                    }
                }
            });
            if !hit {
                return Err(ModelError::Malformed(format!(
                    "adapter entry {} has no matching model tensor",
                    entry.name
                )));
            }
        }
        Ok(adapted)
    }

    /// Converts dense gradient sums (taken on the adapted model) into factor
    /// gradients: dA = s Bᵀ dW, dB = s dW Aᵀ.
    pub fn grads_from(&self, dense: &Seq2SeqParams<T>) -> Result<LoraGrads<T>, ModelError> {
        let mut by_name: HashMap<String, &Array2<T>> = HashMap::new();
        dense.visit(&mut |name, view| {
            if let TensorView::M(m) = view {
                by_name.insert(name, m);
            }
        });
        let scale = self.scaling();
        let mut entries = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let dw = by_name.get(entry.name.as_str()).ok_or_else(|| {
                ModelError::Malformed(format!(
                    "gradient set has no tensor named {}",
                    entry.name
                ))
            })?;
            let da = entry.b.t().dot(*dw) * scale;
            let db = dw.dot(&entry.a.t()) * scale;
            entries.push((da, db));
        }
        Ok(LoraGrads { entries })
    }

    /// Factor values flattened in entry order, A before B.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.trainable_params());
        for entry in &self.entries {
            out.extend(entry.a.iter().copied());
            out.extend(entry.b.iter().copied());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[T]) -> Result<(), ModelError> {
        let expected = self.trainable_params();
        if values.len() != expected {
            return Err(ModelError::FlatSizeMismatch {
                expected,
                found: values.len(),
            });
        }
        let mut it = values.iter();
        for entry in &mut self.entries {
            for v in entry.a.iter_mut() {
                *v = *it.next().expect("length checked");
            }
            for v in entry.b.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

impl<T: NdFloat> LoraGrads<T> {
    /// Same ordering as `LoraAdapter::flatten`.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (da, db) in &self.entries {
            out.extend(da.iter().copied());
            out.extend(db.iter().copied());
        }
        out
    }
}
