//! Building blocks of the transformer: linear maps, layer norm, multi-head
//! attention, and the feed-forward block. Every block carries its own
//! hand-derived backward pass; forward calls return the cache the backward
//! pass needs. All math is generic over the scalar so the same code runs in
//! f32 for training and f64 for gradient checking.

use ndarray::{Array1, Array2, Axis, NdFloat};

/// Numerical floor added to layer-norm variance before the square root.
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Fully connected map `y = x Wᵀ + b` with `w` stored as (out, in).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

pub struct LinearCache<T> {
    x: Array2<T>,
}

impl<T: NdFloat> Linear<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LinearCache<T>) {
        let y = x.dot(&self.w.t()) + &self.b;
        (y, LinearCache { x: x.clone() })
    }

    /// Accumulates parameter gradients into `grad` and returns dx.
    pub fn backward(&self, cache: &LinearCache<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.w += &dy.t().dot(&cache.x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

/// Per-row layer normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub g: Array1<T>,
    pub b: Array1<T>,
}

pub struct NormCache<T> {
    normed: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: NdFloat> LayerNorm<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            g: Array1::ones(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            g: Array1::zeros(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, NormCache<T>) {
        let n = x.nrows();
        let width = T::from(x.ncols()).unwrap();
        let eps = T::from(NORM_EPS).unwrap();
        let mut normed = x.clone();
        let mut inv_std = Array1::zeros(n);
        for (mut row, slot) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b) / width;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *slot = inv;
        }
        let y = &normed * &self.g + &self.b;
        (y, NormCache { normed, inv_std })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        let width = T::from(dy.ncols()).unwrap();
        grad.g += &(dy * &cache.normed).sum_axis(Axis(0));
        grad.b += &dy.sum_axis(Axis(0));
        let dn = dy * &self.g;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dn_row = dn.row(i);
            let xh = cache.normed.row(i);
            let inv = cache.inv_std[i];
            let mean_dn = dn_row.sum() / width;
            let mean_dn_xh = dn_row
                .iter()
                .zip(xh.iter())
                .map(|(a, b)| *a * *b)
                .fold(T::zero(), |a, b| a + b)
                / width;
            for j in 0..dy.ncols() {
                dx[[i, j]] = inv * (dn_row[j] - mean_dn - xh[j] * mean_dn_xh);
            }
        }
        dx
    }
}

/// Softmax over the valid entries of one attention row; invalid entries get
/// zero weight. A row with no valid key comes back all zero.
pub(crate) fn masked_softmax_row<T: NdFloat>(scores: &mut [T], valid: impl Fn(usize) -> bool) {
    let mut max = None::<T>;
    for (j, s) in scores.iter().enumerate() {
        if valid(j) {
            max = Some(match max {
                Some(m) if m >= *s => m,
                _ => *s,
            });
        }
    }
    let Some(max) = max else {
        for s in scores.iter_mut() {
            *s = T::zero();
        }
        return;
    };
    let mut total = T::zero();
    for (j, s) in scores.iter_mut().enumerate() {
        if valid(j) {
            *s = (*s - max).exp();
            total = total + *s;
        } else {
            *s = T::zero();
        }
    }
    for s in scores.iter_mut() {
        *s = *s / total;
    }
}

/// Multi-head attention; `q`, `k`, `v`, `o` all map d_model to d_model.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

pub struct AttnCache<T> {
    q_cache: LinearCache<T>,
    k_cache: LinearCache<T>,
    v_cache: LinearCache<T>,
    o_cache: LinearCache<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention weights per head, each (n_query, n_key).
    weights: Vec<Array2<T>>,
}

/// Masking rule for one attention call.
#[derive(Clone, Copy)]
pub enum AttnMask<'a> {
    /// Every key visible to every query.
    Full,
    /// Query i sees keys 0..=i (self-attention over one sequence).
    Causal,
    /// Keys with a false flag are hidden from all queries.
    KeyValid(&'a [bool]),
}

impl AttnMask<'_> {
    fn valid(&self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => key <= query,
            AttnMask::KeyValid(flags) => flags[key],
        }
    }
}

impl<T: NdFloat> Attention<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            o: Linear::zeros(dim, dim),
        }
    }

    pub fn forward(
        &self,
        x_query: &Array2<T>,
        x_key: &Array2<T>,
        heads: usize,
        mask: AttnMask,
    ) -> (Array2<T>, AttnCache<T>) {
        let dim = self.q.out_dim();
        let dk = dim / heads;
        let scale = T::one() / T::from(dk).unwrap().sqrt();
        let (q, q_cache) = self.q.forward(x_query);
        let (k, k_cache) = self.k.forward(x_key);
        let (v, v_cache) = self.v.forward(x_key);
        let n = q.nrows();
        let m = k.nrows();
        let mut concat = Array2::zeros((n, dim));
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * scale;
            for i in 0..n {
                masked_softmax_row(scores.row_mut(i).into_slice().expect("contiguous row"), |j| {
                    mask.valid(i, j)
                });
            }
            let oh = scores.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
            weights.push(scores);
        }
        debug_assert_eq!(weights[0].ncols(), m);
        let (out, o_cache) = self.o.forward(&concat);
        let cache = AttnCache {
            q_cache,
            k_cache,
            v_cache,
            o_cache,
            q,
            k,
            v,
            weights,
        };
        (out, cache)
    }

    /// Returns (dx_query, dx_key). For self-attention the caller adds both
    /// into the same upstream gradient.
    pub fn backward(
        &self,
        cache: &AttnCache<T>,
        dout: &Array2<T>,
        heads: usize,
        grad: &mut Attention<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dim = self.q.out_dim();
        let dk = dim / heads;
        let scale = T::one() / T::from(dk).unwrap().sqrt();
        let dconcat = self.o.backward(&cache.o_cache, dout, &mut grad.o);
        let n = cache.q.nrows();
        let m = cache.k.nrows();
        let mut dq = Array2::zeros((n, dim));
        let mut dkm = Array2::zeros((m, dim));
        let mut dv = Array2::zeros((m, dim));
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let weights = &cache.weights[h];
            let doh = dconcat.slice(ndarray::s![.., cols.clone()]);
            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&weights.t().dot(&doh));
            let dw = doh.dot(&vh.t());
            // Softmax backward row by row; masked keys carry zero weight and
            // therefore zero score gradient.
            let mut dscores = Array2::zeros((n, m));
            for i in 0..n {
                let a = weights.row(i);
                let da = dw.row(i);
                let inner = a
                    .iter()
                    .zip(da.iter())
                    .map(|(x, y)| *x * *y)
                    .fold(T::zero(), |acc, v| acc + v);
                for j in 0..m {
                    dscores[[i, j]] = a[j] * (da[j] - inner);
                }
            }
            dscores *= scale;
            dq.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&dscores.dot(&kh));
            dkm.slice_mut(ndarray::s![.., cols])
                .assign(&dscores.t().dot(&qh));
        }
        let dxq = self.q.backward(&cache.q_cache, &dq, &mut grad.q);
        let dxk = self.k.backward(&cache.k_cache, &dkm, &mut grad.k);
        let dxv = self.v.backward(&cache.v_cache, &dv, &mut grad.v);
        (dxq, dxk + dxv)
    }
}

/// Two-layer feed-forward block with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward<T> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

pub struct FfnCache<T> {
    w1_cache: LinearCache<T>,
    w2_cache: LinearCache<T>,
    hidden: Array2<T>,
}

impl<T: NdFloat> FeedForward<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Linear::zeros(hidden, dim),
            w2: Linear::zeros(dim, hidden),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, FfnCache<T>) {
        let (mut hidden, w1_cache) = self.w1.forward(x);
        hidden.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        let (y, w2_cache) = self.w2.forward(&hidden);
        (
            y,
            FfnCache {
                w1_cache,
                w2_cache,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &FfnCache<T>, dy: &Array2<T>, grad: &mut FeedForward<T>) -> Array2<T> {
        let mut dh = self.w2.backward(&cache.w2_cache, dy, &mut grad.w2);
        ndarray::Zip::from(&mut dh).and(&cache.hidden).for_each(|d, h| {
            if *h <= T::zero() {
                *d = T::zero();
            }
        });
        self.w1.backward(&cache.w1_cache, &dh, &mut grad.w1)
    }
}
