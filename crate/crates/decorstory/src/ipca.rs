//! Identity-preserving cross-attention: key/value projection, identity
//! masking, and scaled-dot-product attention over the concatenated
//! `(K, K_id)` / `(V, V_id)` pairs, plus a scalar-loop oracle used to
//! cross-check the vectorized path.

use crate::error::{Error, Result};
use crate::layout::PromptLayout;
use crate::matrix::{dot, Matrix};
use crate::real::Real;
use crate::svr::ConditionedMatrix;

/// Key/value projection weights shared by every denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    w_k: Matrix<T>,
    w_v: Matrix<T>,
}

impl<T: Real> AttentionWeights<T> {
    /// Both weights are `D × d` with `d ≥ 1`, all entries finite.
    pub fn new(w_k: Matrix<T>, w_v: Matrix<T>) -> Result<Self> {
        if w_k.nrows() != w_v.nrows() || w_k.ncols() != w_v.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "W_K is {}x{} but W_V is {}x{}",
                w_k.nrows(),
                w_k.ncols(),
                w_v.nrows(),
                w_v.ncols()
            )));
        }
        if w_k.ncols() == 0 {
            return Err(Error::InvalidArgument("key/query dimension must be >= 1".into()));
        }
        w_k.ensure_finite()?;
        w_v.ensure_finite()?;
        Ok(Self { w_k, w_v })
    }

    pub fn w_k(&self) -> &Matrix<T> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix<T> {
        &self.w_v
    }

    /// Key/query dimension d.
    pub fn head_dim(&self) -> usize {
        self.w_k.ncols()
    }
}

/// `K = C · W_K`, `V = C · W_V`.
pub fn project_kv<T: Real>(
    conditioned: &ConditionedMatrix<T>,
    weights: &AttentionWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let c = conditioned.data().matrix();
    Ok((c.matmul(weights.w_k())?, c.matmul(weights.w_v())?))
}

/// Copies of K/V where every row outside the identity span — SOT, EOT,
/// frame spans, and padding alike — is exactly zero.
pub fn identity_mask<T: Real>(
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &PromptLayout,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if k.nrows() != v.nrows() || k.ncols() != v.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "K is {}x{} but V is {}x{}",
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    layout.validate_rows(k.nrows())?;
    let mut k_id = Matrix::zeros(k.nrows(), k.ncols());
    let mut v_id = Matrix::zeros(v.nrows(), v.ncols());
    for i in layout.identity().iter() {
        k_id.row_mut(i).copy_from_slice(k.row(i));
        v_id.row_mut(i).copy_from_slice(v.row(i));
    }
    Ok((k_id, v_id))
}

/// One attention invocation: queries plus the projected and the
/// identity-masked key/value pairs.
///
/// Invariant, checked at construction: every `K_id`/`V_id` row is either
/// an exact copy of the corresponding `K`/`V` row or exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBatch<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    k_id: Matrix<T>,
    v_id: Matrix<T>,
}

impl<T: Real> AttentionBatch<T> {
    pub fn new(
        q: Matrix<T>,
        k: Matrix<T>,
        v: Matrix<T>,
        k_id: Matrix<T>,
        v_id: Matrix<T>,
    ) -> Result<Self> {
        let d = q.ncols();
        if d == 0 {
            return Err(Error::InvalidArgument("key/query dimension must be >= 1".into()));
        }
        for (name, m) in [("K", &k), ("V", &v), ("K_id", &k_id), ("V_id", &v_id)] {
            if m.ncols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "{} has {} columns, queries have {}",
                    name,
                    m.ncols(),
                    d
                )));
            }
        }
        let m_tokens = k.nrows();
        for (name, m) in [("V", &v), ("K_id", &k_id), ("V_id", &v_id)] {
            if m.nrows() != m_tokens {
                return Err(Error::ShapeMismatch(format!(
                    "{} has {} rows, K has {}",
                    name,
                    m.nrows(),
                    m_tokens
                )));
            }
        }
        for m in [&q, &k, &v, &k_id, &v_id] {
            m.ensure_finite()?;
        }
        for i in 0..m_tokens {
            let copied =
                k_id.row(i) == k.row(i) && v_id.row(i) == v.row(i);
            let zeroed = k_id.row(i).iter().all(|x| x.to_f64() == 0.0)
                && v_id.row(i).iter().all(|x| x.to_f64() == 0.0);
            if !copied && !zeroed {
                return Err(Error::ShapeMismatch(format!(
                    "identity-branch row {} is neither a copy nor zero",
                    i
                )));
            }
        }
        Ok(Self { q, k, v, k_id, v_id })
    }

    /// Builds the identity branch from a layout via [`identity_mask`].
    pub fn masked(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>, layout: &PromptLayout) -> Result<Self> {
        let (k_id, v_id) = identity_mask(&k, &v, layout)?;
        Self::new(q, k, v, k_id, v_id)
    }

    pub fn queries(&self) -> &Matrix<T> {
        &self.q
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.k
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn identity_keys(&self) -> &Matrix<T> {
        &self.k_id
    }

    pub fn identity_values(&self) -> &Matrix<T> {
        &self.v_id
    }

    pub fn n_tokens(&self) -> usize {
        self.k.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }
}

/// Fills `weights` with `exp(score - max)` for query row `qi` and returns
/// the normalizer. Max subtraction keeps the exponentials in range; the
/// fixed left-to-right accumulation keeps results bitwise reproducible.
fn softmax_row<T: Real>(
    qrow: &[T],
    k: &Matrix<T>,
    scale: f64,
    qi: usize,
    weights: &mut [f64],
) -> Result<f64> {
    let mut max_score = f64::NEG_INFINITY;
    for (ki, w) in weights.iter_mut().enumerate() {
        let s = dot(qrow, k.row(ki)) * scale;
        if !s.is_finite() {
            return Err(Error::NonFiniteScore { query: qi, key: ki });
        }
        *w = s;
        if s > max_score {
            max_score = s;
        }
    }
    let mut denom = 0.0f64;
    for w in weights.iter_mut() {
        *w = (*w - max_score).exp();
        denom += *w;
    }
    Ok(denom)
}

/// Row-softmax scaled-dot-product attention, `softmax(Q Kᵀ / √d) V`,
/// accumulated in f64.
pub fn scaled_dot_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    if k.ncols() != q.ncols() || v.nrows() != k.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "Q {}x{}, K {}x{}, V {}x{}",
            q.nrows(),
            q.ncols(),
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Matrix::zeros(q.nrows(), v.ncols());
    let mut weights = vec![0.0f64; k.nrows()];
    for qi in 0..q.nrows() {
        let denom = softmax_row(q.row(qi), k, scale, qi, &mut weights)?;
        for col in 0..v.ncols() {
            let mut acc = 0.0f64;
            for (ki, w) in weights.iter().enumerate() {
                acc += w * v.get(ki, col).to_f64();
            }
            out.set(qi, col, T::from_f64(acc / denom));
        }
    }
    Ok(out)
}

/// The normalized attention map `softmax(Q Kᵀ / √d)` of
/// [`scaled_dot_attention`], exposed for diagnostics: each row sums to 1
/// and every entry lies in `[0, 1]`.
pub fn attention_map<T: Real>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<f64>> {
    if k.ncols() != q.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Q {}x{}, K {}x{}",
            q.nrows(),
            q.ncols(),
            k.nrows(),
            k.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut map = Matrix::zeros(q.nrows(), k.nrows());
    let mut weights = vec![0.0f64; k.nrows()];
    for qi in 0..q.nrows() {
        let denom = softmax_row(q.row(qi), k, scale, qi, &mut weights)?;
        for (ki, w) in weights.iter().enumerate() {
            map.set(qi, ki, w / denom);
        }
    }
    Ok(map)
}

impl<T: Real> AttentionBatch<T> {
    /// `[K; K_id]` and `[V; V_id]`, concatenated along the token axis.
    fn concatenated(&self) -> (Matrix<T>, Matrix<T>) {
        let m = self.n_tokens();
        let mut k_cat = Matrix::zeros(2 * m, self.k.ncols());
        let mut v_cat = Matrix::zeros(2 * m, self.v.ncols());
        for i in 0..m {
            k_cat.row_mut(i).copy_from_slice(self.k.row(i));
            k_cat.row_mut(m + i).copy_from_slice(self.k_id.row(i));
            v_cat.row_mut(i).copy_from_slice(self.v.row(i));
            v_cat.row_mut(m + i).copy_from_slice(self.v_id.row(i));
        }
        (k_cat, v_cat)
    }
}

/// Augmented attention over the concatenated token axis:
/// `softmax(Q [K; K_id]ᵀ / √d) [V; V_id]`.
pub fn ipca_attention<T: Real>(batch: &AttentionBatch<T>) -> Result<Matrix<T>> {
    let (k_cat, v_cat) = batch.concatenated();
    scaled_dot_attention(&batch.q, &k_cat, &v_cat)
}

/// The `Lq × 2M` attention map of [`ipca_attention`].
pub fn ipca_attention_map<T: Real>(batch: &AttentionBatch<T>) -> Result<Matrix<f64>> {
    let (k_cat, _) = batch.concatenated();
    attention_map(&batch.q, &k_cat)
}

/// Reference implementation of [`ipca_attention`] written as plain scalar
/// loops with per-element exp/sum — no shared kernels, no max-subtraction
/// trick. Exists so the two code paths can be checked against each other.
#[allow(clippy::needless_range_loop)] // indexed loops are the point here
pub fn naive_attention_oracle<T: Real>(batch: &AttentionBatch<T>) -> Result<Matrix<T>> {
    let m = batch.n_tokens();
    let lq = batch.q.nrows();
    let d = batch.head_dim();
    let dv = batch.v.ncols();
    let scale = (d as f64).sqrt();

    let key_row = |idx: usize| -> &Matrix<T> {
        if idx < m {
            &batch.k
        } else {
            &batch.k_id
        }
    };
    let val_row = |idx: usize| -> &Matrix<T> {
        if idx < m {
            &batch.v
        } else {
            &batch.v_id
        }
    };

    let mut out = Matrix::zeros(lq, dv);
    for qi in 0..lq {
        let mut weights = vec![0.0f64; 2 * m];
        for ki in 0..2 * m {
            let source = key_row(ki);
            let row = ki % m;
            let mut s = 0.0f64;
            for c in 0..d {
                s += batch.q.get(qi, c).to_f64() * source.get(row, c).to_f64();
            }
            let e = (s / scale).exp();
            if !e.is_finite() {
                return Err(Error::NonFiniteScore { query: qi, key: ki });
            }
            weights[ki] = e;
        }
        let mut total = 0.0f64;
        for w in &weights {
            total += w;
        }
        for c in 0..dv {
            let mut acc = 0.0f64;
            for ki in 0..2 * m {
                acc += weights[ki] / total * val_row(ki).get(ki % m, c).to_f64();
            }
            out.set(qi, c, T::from_f64(acc));
        }
    }
    Ok(out)
}
