//! Gram–Schmidt decorrelation of frame representatives and re-injection of
//! the orthonormalized rows into the token matrix.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::layout::{FrameMatrix, PromptLayout, TokenEmbeddingMatrix};
use crate::matrix::{norm, Matrix};
use crate::real::Real;

/// What to do with a frame whose residual collapses (linear dependence on
/// earlier frames).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    /// Fail with [`Error::DegenerateFrame`]. Default: a dependent frame is
    /// usually a prompt-authoring mistake worth surfacing.
    #[default]
    Error,
    /// Emit the normalized original row and record the frame as degenerate.
    KeepNormalizedOriginal,
}

/// Tolerances for the orthogonalization pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecorrelationParams<T> {
    /// A frame counts as dependent when its residual norm falls below
    /// `dependence_epsilon * ||c_Pk||`. Must lie in `[0, 1)`.
    pub dependence_epsilon: T,
    pub degenerate_policy: DegeneratePolicy,
}

impl<T: Real> Default for DecorrelationParams<T> {
    fn default() -> Self {
        Self {
            dependence_epsilon: T::from_f64(1e-8),
            degenerate_policy: DegeneratePolicy::Error,
        }
    }
}

impl<T: Real> DecorrelationParams<T> {
    pub fn validate(&self) -> Result<()> {
        let eps = self.dependence_epsilon.to_f64();
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "dependence epsilon {} outside [0, 1)",
                eps
            )));
        }
        Ok(())
    }
}

/// Orthonormalized frame representatives. Rows listed in
/// `degenerate_frames` (1-based) were handled by the fallback policy and
/// are unit-norm copies of their originals rather than orthogonal
/// directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorrelatedFrameMatrix<T> {
    rows: Matrix<T>,
    degenerate_frames: BTreeSet<usize>,
}

impl<T: Real> DecorrelatedFrameMatrix<T> {
    /// Wraps rows that are used *as-is* as frame representatives, without
    /// orthogonalizing. This is the bypass the pipeline takes when the
    /// Gram–Schmidt stage is disabled; the orthonormality guarantees of
    /// [`modified_gram_schmidt`] do not apply to such a value.
    pub fn from_rows_unchecked(rows: Matrix<T>) -> Result<Self> {
        rows.ensure_finite()?;
        Ok(Self {
            rows,
            degenerate_frames: BTreeSet::new(),
        })
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn n_frames(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Representative row for 1-based frame `k`.
    pub fn frame_row(&self, k: usize) -> &[T] {
        self.rows.row(k - 1)
    }

    /// 1-based indices of frames handled by the fallback policy.
    pub fn degenerate_frames(&self) -> &BTreeSet<usize> {
        &self.degenerate_frames
    }
}

// Intermediate dots above this trigger the second projection pass.
const REORTH_THRESHOLD: f64 = 1e-10;

/// Row-wise modified Gram–Schmidt in ascending frame order.
///
/// Row 1 becomes `c_P1 / ||c_P1||`. Each later row is projected against
/// every already-produced row sequentially and then normalized; when any
/// leftover dot against the produced basis exceeds `1e-10` relative to the
/// residual norm, one extra projection pass runs. A residual below
/// `dependence_epsilon * ||c_Pk||` (and, unconditionally, any frame beyond
/// the first D) is handled by the degenerate policy.
pub fn modified_gram_schmidt<T: Real>(
    frames: &FrameMatrix<T>,
    params: &DecorrelationParams<T>,
) -> Result<DecorrelatedFrameMatrix<T>> {
    params.validate()?;
    let n = frames.n_frames();
    let d = frames.dim();
    let eps = params.dependence_epsilon.to_f64();

    let mut out = Matrix::zeros(n, d);
    let mut degenerate = BTreeSet::new();
    let mut basis: Vec<usize> = Vec::new(); // output rows holding orthonormal directions

    for k in 0..n {
        let original = frames.rows().row(k);
        let original_norm = norm(original);
        if original_norm == 0.0 {
            return Err(Error::ZeroRow(k + 1));
        }

        // More rows than dimensions cannot stay independent; fail at the
        // first frame past a full basis rather than trusting rounding.
        let full_basis = basis.len() == d;

        let mut residual: Vec<f64> = original.iter().map(|v| v.to_f64()).collect();
        if !full_basis {
            project_out(&mut residual, &out, &basis);
            if needs_reorth(&residual, &out, &basis) {
                project_out(&mut residual, &out, &basis);
            }
        }
        let residual_norm = norm_f64(&residual);

        // An exactly-zero residual is dependent no matter how small eps is.
        if full_basis || residual_norm < eps * original_norm || residual_norm == 0.0 {
            match params.degenerate_policy {
                DegeneratePolicy::Error => return Err(Error::DegenerateFrame(k + 1)),
                DegeneratePolicy::KeepNormalizedOriginal => {
                    degenerate.insert(k + 1);
                    for (j, v) in original.iter().enumerate() {
                        out.set(k, j, T::from_f64(v.to_f64() / original_norm));
                    }
                    continue;
                }
            }
        }
        for (j, v) in residual.iter().enumerate() {
            out.set(k, j, T::from_f64(v / residual_norm));
        }
        basis.push(k);
    }

    Ok(DecorrelatedFrameMatrix {
        rows: out,
        degenerate_frames: degenerate,
    })
}

fn project_out<T: Real>(residual: &mut [f64], out: &Matrix<T>, basis: &[usize]) {
    for &row in basis {
        let q = out.row(row);
        let mut coeff = 0.0f64;
        for (r, qv) in residual.iter().zip(q) {
            coeff += r * qv.to_f64();
        }
        for (r, qv) in residual.iter_mut().zip(q) {
            *r -= coeff * qv.to_f64();
        }
    }
}

fn needs_reorth<T: Real>(residual: &[f64], out: &Matrix<T>, basis: &[usize]) -> bool {
    let scale = norm_f64(residual);
    if scale == 0.0 {
        return false;
    }
    basis.iter().any(|&row| {
        let q = out.row(row);
        let dot: f64 = residual.iter().zip(q).map(|(r, qv)| r * qv.to_f64()).sum();
        dot.abs() > REORTH_THRESHOLD * scale
    })
}

fn norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Replaces the frame spans of `matrix` with the decorrelated
/// representatives, leaving SOT, identity, EOT, and padding rows
/// bit-identical.
///
/// Single-token spans take the representative verbatim. Multi-token spans
/// are shifted by `rep - centroid`, so the span keeps its internal
/// structure while its mean moves exactly onto the representative.
pub fn inject_decorrelated<T: Real>(
    matrix: &TokenEmbeddingMatrix<T>,
    layout: &PromptLayout,
    decorrelated: &DecorrelatedFrameMatrix<T>,
) -> Result<TokenEmbeddingMatrix<T>> {
    inject_rows(matrix, layout, decorrelated.rows())
}

/// Span-injection rule shared by decorrelation and the per-frame
/// conditioning assembly: `reps` holds one replacement row per frame.
pub(crate) fn inject_rows<T: Real>(
    matrix: &TokenEmbeddingMatrix<T>,
    layout: &PromptLayout,
    reps: &Matrix<T>,
) -> Result<TokenEmbeddingMatrix<T>> {
    layout.validate_rows(matrix.n_tokens())?;
    if reps.nrows() != layout.n_frames() || reps.ncols() != matrix.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} replacement rows for layout with {} frames of dim {}",
            reps.nrows(),
            reps.ncols(),
            layout.n_frames(),
            matrix.dim()
        )));
    }
    let mut out = matrix.matrix().clone();
    for (k, span) in layout.frames().iter().enumerate() {
        let rep = reps.row(k);
        if span.len() == 1 {
            out.row_mut(span.start).copy_from_slice(rep);
        } else {
            let centroid = crate::layout::pool_span(matrix, *span)?;
            let shift: Vec<f64> = rep
                .iter()
                .zip(&centroid)
                .map(|(r, c)| r.to_f64() - c.to_f64())
                .collect();
            for i in span.iter() {
                let row = out.row_mut(i);
                for (v, s) in row.iter_mut().zip(&shift) {
                    *v = T::from_f64(v.to_f64() + s);
                }
            }
        }
    }
    TokenEmbeddingMatrix::new(out)
}
