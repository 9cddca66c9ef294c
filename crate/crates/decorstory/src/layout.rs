//! Token-embedding data model: the token matrix, the role layout over its
//! rows, and extraction of one representative row per frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};
use crate::real::Real;

/// Inclusive, contiguous range of token rows (`[start, end]`).
/// Serializes as a two-element array to match the layout sidecar format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(span: Span) -> Self {
        (span.start, span.end)
    }
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Token count; meaningful only for non-reversed spans, which is all a
    /// validated layout can hold.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    /// True only for reversed (hence invalid) spans; a validated span
    /// always holds at least one token.
    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn contains(&self, idx: usize) -> bool {
        (self.start..=self.end).contains(&idx)
    }
}

/// Role assignment for the rows of a token matrix: one SOT row, a shared
/// identity span, `N ≥ 1` frame spans, one EOT row. Rows not covered by any
/// role are padding and pass through every stage untouched.
///
/// Fields are private; the only way to obtain a `PromptLayout` is through
/// [`PromptLayout::new`] or the file loader, both of which enforce the
/// ordering invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptLayout {
    sot: usize,
    identity: Span,
    frames: Vec<Span>,
    eot: usize,
}

impl PromptLayout {
    /// Validates ordering and disjointness:
    /// `sot < identity < frames[0] < … < frames[N-1] < eot`, every span
    /// non-empty, at least one frame.
    pub fn new(sot: usize, identity: Span, frames: Vec<Span>, eot: usize) -> Result<Self> {
        let layout = Self {
            sot,
            identity,
            frames,
            eot,
        };
        layout.check_order()?;
        Ok(layout)
    }

    pub(crate) fn check_order(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::LayoutInconsistent("no frame spans".into()));
        }
        if self.identity.end < self.identity.start {
            return Err(Error::LayoutInconsistent("identity span reversed".into()));
        }
        for (k, span) in self.frames.iter().enumerate() {
            if span.end < span.start {
                return Err(Error::LayoutInconsistent(format!(
                    "frame span {} reversed",
                    k + 1
                )));
            }
        }
        if self.sot >= self.identity.start {
            return Err(Error::LayoutInconsistent(
                "sot must precede the identity span".into(),
            ));
        }
        if self.identity.end >= self.frames[0].start {
            return Err(Error::LayoutInconsistent(
                "identity span must precede the first frame span".into(),
            ));
        }
        for pair in self.frames.windows(2) {
            if pair[0].end >= pair[1].start {
                return Err(Error::LayoutInconsistent(
                    "frame spans must be disjoint and ascending".into(),
                ));
            }
        }
        if self.frames[self.frames.len() - 1].end >= self.eot {
            return Err(Error::LayoutInconsistent(
                "last frame span must precede eot".into(),
            ));
        }
        Ok(())
    }

    pub fn sot(&self) -> usize {
        self.sot
    }

    pub fn identity(&self) -> Span {
        self.identity
    }

    pub fn frames(&self) -> &[Span] {
        &self.frames
    }

    pub fn eot(&self) -> usize {
        self.eot
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Frame span for 1-based frame number `k`.
    pub fn frame_span(&self, k: usize) -> Option<Span> {
        (1..=self.frames.len())
            .contains(&k)
            .then(|| self.frames[k - 1])
    }

    /// Checks the layout against a matrix with `m` rows: all indices in
    /// range and at least SOT + identity + one frame + EOT worth of rows.
    pub fn validate_rows(&self, m: usize) -> Result<()> {
        if self.eot >= m {
            return Err(Error::LayoutInconsistent(format!(
                "eot index {} outside matrix with {} rows",
                self.eot, m
            )));
        }
        if m < 4 {
            return Err(Error::LayoutInconsistent(format!(
                "matrix has {} rows, need at least 4 (sot, identity, frame, eot)",
                m
            )));
        }
        Ok(())
    }

    /// True when row `idx` is covered by no role (padding).
    pub fn is_padding(&self, idx: usize) -> bool {
        idx != self.sot
            && idx != self.eot
            && !self.identity.contains(idx)
            && !self.frames.iter().any(|s| s.contains(idx))
    }
}

/// `M × D` matrix of token embeddings; every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix<T> {
    data: Matrix<T>,
}

impl<T: Real> TokenEmbeddingMatrix<T> {
    pub fn new(data: Matrix<T>) -> Result<Self> {
        data.ensure_finite()?;
        Ok(Self { data })
    }

    pub fn from_raw(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(Matrix::new(rows, cols, values)?)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.data
    }

    /// Token count M.
    pub fn n_tokens(&self) -> usize {
        self.data.nrows()
    }

    /// Embedding dimension D.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.data.row(i)
    }
}

/// How each frame representative was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepresentativeMode {
    /// Every frame span had length 1; rows are the span rows verbatim.
    SingleToken,
    /// At least one span was multi-token; rows are span means.
    MeanPooled,
}

/// `N × D` matrix holding one representative embedding row per frame.
/// Every row has strictly positive norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix<T> {
    rows: Matrix<T>,
    mode: RepresentativeMode,
}

impl<T: Real> FrameMatrix<T> {
    /// Rejects rows whose norm falls below the dtype's zero threshold;
    /// the rejected frame is reported 1-based.
    pub fn new(rows: Matrix<T>, mode: RepresentativeMode) -> Result<Self> {
        rows.ensure_finite()?;
        let eps = T::ZERO_NORM_EPS.to_f64();
        for (k, row) in rows.rows_iter().enumerate() {
            let n = norm(row);
            if n < eps {
                return Err(Error::ZeroFrameEmbedding {
                    frame: k + 1,
                    norm: n,
                });
            }
        }
        Ok(Self { rows, mode })
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn mode(&self) -> RepresentativeMode {
        self.mode
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
}

/// Arithmetic mean of the span's rows.
pub fn pool_span<T: Real>(matrix: &TokenEmbeddingMatrix<T>, span: Span) -> Result<Vec<T>> {
    if span.end < span.start {
        return Err(Error::EmptySpan);
    }
    if span.end >= matrix.n_tokens() {
        return Err(Error::LayoutInconsistent(format!(
            "span [{}, {}] outside matrix with {} rows",
            span.start,
            span.end,
            matrix.n_tokens()
        )));
    }
    let d = matrix.dim();
    let mut acc = vec![0.0f64; d];
    for i in span.iter() {
        for (a, v) in acc.iter_mut().zip(matrix.row(i)) {
            *a += v.to_f64();
        }
    }
    let count = span.len() as f64;
    Ok(acc.into_iter().map(|a| T::from_f64(a / count)).collect())
}

/// Pools every frame span of `layout` into one row (the N × D stack of
/// frame representatives). Spans of length 1 are copied verbatim so
/// single-token extraction is bit-exact.
pub fn extract_frame_matrix<T: Real>(
    matrix: &TokenEmbeddingMatrix<T>,
    layout: &PromptLayout,
) -> Result<FrameMatrix<T>> {
    layout.validate_rows(matrix.n_tokens())?;
    let single = layout.frames.iter().all(|s| s.len() == 1);
    let mode = if single {
        RepresentativeMode::SingleToken
    } else {
        RepresentativeMode::MeanPooled
    };
    let mut rows = Matrix::zeros(layout.n_frames(), matrix.dim());
    for (k, span) in layout.frames.iter().enumerate() {
        if span.len() == 1 {
            rows.row_mut(k).copy_from_slice(matrix.row(span.start));
        } else {
            let pooled = pool_span(matrix, *span)?;
            rows.row_mut(k).copy_from_slice(&pooled);
        }
    }
    FrameMatrix::new(rows, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token_matrix(rows: &[Vec<f64>]) -> TokenEmbeddingMatrix<f64> {
        TokenEmbeddingMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn simple_layout() -> PromptLayout {
        PromptLayout::new(0, Span::new(1, 1), vec![Span::new(2, 2), Span::new(3, 3)], 4).unwrap()
    }

    #[test]
    fn layout_ordering_enforced() {
        assert!(PromptLayout::new(0, Span::new(1, 2), vec![Span::new(2, 3)], 4).is_err());
        assert!(PromptLayout::new(1, Span::new(1, 1), vec![Span::new(2, 2)], 3).is_err());
        assert!(PromptLayout::new(0, Span::new(1, 1), vec![], 3).is_err());
        assert!(
            PromptLayout::new(0, Span::new(1, 1), vec![Span::new(2, 3), Span::new(3, 4)], 5)
                .is_err()
        );
        assert!(PromptLayout::new(0, Span::new(1, 1), vec![Span::new(2, 2)], 2).is_err());
    }

    #[test]
    fn validate_rows_bounds() {
        let layout = simple_layout();
        assert!(layout.validate_rows(5).is_ok());
        assert!(layout.validate_rows(4).is_err());
    }

    #[test]
    fn padding_detection() {
        let layout = PromptLayout::new(0, Span::new(1, 1), vec![Span::new(3, 3)], 5).unwrap();
        assert!(layout.is_padding(2));
        assert!(layout.is_padding(4));
        assert!(!layout.is_padding(0));
        assert!(!layout.is_padding(3));
    }

    #[test]
    fn pool_singleton_is_identity() {
        let m = token_matrix(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ]);
        assert_eq!(pool_span(&m, Span::new(1, 1)).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn pool_of_identical_rows_is_the_row() {
        let m = token_matrix(&[
            vec![2.5, -1.0],
            vec![2.5, -1.0],
            vec![2.5, -1.0],
            vec![0.0, 0.0],
        ]);
        assert_eq!(pool_span(&m, Span::new(0, 2)).unwrap(), vec![2.5, -1.0]);
    }

    #[test]
    fn pool_arithmetic_mean() {
        let m = token_matrix(&[vec![2.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(pool_span(&m, Span::new(0, 1)).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn extract_single_token_is_verbatim() {
        let m = token_matrix(&[
            vec![9.0, 9.0],
            vec![8.0, 8.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![7.0, 7.0],
        ]);
        let layout = simple_layout();
        let x = extract_frame_matrix(&m, &layout).unwrap();
        assert_eq!(x.mode(), RepresentativeMode::SingleToken);
        assert_eq!(x.frame_row(1), &[1.0, 2.0]);
        assert_eq!(x.frame_row(2), &[3.0, 4.0]);
    }

    #[test]
    fn extract_pools_multi_token_spans() {
        let m = token_matrix(&[
            vec![9.0, 9.0, 9.0, 9.0],
            vec![8.0, 8.0, 8.0, 8.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![7.0, 7.0, 7.0, 7.0],
        ]);
        let layout = PromptLayout::new(0, Span::new(1, 1), vec![Span::new(2, 3)], 4).unwrap();
        let x = extract_frame_matrix(&m, &layout).unwrap();
        assert_eq!(x.mode(), RepresentativeMode::MeanPooled);
        assert_eq!(x.frame_row(1), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn zero_pooled_frame_rejected() {
        let m = token_matrix(&[
            vec![9.0, 9.0],
            vec![8.0, 8.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![7.0, 7.0],
        ]);
        let layout = PromptLayout::new(0, Span::new(1, 1), vec![Span::new(2, 3)], 4).unwrap();
        match extract_frame_matrix(&m, &layout) {
            Err(Error::ZeroFrameEmbedding { frame: 1, .. }) => {}
            other => panic!("expected ZeroFrameEmbedding, got {:?}", other),
        }
    }

    #[test]
    fn extract_is_a_projection() {
        // Re-extracting from a matrix whose frame rows were replaced by the
        // extracted representatives yields the same frame matrix.
        let m = token_matrix(&[
            vec![9.0, 9.0],
            vec![8.0, 8.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![7.0, 7.0],
        ]);
        let layout = simple_layout();
        let x = extract_frame_matrix(&m, &layout).unwrap();
        let mut replaced = m.matrix().clone();
        for (k, span) in layout.frames().iter().enumerate() {
            replaced.row_mut(span.start).copy_from_slice(x.rows().row(k));
        }
        let again =
            extract_frame_matrix(&TokenEmbeddingMatrix::new(replaced).unwrap(), &layout).unwrap();
        assert_eq!(again.rows(), x.rows());
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        let m = Matrix::new(4, 1, vec![1.0, f64::INFINITY, 0.0, 0.0]).unwrap();
        assert!(TokenEmbeddingMatrix::new(m).is_err());
    }
}
