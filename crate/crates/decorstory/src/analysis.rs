//! Correlation diagnostics for frame representatives: cosine Gram matrix,
//! summary statistics, effective rank, and a synthetic generator that
//! produces frame embeddings with a controllable shared component.

use crate::decorrelation::DecorrelatedFrameMatrix;
use crate::error::{Error, Result};
use crate::layout::{FrameMatrix, RepresentativeMode};
use crate::matrix::{dot, norm, Matrix};
use crate::real::Real;
use crate::rng::SplitMix64;

/// Correlation summary of an N-row representative matrix. All statistics
/// are recomputable from `gram`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// N × N cosine-similarity matrix; symmetric with unit diagonal.
    pub gram: Matrix<f64>,
    /// Mean of `|gram[i][j]|` over i < j (0 when N = 1).
    pub mean_abs_offdiag: f64,
    /// Max of `|gram[i][j]|` over i < j (0 when N = 1).
    pub max_abs_offdiag: f64,
    /// `exp(entropy)` of the normalized squared singular values; N for
    /// orthonormal rows, 1 for rank one.
    pub effective_rank: f64,
}

/// Pairwise cosine similarities of the rows, computed in f64.
pub fn cosine_gram<T: Real>(rows: &Matrix<T>) -> Result<Matrix<f64>> {
    let n = rows.nrows();
    let norms: Vec<f64> = (0..n).map(|i| norm(rows.row(i))).collect();
    for (i, &ni) in norms.iter().enumerate() {
        if ni == 0.0 {
            return Err(Error::ZeroRow(i + 1));
        }
    }
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        gram.set(i, i, 1.0);
        for j in (i + 1)..n {
            let c = dot(rows.row(i), rows.row(j)) / (norms[i] * norms[j]);
            gram.set(i, j, c);
            gram.set(j, i, c);
        }
    }
    Ok(gram)
}

/// Builds the full report for an arbitrary representative matrix.
pub fn report_for_rows<T: Real>(rows: &Matrix<T>) -> Result<CorrelationReport> {
    let gram = cosine_gram(rows)?;
    let n = gram.nrows();
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = gram.get(i, j).abs();
            sum += a;
            max = max.max(a);
            pairs += 1;
        }
    }
    let mean = if pairs == 0 { 0.0 } else { sum / pairs as f64 };
    Ok(CorrelationReport {
        gram,
        mean_abs_offdiag: mean,
        max_abs_offdiag: max,
        effective_rank: effective_rank(rows),
    })
}

/// Correlation reports before and after decorrelation.
pub fn correlation_report<T: Real>(
    before: &FrameMatrix<T>,
    after: &DecorrelatedFrameMatrix<T>,
) -> Result<(CorrelationReport, CorrelationReport)> {
    if before.n_frames() != after.n_frames() {
        return Err(Error::ShapeMismatch(format!(
            "before has {} frames, after has {}",
            before.n_frames(),
            after.n_frames()
        )));
    }
    Ok((report_for_rows(before.rows())?, report_for_rows(after.rows())?))
}

/// `exp(H)` where H is the entropy of the normalized squared singular
/// values of the row matrix. The squared singular values are the
/// eigenvalues of the N × N Gram matrix `X Xᵀ`, obtained by cyclic Jacobi
/// sweeps (N is small, ≤ a few dozen).
pub fn effective_rank<T: Real>(rows: &Matrix<T>) -> f64 {
    let n = rows.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let g = dot(rows.row(i), rows.row(j));
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let mut eig = jacobi_eigenvalues(gram, n);
    for v in eig.iter_mut() {
        *v = v.max(0.0);
    }
    let total: f64 = eig.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut entropy = 0.0f64;
    for v in &eig {
        let p = v / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

/// Eigenvalues of a symmetric matrix (row-major, n × n) via cyclic Jacobi
/// rotations; deterministic sweep order.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    if n == 1 {
        return a;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * scale.max(1.0);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].abs();
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Synthetic correlated frame representatives:
/// `x_k = normalize(sqrt(rho) * g + sqrt(1 - rho) * h_k)` with one shared
/// Gaussian vector `g` and independent Gaussian vectors `h_k`, all drawn
/// from a single SplitMix64 stream seeded with `seed` in the order
/// `g, h_1, …, h_N`.
pub fn gen_synthetic<T: Real>(n: usize, d: usize, rho: f64, seed: u64) -> Result<FrameMatrix<T>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidRho(rho));
    }
    if n == 0 || n > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= n <= d, got n = {}, d = {}",
            n, d
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let shared = rng.gaussian_vec(d);
    let ws = rho.sqrt();
    let wi = (1.0 - rho).sqrt();
    let mut rows = Matrix::zeros(n, d);
    for k in 0..n {
        let own = rng.gaussian_vec(d);
        let mut row: Vec<f64> = shared
            .iter()
            .zip(&own)
            .map(|(g, h)| ws * g + wi * h)
            .collect();
        let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn == 0.0 {
            // Probability zero; keep the error path honest anyway.
            return Err(Error::ZeroRow(k + 1));
        }
        for x in row.iter_mut() {
            *x /= rn;
        }
        for (j, x) in row.iter().enumerate() {
            rows.set(k, j, T::from_f64(*x));
        }
    }
    FrameMatrix::new(rows, RepresentativeMode::SingleToken)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decorrelation::{modified_gram_schmidt, DecorrelationParams};

    fn rows(data: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(data).unwrap()
    }

    #[test]
    fn orthonormal_rows_give_identity_gram() {
        let g = cosine_gram(&rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]])).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let g = cosine_gram(&rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![2.0, 4.0]])).unwrap();
        for v in g.as_slice() {
            assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn hand_computed_offdiagonal() {
        let g = cosine_gram(&rows(&[vec![1.0, 0.0], vec![1.0, 1.0]])).unwrap();
        let expect = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.get(0, 1) - expect).abs() <= 1e-12);
        assert!((g.get(1, 0) - expect).abs() <= 1e-12);
    }

    #[test]
    fn zero_row_rejected() {
        assert!(matches!(
            cosine_gram(&rows(&[vec![1.0, 0.0], vec![0.0, 0.0]])),
            Err(Error::ZeroRow(2))
        ));
    }

    #[test]
    fn gram_is_scale_invariant() {
        let base = rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.2]]);
        let mut scaled = base.clone();
        for i in 0..scaled.nrows() {
            for j in 0..scaled.ncols() {
                scaled.set(i, j, scaled.get(i, j) * 4.0);
            }
        }
        let g1 = cosine_gram(&base).unwrap();
        let g2 = cosine_gram(&scaled).unwrap();
        assert!(g1.max_abs_diff(&g2).unwrap() <= 1e-12);
    }

    #[test]
    fn effective_rank_extremes() {
        let ortho = rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        assert!((effective_rank(&ortho) - 3.0).abs() <= 1e-8);
        let rank1 = rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0]]);
        assert!((effective_rank(&rank1) - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn report_consistent_with_gram() {
        let m = rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]);
        let report = report_for_rows(&m).unwrap();
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                sum += report.gram.get(i, j).abs();
                max = max.max(report.gram.get(i, j).abs());
            }
        }
        assert!((report.mean_abs_offdiag - sum / 3.0).abs() <= 1e-15);
        assert!((report.max_abs_offdiag - max).abs() <= 1e-15);
    }

    #[test]
    fn decorrelated_report_is_orthogonal() {
        let frames = FrameMatrix::new(
            rows(&[vec![1.0, 0.2, 0.1], vec![0.9, 1.0, 0.0], vec![0.5, 0.5, 1.0]]),
            RepresentativeMode::SingleToken,
        )
        .unwrap();
        let decor = modified_gram_schmidt(&frames, &DecorrelationParams::default()).unwrap();
        let (before, after) = correlation_report(&frames, &decor).unwrap();
        assert!(before.mean_abs_offdiag > 0.1);
        assert!(after.mean_abs_offdiag <= 1e-8);
        assert!((after.effective_rank - 3.0).abs() <= 1e-6);
    }

    #[test]
    fn duplicated_rows_report_unit_mean() {
        let frames = FrameMatrix::new(
            rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]),
            RepresentativeMode::SingleToken,
        )
        .unwrap();
        let report = report_for_rows(frames.rows()).unwrap();
        assert!((report.mean_abs_offdiag - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn report_matches_scalar_loop_oracle_on_synthetic_input() {
        // Independent recomputation of mean |off-diagonal| cosine with
        // bare scalar loops.
        let x = gen_synthetic::<f64>(4, 32, 0.9, 3).unwrap();
        let report = report_for_rows(x.rows()).unwrap();
        let n = x.n_frames();
        let mut sum = 0.0f64;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut dot = 0.0f64;
                let mut ni = 0.0f64;
                let mut nj = 0.0f64;
                for c in 0..x.dim() {
                    let a = x.rows().get(i, c);
                    let b = x.rows().get(j, c);
                    dot += a * b;
                    ni += a * a;
                    nj += b * b;
                }
                sum += (dot / (ni.sqrt() * nj.sqrt())).abs();
                pairs += 1;
            }
        }
        let oracle = sum / pairs as f64;
        assert!(
            (report.mean_abs_offdiag - oracle).abs() <= 1e-12,
            "report {} vs oracle {}",
            report.mean_abs_offdiag,
            oracle
        );
        assert!(report.mean_abs_offdiag > 0.5, "rho = 0.9 should correlate");
    }

    #[test]
    fn synthetic_rho_one_collapses_to_shared_direction() {
        let x = gen_synthetic::<f64>(3, 16, 1.0, 99).unwrap();
        let g = cosine_gram(x.rows()).unwrap();
        for v in g.as_slice() {
            assert!((v.abs() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn synthetic_rho_zero_low_correlation_high_dim() {
        // Monte-Carlo bound: across 1000 seeds the largest |off-diagonal|
        // cosine of 4 independent 1024-dim Gaussian rows stays tiny.
        let mut worst = 0.0f64;
        for seed in 0..1000u64 {
            let x = gen_synthetic::<f64>(4, 1024, 0.0, seed).unwrap();
            let report = report_for_rows(x.rows()).unwrap();
            worst = worst.max(report.max_abs_offdiag);
        }
        assert!(worst < 0.2, "worst off-diagonal {}", worst);
    }

    #[test]
    fn synthetic_deterministic() {
        let a = gen_synthetic::<f64>(4, 32, 0.5, 7).unwrap();
        let b = gen_synthetic::<f64>(4, 32, 0.5, 7).unwrap();
        assert_eq!(a.rows(), b.rows());
    }

    #[test]
    fn synthetic_correlation_monotone_in_rho() {
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut means = Vec::new();
        for &rho in &grid {
            let mut acc = 0.0;
            for seed in 0..100u64 {
                let x = gen_synthetic::<f64>(4, 64, rho, seed).unwrap();
                acc += report_for_rows(x.rows()).unwrap().mean_abs_offdiag;
            }
            means.push(acc / 100.0);
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "means not monotone: {:?}", means);
        }
    }

    #[test]
    fn synthetic_validates_arguments() {
        assert!(matches!(
            gen_synthetic::<f64>(4, 16, 1.5, 0),
            Err(Error::InvalidRho(_))
        ));
        assert!(gen_synthetic::<f64>(0, 16, 0.5, 0).is_err());
        assert!(gen_synthetic::<f64>(17, 16, 0.5, 0).is_err());
    }
}
