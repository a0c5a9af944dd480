//! Dense linear-algebra kernels shared by the fitting code.
//!
//! Symmetric eigendecompositions and Cholesky factorizations are delegated to
//! `nalgebra`; everything else works on `ndarray` matrices, which is the
//! storage type used throughout the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{CdmError, Result};

/// Relative pivot floor below which a Cholesky factor is treated as singular.
const PIVOT_FLOOR: f64 = 1e-12;

/// Eigenvalues in descending order with their eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn to_nalgebra(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn check_square(a: ArrayView2<f64>, context: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(CdmError::DimensionMismatch {
            context,
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    Ok(())
}

fn check_finite(a: ArrayView2<f64>, context: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CdmError::NonFinite(context))
    }
}

fn symmetrized(a: ArrayView2<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]))
}

/// Flips each column so that its first non-negligible entry is positive.
pub(crate) fn canonical_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        let scale = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        if let Some(&first) = col.iter().find(|v| v.abs() > 1e-12 * scale) {
            if first < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
    }
}

/// Sorts an unordered eigendecomposition into descending order. Equal values
/// keep the solver's order, so ties stay deterministic.
fn sorted_pairs(values: &[f64], vectors: &DMatrix<f64>) -> EigenPairs {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let n = vectors.nrows();
    let mut out_vectors = Array2::zeros((n, order.len()));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            out_vectors[[r, dst]] = vectors[(r, src)];
        }
    }
    canonical_signs(&mut out_vectors);
    EigenPairs {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: out_vectors,
    }
}

/// Full eigendecomposition of a symmetric matrix. The input is symmetrized as
/// `(A + Aᵀ) / 2` before solving.
pub fn sym_eig(a: ArrayView2<f64>) -> Result<EigenPairs> {
    check_square(a, "sym_eig")?;
    check_finite(a, "sym_eig input")?;
    if a.nrows() == 0 {
        return Ok(EigenPairs {
            values: Array1::zeros(0),
            vectors: Array2::zeros((0, 0)),
        });
    }
    let eig = nalgebra::SymmetricEigen::new(symmetrized(a));
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Ok(sorted_pairs(&values, &eig.eigenvectors))
}

/// Cholesky factorization of a symmetric matrix, rejecting factors whose
/// smallest pivot is negligible relative to the largest diagonal entry.
fn cholesky(b: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let max_diag = b.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_diag == 0.0 {
        return None;
    }
    let chol = Cholesky::new(b)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v * v));
    (min_pivot > PIVOT_FLOOR * max_diag).then_some(chol)
}

/// Solves `A·x = b` for symmetric positive definite `A`, or `None` when `A`
/// is not safely definite.
pub(crate) fn spd_solve(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Option<Array1<f64>> {
    let chol = cholesky(symmetrized(a))?;
    let x = chol.solve(&DVector::from_iterator(b.len(), b.iter().copied()));
    x.iter().all(|v| v.is_finite()).then(|| Array1::from_iter(x.iter().copied()))
}

/// Solves the symmetric-definite problem `A·v = λ·B·v`.
///
/// Eigenvectors are normalized so that `vᵀ·B·v = 1` and returned as columns,
/// in descending order of `λ`.
pub fn gen_eig_sym(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<EigenPairs> {
    check_square(a, "gen_eig_sym (A)")?;
    check_square(b, "gen_eig_sym (B)")?;
    if a.nrows() != b.nrows() {
        return Err(CdmError::DimensionMismatch {
            context: "gen_eig_sym",
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    check_finite(a, "gen_eig_sym input A")?;
    check_finite(b, "gen_eig_sym input B")?;

    let l = cholesky(symmetrized(b))
        .ok_or(CdmError::NotPositiveDefinite)?
        .unpack();
    let a = symmetrized(a);
    // C = L⁻¹ A L⁻ᵀ, using symmetry of A for the second solve.
    let z = l
        .solve_lower_triangular(&a)
        .ok_or(CdmError::NotPositiveDefinite)?;
    let c = l
        .solve_lower_triangular(&z.transpose())
        .ok_or(CdmError::NotPositiveDefinite)?;
    let c = (&c + c.transpose()) * 0.5;

    let eig = nalgebra::SymmetricEigen::new(c);
    let vectors = l
        .transpose()
        .solve_upper_triangular(&eig.eigenvectors)
        .ok_or(CdmError::NotPositiveDefinite)?;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Ok(sorted_pairs(&values, &vectors))
}

/// Multi-target ridge regression.
///
/// `inputs` is `n×N` (one instance per column) and `targets` is `d×N`. Returns
/// the `d×n` matrix `M` minimizing `Σᵢ ‖M·yᵢ − gᵢ‖² + η‖M‖²_F`, i.e.
/// `M = G·Yᵀ·(Y·Yᵀ + η·I)⁻¹`. When `n > N` and `η > 0` the equivalent dual
/// form `G·(Yᵀ·Y + η·I)⁻¹·Yᵀ` is solved instead.
pub fn ridge_solve(
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    eta: f64,
) -> Result<Array2<f64>> {
    let (n, count) = inputs.dim();
    if count == 0 {
        return Err(CdmError::InvalidArgument(
            "ridge_solve needs at least one instance".into(),
        ));
    }
    if targets.ncols() != count {
        return Err(CdmError::DimensionMismatch {
            context: "ridge_solve targets",
            expected: count,
            found: targets.ncols(),
        });
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(CdmError::InvalidArgument(format!(
            "ridge weight must be a nonnegative finite number, got {eta}"
        )));
    }
    check_finite(inputs, "ridge_solve inputs")?;
    check_finite(targets, "ridge_solve targets")?;

    let y = to_nalgebra(inputs);
    let g = to_nalgebra(targets);
    let m = if n <= count || eta == 0.0 {
        let mut normal = &y * y.transpose();
        for i in 0..n {
            normal[(i, i)] += eta;
        }
        let chol = cholesky(normal).ok_or(CdmError::SingularSystem)?;
        let x = chol.solve(&(&y * g.transpose()));
        x.transpose()
    } else {
        let mut gram = y.transpose() * &y;
        for i in 0..count {
            gram[(i, i)] += eta;
        }
        let chol = cholesky(gram).ok_or(CdmError::SingularSystem)?;
        let z = chol.solve(&g.transpose());
        z.transpose() * y.transpose()
    };
    Ok(from_nalgebra(&m))
}

/// Euclidean distances between every row of `a` and every row of `b`.
pub fn pairwise_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(CdmError::DimensionMismatch {
            context: "pairwise_dist",
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        euclidean(a.row(i).iter().copied(), b.row(j).iter().copied())
    }))
}

#[inline]
pub(crate) fn squared_euclidean(
    a: impl IntoIterator<Item = f64>,
    b: impl IntoIterator<Item = f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

#[inline]
pub(crate) fn euclidean(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    squared_euclidean(a, b).sqrt()
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let a = random_matrix(rng, n, n);
        (&a + &a.t()) * 0.5
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let a = random_matrix(rng, n, n + 2);
        a.dot(&a.t()) + Array2::<f64>::eye(n) * 0.1
    }

    fn ridge_objective(m: &Array2<f64>, y: &Array2<f64>, g: &Array2<f64>, eta: f64) -> f64 {
        let r = m.dot(y) - g;
        r.iter().map(|v| v * v).sum::<f64>() + eta * m.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn diagonal_eigenpairs() {
        let e = sym_eig(array![[1.0, 0.0], [0.0, 3.0]].view()).unwrap();
        assert_eq!(e.values.to_vec(), vec![3.0, 1.0]);
        assert!((e.vectors[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((e.vectors[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = sym_eig(Array2::<f64>::eye(4).view()).unwrap();
        assert!(e.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_symmetric_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_symmetric(&mut rng, 6);
        let e = sym_eig(a.view()).unwrap();
        let norm = frobenius(a.view());
        for k in 0..6 {
            let v = e.vectors.column(k);
            let r = a.dot(&v) - &v * e.values[k];
            assert!(r.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-6 * norm);
        }
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let a = array![[1.0, f64::NAN], [f64::NAN, 1.0]];
        assert!(matches!(sym_eig(a.view()), Err(CdmError::NonFinite(_))));
    }

    #[test]
    fn generalized_with_identity_metric_matches_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_symmetric(&mut rng, 5);
        let g = gen_eig_sym(a.view(), Array2::<f64>::eye(5).view()).unwrap();
        let s = sym_eig(a.view()).unwrap();
        for k in 0..5 {
            assert!((g.values[k] - s.values[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn proportional_pair_has_constant_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_spd(&mut rng, 4);
        let a = &b * 2.0;
        let g = gen_eig_sym(a.view(), b.view()).unwrap();
        assert!(g.values.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }

    #[test]
    fn generalized_residuals_on_random_spd_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_symmetric(&mut rng, 6);
        let b = random_spd(&mut rng, 6);
        let g = gen_eig_sym(a.view(), b.view()).unwrap();
        for k in 0..6 {
            let v = g.vectors.column(k);
            let r = a.dot(&v) - b.dot(&v) * g.values[k];
            let scale = frobenius(a.view()) + g.values[k].abs() * frobenius(b.view());
            assert!(r.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-6 * scale.max(1.0));
            // B-normalization.
            assert!((v.dot(&b.dot(&v)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn indefinite_metric_is_rejected() {
        let a = Array2::<f64>::eye(2);
        let b = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(
            gen_eig_sym(a.view(), b.view()),
            Err(CdmError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn ridge_with_identity_inputs_returns_targets() {
        let g = array![[1.0, 2.0, 3.0], [-4.0, 5.0, 0.5]];
        let m = ridge_solve(Array2::<f64>::eye(3).view(), g.view(), 0.0).unwrap();
        for (a, b) in m.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_ridge_weight_shrinks_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_matrix(&mut rng, 3, 8);
        let g = random_matrix(&mut rng, 2, 8);
        let m = ridge_solve(y.view(), g.view(), 1e12).unwrap();
        assert!(frobenius(m.view()) < 1e-10);
    }

    #[test]
    fn singular_normal_matrix_without_ridge_fails() {
        // Two identical columns in a 3-dim space: Y·Yᵀ has rank 1.
        let y = array![[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]];
        let g = array![[1.0, 1.0]];
        assert!(matches!(
            ridge_solve(y.view(), g.view(), 0.0),
            Err(CdmError::SingularSystem)
        ));
        assert!(ridge_solve(y.view(), g.view(), 1.0).is_ok());
    }

    /// Plain gradient descent on the ridge objective, run to a tiny gradient.
    fn ridge_by_gradient_descent(y: &Array2<f64>, g: &Array2<f64>, eta: f64) -> Array2<f64> {
        let lipschitz = 2.0 * (y.iter().map(|v| v * v).sum::<f64>() + eta);
        let step = 1.0 / lipschitz;
        let mut m = Array2::<f64>::zeros((g.nrows(), y.nrows()));
        for _ in 0..2_000_000 {
            let grad = (m.dot(y) - g).dot(&y.t()) * 2.0 + &m * (2.0 * eta);
            if frobenius(grad.view()) < 1e-13 {
                break;
            }
            m = m - grad * step;
        }
        m
    }

    #[test]
    fn ridge_matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = random_matrix(&mut rng, 3, 8);
        let g = random_matrix(&mut rng, 2, 8);
        let closed = ridge_solve(y.view(), g.view(), 1.0).unwrap();
        let oracle = ridge_by_gradient_descent(&y, &g, 1.0);
        let diff = frobenius((&closed - &oracle).view());
        assert!(diff <= 1e-6 * frobenius(oracle.view()));
    }

    #[test]
    fn dual_and_primal_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // n = 10 > N = 4 triggers the dual path.
        let y = random_matrix(&mut rng, 10, 4);
        let g = random_matrix(&mut rng, 3, 4);
        let dual = ridge_solve(y.view(), g.view(), 0.5).unwrap();
        let oracle = ridge_by_gradient_descent(&y, &g, 0.5);
        assert!(frobenius((&dual - &oracle).view()) <= 1e-6 * frobenius(oracle.view()));
    }

    #[test]
    fn ridge_solution_beats_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = random_matrix(&mut rng, 4, 12);
        let g = random_matrix(&mut rng, 2, 12);
        let m = ridge_solve(y.view(), g.view(), 1.0).unwrap();
        let best = ridge_objective(&m, &y, &g, 1.0);
        assert!(best <= ridge_objective(&Array2::zeros(m.dim()), &y, &g, 1.0));
        for _ in 0..100 {
            let p = &m + &(random_matrix(&mut rng, 2, 4) * 1e-3);
            assert!(best <= ridge_objective(&p, &y, &g, 1.0));
        }
    }

    #[test]
    fn self_distance_is_zero() {
        let a = array![[1.5, -2.0]];
        assert_eq!(pairwise_dist(a.view(), a.view()).unwrap(), array![[0.0]]);
    }

    #[test]
    fn three_four_five() {
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        assert_eq!(pairwise_dist(a.view(), b.view()).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn pairwise_matches_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let d = pairwise_dist(a.view(), b.view()).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (a[[i, k]] - b[[j, k]]).powi(2);
                }
                assert_eq!(d[[i, j]], s.sqrt());
            }
        }
    }

    #[test]
    fn pairwise_dimension_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            pairwise_dist(a.view(), b.view()),
            Err(CdmError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn triangle_inequality(pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 3)) {
            let m = Array2::from_shape_fn((3, 3), |(i, j)| pts[i][j]);
            let d = pairwise_dist(m.view(), m.view()).unwrap();
            prop_assert!(d[[0, 2]] <= d[[0, 1]] + d[[1, 2]] + 1e-12);
        }

        #[test]
        fn eigen_reconstruction(seed in 0u64..1000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_symmetric(&mut rng, n);
            let e = sym_eig(a.view()).unwrap();
            let recon = e.vectors.dot(&Array2::from_diag(&e.values)).dot(&e.vectors.t());
            prop_assert!(frobenius((&recon - &a).view()) <= 1e-6 * frobenius(a.view()).max(1e-12));
            let gram = e.vectors.t().dot(&e.vectors);
            prop_assert!(frobenius((&gram - &Array2::<f64>::eye(n)).view()) <= 1e-6);
        }
    }
}
