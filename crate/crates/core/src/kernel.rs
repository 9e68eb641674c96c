//! Factorized kernels and the dense linear algebra used on their
//! principal submatrices.
//!
//! Kernels are kept in low-rank form `V diag(r)² Vᵀ + diag(d)²` and never
//! materialized at full size; callers extract the small submatrix for an
//! item set and run determinant / inverse computations on that.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative singularity cutoff: a determinant counts as singular when it is
/// this many orders of magnitude below the scale bound `(trace/k)^k`.
const SINGULAR_REL: f64 = 1e-12;

/// Diagonal jitter added once when a submatrix tests singular.
const JITTER: f64 = 1e-10;

/// A positive semidefinite kernel in factorized form.
///
/// The represented matrix is `V Vᵀ + diag(d)²`, or with per-dimension
/// weights `r` present, `V diag(r)² Vᵀ + diag(d)²`. Rows of `V` are item
/// embeddings, `d` holds per-item diagonal bias terms, and `r` reweights
/// the latent dimensions for one task.
#[derive(Debug, Clone)]
pub struct FactorizedKernel<'a> {
    v: ArrayView2<'a, f64>,
    d: ArrayView1<'a, f64>,
    r: Option<ArrayView1<'a, f64>>,
}

impl<'a> FactorizedKernel<'a> {
    /// Wraps parameter views after checking that their shapes agree.
    pub fn new(
        v: ArrayView2<'a, f64>,
        d: ArrayView1<'a, f64>,
        r: Option<ArrayView1<'a, f64>>,
    ) -> Result<Self> {
        if d.len() != v.nrows() {
            return Err(Error::InvalidInput(format!(
                "diagonal length {} does not match {} embedding rows",
                d.len(),
                v.nrows()
            )));
        }
        if let Some(r) = &r {
            if r.len() != v.ncols() {
                return Err(Error::InvalidInput(format!(
                    "dimension weight length {} does not match embedding rank {}",
                    r.len(),
                    v.ncols()
                )));
            }
        }
        Ok(Self { v, d, r })
    }

    /// Number of items the kernel is defined over.
    pub fn items(&self) -> usize {
        self.v.nrows()
    }

    /// Builds the dense principal submatrix for `items`.
    ///
    /// Entry `(a, b)` is `sum_j V[items[a], j] r[j]^2 V[items[b], j]` plus
    /// `d[items[a]]^2` on the diagonal. Indices must be in range and
    /// pairwise distinct; an empty selection yields a 0 x 0 matrix.
    pub fn submatrix(&self, items: &[usize]) -> Result<Array2<f64>> {
        let p = self.v.nrows();
        for (pos, &i) in items.iter().enumerate() {
            if i >= p {
                return Err(Error::InvalidInput(format!(
                    "item index {i} out of range for catalog of {p} items"
                )));
            }
            if items[..pos].contains(&i) {
                return Err(Error::InvalidInput(format!(
                    "duplicate item index {i} in submatrix selection"
                )));
            }
        }
        let k = items.len();
        let mut m = Array2::zeros((k, k));
        for (a, &s) in items.iter().enumerate() {
            let vs = self.v.row(s);
            for (b, &t) in items.iter().enumerate().skip(a) {
                let vt = self.v.row(t);
                let mut entry = match &self.r {
                    Some(r) => vs
                        .iter()
                        .zip(vt.iter())
                        .zip(r.iter())
                        .map(|((x, y), w)| x * y * w * w)
                        .sum(),
                    None => vs.dot(&vt),
                };
                if a == b {
                    entry += self.d[s] * self.d[s];
                }
                m[[a, b]] = entry;
                m[[b, a]] = entry;
            }
        }
        Ok(m)
    }
}

/// Determinant, inverse and recovery metadata for one dense submatrix.
#[derive(Debug, Clone)]
pub struct SubmatrixResult {
    /// The matrix the factorization actually ran on (jitter included).
    pub matrix: Array2<f64>,
    /// Determinant of `matrix`.
    pub det: f64,
    /// Inverse of `matrix`.
    pub inverse: Array2<f64>,
    /// True when jitter had to be added to make the matrix invertible.
    pub jittered: bool,
}

/// Determinant of a dense square matrix by partially pivoted LU.
///
/// Singular matrices are fine here and give 0; only non-finite entries are
/// rejected. The 0 x 0 determinant is 1 by convention.
pub fn determinant(matrix: &Array2<f64>) -> Result<f64> {
    check_square_finite(matrix)?;
    if matrix.nrows() == 0 {
        return Ok(1.0);
    }
    Ok(LuFactors::compute(matrix).det())
}

/// Determinant and inverse from one pivoted LU factorization.
///
/// A submatrix tests singular when `|det|` falls below
/// `1e-12 * max(1, trace/k)^k`, the AM-GM bound on the determinant of a
/// positive semidefinite matrix scaled down by twelve orders of magnitude.
/// On the first singular verdict a jitter of `1e-10` is added to the
/// diagonal and the factorization is redone once; a second verdict is
/// reported as [`Error::SingularKernel`].
pub fn det_and_inverse(matrix: &Array2<f64>) -> Result<SubmatrixResult> {
    check_square_finite(matrix)?;
    let k = matrix.nrows();
    if k == 0 {
        return Ok(SubmatrixResult {
            matrix: matrix.clone(),
            det: 1.0,
            inverse: Array2::zeros((0, 0)),
            jittered: false,
        });
    }
    let trace: f64 = matrix.diag().sum();
    let log_threshold = SINGULAR_REL.ln() + k as f64 * (trace / k as f64).max(1.0).ln();

    let factors = LuFactors::compute(matrix);
    if factors.log_abs_det() >= log_threshold {
        let inverse = factors.inverse();
        if inverse.iter().all(|x| x.is_finite()) {
            return Ok(SubmatrixResult {
                matrix: matrix.clone(),
                det: factors.det(),
                inverse,
                jittered: false,
            });
        }
    }

    let mut jittered = matrix.clone();
    for j in 0..k {
        jittered[[j, j]] += JITTER;
    }
    let factors = LuFactors::compute(&jittered);
    if factors.log_abs_det() < log_threshold {
        return Err(Error::SingularKernel);
    }
    let inverse = factors.inverse();
    if !inverse.iter().all(|x| x.is_finite()) {
        return Err(Error::SingularKernel);
    }
    Ok(SubmatrixResult {
        det: factors.det(),
        matrix: jittered,
        inverse,
        jittered: true,
    })
}

fn check_square_finite(matrix: &Array2<f64>) -> Result<()> {
    if matrix.nrows() != matrix.ncols() {
        return Err(Error::InvalidInput(format!(
            "matrix is {} x {}, expected square",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if !matrix.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput(
            "matrix contains non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Compact LU factorization with partial pivoting: unit lower triangle
/// below the diagonal, upper triangle on and above it.
struct LuFactors {
    lu: Array2<f64>,
    pivots: Vec<usize>,
    sign: f64,
}

impl LuFactors {
    fn compute(matrix: &Array2<f64>) -> Self {
        let n = matrix.nrows();
        let mut lu = matrix.clone();
        let mut pivots = vec![0usize; n];
        let mut sign = 1.0;
        for j in 0..n {
            let mut piv = j;
            let mut best = lu[[j, j]].abs();
            for i in (j + 1)..n {
                let a = lu[[i, j]].abs();
                if a > best {
                    best = a;
                    piv = i;
                }
            }
            pivots[j] = piv;
            if piv != j {
                for c in 0..n {
                    lu.swap([j, c], [piv, c]);
                }
                sign = -sign;
            }
            let pivot = lu[[j, j]];
            if pivot == 0.0 {
                // Column is already zero below the diagonal; determinant is 0.
                continue;
            }
            for i in (j + 1)..n {
                let f = lu[[i, j]] / pivot;
                lu[[i, j]] = f;
                for c in (j + 1)..n {
                    let sub = f * lu[[j, c]];
                    lu[[i, c]] -= sub;
                }
            }
        }
        Self { lu, pivots, sign }
    }

    fn det(&self) -> f64 {
        let mut det = self.sign;
        for j in 0..self.lu.nrows() {
            det *= self.lu[[j, j]];
        }
        det
    }

    /// `ln |det|`, computed in log space so that the singularity test keeps
    /// working when the plain product would under- or overflow.
    fn log_abs_det(&self) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.lu.nrows() {
            let u = self.lu[[j, j]].abs();
            if u == 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += u.ln();
        }
        acc
    }

    /// Inverse by solving against the identity, one column at a time.
    /// Requires all pivots nonzero; callers gate on the singularity test.
    fn inverse(&self) -> Array2<f64> {
        let n = self.lu.nrows();
        let mut inv = Array2::zeros((n, n));
        let mut x = vec![0.0; n];
        for col in 0..n {
            x.iter_mut().for_each(|v| *v = 0.0);
            x[col] = 1.0;
            for j in 0..n {
                let p = self.pivots[j];
                if p != j {
                    x.swap(j, p);
                }
            }
            for i in 1..n {
                let mut s = x[i];
                for c in 0..i {
                    s -= self.lu[[i, c]] * x[c];
                }
                x[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[i];
                for c in (i + 1)..n {
                    s -= self.lu[[i, c]] * x[c];
                }
                x[i] = s / self.lu[[i, i]];
            }
            for (i, &v) in x.iter().enumerate() {
                inv[[i, col]] = v;
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Recursive cofactor expansion, the independent determinant oracle for
    /// small matrices.
    fn cofactor_det(m: &Array2<f64>) -> f64 {
        let n = m.nrows();
        match n {
            0 => 1.0,
            1 => m[[0, 0]],
            _ => {
                let mut det = 0.0;
                for col in 0..n {
                    let mut minor = Array2::zeros((n - 1, n - 1));
                    for i in 1..n {
                        let mut cc = 0;
                        for c in 0..n {
                            if c == col {
                                continue;
                            }
                            minor[[i - 1, cc]] = m[[i, c]];
                            cc += 1;
                        }
                    }
                    let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
                    det += sign * m[[0, col]] * cofactor_det(&minor);
                }
                det
            }
        }
    }

    fn random_kernel_parts(
        rng: &mut ChaCha8Rng,
        p: usize,
        r: usize,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let v = Array2::from_shape_fn((p, r), |_| rng.random_range(-1.0..1.0));
        let d = Array1::from_shape_fn(p, |_| rng.random_range(0.0..1.5));
        let w = Array1::from_shape_fn(r, |_| rng.random_range(0.0..1.5));
        (v, d, w)
    }

    #[test]
    fn zero_embeddings_leave_only_the_diagonal() {
        let v = Array2::zeros((2, 2));
        let d = arr1(&[2.0, 3.0]);
        let kernel = FactorizedKernel::new(v.view(), d.view(), None).unwrap();
        let m = kernel.submatrix(&[0, 1]).unwrap();
        assert_eq!(m, arr2(&[[4.0, 0.0], [0.0, 9.0]]));
    }

    #[test]
    fn identical_embeddings_without_bias_are_singular() {
        let v = arr2(&[[1.0], [1.0]]);
        let d = arr1(&[0.0, 0.0]);
        let kernel = FactorizedKernel::new(v.view(), d.view(), None).unwrap();
        let m = kernel.submatrix(&[0, 1]).unwrap();
        assert_eq!(m, arr2(&[[1.0, 1.0], [1.0, 1.0]]));
        assert_eq!(determinant(&m).unwrap(), 0.0);
    }

    #[test]
    fn weighted_entries_match_a_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (v, d, w) = random_kernel_parts(&mut rng, 6, 3);
        let items = [5, 0, 3, 2];
        let kernel = FactorizedKernel::new(v.view(), d.view(), Some(w.view())).unwrap();
        let m = kernel.submatrix(&items).unwrap();
        for (a, &s) in items.iter().enumerate() {
            for (b, &t) in items.iter().enumerate() {
                let mut expect = 0.0;
                for j in 0..3 {
                    expect += v[[s, j]] * w[j] * w[j] * v[[t, j]];
                }
                if a == b {
                    expect += d[s] * d[s];
                }
                assert!((m[[a, b]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_item_determinant_matches_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (v, d, w) = random_kernel_parts(&mut rng, 4, 3);
            let i = rng.random_range(0..4);
            let kernel = FactorizedKernel::new(v.view(), d.view(), Some(w.view())).unwrap();
            let m = kernel.submatrix(&[i]).unwrap();
            let expect: f64 =
                (0..3).map(|j| v[[i, j]] * v[[i, j]] * w[j] * w[j]).sum::<f64>() + d[i] * d[i];
            assert!((determinant(&m).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_errors_are_reported() {
        let v = Array2::zeros((3, 2));
        let d = Array1::zeros(3);
        let kernel = FactorizedKernel::new(v.view(), d.view(), None).unwrap();
        assert!(matches!(
            kernel.submatrix(&[0, 3]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            kernel.submatrix(&[1, 1]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn empty_selection_gives_the_empty_matrix_with_unit_determinant() {
        let v = Array2::zeros((3, 2));
        let d = Array1::zeros(3);
        let kernel = FactorizedKernel::new(v.view(), d.view(), None).unwrap();
        let m = kernel.submatrix(&[]).unwrap();
        assert_eq!(m.nrows(), 0);
        assert_eq!(determinant(&m).unwrap(), 1.0);
        let res = det_and_inverse(&m).unwrap();
        assert_eq!(res.det, 1.0);
        assert!(!res.jittered);
    }

    #[test]
    fn identity_inverts_to_itself() {
        let m = Array2::eye(3);
        let res = det_and_inverse(&m).unwrap();
        assert_eq!(res.det, 1.0);
        assert_eq!(res.inverse, Array2::eye(3));
        assert!(!res.jittered);
    }

    #[test]
    fn diagonal_matrix_inverts_entrywise() {
        let m = arr2(&[[4.0, 0.0], [0.0, 9.0]]);
        let res = det_and_inverse(&m).unwrap();
        assert!((res.det - 36.0).abs() < 1e-12);
        assert!((res.inverse[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((res.inverse[[1, 1]] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(res.inverse[[0, 1]], 0.0);
    }

    #[test]
    fn determinant_matches_cofactor_expansion_on_a_random_psd_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let mut m = a.dot(&a.t());
        for j in 0..5 {
            m[[j, j]] += 0.1;
        }
        let res = det_and_inverse(&m).unwrap();
        let oracle = cofactor_det(&m);
        assert!(
            ((res.det - oracle) / oracle).abs() < 1e-10,
            "lu {} vs cofactor {}",
            res.det,
            oracle
        );
        assert!(!res.jittered);
    }

    #[test]
    fn inverse_times_matrix_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=8usize {
            let a = Array2::from_shape_fn((k, k), |_| rng.random_range(-1.0..1.0));
            let mut m = a.dot(&a.t());
            for j in 0..k {
                m[[j, j]] += 0.5;
            }
            let res = det_and_inverse(&m).unwrap();
            assert!(!res.jittered);
            let prod = res.inverse.dot(&m);
            for i in 0..k {
                for j in 0..k {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[[i, j]] - expect).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn rank_deficient_matrix_gets_jitter_once() {
        let m = arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let res = det_and_inverse(&m).unwrap();
        assert!(res.jittered);
        assert!(res.det > 0.0);
        assert!((res.matrix[[0, 0]] - (1.0 + JITTER)).abs() < 1e-18);
        // The jittered determinant is (1 + e)^2 - 1 for e = 1e-10.
        assert!((res.det - 2e-10).abs() < 1e-13);
    }

    #[test]
    fn zero_matrix_is_singular_even_after_jitter() {
        let m = Array2::zeros((2, 2));
        assert!(matches!(det_and_inverse(&m), Err(Error::SingularKernel)));
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let m = arr2(&[[1.0, f64::NAN], [0.0, 1.0]]);
        assert!(matches!(determinant(&m), Err(Error::InvalidInput(_))));
        assert!(matches!(det_and_inverse(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn large_well_conditioned_matrices_are_not_flagged_singular() {
        // A 40 x 40 identity-dominated kernel must factor cleanly; the
        // singularity test is relative to matrix scale, not absolute.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((40, 8), |_| rng.random_range(-0.5..0.5));
        let mut m = a.dot(&a.t());
        for j in 0..40 {
            m[[j, j]] += 1.0;
        }
        let res = det_and_inverse(&m).unwrap();
        assert!(!res.jittered);
        assert!(res.det.is_finite() && res.det > 0.0);
    }

    #[test]
    fn psd_submatrix_determinants_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let p = rng.random_range(1..=8);
            let r = rng.random_range(1..=4);
            let (v, d, w) = random_kernel_parts(&mut rng, p, r);
            let kernel = FactorizedKernel::new(v.view(), d.view(), Some(w.view())).unwrap();
            let k = rng.random_range(1..=p);
            let mut items: Vec<usize> = (0..p).collect();
            for i in (1..items.len()).rev() {
                items.swap(i, rng.random_range(0..=i));
            }
            items.truncate(k);
            let m = kernel.submatrix(&items).unwrap();
            let det = determinant(&m).unwrap();
            assert!(det >= -1e-10, "psd determinant {det} below tolerance");
        }
    }

    #[test]
    fn determinant_is_invariant_under_item_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (v, d, w) = random_kernel_parts(&mut rng, 7, 3);
        let kernel = FactorizedKernel::new(v.view(), d.view(), Some(w.view())).unwrap();
        let items = [2, 5, 0, 6];
        let base = determinant(&kernel.submatrix(&items).unwrap()).unwrap();
        let permutations = [[5, 2, 6, 0], [6, 0, 2, 5], [0, 2, 5, 6]];
        for perm in permutations {
            let det = determinant(&kernel.submatrix(&perm).unwrap()).unwrap();
            assert!((det - base).abs() <= 1e-9 * base.abs().max(1.0));
        }
    }
}
