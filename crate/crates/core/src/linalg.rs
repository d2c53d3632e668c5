//! Dense 64-bit matrices and vectors: products, LU solves, spectral norms
//! and 2-norm condition numbers.

use crate::error::{Error, Result};

/// Pivot magnitudes below this declare the matrix singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 10_000;

/// Dense row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParam(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest absolute entry, 0 for an all-zero matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {v}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Standard matrix-vector product.
pub fn mat_vec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "mat_vec: {}x{} matrix with length-{} vector",
            m.rows,
            m.cols,
            v.len()
        )));
    }
    let mut out = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        out.push(dot(m.row(r), v.data()));
    }
    Ok(Vector { data: out })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// LU factorization with partial pivoting.
struct LuFactors {
    lu: Matrix,
    perm: Vec<usize>,
}

impl LuFactors {
    fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_val = lu.get(col, col).abs();
            for r in col + 1..n {
                let v = lu.get(r, col).abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = r;
                }
            }
            if pivot_val <= PIVOT_TOLERANCE {
                return Err(Error::SingularMatrix {
                    col,
                    pivot: pivot_val,
                });
            }
            if pivot_row != col {
                perm.swap(col, pivot_row);
                for c in 0..n {
                    let tmp = lu.get(col, c);
                    lu.set(col, c, lu.get(pivot_row, c));
                    lu.set(pivot_row, c, tmp);
                }
            }
            let pivot = lu.get(col, col);
            for r in col + 1..n {
                let factor = lu.get(r, col) / pivot;
                lu.set(r, col, factor);
                for c in col + 1..n {
                    let v = lu.get(r, c) - factor * lu.get(col, c);
                    lu.set(r, c, v);
                }
            }
        }
        Ok(Self { lu, perm })
    }

    fn solve(&self, b: &Vector) -> Vector {
        let n = self.lu.rows;
        let mut x = vec![0.0; n];
        // forward substitution on the permuted right-hand side
        for i in 0..n {
            let mut sum = b[self.perm[i]];
            for j in 0..i {
                sum -= self.lu.get(i, j) * x[j];
            }
            x[i] = sum;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut sum = x[i];
            for j in i + 1..n {
                sum -= self.lu.get(i, j) * x[j];
            }
            x[i] = sum / self.lu.get(i, i);
        }
        Vector { data: x }
    }
}

/// Solves a·x = b by LU with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "lu_solve: matrix {}x{} is not square",
            a.rows, a.cols
        )));
    }
    if a.rows != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "lu_solve: {}x{} matrix with length-{} rhs",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    Ok(LuFactors::factor(a)?.solve(b))
}

/// Inverse, column by column through one LU factorization.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "inverse: matrix {}x{} is not square",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let factors = LuFactors::factor(a)?;
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        let mut e = Vector::zeros(n);
        e[col] = 1.0;
        let x = factors.solve(&e);
        for row in 0..n {
            inv.set(row, col, x[row]);
        }
    }
    Ok(inv)
}

/// Largest singular value via power iteration on mᵀm.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.max_abs() == 0.0 {
        return 0.0;
    }
    // gram = mᵀm, size cols x cols
    let n = m.cols;
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut sum = 0.0;
            for r in 0..m.rows {
                sum += m.get(r, i) * m.get(r, j);
            }
            gram.set(i, j, sum);
            gram.set(j, i, sum);
        }
    }

    // Deterministic pseudo-random start keeps the iterate off invariant
    // subspaces that an all-ones start can land in.
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
            1.0 + (h % 1024) as f64 / 1024.0
        })
        .collect();
    normalize(&mut x);

    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let mut y = vec![0.0; n];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(gram.row(i), &x);
        }
        let next = dot(&y, &x); // Rayleigh quotient since x is unit
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ynorm == 0.0 {
            return 0.0;
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ynorm;
        }
        if (next - lambda).abs() <= POWER_ITER_TOL * next.abs().max(1e-300) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in x.iter_mut() {
            *v /= norm;
        }
    }
}

/// 2-norm condition number: ‖m‖₂ · ‖m⁻¹‖₂.
pub fn condition_number_2(m: &Matrix) -> Result<f64> {
    let inv = inverse(m)?;
    Ok(spectral_norm(m) * spectral_norm(&inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigenvalue iteration on a symmetric matrix; the
    /// singular values of M are the square roots of eig(MᵀM).
    mod oracle {
        use super::Matrix;

        pub fn symmetric_eigenvalues(sym: &Matrix) -> Vec<f64> {
            let n = sym.rows();
            let mut a = sym.clone();
            for _sweep in 0..100 {
                let mut off = 0.0;
                for p in 0..n {
                    for q in p + 1..n {
                        off += a.get(p, q) * a.get(p, q);
                    }
                }
                if off.sqrt() < 1e-14 * (1.0 + a.max_abs()) {
                    break;
                }
                for p in 0..n {
                    for q in p + 1..n {
                        let apq = a.get(p, q);
                        if apq.abs() < 1e-300 {
                            continue;
                        }
                        let app = a.get(p, p);
                        let aqq = a.get(q, q);
                        let theta = (aqq - app) / (2.0 * apq);
                        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                        let c = 1.0 / (t * t + 1.0).sqrt();
                        let s = t * c;
                        for k in 0..n {
                            let akp = a.get(k, p);
                            let akq = a.get(k, q);
                            a.set(k, p, c * akp - s * akq);
                            a.set(k, q, s * akp + c * akq);
                        }
                        for k in 0..n {
                            let apk = a.get(p, k);
                            let aqk = a.get(q, k);
                            a.set(p, k, c * apk - s * aqk);
                            a.set(q, k, s * apk + c * aqk);
                        }
                    }
                }
            }
            (0..n).map(|i| a.get(i, i)).collect()
        }

        pub fn singular_values(m: &Matrix) -> Vec<f64> {
            let n = m.cols();
            let mut gram = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut sum = 0.0;
                    for r in 0..m.rows() {
                        sum += m.get(r, i) * m.get(r, j);
                    }
                    gram.set(i, j, sum);
                }
            }
            let mut sv: Vec<f64> = symmetric_eigenvalues(&gram)
                .into_iter()
                .map(|l| l.max(0.0).sqrt())
                .collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            sv
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut m = random_matrix(rng, n, n);
        for i in 0..n {
            let v = m.get(i, i) + n as f64;
            m.set(i, i, v);
        }
        m
    }

    #[test]
    fn mat_vec_identity() {
        let v = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let out = mat_vec(&Matrix::identity(3), &v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn mat_vec_zero_annihilates() {
        let v = Vector::new(vec![5.0, 7.0]).unwrap();
        let out = mat_vec(&Matrix::zeros(2, 2), &v).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn mat_vec_matches_elementwise_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 4, 4);
        let v = Vector::new((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = mat_vec(&m, &v).unwrap();
        for r in 0..4 {
            let mut expect = 0.0;
            for c in 0..4 {
                expect += m.get(r, c) * v[c];
            }
            assert!((out[r] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn mat_vec_rejects_mismatched_dims() {
        let v = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            mat_vec(&Matrix::zeros(2, 2), &v),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn lu_solve_identity() {
        let b = Vector::new(vec![3.0, 4.0]).unwrap();
        let x = lu_solve(&Matrix::identity(2), &b).unwrap();
        assert_eq!(x.data(), &[3.0, 4.0]);
    }

    #[test]
    fn lu_solve_diagonal() {
        let a = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let b = Vector::new(vec![2.0, 4.0]).unwrap();
        let x = lu_solve(&a, &b).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);
    }

    #[test]
    fn lu_solve_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_well_conditioned(&mut rng, 5);
        let b = Vector::new((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = lu_solve(&a, &b).unwrap();
        let ax = mat_vec(&a, &x).unwrap();
        let residual = ax
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(residual <= 1e-8 * (1.0 + b.norm_inf()));
    }

    #[test]
    fn lu_solve_reports_singular() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let b = Vector::new(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            lu_solve(&a, &b),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn spectral_norm_identity_is_one() {
        assert!((spectral_norm(&Matrix::identity(4)) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn spectral_norm_diagonal_takes_max() {
        let m = Matrix::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm(&m) - 3.0).abs() <= 1e-9);
    }

    #[test]
    fn spectral_norm_zero_matrix() {
        assert_eq!(spectral_norm(&Matrix::zeros(3, 2)), 0.0);
    }

    #[test]
    fn spectral_norm_matches_jacobi_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let m = random_matrix(&mut rng, 6, 6);
            let got = spectral_norm(&m);
            let want = oracle::singular_values(&m)[0];
            assert!(
                (got - want).abs() <= 1e-6 * want.max(1e-12),
                "power iteration {got} vs jacobi {want}"
            );
        }
    }

    #[test]
    fn condition_number_identity() {
        for n in [1usize, 2, 8] {
            let c = condition_number_2(&Matrix::identity(n)).unwrap();
            assert!((c - 1.0).abs() <= 1e-9, "cond(I_{n}) = {c}");
        }
    }

    #[test]
    fn condition_number_diagonal() {
        let m = Matrix::new(2, 2, vec![10.0, 0.0, 0.0, 1.0]).unwrap();
        let c = condition_number_2(&m).unwrap();
        assert!((c - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn condition_number_matches_singular_value_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            // SPD: gram of a well-conditioned matrix
            let b = random_well_conditioned(&mut rng, 5);
            let bt = b.transpose();
            let mut spd = Matrix::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    spd.set(i, j, dot(bt.row(i), bt.row(j)));
                }
            }
            let got = condition_number_2(&spd).unwrap();
            let sv = oracle::singular_values(&spd);
            let want = sv[0] / sv[sv.len() - 1];
            assert!(
                (got - want).abs() <= 1e-6 * want,
                "cond {got} vs svd ratio {want}"
            );
        }
    }

    #[test]
    fn condition_number_propagates_singularity() {
        let m = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            condition_number_2(&m),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn spectral_norm_scales_absolutely(seed in 0u64..200, c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 4, 3);
            let scaled = Matrix::from_fn(4, 3, |r, col| c * m.get(r, col));
            let lhs = spectral_norm(&scaled);
            let rhs = c.abs() * spectral_norm(&m);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }

        #[test]
        fn condition_number_at_least_one(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_well_conditioned(&mut rng, 4);
            let c = condition_number_2(&m).unwrap();
            prop_assert!(c >= 1.0 - 1e-9);
        }

        #[test]
        fn solve_then_multiply_roundtrip(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_well_conditioned(&mut rng, 4);
            let x = Vector::new((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let b = mat_vec(&a, &x).unwrap();
            let solved = lu_solve(&a, &b).unwrap();
            let scale = x.norm2().max(1e-12);
            for i in 0..4 {
                prop_assert!((solved[i] - x[i]).abs() <= 1e-7 * scale);
            }
        }
    }
}
