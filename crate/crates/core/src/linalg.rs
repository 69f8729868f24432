//! Minimal dense linear algebra: row-major matrices, the two matrix-vector
//! products the iteration needs, and a Cholesky solve for the closed-form
//! ridge baseline.
//!
//! Every reduction runs in a fixed order (fixed-size row blocks combined
//! sequentially), so results are bit-identical regardless of the rayon
//! thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{AmpError, Result};

/// Row block size for the transposed product; fixed so the summation order
/// does not depend on the number of threads.
const ROW_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AmpError::InvalidArgument(format!(
                "matrix buffer has {} entries, expected {} x {}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// iid N(0, sd^2) entries drawn in row-major order.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// X v: one sequential dot product per row, rows computed independently.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .into_par_iter()
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// X^T u: partial sums over fixed-size row blocks, combined in block
    /// order.
    pub fn t_matvec(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.rows, "t_matvec dimension mismatch");
        let partials: Vec<Vec<f64>> = self
            .data
            .par_chunks(ROW_CHUNK * self.cols)
            .enumerate()
            .map(|(chunk_idx, block)| {
                let row0 = chunk_idx * ROW_CHUNK;
                let mut acc = vec![0.0; self.cols];
                for (r, row) in block.chunks_exact(self.cols).enumerate() {
                    let coef = u[row0 + r];
                    for (a, x) in acc.iter_mut().zip(row) {
                        *a += coef * x;
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; self.cols];
        for p in &partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }

    /// X^T X as a dense symmetric matrix (used only for the small ridge
    /// baseline).
    pub fn gram(&self) -> DenseMatrix {
        let p = self.cols;
        let mut g = DenseMatrix::zeros(p, p);
        for row in self.data.chunks_exact(p) {
            for i in 0..p {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                for j in i..p {
                    g.data[i * p + j] += xi * row[j];
                }
            }
        }
        for i in 0..p {
            for j in 0..i {
                g.data[i * p + j] = g.data[j * p + i];
            }
        }
        g
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(AmpError::InvalidArgument(
            "cholesky requires a square matrix".to_string(),
        ));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(AmpError::InvalidArgument(format!(
                        "matrix is not positive definite (pivot {s:e} at {i})"
                    )));
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves A x = b given the lower Cholesky factor of A.
pub fn cholesky_solve(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Closed-form Gaussian-prior / Gaussian-noise estimate:
/// (X^T X / noise_var + I / prior_var) s = X^T y / noise_var.
pub fn ridge_posterior(
    x: &DenseMatrix,
    y: &[f64],
    noise_var: f64,
    prior_var: f64,
) -> Result<Vec<f64>> {
    if noise_var <= 0.0 || prior_var <= 0.0 {
        return Err(AmpError::InvalidArgument(
            "ridge baseline needs positive variances".to_string(),
        ));
    }
    let p = x.cols();
    let mut a = x.gram();
    for i in 0..p {
        let v = a.get(i, i) / noise_var + 1.0 / prior_var;
        a.set(i, i, v);
        for j in 0..p {
            if j != i {
                a.set(i, j, a.get(i, j) / noise_var);
            }
        }
    }
    let rhs: Vec<f64> = x.t_matvec(y).into_iter().map(|v| v / noise_var).collect();
    let l = cholesky(&a)?;
    Ok(cholesky_solve(&l, &rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn products_match_hand_computed_values() {
        let x = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(x.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(x.t_matvec(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn transpose_product_is_adjoint_of_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::gaussian(523, 37, 0.3, &mut rng);
        let v: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).sin()).collect();
        let u: Vec<f64> = (0..523).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs = dot(&x.matvec(&v), &u);
        let rhs = dot(&v, &x.t_matvec(&u));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn chunked_transpose_product_matches_naive_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // More rows than one chunk so several blocks are combined.
        let x = DenseMatrix::gaussian(700, 11, 1.0, &mut rng);
        let u: Vec<f64> = (0..700).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let fast = x.t_matvec(&u);
        let mut naive = vec![0.0; 11];
        for i in 0..700 {
            for j in 0..11 {
                naive[j] += x.get(i, j) * u[i];
            }
        }
        for (a, b) in fast.iter().zip(&naive) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn products_are_identical_across_thread_counts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = DenseMatrix::gaussian(1000, 40, 0.17, &mut rng);
        let u: Vec<f64> = (0..1000).map(|i| (i as f64).sqrt().sin()).collect();
        let v: Vec<f64> = (0..40).map(|i| (i as f64).cos()).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| (x.t_matvec(&u), x.matvec(&v)))
        };
        let (t1, m1) = run(1);
        let (t3, m3) = run(3);
        assert_eq!(t1, t3, "t_matvec differs across thread counts");
        assert_eq!(m1, m3, "matvec differs across thread counts");
    }

    #[test]
    fn cholesky_solves_known_spd_system() {
        // A = L L^T with L = [[2,0],[1,3]] -> A = [[4,2],[2,10]].
        let a = DenseMatrix::from_vec(2, 2, vec![4.0, 2.0, 2.0, 10.0]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_abs_diff_eq!(l.get(0, 0), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l.get(1, 0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l.get(1, 1), 3.0, epsilon = 1e-14);
        let x = cholesky_solve(&l, &[8.0, 26.0]);
        // A [1, 2]^T = [8, 22]^T... solve against the true product instead.
        let b = [4.0 * 1.0 + 2.0 * 2.0, 2.0 * 1.0 + 10.0 * 2.0];
        let x2 = cholesky_solve(&l, &b);
        assert_abs_diff_eq!(x2[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x2[1], 2.0, epsilon = 1e-12);
        // And the first solve reproduces its own right-hand side.
        assert_abs_diff_eq!(4.0 * x[0] + 2.0 * x[1], 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(2.0 * x[0] + 10.0 * x[1], 26.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrices() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn ridge_on_identity_design_is_scalar_shrinkage() {
        // X = I (P = N = 3): solution is y * prior_var / (prior_var + noise_var).
        let x = DenseMatrix::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let y = [3.0, -1.5, 0.2];
        let s = ridge_posterior(&x, &y, 0.5, 2.0).unwrap();
        for (si, yi) in s.iter().zip(&y) {
            assert_abs_diff_eq!(*si, yi * 2.0 / 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn ridge_satisfies_its_normal_equations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = DenseMatrix::gaussian(50, 12, 0.4, &mut rng);
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let s = ridge_posterior(&x, &y, 0.7, 1.3).unwrap();
        // Residual of (X^T X / nv + I / pv) s - X^T y / nv.
        let xs = x.matvec(&s);
        let xtxs = x.t_matvec(&xs);
        let xty = x.t_matvec(&y);
        for j in 0..12 {
            let lhs = xtxs[j] / 0.7 + s[j] / 1.3;
            assert_abs_diff_eq!(lhs, xty[j] / 0.7, epsilon = 1e-9);
        }
    }
}
