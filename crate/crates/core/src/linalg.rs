//! Small dense linear algebra: Householder QR, LU with partial pivoting,
//! a 1-norm condition estimate, Cholesky and the polar factor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{self, Tensor};

/// Matrices whose estimated 1-norm condition number exceeds this are refused.
pub const MAX_CONDITION: f64 = 1e12;

fn square(a: &Tensor, op: &'static str) -> Result<usize> {
    let (m, n) = a.dims2()?;
    if m != n {
        return Err(Error::dim(op, a.shape(), &[n, n]));
    }
    Ok(n)
}

/// Thin QR of an m×n matrix (m ≥ n) by Householder reflections.
///
/// Returns `(Q, R)` with `Q` m×n having orthonormal columns and `R` n×n upper
/// triangular with a non-negative diagonal.
pub fn qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = a.dims2()?;
    if m < n {
        return Err(Error::dim("qr", a.shape(), &[n, n]));
    }
    let mut r = a.data().to_vec();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let norm = math::sqrt((k..m).map(|i| r[i * n + k] * r[i * n + k]).sum());
        let mut v: Vec<f64> = (k..m).map(|i| r[i * n + k]).collect();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = math::sqrt(v.iter().map(|x| x * x).sum());
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
            for j in k..n {
                let s: f64 = (k..m).map(|i| v[i - k] * r[i * n + j]).sum();
                for i in k..m {
                    r[i * n + j] -= 2.0 * v[i - k] * s;
                }
            }
        }
        vs.push(v);
    }
    // Accumulate Q by applying the reflections to the first n columns of I.
    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * q[i * n + j]).sum();
            for i in k..m {
                q[i * n + j] -= 2.0 * v[i - k] * s;
            }
        }
    }
    let mut rr = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            rr[i * n + j] = r[i * n + j];
        }
    }
    // Make the diagonal of R non-negative.
    for k in 0..n {
        if rr[k * n + k] < 0.0 {
            for j in k..n {
                rr[k * n + j] = -rr[k * n + j];
            }
            for i in 0..m {
                q[i * n + k] = -q[i * n + k];
            }
        }
    }
    Ok((Tensor::new(vec![m, n], q)?, Tensor::new(vec![n, n], rr)?))
}

/// A Haar-distributed random matrix with orthonormal columns (m ≥ n).
pub fn random_orthonormal<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Tensor> {
    let g = gaussian(&[m, n], 1.0, rng);
    Ok(qr(&g)?.0)
}

/// i.i.d. N(0, std²) entries.
pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * std;
    }
    t
}

/// `P·A = L·U` with partial pivoting; `L` (unit diagonal) and `U` share storage.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let n = square(a, "lu")?;
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let norm1 = one_norm(a.data(), n);
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[i * n + k].abs().total_cmp(&lu[j * n + k].abs()))
                .unwrap_or(k);
            if lu[p * n + k] == 0.0 || !lu[p * n + k].is_finite() {
                return Err(Error::Numerical(format!(
                    "matrix is singular (zero pivot in column {k})"
                )));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A·x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ·x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, then x = Pᵀ z.
        let mut y = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[j * n + i] * y[j]).sum();
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[j * n + i] * y[j]).sum();
            y[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    /// Hager's estimate of ‖A⁻¹‖₁ times ‖A‖₁.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            let new_est: f64 = y.iter().map(|v| v.abs()).sum();
            if !new_est.is_finite() {
                return f64::INFINITY;
            }
            let xi: Vec<f64> = y
                .iter()
                .map(|v| if *v >= 0.0 { 1.0 } else { -1.0 })
                .collect();
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.abs()))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            let ztx: f64 = tensor::dot(&z, &x);
            if new_est <= est || zmax <= ztx {
                est = est.max(new_est);
                break;
            }
            est = new_est;
            x = vec![0.0; n];
            x[j] = 1.0;
        }
        est * self.norm1
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        Tensor::new(vec![n, n], inv).expect("square")
    }
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// LU factorization that refuses matrices with condition estimate above [`MAX_CONDITION`].
pub fn well_conditioned_lu(a: &Tensor) -> Result<Lu> {
    let lu = Lu::factor(a)?;
    let cond = lu.condition_estimate();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Numerical(format!(
            "matrix is ill-conditioned (condition estimate {cond:.3e})"
        )));
    }
    Ok(lu)
}

/// The orthogonal factor of the polar decomposition of a square full-rank
/// matrix, by scaled Newton iteration `X ← ½(ζX + (ζX)⁻ᵀ)`.
pub fn polar_orthogonal(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "polar")?;
    let mut x = a.clone();
    for iter in 0..100 {
        let inv = well_conditioned_lu(&x)?.inverse();
        let scale = if iter < 50 {
            math::sqrt(inv.frobenius_norm() / x.frobenius_norm())
        } else {
            1.0
        };
        let inv_t = inv.transpose()?;
        let mut next = Tensor::zeros(&[n, n]);
        for ((o, a), b) in next.data_mut().iter_mut().zip(x.data()).zip(inv_t.data()) {
            *o = 0.5 * (scale * a + b / scale);
        }
        let delta = next.max_abs_diff(&x);
        x = next;
        if delta < 1e-15 * n as f64 {
            break;
        }
    }
    // Newton converges quadratically, so the last step is a clean-up pass.
    let inv_t = well_conditioned_lu(&x)?.inverse().transpose()?;
    let mut out = x.clone();
    for ((o, a), b) in out.data_mut().iter_mut().zip(x.data()).zip(inv_t.data()) {
        *o = 0.5 * (a + b);
    }
    Ok(out)
}

/// In-place Cholesky factor `L` of a symmetric positive-definite matrix
/// (lower triangle, row-major).
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return Err(Error::Numerical(format!(
                        "matrix is not positive definite at row {i}"
                    )));
                }
                l[i * n + i] = math::sqrt(d);
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` for every column of `b` (n×k).
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for c in 0..k {
        for i in 0..n {
            let s: f64 = (0..i).map(|j| l[i * n + j] * x[j * k + c]).sum();
            x[i * k + c] = (x[i * k + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| l[j * n + i] * x[j * k + c]).sum();
            x[i * k + c] = (x[i * k + c] - s) / l[i * n + i];
        }
    }
    x
}

/// `‖A Aᵀ − I‖_F`.
pub fn orthonormality_error(a: &Tensor) -> Result<f64> {
    let n = square(a, "orthonormality_error")?;
    let at = a.transpose()?;
    let mut p = a.matmul(&at)?;
    for i in 0..n {
        let v = p.at(i, i) - 1.0;
        p.set(i, i, v);
    }
    Ok(p.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn to_na(t: &Tensor) -> nalgebra::DMatrix<f64> {
        let (m, n) = t.dims2().unwrap();
        nalgebra::DMatrix::from_row_slice(m, n, t.data())
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(&[7, 4], 1.0, &mut rng);
        let (q, r) = qr(&a).unwrap();
        assert!(q.matmul(&r).unwrap().max_abs_diff(&a) < 1e-12);
        let qtq = q.transpose().unwrap().matmul(&q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(4)) < 1e-12);
    }

    #[test]
    fn random_orthonormal_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_orthonormal(16, 16, &mut rng).unwrap();
        assert!(orthonormality_error(&q).unwrap() <= 1e-10);
    }

    #[test]
    fn lu_solves_and_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&[6, 6], 1.0, &mut rng);
        let lu = Lu::factor(&a).unwrap();
        let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let x = lu.solve(&b);
        let ax = a.matmul(&Tensor::matrix(6, 1, x).unwrap()).unwrap();
        assert!(ax.data().iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10));
        let xt = lu.solve_transpose(&b);
        let atx = a
            .transpose()
            .unwrap()
            .matmul(&Tensor::matrix(6, 1, xt).unwrap())
            .unwrap();
        assert!(atx
            .data()
            .iter()
            .zip(&b)
            .all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn condition_estimate_tracks_exact_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = gaussian(&[5, 5], 1.0, &mut rng);
            let lu = Lu::factor(&a).unwrap();
            let exact = one_norm(a.data(), 5) * one_norm(lu.inverse().data(), 5);
            let est = lu.condition_estimate();
            // Hager's estimate is a lower bound, usually within a small factor.
            assert!(est <= exact * (1.0 + 1e-10) && est >= exact / 10.0);
        }
    }

    #[test]
    fn singular_and_ill_conditioned_are_refused() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(well_conditioned_lu(&s), Err(Error::Numerical(_))));
        let ill = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]).unwrap();
        assert!(matches!(
            well_conditioned_lu(&ill),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn polar_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = gaussian(&[6, 6], 1.0, &mut rng);
            let p = polar_orthogonal(&a).unwrap();
            assert!(orthonormality_error(&p).unwrap() <= 1e-10);
            let svd = to_na(&a).svd(true, true);
            let oracle = svd.u.unwrap() * svd.v_t.unwrap();
            let got = to_na(&p);
            assert!((got - oracle).abs().max() < 1e-10);
        }
    }

    #[test]
    fn polar_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_orthonormal(5, 5, &mut rng).unwrap();
        assert!(polar_orthogonal(&q).unwrap().max_abs_diff(&q) < 1e-12);
        let mut two = Tensor::eye(4);
        two.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert!(
            polar_orthogonal(&two)
                .unwrap()
                .max_abs_diff(&Tensor::eye(4))
                < 1e-12
        );
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, 2, &[2.0, 1.0], 1);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
    }
}
