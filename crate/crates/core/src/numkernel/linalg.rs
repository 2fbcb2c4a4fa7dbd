//! Dense factorizations used outside the autodiff tape: Cholesky for the
//! PLDA algebra and a cyclic Jacobi eigensolver for LDA and whitening.

use super::Tensor;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

fn check_square(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::dim(op, format!("expected square matrix, got {:?}", a.shape())));
    }
    Ok(a.rows())
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = check_square(a, "cholesky")?;
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Decomposition(format!(
                "non-positive pivot {d:.3e} at column {j}"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_square(a, "cholesky_solve")?;
    let b = if b.rank() == 1 {
        b.clone().reshape(&[b.numel(), 1])?
    } else {
        b.clone()
    };
    if b.rows() != n {
        return Err(Error::dim(
            "cholesky_solve",
            format!("A is {n}x{n}, B has {} rows", b.rows()),
        ));
    }
    let l = cholesky(a)?;
    Ok(solve_with_factor(&l, &b))
}

fn solve_with_factor(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let k = b.cols();
    let mut x = b.clone();
    for c in 0..k {
        // L y = b
        for i in 0..n {
            let mut s = x.at(i, c);
            for p in 0..i {
                s -= l.at(i, p) * x.at(p, c);
            }
            x.set(i, c, s / l.at(i, i));
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x.at(i, c);
            for p in (i + 1)..n {
                s -= l.at(p, i) * x.at(p, c);
            }
            x.set(i, c, s / l.at(i, i));
        }
    }
    x
}

/// Inverse of an SPD matrix, symmetrized.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let n = check_square(a, "spd_inverse")?;
    let l = cholesky(a)?;
    Ok(solve_with_factor(&l, &Tensor::eye(n)).symmetrize())
}

/// `ln det A` for SPD `A`.
pub fn spd_log_det(a: &Tensor) -> Result<f64> {
    let l = cholesky(a)?;
    Ok((0..l.rows()).map(|i| 2.0 * l.at(i, i).ln()).sum())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as the columns of the second tensor.
pub fn sym_eig_jacobi(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = check_square(a, "sym_eig_jacobi")?;
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Symmetry(asym));
    }
    let mut m = a.symmetrize();
    let mut v = Tensor::eye(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(j, j).total_cmp(&m.at(i, i)).then(i.cmp(&j)));
    let values = Tensor::vector(order.iter().map(|&i| m.at(i, i)).collect());
    let mut vectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.at(k, src));
        }
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let m = random(rng, n, n);
        m.matmul(&m.transpose()).unwrap().add(&Tensor::eye(n)).unwrap()
    }

    #[test]
    fn solve_identity_and_scaled() {
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = cholesky_solve(&Tensor::eye(3), &b).unwrap();
        assert!(x.sub(&b).unwrap().max_abs() < 1e-15);
        let x = cholesky_solve(&Tensor::eye(3).scale(2.0), &b).unwrap();
        assert!(x.sub(&b.scale(0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn solve_residuals_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = 1 + (trial * 63) / 99;
            let a = random_spd(&mut rng, n);
            let b = random(&mut rng, n, 3);
            let x = cholesky_solve(&a, &b).unwrap();
            let resid = a.matmul(&x).unwrap().sub(&b).unwrap().max_abs();
            assert!(resid < 1e-8 * b.max_abs(), "n={n} resid={resid:e}");
        }
    }

    #[test]
    fn non_spd_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_solve(&a, &Tensor::eye(2)),
            Err(Error::Decomposition(_))
        ));
    }

    #[test]
    fn eig_small_cases() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (w, _) = sym_eig_jacobi(&a).unwrap();
        assert!((w.data()[0] - 3.0).abs() < 1e-12 && (w.data()[1] - 1.0).abs() < 1e-12);

        let d = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ])
        .unwrap();
        let (w, v) = sym_eig_jacobi(&d).unwrap();
        assert_eq!(w.data(), &[5.0, 3.0, 1.0]);
        // permuted identity
        assert_eq!(v.at(1, 0), 1.0);
        assert_eq!(v.at(2, 1), 1.0);
        assert_eq!(v.at(0, 2), 1.0);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig_jacobi(&a), Err(Error::Symmetry(_))));
    }

    #[test]
    fn eig_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = 1 + (trial * 63) / 99;
            let m = random(&mut rng, n, n);
            let a = m.add(&m.transpose()).unwrap();
            let (w, v) = sym_eig_jacobi(&a).unwrap();
            for i in 1..n {
                assert!(w.data()[i - 1] >= w.data()[i]);
            }
            let mut lam = Tensor::zeros(&[n, n]);
            for i in 0..n {
                lam.set(i, i, w.data()[i]);
            }
            let recon = v.matmul(&lam).unwrap().matmul(&v.transpose()).unwrap();
            assert!(recon.sub(&a).unwrap().max_abs() < 1e-8, "n={n}");
            let gram = v.transpose().matmul(&v).unwrap();
            assert!(gram.sub(&Tensor::eye(n)).unwrap().max_abs() < 1e-8);
            // A v_i = λ_i v_i
            let av = a.matmul(&v).unwrap();
            let vl = v.matmul(&lam).unwrap();
            assert!(av.sub(&vl).unwrap().max_abs() < 1e-8);
        }
    }
}
