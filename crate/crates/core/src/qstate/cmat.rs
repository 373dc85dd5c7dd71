//! Small dense complex matrices.
//!
//! Everything in this artifact lives in dimension 2, 3 or 9 (vectorized
//! Liouvillian), so the implementations favour exactness and simplicity over
//! asymptotics: cyclic Jacobi for Hermitian eigendecompositions and
//! scaling-and-squaring with a [6/6] Pade approximant for the matrix
//! exponential.

use num_complex::Complex64;

pub type C64 = Complex64;

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    dim: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(dim: usize) -> Self {
        CMat { dim, data: vec![C64::new(0.0, 0.0); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = CMat::zeros(dim);
        for i in 0..dim {
            m.set(i, i, C64::new(1.0, 0.0));
        }
        m
    }

    /// Build from a row-major slice of length dim*dim.
    pub fn from_slice(dim: usize, entries: &[C64]) -> Self {
        assert_eq!(entries.len(), dim * dim, "entry count must be dim^2");
        CMat { dim, data: entries.to_vec() }
    }

    pub fn from_real(dim: usize, entries: &[f64]) -> Self {
        assert_eq!(entries.len(), dim * dim);
        CMat {
            dim,
            data: entries.iter().map(|&x| C64::new(x, 0.0)).collect(),
        }
    }

    /// |i><j| basis matrix.
    pub fn ket_bra(dim: usize, i: usize, j: usize) -> Self {
        let mut m = CMat::zeros(dim);
        m.set(i, j, C64::new(1.0, 0.0));
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn dagger(&self) -> CMat {
        let d = self.dim;
        let mut out = CMat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.set(i, j, self.get(j, i).conj());
            }
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&self, s: C64) -> CMat {
        CMat { dim: self.dim, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert_eq!(self.dim, other.dim);
        CMat {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert_eq!(self.dim, other.dim);
        CMat {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        assert_eq!(self.dim, other.dim, "dimension mismatch in matmul");
        let d = self.dim;
        let mut out = CMat::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let aik = self.get(i, k);
                if aik.norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += aik * other.data[k * d + j];
                }
            }
        }
        out
    }

    /// A*v for a column vector v.
    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.dim);
        let d = self.dim;
        let mut out = vec![C64::new(0.0, 0.0); d];
        for i in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..d {
                acc += self.data[i * d + j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn commutator(&self, other: &CMat) -> CMat {
        self.matmul(other).sub(&other.matmul(self))
    }

    pub fn anticommutator(&self, other: &CMat) -> CMat {
        self.matmul(other).add(&other.matmul(self))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let d = self.dim;
        (0..d)
            .map(|j| (0..d).map(|i| self.get(i, j).norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let d = self.dim;
        for i in 0..d {
            if self.get(i, i).im.abs() > tol {
                return false;
            }
            for j in (i + 1)..d {
                if (self.get(i, j) - self.get(j, i).conj()).norm() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// (A + A^dagger)/2.
    pub fn symmetrize(&self) -> CMat {
        self.add(&self.dagger()).scale(C64::new(0.5, 0.0))
    }

    /// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
    ///
    /// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
    /// eigenvector k stored in column k of the returned matrix.
    pub fn eigh(&self) -> (Vec<f64>, CMat) {
        let d = self.dim;
        let mut a = self.clone();
        let mut v = CMat::identity(d);

        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += a.get(p, q).norm_sqr();
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a.get(p, q);
                    if apq.norm() < 1e-300 {
                        continue;
                    }
                    let app = a.get(p, p).re;
                    let aqq = a.get(q, q).re;
                    // Unitary plane rotation annihilating a_pq: columns are
                    // [c, s*phase; -s*conj(phase), c] with phase = a_pq/|a_pq|.
                    let abs = apq.norm();
                    let phase = apq / abs;
                    let tau = (aqq - app) / (2.0 * abs);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;

                    // Apply J^dagger A J where J acts on the (p, q) plane.
                    for k in 0..d {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, akp * c - akq * (phase.conj() * s));
                        a.set(k, q, akp * (phase * s) + akq * c);
                    }
                    for k in 0..d {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, apk * c - aqk * (phase * s));
                        a.set(q, k, apk * (phase.conj() * s) + aqk * c);
                    }
                    for k in 0..d {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, vkp * c - vkq * (phase.conj() * s));
                        v.set(k, q, vkp * (phase * s) + vkq * c);
                    }
                }
            }
        }

        let mut pairs: Vec<(f64, usize)> =
            (0..d).map(|i| (a.get(i, i).re, i)).collect();
        pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());

        let vals: Vec<f64> = pairs.iter().map(|&(val, _)| val).collect();
        let mut vecs = CMat::zeros(d);
        for (new_col, &(_, old_col)) in pairs.iter().enumerate() {
            for r in 0..d {
                vecs.set(r, new_col, v.get(r, old_col));
            }
        }
        (vals, vecs)
    }

    /// Rebuild sum_k f(lambda_k) |v_k><v_k| from an eigendecomposition.
    pub fn from_eigh(vals: &[f64], vecs: &CMat, f: impl Fn(f64) -> f64) -> CMat {
        let d = vecs.dim;
        let mut out = CMat::zeros(d);
        for k in 0..d {
            let fk = f(vals[k]);
            if fk == 0.0 {
                continue;
            }
            for i in 0..d {
                let vik = vecs.get(i, k);
                for j in 0..d {
                    let inc = vik * vecs.get(j, k).conj() * fk;
                    let cur = out.get(i, j);
                    out.set(i, j, cur + inc);
                }
            }
        }
        out
    }

    /// Matrix exponential by scaling-and-squaring with a [6/6] diagonal Pade
    /// approximant. Sized for the 9x9 Liouvillians this crate produces.
    pub fn expm(&self) -> CMat {
        let d = self.dim;
        let norm = self.norm_one();
        // Squaring count so the scaled norm is below ~0.5, where the [6/6]
        // approximant is accurate to well under 1e-15.
        let s = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let a = self.scale(C64::new(1.0 / (2f64.powi(s as i32)), 0.0));

        // Pade [6/6]: p(x) = sum b_k x^k, exp(A) ~ q(A)^{-1} p(A) with
        // q(x) = p(-x). At scaled norm <= 0.5 the truncation error is ~1e-17.
        let b = [665280.0, 332640.0, 75600.0, 10080.0, 840.0, 42.0, 1.0];
        let mut pow = CMat::identity(d);
        let mut p = CMat::zeros(d);
        let mut q = CMat::zeros(d);
        for (k, &bk) in b.iter().enumerate() {
            let term = pow.scale(C64::new(bk, 0.0));
            p = p.add(&term);
            if k % 2 == 0 {
                q = q.add(&term);
            } else {
                q = q.sub(&term);
            }
            if k + 1 < b.len() {
                pow = pow.matmul(&a);
            }
        }
        let mut r = q.solve(&p).expect("pade denominator is singular");
        for _ in 0..s {
            r = r.matmul(&r);
        }
        r
    }

    /// Solve self * X = B by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &CMat) -> Option<CMat> {
        assert_eq!(self.dim, b.dim);
        let d = self.dim;
        let mut a = self.data.clone();
        let mut x = b.data.clone();
        for col in 0..d {
            let mut piv = col;
            let mut best = a[col * d + col].norm();
            for r in (col + 1)..d {
                let mag = a[r * d + col].norm();
                if mag > best {
                    best = mag;
                    piv = r;
                }
            }
            if best < 1e-300 {
                return None;
            }
            if piv != col {
                for j in 0..d {
                    a.swap(col * d + j, piv * d + j);
                    x.swap(col * d + j, piv * d + j);
                }
            }
            let diag = a[col * d + col];
            for r in 0..d {
                if r == col {
                    continue;
                }
                let factor = a[r * d + col] / diag;
                if factor.norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let acj = a[col * d + j];
                    a[r * d + j] -= factor * acj;
                    let xcj = x[col * d + j];
                    x[r * d + j] -= factor * xcj;
                }
            }
        }
        for r in 0..d {
            let diag = a[r * d + r];
            for j in 0..d {
                x[r * d + j] /= diag;
            }
        }
        Some(CMat { dim: d, data: x })
    }
}
