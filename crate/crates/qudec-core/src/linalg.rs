//! Dense symmetric linear algebra for the quality-scorer statistics:
//! Cholesky solves against the averaged covariance and a Jacobi eigensolver
//! for the pseudo-inverse fallback and for validating positive
//! semi-definiteness.

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                m = m.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        m
    }

    /// Forces exact symmetry by averaging mirrored entries.
    pub fn symmetrize(&mut self) {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let v = 0.5 * (self.at(i, j) + self.at(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    pub fn add_scaled_identity(&mut self, lambda: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += lambda;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        SymMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        SymMatrix {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Cholesky factorization (lower L with A = L Lᵀ). Fails if the matrix is not
/// numerically positive definite.
pub fn cholesky(a: &SymMatrix) -> Option<Vec<f64>> {
    let n = a.n;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves A x = b via a Cholesky factor of A.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // backward: Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as rows).
pub fn jacobi_eigen(a: &SymMatrix, max_sweeps: usize) -> (Vec<f64>, Vec<f64>) {
    let n = a.n;
    let mut m = a.data.clone();
    let mut v = SymMatrix::identity(n).data;
    for _ in 0..max_sweeps {
        let mut off: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.iter().map(|x| x.abs()).fold(0.0, f64::max)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[p * n + k];
                    let vkq = v[q * n + k];
                    v[p * n + k] = c * vkp - s * vkq;
                    v[q * n + k] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eigvals, v)
}

/// x solving A x = b for symmetric PSD A. Uses Cholesky when A is positive
/// definite, otherwise a truncated eigen pseudo-inverse. The second return
/// value reports whether the pseudo-inverse path was taken.
pub fn solve_spd_or_pinv(a: &SymMatrix, b: &[f64]) -> (Vec<f64>, bool) {
    if let Some(l) = cholesky(a) {
        return (cholesky_solve(&l, a.n, b), false);
    }
    let n = a.n;
    let (vals, vecs) = jacobi_eigen(a, 64);
    let vmax = vals.iter().cloned().fold(0.0, f64::max);
    let cutoff = vmax.max(0.0) * 1e-12 + 1e-300;
    let mut x = vec![0.0; n];
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= cutoff {
            continue;
        }
        // eigenvector k is row k of vecs
        let row = &vecs[k * n..(k + 1) * n];
        let proj: f64 = row.iter().zip(b).map(|(e, bb)| e * bb).sum();
        let w = proj / lam;
        for i in 0..n {
            x[i] += w * row[i];
        }
    }
    (x, true)
}

/// Smallest eigenvalue (for PSD validation).
pub fn min_eigenvalue(a: &SymMatrix) -> f64 {
    let (vals, _) = jacobi_eigen(a, 64);
    vals.into_iter().fold(f64::INFINITY, f64::min)
}

/// Column means of a sample matrix (rows are observations).
pub fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    mean
}

/// Sample covariance (n-1 denominator) of observation rows.
pub fn sample_covariance(rows: &[Vec<f64>], mean: &[f64]) -> SymMatrix {
    let d = mean.len();
    let mut cov = SymMatrix::zeros(d);
    if rows.len() < 2 {
        return cov;
    }
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                let dj = r[j] - mean[j];
                cov.data[i * d + j] += di * dj;
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.data[i * d + j] / denom;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    cov
}
