//! Symmetric eigenvalue routines: a dense solver wrapping nalgebra and a
//! thick-restart Lanczos iteration with deflation for large sparse
//! positive-semidefinite operators.

use alloc::string::String;
use alloc::{format, vec, vec::Vec};
use core::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum LinalgError {
    NoConvergence(String),
    Dimension(String),
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::NoConvergence(msg) => write!(f, "eigensolver did not converge: {msg}"),
            LinalgError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LinalgError {}

/// Sparse symmetric matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl CsrMatrix {
    /// Build from unsorted triplets; duplicate entries are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_counts = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(triplets.len());
        let mut val: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in &triplets {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                row_counts[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_counts[r + 1] += row_counts[r];
        }
        CsrMatrix {
            n,
            row_ptr: row_counts,
            col,
            val,
        }
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col[lo..hi]
            .iter()
            .zip(&self.val[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

/// Eigendecomposition of a dense symmetric matrix, eigenvalues ascending
/// with matching eigenvector columns.
pub fn dense_sym_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let es = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| es.eigenvalues[i].total_cmp(&es.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| es.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &es.eigenvectors.column(i));
    }
    (values, vectors)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Result of a Lanczos run for one extreme eigenpair.
#[derive(Clone, Debug)]
pub struct LanczosResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
    pub matvecs: usize,
}

const LANCZOS_BASIS: usize = 80;
const LANCZOS_KEEP: usize = 16;

/// Smallest eigenvalue of a symmetric positive-semidefinite operator on
/// the orthogonal complement of a known null vector, by thick-restart
/// Lanczos with full reorthogonalization.
pub fn lanczos_smallest(
    a: &CsrMatrix,
    deflate: &[f64],
    seed: u64,
    tol: f64,
    max_matvecs: usize,
) -> Result<LanczosResult, LinalgError> {
    let n = a.n;
    if deflate.len() != n {
        return Err(LinalgError::Dimension(format!(
            "deflation vector {} vs matrix {n}",
            deflate.len()
        )));
    }
    let mut defl = deflate.to_vec();
    let dn = norm(&defl);
    for v in &mut defl {
        *v /= dn;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    // Projected matrix: diag(theta) + arrow column after a restart,
    // tridiagonal extension in between. Kept dense, it is tiny.
    let mut t = DMatrix::<f64>::zeros(LANCZOS_BASIS + 1, LANCZOS_BASIS + 1);
    let mut matvecs = 0usize;

    fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>], defl: &[f64]) {
        for _ in 0..2 {
            let c = dot(w, defl);
            axpy(w, -c, defl);
            for v in basis {
                let c = dot(w, v);
                axpy(w, -c, v);
            }
        }
    }

    let fresh_vector = |rng: &mut ChaCha8Rng, basis: &[Vec<f64>], defl: &[f64]| -> Option<Vec<f64>> {
        for _ in 0..5 {
            let mut r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            orthogonalize(&mut r, basis, defl);
            let nr = norm(&r);
            if nr > 1e-10 {
                for x in &mut r {
                    *x /= nr;
                }
                return Some(r);
            }
        }
        None
    };

    let v = fresh_vector(&mut rng, &basis, &defl)
        .ok_or_else(|| LinalgError::NoConvergence("no start vector".into()))?;
    basis.push(v);

    // Loop invariant at the top of each cycle: `basis` holds j0 vectors
    // whose projected matrix occupies t[..j0, ..j0] completely, and the
    // next vector to process is basis[j0 - 1].
    let mut j0 = 0usize;
    let mut w = vec![0.0f64; n];
    loop {
        // Extend the Lanczos factorization to LANCZOS_BASIS columns; the
        // residual direction of the final step is kept aside.
        let mut beta_last = 0.0f64;
        let mut vres: Option<Vec<f64>> = None;
        for j in j0..LANCZOS_BASIS {
            a.matvec(&basis[j], &mut w);
            matvecs += 1;
            t[(j, j)] = dot(&w, &basis[j]);
            let mut next = w.clone();
            orthogonalize(&mut next, &basis, &defl);
            let beta = norm(&next);
            if beta < 1e-13 {
                // Invariant subspace: continue from a fresh direction with
                // zero coupling, or stop if the complement is exhausted.
                match fresh_vector(&mut rng, &basis, &defl) {
                    Some(r) => {
                        if j + 1 < LANCZOS_BASIS {
                            basis.push(r);
                        } else {
                            vres = Some(r);
                            beta_last = 0.0;
                        }
                        continue;
                    }
                    None => break,
                }
            }
            for x in &mut next {
                *x /= beta;
            }
            if j + 1 < LANCZOS_BASIS {
                t[(j + 1, j)] = beta;
                t[(j, j + 1)] = beta;
                basis.push(next);
            } else {
                beta_last = beta;
                vres = Some(next);
            }
        }

        // Ritz decomposition of the completed projection.
        let m = basis.len();
        let tm = t.view((0, 0), (m, m)).into_owned();
        let (theta, s) = dense_sym_eigen(tm);

        // True residual of the smallest Ritz pair.
        let mut y = vec![0.0f64; n];
        for (i, b) in basis.iter().enumerate() {
            axpy(&mut y, s[(i, 0)], b);
        }
        a.matvec(&y, &mut w);
        matvecs += 1;
        let mut res = w.clone();
        axpy(&mut res, -theta[0], &y);
        let residual = norm(&res);
        if residual <= tol || vres.is_none() {
            return Ok(LanczosResult {
                value: theta[0],
                vector: y,
                residual,
                matvecs,
            });
        }
        if matvecs >= max_matvecs {
            return Err(LinalgError::NoConvergence(format!(
                "residual {residual} after {matvecs} matvecs"
            )));
        }

        // Thick restart: keep the lowest Ritz vectors plus the residual
        // direction; the projection becomes diag(theta) + an arrow column
        // with couplings beta_last * s[m-1, k].
        let keep = LANCZOS_KEEP.min(m.saturating_sub(1)).max(1);
        let mut new_basis: Vec<Vec<f64>> = Vec::with_capacity(keep + 1);
        for k in 0..keep {
            let mut u = vec![0.0f64; n];
            for (i, b) in basis.iter().enumerate() {
                axpy(&mut u, s[(i, k)], b);
            }
            new_basis.push(u);
        }
        let couplings: Vec<f64> = (0..keep).map(|k| beta_last * s[(m - 1, k)]).collect();
        let mut vres = vres.expect("checked above");
        orthogonalize(&mut vres, &new_basis, &defl);
        let nv = norm(&vres);
        if nv > 1e-13 {
            for x in &mut vres {
                *x /= nv;
            }
        } else {
            vres = match fresh_vector(&mut rng, &new_basis, &defl) {
                Some(r) => r,
                None => {
                    return Ok(LanczosResult {
                        value: theta[0],
                        vector: y,
                        residual,
                        matvecs,
                    })
                }
            };
        }
        new_basis.push(vres);
        t.fill(0.0);
        for k in 0..keep {
            t[(k, k)] = theta[k];
            t[(k, keep)] = couplings[k];
            t[(keep, k)] = couplings[k];
        }
        basis = new_basis;
        j0 = keep;
    }
}
