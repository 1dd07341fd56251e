//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Complex, DMatrix, DVector};

/// Eigenvalues of a real square matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    if m.nrows() == 1 {
        return vec![(m[(0, 0)], 0.0)];
    }
    let ev: DVector<Complex<f64>> = m.complex_eigenvalues();
    ev.iter().map(|c| (c.re, c.im)).collect()
}

pub fn max_real_part(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let s = symmetrize(m);
    s.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Numerical rank from the singular values, relative tolerance on the largest one.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * smax * 16.0;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

pub fn block2(
    a11: &DMatrix<f64>,
    a12: &DMatrix<f64>,
    a21: &DMatrix<f64>,
    a22: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (r1, c1) = a11.shape();
    let (r2, c2) = a22.shape();
    let mut out = DMatrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(a11);
    out.view_mut((0, c1), (r1, c2)).copy_from(a12);
    out.view_mut((r1, 0), (r2, c1)).copy_from(a21);
    out.view_mut((r1, c1), (r2, c2)).copy_from(a22);
    out
}

/// Complex rank of `[a - λI, b]`, computed through the real embedding
/// `[[Re, -Im], [Im, Re]]` which has twice the complex rank.
fn hautus_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: (f64, f64)) -> usize {
    let n = a.nrows();
    let shifted = a - DMatrix::identity(n, n) * lambda.0;
    let re = hcat(&shifted, b);
    if lambda.1 == 0.0 {
        return rank(&re);
    }
    let im = hcat(
        &(DMatrix::identity(n, n) * -lambda.1),
        &DMatrix::zeros(n, b.ncols()),
    );
    let emb = block2(&re, &(-&im), &im, &re);
    rank(&emb) / 2
}

/// Hautus test for stabilisability of `(a, b)`: every eigenvalue with
/// non-negative real part must leave `[a - λI, b]` with full row rank.
/// Returns the verdict and the smallest rank found at a non-stable eigenvalue.
pub fn hautus_stabilisable(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> (bool, usize) {
    let n = a.nrows();
    let mut worst = n;
    for lambda in eigenvalues(a) {
        if lambda.0 >= -tol {
            worst = worst.min(hautus_rank(a, b, lambda));
        }
    }
    (worst == n, worst)
}

/// Rank of the controllability matrix `[b, a b, ..., a^{n-1} b]`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = b.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = a * cur;
    }
    let mut gamma = DMatrix::zeros(n, 0);
    for blk in &blocks {
        gamma = hcat(&gamma, blk);
    }
    rank(&gamma)
}

/// `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
            }
        }
    }
    out
}

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
