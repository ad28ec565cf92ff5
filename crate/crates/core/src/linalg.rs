//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Full singular value decomposition with singular values sorted in
/// descending order. `u` is always square (`rows x rows`).
pub struct FullSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

/// Computes a full SVD. Wide inputs are handled directly; tall inputs are
/// padded with zero columns so that the left factor is complete.
pub fn full_svd(m: &DMatrix<f64>) -> FullSvd {
    let (r, c) = m.shape();
    if r == 0 {
        return FullSvd {
            u: DMatrix::zeros(0, 0),
            s: vec![],
            v_t: DMatrix::identity(c, c),
        };
    }
    let padded = if c < r {
        let mut p = DMatrix::zeros(r, r);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    // nalgebra sorts, but keep the invariant explicit
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    let u = DMatrix::from_fn(u.nrows(), idx.len(), |i, j| u[(i, idx[j])]);
    let v_t = DMatrix::from_fn(idx.len(), v_t.ncols(), |i, j| v_t[(idx[i], j)]);
    let s = idx.iter().map(|&i| s[i]).collect();
    FullSvd { u, s, v_t }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return vec![];
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Orthonormal basis (as rows) of the left null space of `m`, using a
/// relative singular value threshold.
pub fn left_null_rows(m: &DMatrix<f64>, tol_rel: f64) -> DMatrix<f64> {
    let r = m.nrows();
    if r == 0 {
        return DMatrix::zeros(0, 0);
    }
    let svd = full_svd(m);
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let cut = tol_rel * smax;
    let rank = if smax == 0.0 {
        0
    } else {
        svd.s.iter().take(r.min(m.ncols())).filter(|&&x| x > cut).count()
    };
    let b = r - rank;
    DMatrix::from_fn(b, r, |i, j| svd.u[(j, rank + i)])
}

/// Numerical rank with a relative threshold.
pub fn rank(m: &DMatrix<f64>, tol_rel: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        None => 0,
        Some(&0.0) => 0,
        Some(&smax) => s.iter().filter(|&&x| x > tol_rel * smax).count(),
    }
}

/// Moore–Penrose pseudo-inverse with a relative cutoff.
pub fn pinv(m: &DMatrix<f64>, tol_rel: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = tol_rel * smax;
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out += (vk * uk.transpose()) / s;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix and an associated unit
/// eigenvector. Ties go to the first index returned by the solver.
pub fn min_eigen(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// Spectral radius via the eigenvalues of a general square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest real part of the eigenvalues of a square matrix.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Induced infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Horizontal concatenation of equally tall blocks.
pub fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hcat: row mismatch");
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

/// Vertical concatenation of equally wide blocks.
pub fn vcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vcat: column mismatch");
        out.view_mut((r0, 0), (b.nrows(), cols)).copy_from(*b);
        r0 += b.nrows();
    }
    out
}

/// Solves the discrete Lyapunov equation `X = A X A' + Q` by squared
/// Smith iteration. Requires spectral radius of `A` below one.
pub fn dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let inc = &ak * &x * ak.transpose();
        x += &inc;
        ak = &ak * &ak;
        if ak.norm() < 1e-300 || inc.norm() <= 1e-17 * x.norm() {
            break;
        }
    }
    x
}
