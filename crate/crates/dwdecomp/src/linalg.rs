//! Deterministic dense linear algebra: SVD, leading singular direction, and
//! the constrained rank-1 least-squares fit behind the compensated
//! decomposition.
//!
//! The SVD is computed from a symmetric Jacobi eigendecomposition of the
//! smaller Gram matrix. No randomized sketching, no data-dependent pivoting:
//! a given input always produces bit-identical factors, and a fixed sign
//! convention (largest-magnitude entry of each right singular vector is
//! positive) keeps downstream factor weights reproducible across runs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{DwdError, Result};

/// Thin SVD `M = U·diag(S)·Vᵀ` with `r = min(rows, cols)`.
///
/// `U` is rows×r, `V` is cols×r, both column-orthonormal; `S` is sorted
/// descending. Columns of `V` follow the sign convention above.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Array2<f64>,
    pub s: Array1<f64>,
    pub v: Array2<f64>,
}

/// Result of [`rank1_constrained_fit`]: the best fit `T ≈ (Y·u)·pᵀ` over
/// unit `u` and free `p`, with the achieved residual Frobenius norm.
#[derive(Debug, Clone)]
pub struct Rank1Fit {
    pub u: Array1<f64>,
    pub p: Array1<f64>,
    pub objective: f64,
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn all_zero(a: ArrayView2<f64>) -> bool {
    a.iter().all(|x| *x == 0.0)
}

fn ensure_finite(a: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DwdError::Numeric(format!("{what}: non-finite entries")))
    }
}

// ── symmetric Jacobi eigendecomposition ─────────────────────────────────────

const JACOBI_MAX_SWEEPS: usize = 64;

/// Rotate two equal-length rows in place:
/// `p ← p − s(q + τp)`, `q ← q + s(p − τq)`.
#[inline]
fn rotate_rows(row_p: &mut [f64], row_q: &mut [f64], s: f64, tau: f64) {
    for (x, y) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = xp - s * (xq + tau * xp);
        *y = xq + s * (xp - tau * xq);
    }
}

/// Two disjoint rows of a flat row-major n×n matrix.
#[inline]
fn two_rows(a: &mut [f64], n: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = a.split_at_mut(q * n);
    (&mut head[p * n..p * n + n], &mut tail[..n])
}

/// Cyclic Jacobi on a symmetric matrix. Returns eigenvalues sorted
/// descending (ties broken by lower original position) and the matching
/// orthonormal eigenvectors as columns.
///
/// The working matrix keeps both triangles; a rotation combines rows p and
/// q (contiguous) and mirrors them into the columns. The eigenvector
/// accumulator is stored transposed so its updates are row operations too.
fn symmetric_eigen(a_in: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a_in.nrows();
    debug_assert_eq!(n, a_in.ncols());
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (a_in[[i, j]] + a_in[[j, i]]);
        }
    }
    // vt row j accumulates eigenvector j.
    let mut vt = vec![0.0f64; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }

    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1 && norm > 0.0 {
        let off_tol = 1e-14 * norm;
        // Skipping anything below this floor cannot keep the off-diagonal
        // norm above off_tol (n²/2 entries at the floor stay inside it).
        let skip_floor = off_tol / n as f64;
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off2 = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off2 += a[p * n + q] * a[p * n + q];
                }
            }
            if off2.sqrt() <= off_tol {
                break;
            }
            let mut rotated = false;
            for p in 0..(n - 1) {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= skip_floor {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    // Rotations this small cannot move the off-diagonal mass.
                    if apq.abs() <= f64::EPSILON * 1e-2 * (app.abs() + aqq.abs()) {
                        continue;
                    }
                    rotated = true;

                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta.abs() > 1e154 {
                        0.5 / theta
                    } else {
                        let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                        sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    let h = t * apq;

                    // Combine rows p and q, then mirror into the columns and
                    // patch the 2x2 pivot block from the closed forms.
                    {
                        let (row_p, row_q) = two_rows(&mut a, n, p, q);
                        rotate_rows(row_p, row_q, s, tau);
                    }
                    a[p * n + p] = app - h;
                    a[q * n + q] = aqq + h;
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    for k in 0..n {
                        if k == p || k == q {
                            continue;
                        }
                        a[k * n + p] = a[p * n + k];
                        a[k * n + q] = a[q * n + k];
                    }

                    let (vp, vq) = two_rows(&mut vt, n, p, q);
                    rotate_rows(vp, vq, s, tau);
                }
            }
            if !rotated {
                break;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (li, lj) = (a[i * n + i], a[j * n + j]);
        lj.partial_cmp(&li).unwrap().then(i.cmp(&j))
    });

    let mut lam = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        lam[dst] = a[src * n + src];
        for k in 0..n {
            vecs[[k, dst]] = vt[src * n + k];
        }
    }
    (lam, vecs)
}

// ── Cholesky and triangular solves ──────────────────────────────────────────

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky_lower(b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = b.nrows();
    let mut l = Array2::zeros((n, n));
    for j in 0..n {
        let mut d = b[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(DwdError::Numeric(
                "cholesky: matrix is not positive definite".into(),
            ));
        }
        let ljj = d.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut x = b[[i, j]];
            for k in 0..j {
                x -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = x / ljj;
        }
    }
    Ok(l)
}

/// Solve `L·X = B` for `X` (forward substitution over every column of B).
fn solve_lower(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = Array2::zeros((n, m));
    for col in 0..m {
        for i in 0..n {
            let mut acc = b[[i, col]];
            for k in 0..i {
                acc -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = acc / l[[i, i]];
        }
    }
    x
}

/// Solve `Lᵀ·x = y` (back substitution).
fn solve_lower_transpose(l: &Array2<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in (i + 1)..n {
            acc -= l[[k, i]] * x[k];
        }
        x[i] = acc / l[[i, i]];
    }
    x
}

// ── SVD ─────────────────────────────────────────────────────────────────────

/// Flip each column of `v` so its largest-magnitude entry (ties broken by
/// lowest index) is positive. Returns which columns were negated.
fn sign_fix_columns(v: &mut Array2<f64>) -> Vec<bool> {
    let (rows, cols) = v.dim();
    let mut flipped = vec![false; cols];
    for j in 0..cols {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..rows {
            let a = v[[i, j]].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if v[[best, j]] < 0.0 {
            flipped[j] = true;
            for i in 0..rows {
                v[[i, j]] = -v[[i, j]];
            }
        }
    }
    flipped
}

/// Modified Gram-Schmidt over the present columns, in index order. The
/// formed Gram-route factors are orthonormal only up to eps·(σ₀/σⱼ)²
/// cross-talk; this cleans them to machine precision. Columns that collapse
/// are demoted to missing.
fn orthonormalize_columns(mat: &mut Array2<f64>, present: &mut [bool]) {
    let (rows, cols) = mat.dim();
    for j in 0..cols {
        if !present[j] {
            continue;
        }
        for k in 0..j {
            if !present[k] {
                continue;
            }
            let mut dot = 0.0;
            for i in 0..rows {
                dot += mat[[i, k]] * mat[[i, j]];
            }
            for i in 0..rows {
                mat[[i, j]] -= dot * mat[[i, k]];
            }
        }
        let norm = l2_norm(mat.column(j));
        if norm >= 0.5 {
            for i in 0..rows {
                mat[[i, j]] /= norm;
            }
        } else {
            present[j] = false;
            for i in 0..rows {
                mat[[i, j]] = 0.0;
            }
        }
    }
}

/// Fill the columns marked missing with unit vectors orthonormal to every
/// other column, drawn deterministically from the canonical basis. Each
/// candidate basis vector is consumed at most once, so completion stays
/// linear in the matrix size.
fn complete_orthonormal(mat: &mut Array2<f64>, present: &mut [bool]) {
    let (rows, cols) = mat.dim();
    let mut next_candidate = 0usize;
    for j in 0..cols {
        if present[j] {
            continue;
        }
        while next_candidate < rows {
            let e = next_candidate;
            next_candidate += 1;
            let mut w = Array1::zeros(rows);
            w[e] = 1.0;
            for k in 0..cols {
                if !present[k] {
                    continue;
                }
                let coef = mat[[e, k]];
                for i in 0..rows {
                    w[i] -= coef * mat[[i, k]];
                }
            }
            let norm = l2_norm(w.view());
            if norm >= 0.5 {
                for i in 0..rows {
                    mat[[i, j]] = w[i] / norm;
                }
                present[j] = true;
                break;
            }
        }
        debug_assert!(present[j], "orthonormal completion exhausted the basis");
    }
}

fn svd_impl(m: ArrayView2<f64>, want_u: bool) -> Result<SvdResult> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(DwdError::Shape(format!(
            "svd: empty matrix ({rows}x{cols})"
        )));
    }
    ensure_finite(m, "svd")?;
    let r = rows.min(cols);

    if rows >= cols {
        let g = m.t().dot(&m);
        let (lam, mut v) = symmetric_eigen(g.view());
        let s = lam.mapv(|x| x.max(0.0).sqrt());
        sign_fix_columns(&mut v);
        let mut u = Array2::zeros((if want_u { rows } else { 0 }, if want_u { r } else { 0 }));
        if want_u {
            // Singular values below sqrt(eps)-scale are Gram noise; their
            // left directions come from basis completion instead.
            let tol = s[0] * 1e-7;
            let mut present = vec![false; r];
            for j in 0..r {
                if s[j] > tol {
                    let col = m.dot(&v.column(j));
                    for i in 0..rows {
                        u[[i, j]] = col[i] / s[j];
                    }
                    present[j] = true;
                }
            }
            orthonormalize_columns(&mut u, &mut present);
            complete_orthonormal(&mut u, &mut present);
        }
        Ok(SvdResult { u, s, v })
    } else {
        let g = m.dot(&m.t());
        let (lam, mut u) = symmetric_eigen(g.view());
        let s = lam.mapv(|x: f64| x.max(0.0).sqrt());
        let tol = s[0] * 1e-7;
        let mut v = Array2::zeros((cols, r));
        let mut present = vec![false; r];
        for j in 0..r {
            if s[j] > tol {
                let col = m.t().dot(&u.column(j));
                for i in 0..cols {
                    v[[i, j]] = col[i] / s[j];
                }
                present[j] = true;
            }
        }
        orthonormalize_columns(&mut v, &mut present);
        complete_orthonormal(&mut v, &mut present);
        let flipped = sign_fix_columns(&mut v);
        for (j, f) in flipped.iter().enumerate() {
            if *f {
                for i in 0..rows {
                    u[[i, j]] = -u[[i, j]];
                }
            }
        }
        Ok(SvdResult { u, s, v })
    }
}

/// Deterministic thin SVD. See [`SvdResult`] for conventions.
pub fn svd(m: ArrayView2<f64>) -> Result<SvdResult> {
    svd_impl(m, true)
}

/// Unit vector `v0` maximizing `‖Y·v‖₂` together with `σ₁ = ‖Y·v0‖₂`.
///
/// `v0` is exactly the first column of [`svd`]`(Y).v`.
pub fn leading_right_singular_vector(y: ArrayView2<f64>) -> Result<(Array1<f64>, f64)> {
    if all_zero(y) {
        return Err(DwdError::Degenerate(
            "leading_right_singular_vector: all-zero matrix".into(),
        ));
    }
    let f = svd_impl(y, false)?;
    let v0 = f.v.column(0).to_owned();
    let sigma = l2_norm(y.dot(&v0).view());
    Ok((v0, sigma))
}

/// Ridge used to regularize `YᵀY` in [`rank1_constrained_fit`] when the
/// caller has no better value: `1e-8 · trace(YᵀY)/n`.
pub fn default_ridge(y: ArrayView2<f64>) -> f64 {
    let n = y.ncols().max(1) as f64;
    1e-8 * y.iter().map(|x| x * x).sum::<f64>() / n
}

/// Core of the constrained rank-1 fit, parameterized by the two Gram
/// matrices `cross = YᵀT` and `gram = YᵀY` (callers with factored carriers
/// can form these cheaply). Solves the pencil, recovers `u`, `p` and the
/// residual against the full `t`, `y`.
pub(crate) fn rank1_fit_with_grams(
    t: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cross: Array2<f64>,
    mut gram: Array2<f64>,
    eps_reg: f64,
) -> Result<Rank1Fit> {
    let n = y.ncols();
    let a = cross.dot(&cross.t());
    for i in 0..n {
        gram[[i, i]] += eps_reg;
    }
    let l = cholesky_lower(gram.view()).map_err(|_| {
        DwdError::Numeric(
            "rank1_constrained_fit: regularized Gram matrix is not positive definite".into(),
        )
    })?;

    // cmat = L⁻¹·A·L⁻ᵀ, symmetrized against round-off.
    let w1 = solve_lower(&l, &a);
    let w2 = solve_lower(&l, &w1.t().to_owned());
    let mut cmat = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            cmat[[i, j]] = 0.5 * (w2[[i, j]] + w2[[j, i]]);
        }
    }

    let (_eigvals, eigvecs) = symmetric_eigen(cmat.view());
    let w0 = eigvecs.column(0).to_owned();
    let u = solve_lower_transpose(&l, w0.view());
    finish_fit(t, y, u)
}

/// Normalize and sign-fix the recovered direction, then derive `p` and the
/// residual. Shared tail of the general and factored fit paths.
fn finish_fit(t: ArrayView2<f64>, y: ArrayView2<f64>, mut u: Array1<f64>) -> Result<Rank1Fit> {
    let n = y.ncols();
    let un = l2_norm(u.view());
    if un <= 0.0 || !un.is_finite() {
        return Err(DwdError::Numeric(
            "rank1_constrained_fit: failed to recover a finite direction".into(),
        ));
    }
    u.mapv_inplace(|x| x / un);
    {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if u[best] < 0.0 {
            u.mapv_inplace(|x| -x);
        }
    }

    let yu = y.dot(&u);
    let d = yu.iter().map(|x| x * x).sum::<f64>();
    let p = if d > 0.0 {
        t.t().dot(&yu).mapv(|x| x / d)
    } else {
        Array1::zeros(n)
    };

    let mut obj2 = 0.0;
    for (i, row) in t.rows().into_iter().enumerate() {
        let scale = yu[i];
        match (row.as_slice(), p.as_slice()) {
            (Some(ts), Some(ps)) => {
                for (tv, pv) in ts.iter().zip(ps) {
                    let r = tv - scale * pv;
                    obj2 += r * r;
                }
            }
            _ => {
                for (tv, pv) in row.iter().zip(p.iter()) {
                    let r = tv - scale * pv;
                    obj2 += r * r;
                }
            }
        }
    }
    Ok(Rank1Fit {
        u,
        p,
        objective: obj2.sqrt(),
    })
}

/// Thin modified Gram-Schmidt QR of an n×k matrix (k ≤ n). Numerically
/// dependent columns yield a zero Q column and keep their projection
/// coefficients in R, so `F ≈ Q·R` still holds up to the dropped residual.
fn mgs_qr(f: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, k) = f.dim();
    let mut q = f.clone();
    let mut r = Array2::zeros((k, k));
    for j in 0..k {
        let col_norm_in = l2_norm(q.column(j));
        for i in 0..j {
            let mut dot = 0.0;
            for row in 0..n {
                dot += q[[row, i]] * q[[row, j]];
            }
            r[[i, j]] = dot;
            for row in 0..n {
                q[[row, j]] -= dot * q[[row, i]];
            }
        }
        let norm = l2_norm(q.column(j));
        if norm > 1e-13 * col_norm_in.max(1e-300) {
            r[[j, j]] = norm;
            for row in 0..n {
                q[[row, j]] /= norm;
            }
        } else {
            r[[j, j]] = 0.0;
            for row in 0..n {
                q[[row, j]] = 0.0;
            }
        }
    }
    (q, r)
}

/// Constrained rank-1 fit for a factored carrier `Y = X·W` (X: N×k,
/// W: k×n, k ≪ N). Solves the same pencil as [`rank1_constrained_fit`] but
/// works in the k-dimensional range of the whitened cross-Gram, so the
/// eigenproblem is k×k instead of n×n.
pub(crate) fn rank1_fit_factored(
    t: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    eps_reg: f64,
) -> Result<Rank1Fit> {
    let n = w.ncols();
    // B = Wᵀ(XᵀX)W + εI and its Cholesky factor.
    let xtx = x.t().dot(&x);
    let mut gram = w.t().dot(&xtx).dot(&w);
    for i in 0..n {
        gram[[i, i]] += eps_reg;
    }
    let l = cholesky_lower(gram.view()).map_err(|_| {
        DwdError::Numeric(
            "rank1_constrained_fit: regularized Gram matrix is not positive definite".into(),
        )
    })?;

    // Whitened cross matrix M = L⁻¹·Wᵀ·(XᵀT) = F·G; its leading left
    // singular direction is the whitened eigenvector. QR-reduce F so the
    // eigenproblem collapses to k×k.
    let g_small = x.t().dot(&t);
    let f0 = w.t().to_owned();
    let f = solve_lower(&l, &f0);
    let (q, r) = mgs_qr(&f);
    let s_mat = r.dot(&g_small);
    let h = s_mat.dot(&s_mat.t());
    let (_lam, hv) = symmetric_eigen(h.view());
    let w0 = q.dot(&hv.column(0));
    let u = solve_lower_transpose(&l, w0.view());
    finish_fit(t, y, u)
}

/// Minimize `‖T − (Y·u)·pᵀ‖_F` over unit `u` and free `p`.
///
/// `u` is the leading eigenvector of the symmetric-definite pencil
/// `(YᵀT·TᵀY)·u = λ·(YᵀY + ε·I)·u`, reduced by Cholesky to a standard
/// symmetric problem; `p = Tᵀ(Yu)/‖Yu‖²`. The sign convention applied to
/// `u` matches the SVD convention, keeping fits reproducible.
pub fn rank1_constrained_fit(
    t: ArrayView2<f64>,
    y: ArrayView2<f64>,
    eps_reg: f64,
) -> Result<Rank1Fit> {
    if t.dim() != y.dim() {
        return Err(DwdError::Shape(format!(
            "rank1_constrained_fit: target is {:?} but carrier is {:?}",
            t.dim(),
            y.dim()
        )));
    }
    ensure_finite(t, "rank1_constrained_fit target")?;
    ensure_finite(y, "rank1_constrained_fit carrier")?;
    if eps_reg < 0.0 || !eps_reg.is_finite() {
        return Err(DwdError::Input(format!(
            "rank1_constrained_fit: eps_reg must be finite and >= 0, got {eps_reg}"
        )));
    }
    if all_zero(y) {
        return Err(DwdError::Degenerate(
            "rank1_constrained_fit: all-zero carrier".into(),
        ));
    }
    let cross = y.t().dot(&t);
    let gram = y.t().dot(&y);
    rank1_fit_with_grams(t, y, cross, gram, eps_reg)
}
