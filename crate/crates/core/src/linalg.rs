//! Left eigenvectors of real matrices.
//!
//! Eigenvalues come from nalgebra's real Schur form. Left eigenvectors are
//! right eigenvectors of the transpose: null vectors of `Aᵀ - λI` by complex
//! SVD for small matrices, inverse iteration for the larger EDMD matrices.

use std::cmp::Ordering;

use nalgebra::{linalg::Schur, Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

const CLUSTER_TOL: f64 = 1e-6;
const DEFECT_COND: f64 = 1e12;

/// Sort order shared by every eigen-listing: real part descending, then imaginary part descending.
pub(crate) fn eig_order(a: &C64, b: &C64) -> Ordering {
    b.re.partial_cmp(&a.re)
        .unwrap_or(Ordering::Equal)
        .then(b.im.partial_cmp(&a.im).unwrap_or(Ordering::Equal))
}

/// Householder reflector `I − 2vvᵀ/‖v‖²` for a fixed pseudo-random `v`.
fn reflector(n: usize, attempt: usize) -> DMatrix<f64> {
    let v = DVector::from_fn(n, |i, _| ((i + 1) as f64 * (0.7 + attempt as f64)).sin() + 0.1);
    DMatrix::identity(n, n) - &v * v.transpose() * (2.0 / v.norm_squared())
}

/// Real Schur eigenvalues with an iteration cap.
///
/// The QR iteration has no exceptional shifts and can cycle on matrices with
/// tightly clustered eigenvalues (e.g. an EDMD matrix close to the identity).
/// Failed attempts are retried on `Q(A − cI)Qᵀ` with `c = tr(A)/n` and a
/// reflector `Q`, then with a tiny perturbation.
fn schur_eigenvalues(a: &DMatrix<f64>) -> Vec<C64> {
    let n = a.nrows();
    let max_iter = 200 * n.max(1);
    if let Some(s) = Schur::try_new(a.clone(), f64::EPSILON, max_iter) {
        return s.complex_eigenvalues().iter().copied().collect();
    }
    let c = a.trace() / n as f64;
    let shifted = a - DMatrix::identity(n, n) * c;
    let scale = shifted.norm().max(f64::MIN_POSITIVE);
    for attempt in 0..24 {
        let q = reflector(n, attempt);
        let mut m = &q * &shifted * &q;
        if attempt >= 8 {
            let eps = scale * 1e-15 * 2f64.powi(attempt as i32 - 8);
            m += DMatrix::from_fn(n, n, |i, j| eps * (((i * 31 + j * 17 + attempt) % 13) as f64 / 6.0 - 1.0));
        }
        if let Some(s) = Schur::try_new(m, f64::EPSILON, max_iter) {
            return s.complex_eigenvalues().iter().map(|l| l + c).collect();
        }
    }
    panic!("Schur iteration failed to converge on a {n}x{n} matrix");
}

/// Eigenvalues of a real square matrix, conjugate pairs cleaned up and sorted.
pub(crate) fn eigenvalues(a: &DMatrix<f64>) -> Vec<C64> {
    let scale = a.norm().max(1e-300);
    let mut ev: Vec<C64> = schur_eigenvalues(a);
    for l in ev.iter_mut() {
        if l.im.abs() <= 1e-13 * scale {
            l.im = 0.0;
        }
    }
    ev.sort_by(eig_order);
    ev
}

/// Unit norm, first significant component real and positive.
pub(crate) fn canonicalize(v: &mut DVector<C64>) {
    let n = v.norm();
    if n == 0.0 {
        return;
    }
    *v /= C64::new(n, 0.0);
    if let Some(lead) = v.iter().copied().find(|c| c.norm() > 1e-8) {
        let phase = lead / lead.norm();
        *v /= phase;
        // Exact zero imaginary part on the leading component.
        if let Some(c) = v.iter_mut().find(|c| c.norm() > 1e-8) {
            c.im = 0.0;
        }
    }
}

fn complex_transpose(a: &DMatrix<f64>) -> DMatrix<C64> {
    a.transpose().map(|v| C64::new(v, 0.0))
}

/// Left eigenpairs `wᵀA = λwᵀ` of a small real matrix, with multiplicity.
///
/// Numerically coincident eigenvalues are grouped and must have a full
/// eigenspace; otherwise `DefectiveMatrix`.
pub(crate) fn left_eigen_strict(a: &DMatrix<f64>) -> Result<Vec<(C64, DVector<C64>)>> {
    let n = a.nrows();
    let ev = eigenvalues(a);
    let at = complex_transpose(a);
    let scale = a.norm().max(1.0);

    // Group clustered eigenvalues.
    let mut groups: Vec<Vec<C64>> = Vec::new();
    for l in ev {
        match groups
            .iter_mut()
            .find(|g| (g[0] - l).norm() <= CLUSTER_TOL * (1.0 + l.norm()))
        {
            Some(g) => g.push(l),
            None => groups.push(vec![l]),
        }
    }

    let mut out: Vec<(C64, DVector<C64>)> = Vec::with_capacity(n);
    for g in &groups {
        let k = g.len();
        let mean = g.iter().sum::<C64>() / k as f64;
        // Reuse the conjugate group's vectors so closure under conjugation is exact.
        if mean.im < 0.0 {
            if let Some(pos) = out
                .iter()
                .position(|(l, _)| (l.conj() - mean).norm() <= CLUSTER_TOL * (1.0 + mean.norm()))
            {
                let partner: Vec<_> = out[pos..pos + k].iter().map(|(l, v)| (l.conj(), v.map(|c| c.conj()))).collect();
                out.extend(partner);
                continue;
            }
        }
        let m = &at - DMatrix::<C64>::identity(n, n) * mean;
        let svd = m.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let sv = &svd.singular_values;
        let kth_smallest = sv[n - k];
        if kth_smallest > 1e-6 * scale {
            let condition = if sv[n - 1] > 0.0 { sv[0] / sv[n - 1] } else { f64::INFINITY };
            return Err(Error::DefectiveMatrix { condition: condition.max(DEFECT_COND * 10.0) });
        }
        for (j, l) in g.iter().enumerate() {
            let row = v_t.row(n - 1 - j);
            let mut v = DVector::from_iterator(n, row.iter().map(|c| c.conj()));
            canonicalize(&mut v);
            out.push((*l, v));
        }
    }

    out.sort_by(|x, y| eig_order(&x.0, &y.0));
    let w = DMatrix::from_columns(&out.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>());
    let sv = w.singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= DEFECT_COND) {
        return Err(Error::DefectiveMatrix { condition });
    }
    Ok(out)
}

/// Left eigenpairs of a (possibly large, possibly defective) real matrix by
/// shifted inverse iteration. Never fails; defective eigenvalues simply get a
/// vector from the dominant direction of the shifted inverse.
pub(crate) fn left_eigen_loose(a: &DMatrix<f64>) -> Vec<(C64, DVector<C64>)> {
    let n = a.nrows();
    let ev = eigenvalues(a);
    let at = complex_transpose(a);
    let scale = a.norm().max(1e-300);
    let mut out: Vec<(C64, DVector<C64>)> = Vec::with_capacity(n);
    for (idx, &l) in ev.iter().enumerate() {
        if l.im < 0.0 {
            if let Some((pl, pv)) = out.iter().rev().find(|(p, _)| (p.conj() - l).norm() <= 1e-12 * scale) {
                let pair = (pl.conj(), pv.map(|c| c.conj()));
                out.push(pair);
                continue;
            }
        }
        let shift = l + C64::new(1e-10 * scale, 1e-11 * scale);
        let lu = (&at - DMatrix::<C64>::identity(n, n) * shift).lu();
        let mut v = DVector::from_fn(n, |i, _| C64::new(1.0 + 0.01 * ((i * 7 + idx * 3) % 11) as f64, 0.0));
        v /= C64::new(v.norm(), 0.0);
        for _ in 0..4 {
            match lu.solve(&v) {
                Some(next) if next.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                    let nn = next.norm();
                    if nn == 0.0 {
                        break;
                    }
                    v = next / C64::new(nn, 0.0);
                }
                _ => break,
            }
        }
        canonicalize(&mut v);
        out.push((l, v));
    }
    out
}

/// `‖wᵀA - λwᵀ‖`.
pub(crate) fn left_residual(a: &DMatrix<f64>, lambda: C64, w: &DVector<C64>) -> f64 {
    let ac = a.map(|v| C64::new(v, 0.0));
    let lhs = w.transpose() * ac;
    (lhs - w.transpose() * lambda).norm()
}
