//! Representation-similarity metrics (linear CKA, PWCCA) and the latent
//! structure analyses (PCA rotation, channel correlation matrices).
//! Symmetric eigenproblems go through nalgebra; the ALS-based CCA at the
//! bottom is an algorithmically independent cross-check of the SVD route.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Ridge added to covariances before inversion.
pub const CCA_EPS: f64 = 1e-10;

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.shape()[0], a.shape()[1], |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending
/// order with matching eigenvector columns.
pub fn sym_eig(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.shape()[0];
    assert_eq!(n, a.shape()[1], "sym_eig needs a square matrix");
    let eig = SymmetricEigen::new(to_na(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for row in 0..n {
            vecs[[row, col]] = eig.eigenvectors[(row, i)];
        }
    }
    (vals, vecs)
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    x - &mean.insert_axis(Axis(0))
}

fn frob(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear CKA on column-centered matrices:
/// `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`.
pub fn cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.shape()[0] != y.shape()[0] {
        return Err(Error::Shape(format!("cka: {} vs {} rows", x.shape()[0], y.shape()[0])));
    }
    if x.shape()[0] < 2 {
        return Err(Error::Eval("cka needs at least 2 samples".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = frob(&yc.t().dot(&xc)).powi(2);
    let den = frob(&xc.t().dot(&xc)) * frob(&yc.t().dot(&yc));
    if den == 0.0 {
        return Err(Error::Eval("cka undefined for constant inputs".into()));
    }
    Ok((cross / den).clamp(0.0, 1.0))
}

/// `A^{-1/2}` of a symmetric PSD matrix, flooring eigenvalues at `eps`.
/// The second return says whether any eigenvalue needed the floor.
fn inv_sqrt_psd(a: &Array2<f64>, eps: f64) -> (Array2<f64>, bool) {
    let (vals, vecs) = sym_eig(a);
    let mut clamped = false;
    let inv: Array1<f64> = vals
        .iter()
        .map(|&l| {
            if l < eps {
                clamped = true;
                1.0 / eps.sqrt()
            } else {
                1.0 / l.sqrt()
            }
        })
        .collect();
    let mut scaled = vecs.clone();
    for (mut col, g) in scaled.columns_mut().into_iter().zip(inv.iter()) {
        col.mapv_inplace(|v| v * g);
    }
    (scaled.dot(&vecs.t()), clamped)
}

pub struct PwccaReport {
    pub value: f64,
    pub correlations: Vec<f64>,
    pub warnings: Vec<String>,
}

/// PWCCA: canonical correlations via the whitened-SVD route, weighted by
/// how much of X's mass each canonical direction explains.
pub fn pwcca_detailed(x: &Array2<f64>, y: &Array2<f64>) -> Result<PwccaReport> {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let q = y.shape()[1];
    if y.shape()[0] != n {
        return Err(Error::Shape(format!("pwcca: {} vs {} rows", n, y.shape()[0])));
    }
    if n <= p.max(q) {
        return Err(Error::Eval(format!("pwcca needs n > max(p, q); got n={n}, p={p}, q={q}")));
    }
    let mut warnings = Vec::new();
    let xc = center_columns(x);
    let yc = center_columns(y);
    let denom = (n - 1) as f64;
    let mut sxx = xc.t().dot(&xc) / denom;
    let mut syy = yc.t().dot(&yc) / denom;
    for i in 0..p {
        sxx[[i, i]] += CCA_EPS;
    }
    for i in 0..q {
        syy[[i, i]] += CCA_EPS;
    }
    let sxy = xc.t().dot(&yc) / denom;

    let (isx, cx) = inv_sqrt_psd(&sxx, CCA_EPS);
    let (isy, cy) = inv_sqrt_psd(&syy, CCA_EPS);
    if cx || cy {
        warnings.push("degenerate covariance regularized".to_string());
    }

    let m = isx.dot(&sxy).dot(&isy);
    let k = p.min(q);
    let (lams, u) = sym_eig(&m.dot(&m.t()));
    let rhos: Vec<f64> = lams.iter().take(k).map(|&l| l.max(0.0).sqrt().min(1.0)).collect();

    // Canonical variates in data space, used for the projection weights.
    let dirs = isx.dot(&u.slice(ndarray::s![.., ..k]));
    let h = xc.dot(&dirs);
    let mut alphas = vec![0.0; k];
    for i in 0..k {
        let hi = h.column(i);
        for j in 0..p {
            alphas[i] += hi.dot(&xc.column(j)).abs();
        }
    }
    let total: f64 = alphas.iter().sum();
    if total == 0.0 {
        return Err(Error::Eval("pwcca undefined for constant inputs".into()));
    }
    let value = alphas.iter().zip(&rhos).map(|(a, r)| a / total * r).sum::<f64>().clamp(0.0, 1.0);
    Ok(PwccaReport { value, correlations: rhos, warnings })
}

pub fn pwcca(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    Ok(pwcca_detailed(x, y)?.value)
}

/// Canonical correlations from the whitened-SVD route, descending.
pub fn canonical_correlations(x: &Array2<f64>, y: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(pwcca_detailed(x, y)?.correlations)
}

fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    to_na(a)
        .try_inverse()
        .map(|m| from_na(&m))
        .ok_or_else(|| Error::Eval("singular matrix in reference CCA".into()))
}

/// Brute-force CCA by alternating least squares: power iteration on the
/// composed operator, with successive directions kept orthogonal to the
/// found ones in the covariance metric. Deliberately shares no machinery
/// with the SVD route; used as an oracle.
pub fn cca_correlations_reference(x: &Array2<f64>, y: &Array2<f64>) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    if y.shape()[0] != n || n < 3 {
        return Err(Error::Shape("reference CCA: bad shapes".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let (p, q) = (xc.shape()[1], yc.shape()[1]);
    let k = p.min(q);
    let denom = (n - 1) as f64;
    let mut sxx = xc.t().dot(&xc) / denom;
    let mut syy = yc.t().dot(&yc) / denom;
    for i in 0..p {
        sxx[[i, i]] += CCA_EPS;
    }
    for i in 0..q {
        syy[[i, i]] += CCA_EPS;
    }
    let sxy = xc.t().dot(&yc) / denom;
    let ixx = inverse(&sxx)?;
    let iyy = inverse(&syy)?;

    // Removes the span of the found directions, measured in the metric `s`
    // (directions are s-orthonormal), then renormalizes.
    let orthonormalize = |v: &mut Array1<f64>, found: &[Array1<f64>], s: &Array2<f64>| -> bool {
        for f in found {
            let c = v.dot(&s.dot(f));
            *v -= &(f * c);
        }
        let norm = v.dot(&s.dot(&*v)).sqrt();
        if norm < 1e-154 {
            return false;
        }
        *v /= norm;
        true
    };

    let mut a_found: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut b_found: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut rhos = Vec::with_capacity(k);
    for comp in 0..k {
        let mut b = Array1::from_shape_fn(q, |i| if i == comp % q { 1.0 } else { 0.1 });
        if !orthonormalize(&mut b, &b_found, &syy) {
            b = Array1::from_shape_fn(q, |i| 1.0 / (i + comp + 1) as f64);
            orthonormalize(&mut b, &b_found, &syy);
        }
        let mut a = Array1::zeros(p);
        let mut rho_prev = -1.0;
        let mut rho = 0.0;
        for _it in 0..50_000 {
            a = ixx.dot(&sxy.dot(&b));
            if !orthonormalize(&mut a, &a_found, &sxx) {
                break;
            }
            let mut bn: Array1<f64> = iyy.dot(&sxy.t().dot(&a));
            if !orthonormalize(&mut bn, &b_found, &syy) {
                break;
            }
            rho = a.dot(&sxy.dot(&bn)).abs();
            b = bn;
            if (rho - rho_prev).abs() < 1e-15 {
                break;
            }
            rho_prev = rho;
        }
        rhos.push(rho.clamp(0.0, 1.0));
        a_found.push(a);
        b_found.push(b);
    }
    Ok(rhos)
}

pub struct PcaRotation {
    /// Orthonormal components as columns, ordered by variance.
    pub components: Array2<f64>,
    /// Population variances (1/n), descending.
    pub variances: Array1<f64>,
    pub warnings: Vec<String>,
}

pub fn pca_rotation(samples: &Array2<f64>) -> Result<PcaRotation> {
    let (n, c) = (samples.shape()[0], samples.shape()[1]);
    if n < 2 || c == 0 {
        return Err(Error::Eval(format!("pca needs >= 2 samples, got {n} x {c}")));
    }
    let mut warnings = Vec::new();
    if n < c {
        warnings.push(format!("{n} samples for {c} channels; components beyond rank are noise"));
    }
    let xc = center_columns(samples);
    let cov = xc.t().dot(&xc) / n as f64;
    let (vals, mut vecs) = sym_eig(&cov);
    let variances = vals.mapv(|v| v.max(0.0));
    let vmax = variances[0].max(1e-300);
    let low_rank = variances.iter().filter(|&&v| v < 1e-12 * vmax).count();
    if low_rank > 0 {
        warnings.push(format!("{low_rank} near-zero-variance components kept"));
    }
    // Deterministic sign: the largest-magnitude entry of each component is
    // made positive.
    for mut col in vecs.columns_mut() {
        let lead = col
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if col[lead] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(PcaRotation { components: vecs, variances, warnings })
}

/// Pearson correlation between channels. Zero-variance channels correlate
/// as 0 against everything (diagonal stays 1) with a warning.
pub fn correlation_matrix(samples: &Array2<f64>) -> Result<(Array2<f64>, Vec<String>)> {
    let (n, c) = (samples.shape()[0], samples.shape()[1]);
    if n < 2 {
        return Err(Error::Eval("correlation needs >= 2 samples".into()));
    }
    let mut warnings = Vec::new();
    let xc = center_columns(samples);
    let stds: Vec<f64> = (0..c)
        .map(|j| (xc.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt())
        .collect();
    let dead: Vec<usize> = (0..c).filter(|&j| stds[j] == 0.0).collect();
    if !dead.is_empty() {
        warnings.push(format!("zero-variance channels {dead:?} correlate as 0"));
    }
    let mut r = Array2::eye(c);
    for i in 0..c {
        for j in (i + 1)..c {
            let val = if stds[i] == 0.0 || stds[j] == 0.0 {
                0.0
            } else {
                let cov = xc.column(i).dot(&xc.column(j)) / n as f64;
                (cov / (stds[i] * stds[j])).clamp(-1.0, 1.0)
            };
            r[[i, j]] = val;
            r[[j, i]] = val;
        }
    }
    Ok((r, warnings))
}

/// The Fig. 3 summary statistic.
pub fn mean_abs_offdiag(r: &Array2<f64>) -> f64 {
    let c = r.shape()[0];
    if c < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                total += r[[i, j]].abs();
            }
        }
    }
    total / (c * (c - 1)) as f64
}
