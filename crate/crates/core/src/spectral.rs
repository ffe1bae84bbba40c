//! Differentiable symmetric eigendecomposition and the Laplacian spectral loss.
//!
//! The forward decomposition is a dense symmetric solver (Householder
//! tridiagonalization + implicit QR). Only eigenvalues carry gradients: for a
//! simple eigenvalue `∂λ_k/∂L = u_k u_kᵀ`. Inside a cluster of eigenvalues
//! closer than [`DEGENERACY_TOL`] the individual eigenvectors are not unique,
//! so every member of the cluster receives the cluster average
//! `(1/m) Σ u uᵀ`, which is the exact gradient of the cluster mean.

use std::sync::Arc;

use nalgebra::SymmetricEigen;

use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::{Error, Result};

/// Eigenvalue gap below which neighbours are treated as one cluster.
pub const DEGENERACY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns matching `eigenvalues`.
    pub eigenvectors: Matrix,
    pub degeneracy_flags: Vec<bool>,
}

impl EigenResult {
    /// Index ranges of eigenvalue clusters (singletons for simple eigenvalues).
    pub fn clusters(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.eigenvalues.len();
        let mut out = Vec::new();
        let mut start = 0;
        for k in 1..=n {
            if k == n || self.eigenvalues[k] - self.eigenvalues[k - 1] >= DEGENERACY_TOL {
                out.push(start..k);
                start = k;
            }
        }
        out
    }

    /// `∂λ_k/∂L` under the cluster-averaging rule.
    pub fn eigenvalue_gradient(&self, k: usize) -> Matrix {
        let cluster = self
            .clusters()
            .into_iter()
            .find(|r| r.contains(&k))
            .expect("k within spectrum");
        cluster_projector(&self.eigenvectors, cluster)
    }
}

fn cluster_projector(u: &Matrix, cluster: std::ops::Range<usize>) -> Matrix {
    let n = u.nrows();
    let m = cluster.len() as f64;
    let mut p = Matrix::zeros(n, n);
    for k in cluster {
        let col = u.column(k);
        p += col * col.transpose();
    }
    p / m
}

fn symmetry_check(l: &Matrix) -> Result<()> {
    if l.nrows() != l.ncols() {
        return Err(Error::Invariant(format!("eigh needs a square matrix, got {:?}", l.shape())));
    }
    let asym = (l - l.transpose()).norm();
    let tol = 1e-9 * l.norm().max(1.0);
    if asym > tol {
        return Err(Error::Invariant(format!(
            "matrix not symmetric: |L - L^T|_F = {asym:e} exceeds {tol:e}"
        )));
    }
    Ok(())
}

/// Full symmetric eigendecomposition with ascending eigenvalues.
pub fn eigh_matrix(l: &Matrix) -> Result<EigenResult> {
    symmetry_check(l)?;
    let n = l.nrows();
    if n == 0 {
        return Ok(EigenResult {
            eigenvalues: Vec::new(),
            eigenvectors: Matrix::zeros(0, 0),
            degeneracy_flags: Vec::new(),
        });
    }
    let sym = (l + l.transpose()) * 0.5;
    let norm = sym.norm();
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical(format!("symmetric eigensolver did not converge (n = {n}, |L|_F = {norm:e})"))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    if eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite eigenvalue (|L|_F = {norm:e})")));
    }
    let mut result = EigenResult {
        eigenvalues,
        eigenvectors,
        degeneracy_flags: vec![false; n],
    };
    for c in result.clusters() {
        if c.len() > 1 {
            for k in c {
                result.degeneracy_flags[k] = true;
            }
        }
    }
    Ok(result)
}

/// Eigendecomposition on the tape. Returns the eigenvalues as an `N × 1`
/// differentiable node together with the full decomposition.
pub fn eigh(tape: &mut Tape, l: DiffValue) -> Result<(DiffValue, EigenResult)> {
    let result = eigh_matrix(tape.value(l))?;
    let n = result.eigenvalues.len();
    let projectors: Arc<Vec<(std::ops::Range<usize>, Matrix)>> = Arc::new(
        result
            .clusters()
            .into_iter()
            .map(|c| {
                let p = cluster_projector(&result.eigenvectors, c.clone());
                (c, p)
            })
            .collect(),
    );
    let value = Matrix::from_column_slice(n, 1, &result.eigenvalues);
    let node = tape.custom(
        &[l],
        value,
        Box::new(move |g: &Matrix| {
            let mut out = Matrix::zeros(n, n);
            for (cluster, p) in projectors.iter() {
                let w: f64 = cluster.clone().map(|k| g[(k, 0)]).sum();
                if w != 0.0 {
                    out += p * w;
                }
            }
            vec![out]
        }),
    );
    Ok((node, result))
}

/// The `k` smallest entries after prepending zeros up to length `len`.
fn padded_prefix(spectrum: &[f64], len: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; len.saturating_sub(spectrum.len())];
    out.extend_from_slice(spectrum);
    out.truncate(k);
    out
}

/// Ascending spectrum zero-padded at the bottom to `len`, then cut to `k`.
pub fn padded_spectrum(l: &Matrix, len: usize, k: usize) -> Result<Vec<f64>> {
    Ok(padded_prefix(&eigh_matrix(l)?.eigenvalues, len, k))
}

/// `Σ_{k<K} (λ_k(L_pred) − λ_k(L_gt))² + α·tr(L_predᵀ L_gt)`.
///
/// Spectra are compared after ascending sort; the shorter one is zero-padded
/// at the bottom. `k = None` uses `min(N_pred, N_gt)`. The trace term needs
/// the two Laplacians on the same node indexing, so differing sizes are only
/// accepted with `alpha == 0`; see [`spectral_loss_aligned`] otherwise.
pub fn spectral_loss(
    tape: &mut Tape,
    l_pred: DiffValue,
    l_gt: &Matrix,
    k: Option<usize>,
    alpha: f64,
) -> Result<DiffValue> {
    let gt_spectrum = eigh_matrix(l_gt)?.eigenvalues;
    let aligned = if l_gt.shape() == tape.shape(l_pred) {
        Some(l_gt)
    } else if alpha == 0.0 {
        None
    } else {
        return Err(Error::Parameter(format!(
            "trace term needs equal shapes, got {:?} and {:?}",
            tape.shape(l_pred),
            l_gt.shape()
        )));
    };
    spectral_loss_aligned(tape, l_pred, &gt_spectrum, aligned, k, alpha)
}

/// Spectral loss from a precomputed ascending ground-truth spectrum and a
/// ground-truth Laplacian re-indexed onto the predicted nodes (used only by
/// the trace term).
pub fn spectral_loss_aligned(
    tape: &mut Tape,
    l_pred: DiffValue,
    gt_spectrum: &[f64],
    l_gt_aligned: Option<&Matrix>,
    k: Option<usize>,
    alpha: f64,
) -> Result<DiffValue> {
    let n_pred = tape.shape(l_pred).0;
    let n_gt = gt_spectrum.len();
    let len = n_pred.max(n_gt);
    let k = k.unwrap_or(n_pred.min(n_gt));
    if k > len {
        return Err(Error::Parameter(format!(
            "K = {k} exceeds both spectrum sizes ({n_pred}, {n_gt})"
        )));
    }
    let (eig, _) = eigh(tape, l_pred)?;
    let padded = if n_pred < len {
        let zeros = tape.constant(Matrix::zeros(len - n_pred, 1));
        tape.concat_rows(&[zeros, eig])?
    } else {
        eig
    };
    let pred_k = tape.slice(padded, (0, 0), (k, 1))?;
    let target = tape.constant(Matrix::from_column_slice(k, 1, &padded_prefix(gt_spectrum, len, k)));
    let diff = tape.sub(pred_k, target)?;
    let mut loss = tape.frobenius_sq(diff);
    if alpha != 0.0 {
        let gt = l_gt_aligned.ok_or_else(|| Error::Parameter("trace term needs an aligned ground-truth Laplacian".into()))?;
        if gt.shape() != (n_pred, n_pred) {
            return Err(Error::Parameter(format!(
                "aligned ground truth is {:?}, expected {n_pred}x{n_pred}",
                gt.shape()
            )));
        }
        let gt = tape.constant(gt.clone());
        let prod = tape.mul(l_pred, gt)?;
        let tr = tape.sum(prod);
        let term = tape.scale(tr, alpha);
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Shannon entropy of the trace-normalized Laplacian spectrum; 0 when the
/// trace vanishes.
pub fn structural_entropy(l: &Matrix) -> Result<f64> {
    let spectrum = eigh_matrix(l)?.eigenvalues;
    Ok(entropy_of_spectrum(&spectrum))
}

pub fn entropy_of_spectrum(spectrum: &[f64]) -> f64 {
    // Tiny negative eigenvalues of a PSD matrix are rounding noise.
    let clean: Vec<f64> = spectrum.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clean.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -clean
        .iter()
        .map(|&x| x / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}
