//! Geometric discriminator over permutation-invariant skeleton descriptors,
//! its losses, and the pose-alignment term.

use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::{Error, Result};
use crate::graphcore::{laplacian, DiffSkeleton};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::rng::Rng;
use crate::spectral::eigh;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Upper end of the edge-length histogram: the unit-box diagonal.
pub const MAX_EDGE_LENGTH: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub mlp: Mlp,
    /// Eigenvalues in the descriptor.
    pub k: usize,
    /// Edge-length histogram bins.
    pub bins: usize,
    /// Sees only the eigenvalue part of the descriptor.
    pub spectrum_only: bool,
}

impl DiscriminatorParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, k: usize, bins: usize, hidden: &[usize], slope: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("discriminator needs at least one histogram bin".into()));
        }
        let mut widths = vec![descriptor_len(k, bins)];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            mlp: Mlp::new(store, rng, "discriminator", &widths, Activation::LeakyRelu(slope), Activation::Identity),
            k,
            bins,
            spectrum_only: false,
        })
    }

    /// Topology-only discriminator over the `K` smallest Laplacian eigenvalues.
    pub fn spectral(store: &mut ParamStore, rng: &mut Rng, k: usize, hidden: &[usize], slope: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("spectral discriminator needs K >= 1".into()));
        }
        let mut widths = vec![k];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            mlp: Mlp::new(store, rng, "topology_discriminator", &widths, Activation::LeakyRelu(slope), Activation::Identity),
            k,
            bins: 0,
            spectrum_only: true,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// `K` eigenvalues, 3 means, 6 covariance entries, `B` histogram bins.
pub fn descriptor_len(k: usize, bins: usize) -> usize {
    k + 9 + bins
}

/// `1 × (K + 9 + B)` row: the `K` smallest Laplacian eigenvalues (ascending,
/// zero-padded at the bottom), joint mean and covariance upper triangle, and
/// a soft edge-length histogram.
///
/// Histogram bins have Gaussian kernels of width one bin spacing centred on
/// the bin midpoints over `[0, √3]`; each pair `i < j` contributes weight
/// `A_ij`, and the total is divided by `N`.
pub fn skeleton_descriptor(tape: &mut Tape, skel: &DiffSkeleton, k: usize, bins: usize) -> Result<DiffValue> {
    let spectrum = spectrum_descriptor(tape, skel, k)?;
    let n = skel.len(tape);

    let ones = tape.constant(Matrix::from_element(1, n, 1.0 / n as f64));
    let mean = tape.matmul(ones, skel.joints)?;
    let mean_rows = tape.broadcast_rows(mean, n)?;
    let centered = tape.sub(skel.joints, mean_rows)?;
    let ct = tape.transpose(centered);
    let cov = tape.matmul(ct, centered)?;
    let cov = tape.scale(cov, 1.0 / n as f64);
    let flat = tape.reshape(cov, 9, 1)?;
    let upper = tape.gather_rows(flat, &[0, 1, 2, 4, 5, 8])?;
    let upper = tape.transpose(upper);

    let mut is = Vec::new();
    let mut js = Vec::new();
    let mut flat_idx = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            is.push(i);
            js.push(j);
            flat_idx.push(i * n + j);
        }
    }
    let pairs = is.len();
    let xi = tape.gather_rows(skel.joints, &is)?;
    let xj = tape.gather_rows(skel.joints, &js)?;
    let dx = tape.sub(xi, xj)?;
    let dist = tape.row_norms(dx);
    let spread = tape.constant(Matrix::from_element(1, bins, 1.0));
    let dist = tape.matmul(dist, spread)?;
    let width = MAX_EDGE_LENGTH / bins as f64;
    let centers = tape.constant(Matrix::from_fn(pairs, bins, |_, b| (b as f64 + 0.5) * width));
    let off = tape.sub(dist, centers)?;
    let sq = tape.square(off);
    let arg = tape.scale(sq, -0.5 / (width * width));
    let kernels = tape.exp(arg);
    let adj_flat = tape.reshape(skel.adjacency, n * n, 1)?;
    let weights = tape.gather_rows(adj_flat, &flat_idx)?;
    let wt = tape.transpose(weights);
    let hist = tape.matmul(wt, kernels)?;
    let hist = tape.scale(hist, 1.0 / n as f64);

    Ok(tape.concat_cols(&[spectrum, mean, upper, hist])?)
}

/// `1 × K` row of the smallest Laplacian eigenvalues, ascending, zero-padded
/// at the bottom.
pub fn spectrum_descriptor(tape: &mut Tape, skel: &DiffSkeleton, k: usize) -> Result<DiffValue> {
    let n = skel.len(tape);
    if n < 2 {
        return Err(Error::Parameter(format!("descriptor needs at least 2 nodes, got {n}")));
    }
    let lap = laplacian(tape, skel.adjacency)?;
    let (eig, _) = eigh(tape, lap)?;
    let spectrum = if n >= k {
        tape.slice(eig, (0, 0), (k, 1))?
    } else {
        let zeros = tape.constant(Matrix::zeros(k - n, 1));
        tape.concat_rows(&[zeros, eig])?
    };
    Ok(tape.transpose(spectrum))
}

/// Probability that `skel` is a ground-truth skeleton.
pub fn discriminate(tape: &mut Tape, p: &Bound, skel: &DiffSkeleton, params: &DiscriminatorParams) -> Result<DiffValue> {
    let d = if params.spectrum_only {
        spectrum_descriptor(tape, skel, params.k)?
    } else {
        skeleton_descriptor(tape, skel, params.k, params.bins)?
    };
    let logit = params.mlp.forward(tape, p, d)?;
    Ok(tape.sigmoid(logit))
}

fn clamped_log(tape: &mut Tape, prob: DiffValue) -> Result<DiffValue> {
    let c = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    Ok(tape.log(c)?)
}

/// Mean squared joint distance over matched `(pred, gt)` pairs.
pub fn pose_loss(tape: &mut Tape, pred_joints: DiffValue, gt_joints: &Matrix, pairs: &[(usize, usize)]) -> Result<DiffValue> {
    if pairs.is_empty() {
        return Err(Error::Parameter("pose loss needs at least one matched pair".into()));
    }
    let (pi, gi): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let pred = tape.gather_rows(pred_joints, &pi)?;
    let target = tape.constant(Matrix::from_fn(gi.len(), 3, |r, c| gt_joints[(gi[r], c)]));
    let diff = tape.sub(pred, target)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, 1.0 / pairs.len() as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct AdversarialLosses {
    /// `−log D(pred) + L_pose`.
    pub generator: DiffValue,
    /// `−(log D(gt) + log(1 − D(pred)))`.
    pub discriminator: DiffValue,
    pub pose: DiffValue,
}

/// Both adversarial objectives; `pairs` is the node matching from `pred` to `gt`.
pub fn adversarial_losses(
    tape: &mut Tape,
    p: &Bound,
    pred: &DiffSkeleton,
    gt: &DiffSkeleton,
    pairs: &[(usize, usize)],
    params: &DiscriminatorParams,
) -> Result<AdversarialLosses> {
    let d_pred = discriminate(tape, p, pred, params)?;
    let d_gt = discriminate(tape, p, gt, params)?;
    let log_pred = clamped_log(tape, d_pred)?;
    let fooled = tape.scale(log_pred, -1.0);
    let gt_joints = tape.value(gt.joints).clone();
    let pose = pose_loss(tape, pred.joints, &gt_joints, pairs)?;
    let generator = tape.add(fooled, pose)?;

    let log_gt = clamped_log(tape, d_gt)?;
    let one = tape.scalar_constant(1.0);
    let rest = tape.sub(one, d_pred)?;
    let log_rest = clamped_log(tape, rest)?;
    let both = tape.add(log_gt, log_rest)?;
    let discriminator = tape.scale(both, -1.0);
    Ok(AdversarialLosses { generator, discriminator, pose })
}
