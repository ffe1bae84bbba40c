//! Learned soft adjacency: `A_ij = σ(MLP_edge([f_i; f_j; ‖x_i − x_j‖₂]))`.

use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::rng::Rng;

/// Edge MLP mapping a `2F + 1` pair descriptor to one logit.
#[derive(Debug, Clone)]
pub struct EdgeMlpParams {
    pub mlp: Mlp,
    pub feature_dim: usize,
}

impl EdgeMlpParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        feature_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Self {
        let mut widths = vec![2 * feature_dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            mlp: Mlp::new(store, rng, "edge_mlp", &widths, activation, Activation::Identity),
            feature_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Ordered pairs `(i, j)`, `i ≠ j`, row-major.
fn ordered_pairs(n: usize) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
    let mut is = Vec::with_capacity(n * (n - 1));
    let mut js = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                is.push(i);
                js.push(j);
            }
        }
    }
    let pos = is.iter().copied().zip(js.iter().copied()).collect();
    (is, js, pos)
}

/// Soft adjacency `N × N`, symmetrized as `(A + Aᵀ)/2` with a zero diagonal.
pub fn build_adjacency(
    tape: &mut Tape,
    p: &Bound,
    features: DiffValue,
    joints: DiffValue,
    params: &EdgeMlpParams,
) -> Result<DiffValue> {
    let (n, f) = tape.shape(features);
    if f != params.feature_dim || params.mlp.in_dim() != 2 * f + 1 {
        return Err(Error::Config(format!(
            "edge MLP expects feature width {} (input {}), got {f}",
            params.feature_dim,
            params.mlp.in_dim()
        )));
    }
    if n < 2 {
        return Err(Error::Parameter(format!("adjacency needs at least 2 nodes, got {n}")));
    }
    if tape.shape(joints) != (n, 3) {
        return Err(Error::Config(format!("joints shape {:?} for {n} nodes", tape.shape(joints))));
    }
    let (is, js, pos) = ordered_pairs(n);
    let fi = tape.gather_rows(features, &is)?;
    let fj = tape.gather_rows(features, &js)?;
    let xi = tape.gather_rows(joints, &is)?;
    let xj = tape.gather_rows(joints, &js)?;
    let dx = tape.sub(xi, xj)?;
    let dist = tape.row_norms(dx);
    let desc = tape.concat_cols(&[fi, fj, dist])?;
    let logits = params.mlp.forward(tape, p, desc)?;
    let probs = tape.sigmoid(logits);
    let directed = tape.scatter(probs, &pos, n, n)?;
    let t = tape.transpose(directed);
    let sum = tape.add(directed, t)?;
    Ok(tape.scale(sum, 0.5))
}

/// Undirected pairs `(i, j)`, `i < j`, with `A_ij > threshold`, sorted.
pub fn extract_hard_edges(adjacency: &Matrix, threshold: f64) -> Vec<(usize, usize)> {
    let n = adjacency.nrows();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency[(i, j)] > threshold {
                out.push((i, j));
            }
        }
    }
    out
}
