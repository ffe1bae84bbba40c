//! Multi-level graph attention over the learned adjacency.
//!
//! One layer computes
//!
//! ```text
//! e_ij   = LeakyReLU(aᵀ [W f_i ‖ W f_j])        for j in N(i)
//! α_ij   = softmax_j(e_ij)
//! f_i'   = φ(Σ_j α_ij W f_j) ⊕ f_i
//! ```
//!
//! where `⊕` is a residual sum (through a learned projection when the widths
//! differ) or, with gating enabled, `g·φ(..) + (1 − g)·f_i` with a learned
//! scalar gate `g ∈ (0, 1)`. Neighbourhoods for successive levels come from
//! thresholding the soft adjacency at increasing confidence, so the levels
//! run coarse to fine.

use crate::diffcore::{DiffValue, Matrix, Tape, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graphcore::DiffSkeleton;
use crate::nn::{Activation, Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GatLayerParams {
    /// `F_in × F_out` projection (row-vector convention, `h = f·W`).
    pub weight: ParamId,
    /// `2·F_out × 1` attention vector.
    pub attention: ParamId,
    /// Present when `F_in ≠ F_out`.
    pub residual: Option<ParamId>,
    /// Pre-sigmoid gate logit, present when gating is enabled.
    pub gate: Option<ParamId>,
    pub level: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub slope: f64,
    pub phi: Activation,
}

impl GatLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        level: usize,
        in_dim: usize,
        out_dim: usize,
        gated: bool,
    ) -> Self {
        let name = format!("gat.{level}");
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Matrix::from_fn(in_dim, out_dim, |_, _| rng.range(-bound, bound));
        let abound = (6.0 / (2 * out_dim + 1) as f64).sqrt();
        let a = Matrix::from_fn(2 * out_dim, 1, |_, _| rng.range(-abound, abound));
        let weight = store.add(format!("{name}.weight"), w);
        let attention = store.add(format!("{name}.attention"), a);
        let residual = (in_dim != out_dim).then(|| {
            let r = Matrix::from_fn(in_dim, out_dim, |_, _| rng.range(-bound, bound));
            store.add(format!("{name}.residual"), r)
        });
        let gate = gated.then(|| store.add(format!("{name}.gate"), Matrix::zeros(1, 1)));
        Self {
            weight,
            attention,
            residual,
            gate,
            level,
            in_dim,
            out_dim,
            slope: DEFAULT_LEAKY_SLOPE,
            phi: Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight, self.attention];
        v.extend(self.residual);
        v.extend(self.gate);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    pub features: DiffValue,
    /// `N × N` row-stochastic attention matrix.
    pub attention: DiffValue,
}

pub fn gat_layer(
    tape: &mut Tape,
    p: &Bound,
    features: DiffValue,
    neighborhood: &[Vec<bool>],
    params: &GatLayerParams,
    self_loops: bool,
) -> Result<GatOutput> {
    let (n, f_in) = tape.shape(features);
    if f_in != params.in_dim {
        return Err(Error::Config(format!(
            "attention level {} expects width {}, got {f_in}",
            params.level, params.in_dim
        )));
    }
    if neighborhood.len() != n || neighborhood.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("neighbourhood is not {n} x {n}")));
    }
    let mut mask = neighborhood.to_vec();
    if self_loops {
        for (i, row) in mask.iter_mut().enumerate() {
            row[i] = true;
        }
    }
    let fo = params.out_dim;
    let h = tape.matmul(features, p.var(params.weight))?;
    let a_src = tape.slice(p.var(params.attention), (0, 0), (fo, 1))?;
    let a_dst = tape.slice(p.var(params.attention), (fo, 0), (fo, 1))?;
    let s_src = tape.matmul(h, a_src)?;
    let s_dst = tape.matmul(h, a_dst)?;
    let ones_row = tape.constant(Matrix::from_element(1, n, 1.0));
    let ones_col = tape.constant(Matrix::from_element(n, 1, 1.0));
    let e_src = tape.matmul(s_src, ones_row)?;
    let s_dst_t = tape.transpose(s_dst);
    let e_dst = tape.matmul(ones_col, s_dst_t)?;
    let scores = tape.add(e_src, e_dst)?;
    let scores = tape.leaky_relu(scores, params.slope);
    let attention = tape.rowsoftmax_masked(scores, &mask)?;
    let agg = tape.matmul(attention, h)?;
    let msg = params.phi.apply(tape, agg);
    let skip = match params.residual {
        Some(r) => tape.matmul(features, p.var(r))?,
        None => features,
    };
    let out = match params.gate {
        Some(g) => {
            let gate = tape.sigmoid(p.var(g));
            let gated_msg = tape.mul_scalar(msg, gate)?;
            let gated_skip = tape.mul_scalar(skip, gate)?;
            let keep = tape.sub(skip, gated_skip)?;
            tape.add(gated_msg, keep)?
        }
        None => tape.add(msg, skip)?,
    };
    Ok(GatOutput {
        features: out,
        attention,
    })
}

/// Attention levels plus the linear head turning refined features into
/// joint offsets.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub levels: Vec<GatLayerParams>,
    /// One adjacency threshold per level.
    pub thresholds: Vec<f64>,
    pub offset_head: Linear,
    pub self_loops: bool,
}

impl Refiner {
    /// Offset head starts at zero so refinement is initially the identity.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        feature_dim: usize,
        thresholds: &[f64],
        gated: bool,
    ) -> Self {
        let levels = (0..thresholds.len())
            .map(|l| GatLayerParams::new(store, rng, l, feature_dim, feature_dim, gated))
            .collect();
        Self {
            levels,
            thresholds: thresholds.to_vec(),
            offset_head: Linear::zeros(store, "offset_head", feature_dim, 3),
            self_loops: true,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.levels.iter().flat_map(|l| l.params()).collect();
        v.extend(self.offset_head.params());
        v
    }
}

/// Neighbourhood `A_ij > threshold` (diagonal excluded).
pub fn threshold_neighborhood(adjacency: &Matrix, threshold: f64) -> Vec<Vec<bool>> {
    let n = adjacency.nrows();
    (0..n)
        .map(|i| (0..n).map(|j| i != j && adjacency[(i, j)] > threshold).collect())
        .collect()
}

/// Runs every level and adds the predicted offsets to the joints. The
/// adjacency is passed through unchanged.
pub fn hierarchical_refine(
    tape: &mut Tape,
    p: &Bound,
    graph: &DiffSkeleton,
    refiner: &Refiner,
) -> Result<DiffSkeleton> {
    if refiner.levels.is_empty() {
        return Err(Error::Config("hierarchical refinement needs at least one level".into()));
    }
    if refiner.thresholds.len() != refiner.levels.len() {
        return Err(Error::Config(format!(
            "{} thresholds for {} attention levels",
            refiner.thresholds.len(),
            refiner.levels.len()
        )));
    }
    let mut features = graph.features;
    for (level, &tau) in refiner.levels.iter().zip(&refiner.thresholds) {
        let hood = threshold_neighborhood(tape.value(graph.adjacency), tau);
        features = gat_layer(tape, p, features, &hood, level, refiner.self_loops)?.features;
    }
    let offsets = refiner.offset_head.forward(tape, p, features)?;
    let joints = tape.add(graph.joints, offsets)?;
    Ok(DiffSkeleton {
        joints,
        adjacency: graph.adjacency,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, Perturb, Tolerance};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.range(-1.0, 1.0))
    }

    fn random_hood(rng: &mut Rng, n: usize) -> Vec<Vec<bool>> {
        let mut h = vec![vec![false; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let e = rng.uniform() < 0.4;
                h[i][j] = e;
                h[j][i] = e;
            }
        }
        h
    }

    #[test]
    fn single_neighbour_gets_full_weight() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let layer = GatLayerParams::new(&mut store, &mut rng, 0, 3, 3, false);
        let fv = random(&mut rng, 3, 3);
        let hood = vec![vec![false, true, false], vec![true, false, false], vec![false; 3]];
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let f = t.constant(fv.clone());
        let out = gat_layer(&mut t, &p, f, &hood, &layer, false);
        assert!(matches!(out, Err(Error::Diff(crate::diffcore::DiffError::IsolatedNode { row: 2 }))));

        let hood = vec![vec![false, true, false], vec![true, false, false], vec![true, false, false]];
        let out = gat_layer(&mut t, &p, f, &hood, &layer, false).unwrap();
        let att = t.value(out.attention);
        assert_eq!(att[(0, 1)], 1.0);
        // output row 0 = φ(W f_1) + f_0
        let w = store.get(layer.weight);
        let wf1 = fv.row(1) * w;
        let expect = wf1.map(|x| if x > 0.0 { x } else { 0.2 * x }) + fv.row(0);
        assert!((t.value(out.features).row(0) - expect).amax() < 1e-12);
    }

    #[test]
    fn identical_neighbours_split_evenly() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let layer = GatLayerParams::new(&mut store, &mut rng, 0, 2, 2, false);
        let fv = Matrix::from_row_slice(3, 2, &[0.1, 0.2, 0.5, -0.3, 0.5, -0.3]);
        let hood = vec![vec![false, true, true], vec![true, false, false], vec![true, false, false]];
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let f = t.constant(fv);
        let out = gat_layer(&mut t, &p, f, &hood, &layer, false).unwrap();
        let att = t.value(out.attention);
        assert!((att[(0, 1)] - 0.5).abs() < 1e-15 && (att[(0, 2)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rows_are_distributions_and_zero_weight_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let layer = GatLayerParams::new(&mut store, &mut rng, 0, 4, 4, false);
        let fv = random(&mut rng, 7, 4);
        let hood = random_hood(&mut rng, 7);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let f = t.constant(fv.clone());
        let out = gat_layer(&mut t, &p, f, &hood, &layer, true).unwrap();
        let att = t.value(out.attention);
        for i in 0..7 {
            assert!((att.row(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..7 {
                assert!(att[(i, j)] >= 0.0);
                if !hood[i][j] && i != j {
                    assert_eq!(att[(i, j)], 0.0);
                }
            }
        }
        store.get_mut(layer.weight).fill(0.0);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let f = t.constant(fv.clone());
        let out = gat_layer(&mut t, &p, f, &hood, &layer, true).unwrap();
        assert_eq!(t.value(out.features), &fv);
    }

    #[test]
    fn projection_residual_and_gate() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let layer = GatLayerParams::new(&mut store, &mut rng, 0, 3, 5, true);
        assert!(layer.residual.is_some() && layer.gate.is_some());
        let fv = random(&mut rng, 4, 3);
        let hood = random_hood(&mut rng, 4);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let f = t.constant(fv);
        let out = gat_layer(&mut t, &p, f, &hood, &layer, true).unwrap();
        assert_eq!(t.shape(out.features), (4, 5));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let layer = GatLayerParams::new(&mut store, &mut rng, 0, 4, 3, true);
        let fv = random(&mut rng, 6, 4);
        let hood = random_hood(&mut rng, 6);
        let readout = random(&mut rng, 6, 3);
        let base = store.clone();
        let ids = layer.params();
        let inputs: Vec<Matrix> = ids.iter().map(|&id| base.get(id).clone()).collect();
        let report = check_gradients(&inputs, &[Perturb::Entry; 4], 1e-5, Tolerance::default(), |t, leaves| {
            let mut p = base.bind(t);
            for (&id, &leaf) in ids.iter().zip(leaves) {
                p = p.with(id, leaf);
            }
            let f = t.constant(fv.clone());
            let out = gat_layer(t, &p, f, &hood, &layer, true)?;
            let r = t.constant(readout.clone());
            let m = t.mul(out.features, r)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn refine_requires_levels_and_zero_head_keeps_joints() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        let empty = Refiner::new(&mut store, &mut rng, 4, &[], false);
        let refiner = Refiner::new(&mut store, &mut rng, 4, &[0.5], false);
        let jv = random(&mut rng, 5, 3);
        let mut av = random(&mut rng, 5, 5).map(f64::abs);
        av = (&av + av.transpose()) * 0.5;
        av.fill_diagonal(0.0);
        av.apply(|x| *x = x.min(1.0));
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let g = DiffSkeleton {
            joints: t.constant(jv.clone()),
            adjacency: t.constant(av),
            features: t.constant(random(&mut rng, 5, 4)),
        };
        assert!(matches!(hierarchical_refine(&mut t, &p, &g, &empty), Err(Error::Config(_))));
        let out = hierarchical_refine(&mut t, &p, &g, &refiner).unwrap();
        assert_eq!(t.value(out.joints), &jv);
    }

    #[test]
    fn offset_scales_linearly_with_head() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let refiner = Refiner::new(&mut store, &mut rng, 4, &[0.3, 0.6], false);
        let head = refiner.offset_head.clone();
        let hw = random(&mut rng, 4, 3);
        let hb = random(&mut rng, 1, 3);
        let jv = random(&mut rng, 5, 3);
        let av = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 0.5 + 0.1 * ((i + j) % 3) as f64 });
        let fv = random(&mut rng, 5, 4);
        let displacement = |s: f64| {
            let mut st = store.clone();
            *st.get_mut(head.weight) = &hw * s;
            *st.get_mut(head.bias) = &hb * s;
            let mut t = Tape::new();
            let p = st.bind(&mut t);
            let g = DiffSkeleton {
                joints: t.constant(jv.clone()),
                adjacency: t.constant(av.clone()),
                features: t.constant(fv.clone()),
            };
            let out = hierarchical_refine(&mut t, &p, &g, &refiner).unwrap();
            (t.value(out.joints) - &jv).amax()
        };
        let d1 = displacement(1.0);
        assert!(d1 > 0.0);
        assert!((displacement(2.5) - 2.5 * d1).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let layer = GatLayerParams::new(&mut store, &mut rng, 0, 4, 4, false);
        let n = 6;
        let fv = random(&mut rng, n, 4);
        let hood = random_hood(&mut rng, n);
        let perm = [3usize, 5, 0, 1, 4, 2];
        let fp = Matrix::from_fn(n, 4, |r, c| fv[(perm[r], c)]);
        let hp: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| hood[perm[i]][perm[j]]).collect()).collect();
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let (f, f2) = (t.constant(fv), t.constant(fp));
        let a = gat_layer(&mut t, &p, f, &hood, &layer, true).unwrap();
        let b = gat_layer(&mut t, &p, f2, &hp, &layer, true).unwrap();
        let (av, bv) = (t.value(a.features), t.value(b.features));
        for r in 0..n {
            assert!((bv.row(r) - av.row(perm[r])).amax() < 1e-9);
        }
    }
}
