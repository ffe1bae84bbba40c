//! Point-cloud encoder (stacked set abstraction) and fixed-slot skeleton
//! decoder with entropy-driven node count.

use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::{Error, Result};
use crate::graphcore::{bool_to_matrix, knn_graph, laplacian_matrix, sq_dist, PointCloud};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::rng::Rng;
use crate::spectral::structural_entropy;

/// Hard cap on decoded joints.
pub const MAX_NODES: usize = 64;

fn row3(m: &Matrix, i: usize) -> [f64; 3] {
    [m[(i, 0)], m[(i, 1)], m[(i, 2)]]
}

/// Index of the lexicographically smallest `(x, y, z)`; ties keep the lowest index.
pub fn canonical_seed(points: &Matrix) -> usize {
    let mut best = 0;
    for i in 1..points.nrows() {
        let (a, b) = (row3(points, i), row3(points, best));
        let less = a[0]
            .total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
            .is_lt();
        if less {
            best = i;
        }
    }
    best
}

/// Greedy max-min subset starting at `seed_index`; ties pick the lowest index.
pub fn farthest_point_sample(points: &Matrix, n: usize, seed_index: usize) -> Result<Vec<usize>> {
    let m = points.nrows();
    if n > m {
        return Err(Error::Parameter(format!("cannot sample {n} of {m} points")));
    }
    if seed_index >= m {
        return Err(Error::Parameter(format!("seed index {seed_index} out of range for {m} points")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![seed_index];
    let seed = row3(points, seed_index);
    let mut nearest: Vec<f64> = (0..m).map(|i| sq_dist(row3(points, i), seed)).collect();
    while chosen.len() < n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in nearest.iter().enumerate() {
            if d > best_d && !chosen.contains(&i) {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
        let p = row3(points, best);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row3(points, i), p));
        }
    }
    Ok(chosen)
}

/// One set-abstraction stage: sample centres, group by radius, shared MLP,
/// max-pool per group.
#[derive(Debug, Clone)]
pub struct SetAbstraction {
    pub samples: usize,
    pub radius: f64,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stages: Vec<SetAbstraction>,
    pub global_dim: usize,
}

impl EncoderParams {
    /// Each stage MLP is `[input, hidden, out]` where `out` is `hidden` for
    /// intermediate stages and `global_dim` for the last one.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        samples: &[usize],
        radii: &[f64],
        hidden: usize,
        global_dim: usize,
        slope: f64,
    ) -> Result<Self> {
        if samples.is_empty() || samples.len() != radii.len() {
            return Err(Error::Config(format!(
                "{} encoder sample counts for {} radii",
                samples.len(),
                radii.len()
            )));
        }
        if samples.windows(2).any(|w| w[1] >= w[0]) || samples.contains(&0) {
            return Err(Error::Config(format!("encoder sample counts must strictly decrease: {samples:?}")));
        }
        if radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(format!("encoder radii must be positive: {radii:?}")));
        }
        let act = Activation::LeakyRelu(slope);
        let mut stages = Vec::new();
        let mut prev = 0;
        for (s, (&n, &r)) in samples.iter().zip(radii).enumerate() {
            let out = if s + 1 == samples.len() { global_dim } else { hidden };
            let mlp = Mlp::new(store, rng, &format!("encoder.{s}"), &[6 + prev, hidden, out], act, act);
            stages.push(SetAbstraction { samples: n, radius: r, mlp });
            prev = out;
        }
        Ok(Self { stages, global_dim })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.mlp.params()).collect()
    }
}

/// Global `1 × G` descriptor of a point cloud.
///
/// A stage asked for more centres than it has points uses all of them.
pub fn encode(tape: &mut Tape, p: &Bound, pc: &PointCloud, params: &EncoderParams) -> Result<DiffValue> {
    let last = params.stages.last().expect("validated non-empty");
    if pc.len() < last.samples {
        return Err(Error::Parameter(format!(
            "point cloud has {} points, final encoder stage needs {}",
            pc.len(),
            last.samples
        )));
    }
    let mut pos = pc.points.clone();
    let mut feats: Option<DiffValue> = None;
    for stage in &params.stages {
        let n = stage.samples.min(pos.nrows());
        let centers = farthest_point_sample(&pos, n, canonical_seed(&pos))?;
        let r2 = stage.radius * stage.radius;
        let mut members = Vec::new();
        let mut segments = Vec::with_capacity(n);
        let mut geo_rows: Vec<[f64; 6]> = Vec::new();
        for &c in &centers {
            let cp = row3(&pos, c);
            let start = members.len();
            for j in 0..pos.nrows() {
                let pj = row3(&pos, j);
                if sq_dist(pj, cp) <= r2 {
                    members.push(j);
                    geo_rows.push([pj[0] - cp[0], pj[1] - cp[1], pj[2] - cp[2], pj[0], pj[1], pj[2]]);
                }
            }
            segments.push((start..members.len()).collect::<Vec<_>>());
        }
        let geo = Matrix::from_fn(geo_rows.len(), 6, |r, c| geo_rows[r][c]);
        let geo = tape.constant(geo);
        let input = match feats {
            Some(f) => {
                let g = tape.gather_rows(f, &members)?;
                tape.concat_cols(&[geo, g])?
            }
            None => geo,
        };
        let h = stage.mlp.forward(tape, p, input)?;
        feats = Some(tape.segment_max(h, &segments)?);
        pos = Matrix::from_fn(n, 3, |r, c| pos[(centers[r], c)]);
    }
    let f = feats.expect("at least one stage");
    let all: Vec<usize> = (0..tape.shape(f).0).collect();
    Ok(tape.segment_max(f, &[all])?)
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub mlp: Mlp,
    pub n_min: usize,
    pub n_max: usize,
    pub feature_dim: usize,
}

impl DecoderParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        global_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        (n_min, n_max): (usize, usize),
        slope: f64,
    ) -> Result<Self> {
        if !(1 <= n_min && n_min <= n_max && n_max <= MAX_NODES) {
            return Err(Error::Config(format!(
                "node bounds must satisfy 1 <= n_min <= n_max <= {MAX_NODES}, got ({n_min}, {n_max})"
            )));
        }
        let mut widths = vec![global_dim];
        widths.extend_from_slice(hidden);
        widths.push(n_max * (3 + feature_dim));
        let act = Activation::LeakyRelu(slope);
        Ok(Self {
            mlp: Mlp::new(store, rng, "decoder", &widths, act, Activation::Identity),
            n_min,
            n_max,
            feature_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Decoder output: joints in the open unit box and initial node features.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub joints: DiffValue,
    pub features: DiffValue,
}

/// Emits `n_max` slots and keeps the first `target_n`.
pub fn decode(tape: &mut Tape, p: &Bound, global: DiffValue, target_n: usize, params: &DecoderParams) -> Result<Decoded> {
    if target_n < params.n_min || target_n > params.n_max {
        return Err(Error::Parameter(format!(
            "target node count {target_n} outside [{}, {}]",
            params.n_min, params.n_max
        )));
    }
    let width = 3 + params.feature_dim;
    let flat = params.mlp.forward(tape, p, global)?;
    let slots = tape.reshape(flat, params.n_max, width)?;
    let raw = tape.slice(slots, (0, 0), (target_n, 3))?;
    let joints = tape.sigmoid(raw);
    let features = tape.slice(slots, (0, 3), (target_n, params.feature_dim))?;
    Ok(Decoded { joints, features })
}

/// Linear map of structural entropy in `[0, ln M]` onto `[n_min, n_max]`,
/// rounded half-up and clamped.
pub fn node_count_from_entropy(h: f64, m: usize, (n_min, n_max): (usize, usize)) -> usize {
    let hmax = (m as f64).ln();
    let frac = if hmax > 0.0 { h / hmax } else { 0.0 };
    let x = n_min as f64 + (n_max - n_min) as f64 * frac;
    ((x + 0.5).floor().max(0.0) as usize).clamp(n_min, n_max)
}

/// Node count from the spectral entropy of the cloud's kNN graph.
pub fn adaptive_node_count(pc: &PointCloud, k: usize, bounds: (usize, usize)) -> Result<usize> {
    let adj = bool_to_matrix(&knn_graph(pc, k)?);
    let h = structural_entropy(&laplacian_matrix(&adj)?)?;
    Ok(node_count_from_entropy(h, pc.len(), bounds))
}
