//! Node matching and skeleton metrics: MPJPE, graph edit distance,
//! spectral consistency and topological fidelity.

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::Result;
use crate::graphcore::{laplacian_matrix, SkeletonGraph};
use crate::spectral::padded_spectrum;

/// Per-joint penalty for nodes left unmatched: the unit-box diameter.
pub const UNMATCHED_PENALTY: f64 = 1.732_050_807_568_877_2;

/// Largest node count solved exactly by [`graph_edit_distance`] by default.
pub const DEFAULT_EXACT_LIMIT: usize = 8;

fn sq_row_dist(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

/// Minimum-cost assignment for a `rows × cols` cost matrix with
/// `rows <= cols`; returns the column of each row.
///
/// Shortest augmenting paths with potentials; columns are scanned in index
/// order and only strict improvements are taken, so ties resolve to the
/// lowest index.
pub fn assignment(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "assignment needs rows <= cols");
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Minimum total squared distance matching of `min(N_p, N_g)` pairs,
/// returned as `(pred, gt)` sorted by predicted index.
pub fn match_nodes(pred: &Matrix, gt: &Matrix) -> Vec<(usize, usize)> {
    let (np, ng) = (pred.nrows(), gt.nrows());
    let mut pairs: Vec<(usize, usize)> = if np <= ng {
        let cost = Matrix::from_fn(np, ng, |i, j| sq_row_dist(pred, i, gt, j));
        assignment(&cost).into_iter().enumerate().collect()
    } else {
        let cost = Matrix::from_fn(ng, np, |j, i| sq_row_dist(pred, i, gt, j));
        assignment(&cost).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    pairs
}

/// Mean matched joint distance; every unmatched node adds [`UNMATCHED_PENALTY`].
pub fn mpjpe_with(pred: &Matrix, gt: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    let n = pred.nrows().max(gt.nrows());
    if n == 0 {
        return 0.0;
    }
    let matched: f64 = pairs.iter().map(|&(i, j)| sq_row_dist(pred, i, gt, j).sqrt()).sum();
    (matched + (n - pairs.len()) as f64 * UNMATCHED_PENALTY) / n as f64
}

pub fn mpjpe(pred: &Matrix, gt: &Matrix) -> f64 {
    mpjpe_with(pred, gt, &match_nodes(pred, gt))
}

/// Node count plus undirected edges, each stored once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeGraph {
    pub nodes: usize,
    adj: Vec<Vec<bool>>,
    edges: Vec<(usize, usize)>,
}

impl EdgeGraph {
    /// Duplicate and reversed pairs collapse; self-loops are ignored.
    pub fn new(nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![vec![false; nodes]; nodes];
        for &(i, j) in edges {
            assert!(i < nodes && j < nodes, "edge ({i}, {j}) outside {nodes} nodes");
            if i != j {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
        let edges = (0..nodes)
            .flat_map(|i| ((i + 1)..nodes).map(move |j| (i, j)))
            .filter(|&(i, j)| adj[i][j])
            .collect();
        Self { nodes, adj, edges }
    }

    pub fn from_adjacency(a: &Matrix, threshold: f64) -> Self {
        Self::new(a.nrows(), &crate::dgcn::extract_hard_edges(a, threshold))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> Matrix {
        Matrix::from_fn(self.nodes, self.nodes, |i, j| if self.adj[i][j] { 1.0 } else { 0.0 })
    }
}

/// Edit cost under a partial injective map `a → b` given as `(a, b)` pairs:
/// unmapped nodes are deleted/inserted with their edges, mapped edges cost 1
/// when present on only one side.
pub fn mapped_edit_cost(a: &EdgeGraph, b: &EdgeGraph, pairs: &[(usize, usize)]) -> usize {
    let mut fwd = vec![None; a.nodes];
    for &(i, j) in pairs {
        fwd[i] = Some(j);
    }
    let mut cost = (a.nodes - pairs.len()) + (b.nodes - pairs.len());
    let mut covered = 0;
    for &(i, j) in a.edges() {
        match (fwd[i], fwd[j]) {
            (Some(x), Some(y)) if b.has_edge(x, y) => covered += 1,
            _ => cost += 1,
        }
    }
    cost + b.edges().len() - covered
}

struct Search<'a> {
    small: &'a EdgeGraph,
    large: &'a EdgeGraph,
    map: Vec<usize>,
    used: Vec<bool>,
    best: usize,
}

impl Search<'_> {
    fn run(&mut self, u: usize, cost: usize) {
        let extra_nodes = self.large.nodes - self.small.nodes;
        if cost + extra_nodes >= self.best {
            return;
        }
        if u == self.small.nodes {
            // edges of the large graph touching unmapped nodes are inserted
            let inserted = self
                .large
                .edges()
                .iter()
                .filter(|&&(x, y)| !self.used[x] || !self.used[y])
                .count();
            self.best = self.best.min(cost + extra_nodes + inserted);
            return;
        }
        for v in 0..self.large.nodes {
            if self.used[v] {
                continue;
            }
            let step = (0..u)
                .filter(|&w| self.small.has_edge(u, w) != self.large.has_edge(v, self.map[w]))
                .count();
            self.used[v] = true;
            self.map[u] = v;
            self.run(u + 1, cost + step);
            self.used[v] = false;
        }
    }
}

/// Exact unit-cost edit distance by branch and bound over injections of the
/// smaller graph into the larger one.
pub fn exact_ged(a: &EdgeGraph, b: &EdgeGraph) -> usize {
    let (small, large) = if a.nodes <= b.nodes { (a, b) } else { (b, a) };
    let identity: Vec<(usize, usize)> = (0..small.nodes).map(|i| (i, i)).collect();
    let mut search = Search {
        small,
        large,
        map: vec![0; small.nodes],
        used: vec![false; large.nodes],
        best: mapped_edit_cost(small, large, &identity) + 1,
    };
    search.run(0, 0);
    search.best
}

/// Exact when both graphs have at most `exact_limit` nodes, otherwise the
/// upper bound induced by `pairs` (a geometric matching `a → b`).
pub fn graph_edit_distance(a: &EdgeGraph, b: &EdgeGraph, pairs: &[(usize, usize)], exact_limit: usize) -> f64 {
    if a.nodes.max(b.nodes) <= exact_limit {
        exact_ged(a, b) as f64
    } else {
        mapped_edit_cost(a, b, pairs) as f64
    }
}

/// `1 / (1 + ‖λ_pred − λ_gt‖₂)` over the first `k` zero-padded ascending
/// Laplacian eigenvalues.
pub fn spectral_consistency(pred: &EdgeGraph, gt: &EdgeGraph, k: usize) -> Result<f64> {
    let len = pred.nodes.max(gt.nodes);
    let k = k.min(len);
    let a = padded_spectrum(&laplacian_matrix(&pred.adjacency())?, len, k)?;
    let b = padded_spectrum(&laplacian_matrix(&gt.adjacency())?, len, k)?;
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok(1.0 / (1.0 + gap))
}

/// Edge F1 under the `(pred, gt)` node correspondence; 1 when both edge
/// sets are empty.
pub fn topological_fidelity(pred: &EdgeGraph, gt: &EdgeGraph, pairs: &[(usize, usize)]) -> f64 {
    let (np, ng) = (pred.edges().len(), gt.edges().len());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    let mut fwd = vec![None; pred.nodes];
    for &(i, j) in pairs {
        fwd[i] = Some(j);
    }
    let tp = pred
        .edges()
        .iter()
        .filter(|&&(i, j)| matches!((fwd[i], fwd[j]), (Some(x), Some(y)) if gt.has_edge(x, y)))
        .count();
    2.0 * tp as f64 / (np + ng) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mpjpe: f64,
    pub ged: f64,
    pub sc: f64,
    pub tf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe: f64,
    pub ged: f64,
    pub sc: f64,
    pub tf: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    /// Means over samples in order; all zeros for an empty list.
    pub fn aggregate(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&MetricValues) -> f64| per_sample.iter().map(|s| f(&s.values)).sum::<f64>() / n;
        Self {
            mpjpe: mean(|v| v.mpjpe),
            ged: mean(|v| v.ged),
            sc: mean(|v| v.sc),
            tf: mean(|v| v.tf),
            per_sample,
        }
    }
}

/// Settings shared by every pairwise metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSettings {
    pub edge_threshold: f64,
    pub spectral_k: usize,
    pub exact_limit: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            edge_threshold: 0.5,
            spectral_k: 12,
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

/// All four metrics for one prediction; the predicted adjacency is
/// thresholded, the ground truth is taken as binary.
pub fn evaluate_pair(pred: &SkeletonGraph, gt: &SkeletonGraph, settings: &MetricSettings) -> Result<MetricValues> {
    let pairs = match_nodes(&pred.joints, &gt.joints);
    let pe = EdgeGraph::from_adjacency(&pred.adjacency, settings.edge_threshold);
    let ge = EdgeGraph::from_adjacency(&gt.adjacency, 0.5);
    Ok(MetricValues {
        mpjpe: mpjpe_with(&pred.joints, &gt.joints, &pairs),
        ged: graph_edit_distance(&pe, &ge, &pairs, settings.exact_limit),
        sc: spectral_consistency(&pe, &ge, settings.spectral_k)?,
        tf: topological_fidelity(&pe, &ge, &pairs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn path3() -> EdgeGraph {
        EdgeGraph::new(3, &[(0, 1), (1, 2)])
    }

    fn complete3() -> EdgeGraph {
        EdgeGraph::new(3, &[(0, 1), (0, 2), (1, 2)])
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn matching_small_cases() {
        let a = Matrix::from_row_slice(2, 3, &[0., 0., 0., 1., 1., 1.]);
        assert_eq!(match_nodes(&a, &a), vec![(0, 0), (1, 1)]);
        let crossed = Matrix::from_row_slice(2, 3, &[1., 1., 1., 0., 0., 0.]);
        assert_eq!(match_nodes(&a, &crossed), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn matching_cost_equals_permutation_minimum() {
        let mut rng = Rng::new(17);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..20 {
            let a = Matrix::from_fn(6, 3, |_, _| rng.uniform());
            let b = Matrix::from_fn(6, 3, |_, _| rng.uniform());
            let got: f64 = match_nodes(&a, &b).iter().map(|&(i, j)| sq_row_dist(&a, i, &b, j)).sum();
            let best = perms
                .iter()
                .map(|p| (0..6).map(|i| sq_row_dist(&a, i, &b, p[i])).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((got - best).abs() < 1e-12);
        }
    }

    #[test]
    fn rectangular_matching_is_injective_and_optimal() {
        let mut rng = Rng::new(4);
        for (np, ng) in [(3, 5), (5, 3), (1, 4)] {
            let a = Matrix::from_fn(np, 3, |_, _| rng.uniform());
            let b = Matrix::from_fn(ng, 3, |_, _| rng.uniform());
            let pairs = match_nodes(&a, &b);
            assert_eq!(pairs.len(), np.min(ng));
            let mut gts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            gts.sort_unstable();
            gts.dedup();
            assert_eq!(gts.len(), pairs.len());
            // pad to square with zero-cost dummies and brute force
            let n = np.max(ng);
            let cost = |i: usize, j: usize| if i < np && j < ng { sq_row_dist(&a, i, &b, j) } else { 0.0 };
            let best = permutations(n)
                .iter()
                .map(|p| (0..n).map(|i| cost(i, p[i])).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let got: f64 = pairs.iter().map(|&(i, j)| cost(i, j)).sum();
            assert!((got - best).abs() < 1e-12);
        }
    }

    #[test]
    fn mpjpe_examples() {
        let a = Matrix::from_row_slice(2, 3, &[0., 0., 0., 1., 0., 0.]);
        assert_eq!(mpjpe(&a, &a), 0.0);
        let moved = Matrix::from_fn(2, 3, |r, c| a[(r, c)] + [3.0, 4.0, 0.0][c]);
        assert!((mpjpe(&moved, &a) - 5.0).abs() < 1e-12);
        let extra = Matrix::from_row_slice(3, 3, &[0., 0., 0., 1., 0., 0., 0.5, 0.5, 0.5]);
        assert!((mpjpe(&extra, &a) - 3f64.sqrt() / 3.0).abs() < 1e-12);
        assert_eq!(UNMATCHED_PENALTY, 3f64.sqrt());
    }

    #[test]
    fn ged_examples() {
        assert_eq!(exact_ged(&path3(), &path3()), 0);
        assert_eq!(exact_ged(&path3(), &complete3()), 1);
        let single = EdgeGraph::new(1, &[]);
        assert_eq!(exact_ged(&single, &path3()), 4);
        let empty = EdgeGraph::new(0, &[]);
        assert_eq!(exact_ged(&empty, &complete3()), 6);
    }

    fn random_graph(rng: &mut Rng, max_nodes: usize) -> EdgeGraph {
        let n = 1 + rng.below(max_nodes);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.uniform() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        EdgeGraph::new(n, &edges)
    }

    /// Every partial injective map, not only maximal ones.
    fn brute_force_ged(a: &EdgeGraph, b: &EdgeGraph) -> usize {
        fn go(a: &EdgeGraph, b: &EdgeGraph, i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>) -> usize {
            if i == a.nodes {
                return mapped_edit_cost(a, b, pairs);
            }
            let mut best = go(a, b, i + 1, used, pairs);
            for j in 0..b.nodes {
                if !used[j] {
                    used[j] = true;
                    pairs.push((i, j));
                    best = best.min(go(a, b, i + 1, used, pairs));
                    pairs.pop();
                    used[j] = false;
                }
            }
            best
        }
        go(a, b, 0, &mut vec![false; b.nodes], &mut Vec::new())
    }

    #[test]
    fn exact_ged_matches_enumeration_and_bounds_hold() {
        let mut rng = Rng::new(23);
        for _ in 0..60 {
            let a = random_graph(&mut rng, 6);
            let b = random_graph(&mut rng, 6);
            let c = random_graph(&mut rng, 5);
            let ab = exact_ged(&a, &b);
            assert_eq!(ab, brute_force_ged(&a, &b));
            assert_eq!(ab, exact_ged(&b, &a));
            assert!(exact_ged(&a, &c) <= ab + exact_ged(&b, &c));
            let ja = Matrix::from_fn(a.nodes, 3, |_, _| rng.uniform());
            let jb = Matrix::from_fn(b.nodes, 3, |_, _| rng.uniform());
            let approx = graph_edit_distance(&a, &b, &match_nodes(&ja, &jb), 0);
            assert!(approx >= ab as f64);
        }
    }

    #[test]
    fn spectral_consistency_examples() {
        assert_eq!(spectral_consistency(&path3(), &path3(), 3).unwrap(), 1.0);
        let sc = spectral_consistency(&path3(), &complete3(), 3).unwrap();
        assert!((sc - 1.0 / 3.0).abs() < 1e-9);
        let star = EdgeGraph::new(4, &[(0, 1), (0, 2), (0, 3)]);
        let k4 = EdgeGraph::new(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let p4 = EdgeGraph::new(4, &[(0, 1), (1, 2), (2, 3)]);
        let near = spectral_consistency(&p4, &star, 4).unwrap();
        let far = spectral_consistency(&p4, &k4, 4).unwrap();
        assert!(far < near && near < 1.0);
    }

    #[test]
    fn topological_fidelity_examples() {
        let id: Vec<(usize, usize)> = (0..3).map(|i| (i, i)).collect();
        assert_eq!(topological_fidelity(&path3(), &path3(), &id), 1.0);
        assert_eq!(topological_fidelity(&EdgeGraph::new(3, &[]), &path3(), &id), 0.0);
        assert!((topological_fidelity(&path3(), &complete3(), &id) - 0.8).abs() < 1e-12);
        assert_eq!(topological_fidelity(&EdgeGraph::new(2, &[]), &EdgeGraph::new(2, &[]), &id[..2]), 1.0);
    }

    #[test]
    fn metrics_invariant_under_joint_relabeling() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 7);
            let h = random_graph(&mut rng, 7);
            let jg = Matrix::from_fn(g.nodes, 3, |_, _| rng.uniform());
            let jh = Matrix::from_fn(h.nodes, 3, |_, _| rng.uniform());
            let sg = SkeletonGraph::from_edges(jg.clone(), g.edges()).unwrap();
            let sh = SkeletonGraph::from_edges(jh.clone(), h.edges()).unwrap();
            let mut perm: Vec<usize> = (0..g.nodes).collect();
            rng.shuffle(&mut perm);
            let mut inv = vec![0; g.nodes];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let pj = Matrix::from_fn(g.nodes, 3, |r, c| jg[(perm[r], c)]);
            let pe: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j)| (inv[i], inv[j])).collect();
            let sp = SkeletonGraph::from_edges(pj, &pe).unwrap();
            let s = MetricSettings::default();
            let a = evaluate_pair(&sg, &sh, &s).unwrap();
            let b = evaluate_pair(&sp, &sh, &s).unwrap();
            assert!((a.mpjpe - b.mpjpe).abs() < 1e-12);
            assert_eq!(a.ged, b.ged);
            assert!((a.sc - b.sc).abs() < 1e-9);
            assert!((a.tf - b.tf).abs() < 1e-12);
            let same = evaluate_pair(&sg, &sg, &s).unwrap();
            assert_eq!((same.mpjpe, same.ged, same.sc, same.tf), (0.0, 0.0, 1.0, 1.0));
        }
    }

    #[test]
    fn report_aggregates_means() {
        let s = |id: &str, x: f64| SampleMetrics {
            id: id.into(),
            values: MetricValues { mpjpe: x, ged: 2.0 * x, sc: 0.5, tf: x / 2.0 },
        };
        let r = MetricsReport::aggregate(vec![s("a", 1.0), s("b", 3.0)]);
        assert_eq!((r.mpjpe, r.ged, r.sc, r.tf), (2.0, 4.0, 0.5, 1.0));
        assert_eq!(r.per_sample.len(), 2);
    }
}
