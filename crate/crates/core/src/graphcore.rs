//! Skeleton graphs, point clouds and graph Laplacians.

use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::{Error, Result};

/// Tolerance for symmetry and zero-diagonal checks on adjacency matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Joint positions, soft adjacency and per-node features.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub joints: Matrix,
    pub adjacency: Matrix,
    pub node_features: Matrix,
}

impl SkeletonGraph {
    pub fn new(joints: Matrix, adjacency: Matrix, node_features: Matrix) -> Result<Self> {
        let g = Self {
            joints,
            adjacency,
            node_features,
        };
        g.validate()?;
        Ok(g)
    }

    /// Binary-adjacency graph from an undirected edge list; no node features.
    pub fn from_edges(joints: Matrix, edges: &[(usize, usize)]) -> Result<Self> {
        let n = joints.nrows();
        let mut adjacency = Matrix::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Invariant(format!("edge ({i}, {j}) invalid for {n} nodes")));
            }
            adjacency[(i, j)] = 1.0;
            adjacency[(j, i)] = 1.0;
        }
        Self::new(joints, adjacency, Matrix::zeros(n, 0))
    }

    pub fn len(&self) -> usize {
        self.joints.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.nrows();
        if n == 0 {
            return Err(Error::Invariant("skeleton has no joints".into()));
        }
        if self.joints.ncols() != 3 {
            return Err(Error::Invariant(format!("joints must be N x 3, got {} columns", self.joints.ncols())));
        }
        if let Some(k) = self.joints.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invariant(format!("non-finite joint coordinate at joint {}", k % n)));
        }
        if self.adjacency.shape() != (n, n) {
            return Err(Error::Invariant(format!(
                "adjacency shape {:?} does not match {n} joints",
                self.adjacency.shape()
            )));
        }
        if self.node_features.nrows() != n {
            return Err(Error::Invariant(format!(
                "node features have {} rows for {n} joints",
                self.node_features.nrows()
            )));
        }
        check_adjacency(&self.adjacency)
    }
}

/// A skeleton whose joints, adjacency and features live on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffSkeleton {
    pub joints: DiffValue,
    pub adjacency: DiffValue,
    pub features: DiffValue,
}

impl DiffSkeleton {
    pub fn constant(tape: &mut Tape, g: &SkeletonGraph) -> Self {
        Self {
            joints: tape.constant(g.joints.clone()),
            adjacency: tape.constant(g.adjacency.clone()),
            features: tape.constant(g.node_features.clone()),
        }
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.joints).0
    }

    /// Current values as a validated [`SkeletonGraph`].
    pub fn to_graph(&self, tape: &Tape) -> Result<SkeletonGraph> {
        SkeletonGraph::new(
            tape.value(self.joints).clone(),
            tape.value(self.adjacency).clone(),
            tape.value(self.features).clone(),
        )
    }
}

/// Symmetric, zero-diagonal, entries in `[0, 1]`.
pub fn check_adjacency(a: &Matrix) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Invariant(format!("adjacency is {}x{}", n, a.ncols())));
    }
    for i in 0..n {
        if a[(i, i)].abs() > SYMMETRY_TOL {
            return Err(Error::Invariant(format!("adjacency diagonal entry {i} is {}", a[(i, i)])));
        }
        for j in 0..n {
            let v = a[(i, j)];
            if !(-SYMMETRY_TOL..=1.0 + SYMMETRY_TOL).contains(&v) {
                return Err(Error::Invariant(format!("adjacency entry ({i}, {j}) = {v} outside [0, 1]")));
            }
            if (v - a[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::Invariant(format!("adjacency asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Invariant(format!("adjacency is {}x{}", n, a.ncols())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::Invariant(format!("adjacency asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `L = D − A` with `D = diag(row sums of A)`.
pub fn laplacian_matrix(adjacency: &Matrix) -> Result<Matrix> {
    check_symmetric(adjacency)?;
    let n = adjacency.nrows();
    let mut l = -adjacency.clone();
    for i in 0..n {
        l[(i, i)] += adjacency.row(i).sum();
    }
    Ok(l)
}

/// Differentiable `L = D − A` on the tape.
pub fn laplacian(tape: &mut Tape, adjacency: DiffValue) -> Result<DiffValue> {
    check_symmetric(tape.value(adjacency))?;
    let n = tape.value(adjacency).nrows();
    let ones = tape.constant(Matrix::from_element(n, 1, 1.0));
    let degree = tape.matmul(adjacency, ones)?;
    let d = tape.diag(degree)?;
    Ok(tape.sub(d, adjacency)?)
}

/// Points normalized into the unit box.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Matrix,
}

/// Isotropic map `p ↦ p·scale + shift` taking a cloud into `[0, 1]³`.
///
/// After scaling, each axis is shifted by the smallest amount that puts it
/// inside `[0, 1]`, so a cloud already in the box with unit extent is a
/// fixed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTransform {
    pub scale: f64,
    pub shift: [f64; 3],
    pub degenerate: bool,
}

impl BoxTransform {
    pub fn fit(raw: &Matrix) -> Result<Self> {
        if raw.nrows() == 0 || raw.ncols() != 3 {
            return Err(Error::Data(format!("point cloud must be M x 3 with M >= 1, got {:?}", raw.shape())));
        }
        for r in 0..raw.nrows() {
            if raw.row(r).iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("non-finite coordinate at point {r}")));
            }
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for r in 0..raw.nrows() {
            for c in 0..3 {
                min[c] = min[c].min(raw[(r, c)]);
                max[c] = max[c].max(raw[(r, c)]);
            }
        }
        let extent = (0..3).map(|c| max[c] - min[c]).fold(0.0, f64::max);
        if extent == 0.0 {
            return Ok(Self {
                scale: 1.0,
                shift: [0, 1, 2].map(|c| 0.5 - min[c]),
                degenerate: true,
            });
        }
        let scale = 1.0 / extent;
        let shift = [0, 1, 2].map(|c| {
            let (lo, hi) = (min[c] * scale, max[c] * scale);
            if lo < 0.0 {
                -lo
            } else if hi > 1.0 {
                1.0 - hi
            } else {
                0.0
            }
        });
        Ok(Self {
            scale,
            shift,
            degenerate: false,
        })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.nrows(), 3, |r, c| m[(r, c)] * self.scale + self.shift[c])
    }
}

/// Translates and isotropically scales so the longest axis spans exactly
/// `[0, 1]`; an all-identical cloud maps to the box centre.
pub fn normalize_pointcloud(raw: &Matrix) -> Result<PointCloud> {
    let t = BoxTransform::fit(raw)?;
    let mut points = t.apply(raw);
    // Clean rounding so the box invariant holds exactly.
    points.apply(|x| *x = x.clamp(0.0, 1.0));
    Ok(PointCloud { points })
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.points[(i, 0)], self.points[(i, 1)], self.points[(i, 2)]]
    }
}

pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Symmetric (union) k-nearest-neighbour graph; ties go to the lower index.
pub fn knn_graph(pc: &PointCloud, k: usize) -> Result<Vec<Vec<bool>>> {
    let m = pc.len();
    if k >= m {
        return Err(Error::Parameter(format!("knn k = {k} must be below point count {m}")));
    }
    let mut adj = vec![vec![false; m]; m];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        order.clear();
        let pi = pc.point(i);
        order.extend((0..m).filter(|&j| j != i).map(|j| (sq_dist(pi, pc.point(j)), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in order.iter().take(k) {
            adj[i][j] = true;
            adj[j][i] = true;
        }
    }
    Ok(adj)
}

pub fn bool_to_matrix(adj: &[Vec<bool>]) -> Matrix {
    let n = adj.len();
    Matrix::from_fn(n, n, |i, j| if adj[i][j] { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Matrix {
        Matrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.])
    }

    #[test]
    fn laplacian_of_path3() {
        let l = laplacian_matrix(&path3()).unwrap();
        assert_eq!(l, Matrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]));
        assert_eq!(laplacian_matrix(&Matrix::zeros(4, 4)).unwrap(), Matrix::zeros(4, 4));
    }

    #[test]
    fn tape_laplacian_matches_and_rejects_asymmetry() {
        let mut t = Tape::new();
        let a = t.leaf(path3());
        let l = laplacian(&mut t, a).unwrap();
        assert_eq!(t.value(l), &laplacian_matrix(&path3()).unwrap());

        let mut bad = path3();
        bad[(0, 1)] = 0.5;
        let b = t.constant(bad);
        assert!(matches!(laplacian(&mut t, b), Err(Error::Invariant(_))));
    }

    #[test]
    fn normalization_rules() {
        let unit = Matrix::from_row_slice(2, 3, &[0., 0.2, 0.3, 1., 0.4, 0.5]);
        let pc = normalize_pointcloud(&unit).unwrap();
        assert_eq!(pc.points, unit);

        let same = Matrix::from_row_slice(3, 3, &[2., 2., 2., 2., 2., 2., 2., 2., 2.]);
        let pc = normalize_pointcloud(&same).unwrap();
        assert!(pc.points.iter().all(|&x| x == 0.5));

        let wide = Matrix::from_row_slice(2, 3, &[-2., 0., 0., 2., 1., 0.]);
        let t = BoxTransform::fit(&wide).unwrap();
        assert_eq!(t.scale, 0.25);
        let pc = normalize_pointcloud(&wide).unwrap();
        assert_eq!(pc.points[(1, 0)], 1.0);
        assert_eq!(pc.points[(1, 1)] - pc.points[(0, 1)], 0.25);

        let nan = Matrix::from_row_slice(2, 3, &[0., 0., 0., f64::NAN, 0., 0.]);
        match normalize_pointcloud(&nan) {
            Err(Error::Data(msg)) => assert!(msg.contains("point 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn knn_small_cases() {
        let two = PointCloud {
            points: Matrix::from_row_slice(2, 3, &[0., 0., 0., 1., 0., 0.]),
        };
        let g = knn_graph(&two, 1).unwrap();
        assert_eq!(g, vec![vec![false, true], vec![true, false]]);

        let line = PointCloud {
            points: Matrix::from_row_slice(3, 3, &[0., 0., 0., 1., 0., 0., 10., 0., 0.]),
        };
        let g = knn_graph(&line, 1).unwrap();
        assert!(g[0][1] && g[1][2] && !g[0][2]);
        assert!(matches!(knn_graph(&line, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn skeleton_validation() {
        let j = Matrix::zeros(3, 3);
        assert!(SkeletonGraph::from_edges(j.clone(), &[(0, 1), (1, 2)]).is_ok());
        assert!(SkeletonGraph::from_edges(j.clone(), &[(0, 3)]).is_err());
        let mut a = path3();
        a[(0, 0)] = 0.5;
        assert!(SkeletonGraph::new(j.clone(), a, Matrix::zeros(3, 0)).is_err());
        let mut a = path3();
        a[(0, 1)] = 1.5;
        a[(1, 0)] = 1.5;
        assert!(SkeletonGraph::new(j, a, Matrix::zeros(3, 0)).is_err());
    }
}
