//! Procedural skeletons, point clouds sampled along their edges, and the
//! line-delimited dataset format.
//!
//! A dataset file starts with a header line `{"schema_version":1}` followed by
//! one JSON object per record with keys `id`, `category`, `points`,
//! `gt_joints`, `gt_edges` and `meta`. Coordinates are written in scientific
//! notation with 17 significant digits so they read back bit-exactly.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::graphcore::{BoxTransform, PointCloud, SkeletonGraph};
use crate::rng::Rng;

pub const SCHEMA_VERSION: u32 = 1;

/// Joint count of every generated skeleton unless a range is requested.
pub const DEFAULT_JOINTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Chain,
    Tree,
    Star,
    Cycle,
    BicycleLike,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Chain,
        Category::Tree,
        Category::Star,
        Category::Cycle,
        Category::BicycleLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chain => "chain",
            Category::Tree => "tree",
            Category::Star => "star",
            Category::Cycle => "cycle",
            Category::BicycleLike => "bicycle_like",
        }
    }

    pub fn min_joints(self) -> usize {
        match self {
            Category::Chain => 2,
            Category::Tree | Category::Star | Category::Cycle => 3,
            Category::BicycleLike => 8,
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category {s:?}")))
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Random rotation as an orthonormal frame.
fn random_frame(rng: &mut Rng) -> [[f64; 3]; 3] {
    let a = unit_vector(rng);
    let mut b = unit_vector(rng);
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    b = add(b, a, -d);
    let n = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt().max(1e-12);
    b = b.map(|x| x / n);
    let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    [a, b, c]
}

fn rotate(frame: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (axis, &coef) in frame.iter().zip(&p) {
        out = add(out, *axis, coef);
    }
    out
}

/// Joints (`N × 3`, raw coordinates) and edges `(i, j)`, `i < j`, sorted.
pub fn generate_skeleton(category: Category, n_joints: usize, seed: u64) -> Result<(Matrix, Vec<(usize, usize)>)> {
    if n_joints < category.min_joints() {
        return Err(Error::Parameter(format!(
            "{category} needs at least {} joints, got {n_joints}",
            category.min_joints()
        )));
    }
    let mut rng = Rng::new(seed);
    let n = n_joints;
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut edges = Vec::new();
    match category {
        Category::Chain => {
            let mut dir = unit_vector(&mut rng);
            pts.push([0.0; 3]);
            for i in 1..n {
                let turn = unit_vector(&mut rng);
                dir = add(dir, turn, 0.6);
                let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                dir = dir.map(|x| x / len);
                pts.push(add(pts[i - 1], dir, rng.range(0.8, 1.2)));
                edges.push((i - 1, i));
            }
        }
        Category::Tree => {
            pts.push([0.0; 3]);
            for i in 1..n {
                let parent = rng.below(i);
                let dir = unit_vector(&mut rng);
                pts.push(add(pts[parent], dir, rng.range(0.7, 1.3)));
                edges.push((parent, i));
            }
        }
        Category::Star => {
            pts.push([0.0; 3]);
            for i in 1..n {
                let dir = unit_vector(&mut rng);
                pts.push(add([0.0; 3], dir, rng.range(0.8, 1.2)));
                edges.push((0, i));
            }
        }
        Category::Cycle => {
            let frame = random_frame(&mut rng);
            let (a, b) = (rng.range(0.8, 1.2), rng.range(0.8, 1.2));
            let step = std::f64::consts::TAU / n as f64;
            for i in 0..n {
                let t = i as f64 * step + rng.range(-0.2, 0.2) * step;
                pts.push(rotate(&frame, [a * t.cos(), b * t.sin(), rng.range(-0.1, 0.1)]));
                edges.push(if i + 1 < n { (i, i + 1) } else { (0, i) });
            }
        }
        Category::BicycleLike => {
            let frame = random_frame(&mut rng);
            let radius = rng.range(0.6, 0.8);
            let gap = rng.range(2.2, 2.8);
            let mut local = Vec::with_capacity(n);
            for w in 0..2 {
                let cx = w as f64 * gap;
                let base = 4 * w;
                for k in 0..4 {
                    let t = k as f64 * std::f64::consts::FRAC_PI_2;
                    local.push([cx + radius * t.cos(), radius * t.sin(), 0.0]);
                    let next = base + (k + 1) % 4;
                    edges.push((base + k, next));
                }
            }
            // frame path from the top of the rear wheel (1) to the top of the front wheel (5)
            let inner = n - 8;
            let mut prev = 1;
            for s in 0..inner {
                let f = (s + 1) as f64 / (inner + 1) as f64;
                let lift = radius + 0.6 * (f * std::f64::consts::PI).sin();
                local.push([f * gap + rng.range(-0.1, 0.1), lift, rng.range(-0.1, 0.1)]);
                edges.push((prev, 8 + s));
                prev = 8 + s;
            }
            edges.push((prev, 5));
            pts.extend(local.into_iter().map(|p| rotate(&frame, p)));
        }
    }
    let mut edges: Vec<(usize, usize)> = edges.into_iter().map(|(i, j)| (i.min(j), i.max(j))).collect();
    edges.sort_unstable();
    let joints = Matrix::from_fn(n, 3, |r, c| pts[r][c]);
    Ok((joints, edges))
}

fn check_sampling(joints: &Matrix, edges: &[(usize, usize)], m_points: usize, noise_sigma: f64) -> Result<()> {
    if m_points == 0 {
        return Err(Error::Parameter("point count must be at least 1".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Parameter(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
    }
    if edges.is_empty() {
        return Err(Error::Parameter("skeleton has no edges to sample".into()));
    }
    if edges.iter().any(|&(i, j)| i >= joints.nrows() || j >= joints.nrows()) {
        return Err(Error::Parameter("edge references a missing joint".into()));
    }
    Ok(())
}

/// Points uniform along the skeleton by length plus isotropic Gaussian noise,
/// in the skeleton's raw coordinates.
pub fn sample_raw_points(
    joints: &Matrix,
    edges: &[(usize, usize)],
    m_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Matrix> {
    check_sampling(joints, edges, m_points, noise_sigma)?;
    let mut rng = Rng::new(seed);
    let seg = |i: usize, j: usize| -> f64 { (0..3).map(|c| (joints[(i, c)] - joints[(j, c)]).powi(2)).sum::<f64>().sqrt() };
    let mut cumulative = Vec::with_capacity(edges.len());
    let mut total = 0.0;
    for &(i, j) in edges {
        total += seg(i, j);
        cumulative.push(total);
    }
    let mut out = Matrix::zeros(m_points, 3);
    for r in 0..m_points {
        let s = rng.uniform() * total;
        let e = cumulative.partition_point(|&c| c <= s).min(edges.len() - 1);
        let (i, j) = edges[e];
        let start = if e == 0 { 0.0 } else { cumulative[e - 1] };
        let len = cumulative[e] - start;
        let t = if len > 0.0 { ((s - start) / len).clamp(0.0, 1.0) } else { 0.0 };
        for c in 0..3 {
            out[(r, c)] = joints[(i, c)] + t * (joints[(j, c)] - joints[(i, c)]);
        }
        if noise_sigma > 0.0 {
            for c in 0..3 {
                out[(r, c)] += noise_sigma * rng.normal();
            }
        }
    }
    Ok(out)
}

/// [`sample_raw_points`] re-normalized into the unit box.
pub fn sample_pointcloud(
    joints: &Matrix,
    edges: &[(usize, usize)],
    m_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    crate::graphcore::normalize_pointcloud(&sample_raw_points(joints, edges, m_points, noise_sigma, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub category: Category,
    pub points: Matrix,
    pub gt_joints: Matrix,
    pub gt_edges: Vec<(usize, usize)>,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn cloud(&self) -> PointCloud {
        PointCloud { points: self.points.clone() }
    }

    pub fn graph(&self) -> Result<SkeletonGraph> {
        SkeletonGraph::from_edges(self.gt_joints.clone(), &self.gt_edges)
    }

    /// Record invariants; violations name the record id.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Data(format!("record {}: {msg}", self.id));
        for (name, m) in [("points", &self.points), ("gt_joints", &self.gt_joints)] {
            if m.nrows() == 0 || m.ncols() != 3 {
                return Err(bad(format!("{name} must be a non-empty N x 3 array")));
            }
            if m.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(bad(format!("{name} outside the unit box")));
            }
        }
        let n = self.gt_joints.nrows();
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (k, &(i, j)) in self.gt_edges.iter().enumerate() {
            if i >= j || j >= n {
                return Err(bad(format!("edge ({i}, {j}) must satisfy i < j < {n}")));
            }
            if k > 0 && self.gt_edges[..k].contains(&(i, j)) {
                return Err(bad(format!("duplicate edge ({i}, {j})")));
            }
            let (a, b) = (root(&mut parent, i), root(&mut parent, j));
            parent[a] = b;
        }
        let r0 = root(&mut parent, 0);
        if (0..n).any(|x| root(&mut parent, x) != r0) {
            return Err(bad("ground-truth graph is disconnected".into()));
        }
        Ok(())
    }
}

/// Builds one record; the box transform is fitted on points and joints
/// together so both land in the unit box under the same map.
pub fn make_record(
    id: String,
    category: Category,
    n_joints: usize,
    m_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SampleRecord> {
    let mut rng = Rng::new(seed);
    let skel_seed = rng.next_u64();
    let cloud_seed = rng.next_u64();
    let (joints, edges) = generate_skeleton(category, n_joints, skel_seed)?;
    let raw = sample_raw_points(&joints, &edges, m_points, noise_sigma, cloud_seed)?;
    let mut both = Matrix::zeros(raw.nrows() + joints.nrows(), 3);
    both.rows_mut(0, raw.nrows()).copy_from(&raw);
    both.rows_mut(raw.nrows(), joints.nrows()).copy_from(&joints);
    let t = BoxTransform::fit(&both)?;
    let clamp = |m: Matrix| m.map(|x| x.clamp(0.0, 1.0));
    Ok(SampleRecord {
        id,
        category,
        points: clamp(t.apply(&raw)),
        gt_joints: clamp(t.apply(&joints)),
        gt_edges: edges,
        meta: SampleMeta { seed, degenerate: t.degenerate },
    })
}

/// Inputs of [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub categories: Vec<Category>,
    pub count: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
    /// Each record draws its joint count uniformly from
    /// `[max(min_joints, category minimum), max_joints]`.
    pub min_joints: usize,
    pub max_joints: usize,
}

/// Categories cycle in the listed order; every record gets its own seed
/// from the dataset seed.
pub fn generate_dataset(ds: &DatasetSpec) -> Result<Vec<SampleRecord>> {
    if ds.categories.is_empty() {
        return Err(Error::Config("at least one category is required".into()));
    }
    if ds.min_joints > ds.max_joints {
        return Err(Error::Config(format!(
            "joint range [{}, {}] is empty",
            ds.min_joints, ds.max_joints
        )));
    }
    for &c in &ds.categories {
        if c.min_joints() > ds.max_joints {
            return Err(Error::Config(format!(
                "{c} needs {} joints, above the limit {}",
                c.min_joints(),
                ds.max_joints
            )));
        }
    }
    let mut master = Rng::new(ds.seed);
    (0..ds.count)
        .map(|i| {
            let category = ds.categories[i % ds.categories.len()];
            let seed = master.next_u64();
            let lo = category.min_joints().max(ds.min_joints);
            let n = lo + Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15).below(ds.max_joints - lo + 1);
            make_record(format!("{category}-{i:05}"), category, n, ds.points, ds.noise, seed)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split {other:?}"))),
        }
    }
}

/// 80/10/10 by the first eight bytes of SHA-256 of the id, modulo 10.
pub fn split_of(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let bucket = u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes")) % 10;
    match bucket {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn filter_split(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| split_of(&r.id) == split).cloned().collect()
}

fn push_rows(out: &mut String, m: &Matrix) {
    out.push('[');
    for r in 0..m.nrows() {
        if r > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{:.16e},{:.16e},{:.16e}]", m[(r, 0)], m[(r, 1)], m[(r, 2)]);
    }
    out.push(']');
}

/// One record as a single JSON line (no trailing newline).
pub fn record_to_line(r: &SampleRecord) -> String {
    let mut s = String::with_capacity(64 * (r.points.nrows() + r.gt_joints.nrows()));
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&r.id).expect("strings serialize"));
    let _ = write!(s, ",\"category\":\"{}\",\"points\":", r.category);
    push_rows(&mut s, &r.points);
    s.push_str(",\"gt_joints\":");
    push_rows(&mut s, &r.gt_joints);
    s.push_str(",\"gt_edges\":[");
    for (k, (i, j)) in r.gt_edges.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "[{i},{j}]");
    }
    let _ = write!(
        s,
        "],\"meta\":{{\"seed\":{},\"degenerate\":{}}}}}",
        r.meta.seed, r.meta.degenerate
    );
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    category: Category,
    points: Vec<[f64; 3]>,
    gt_joints: Vec<[f64; 3]>,
    gt_edges: Vec<(usize, usize)>,
    meta: SampleMeta,
}

#[derive(Deserialize)]
struct Header {
    schema_version: u32,
}

fn rows_to_matrix(rows: &[[f64; 3]]) -> Matrix {
    Matrix::from_fn(rows.len(), 3, |r, c| rows[r][c])
}

/// Parses one record line and checks its invariants.
pub fn record_from_line(line: &str, line_no: usize) -> Result<SampleRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let rec = SampleRecord {
        id: raw.id,
        category: raw.category,
        points: rows_to_matrix(&raw.points),
        gt_joints: rows_to_matrix(&raw.gt_joints),
        gt_edges: raw.gt_edges,
        meta: raw.meta,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn write_dataset(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for r in records {
        r.validate()?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{{\"schema_version\":{SCHEMA_VERSION}}}").map_err(io)?;
    for r in records {
        writeln!(w, "{}", record_to_line(r)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Records in file order. Blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header line".into(),
            })
        }
    };
    let header: Header = serde_json::from_str(&header).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported schema_version {}", header.schema_version),
        });
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(record_from_line(&line, k + 2)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphcore::laplacian_matrix;
    use crate::spectral::eigh_matrix;

    fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
        let len2 = ab.iter().map(|x| x * x).sum::<f64>();
        let t = if len2 > 0.0 {
            (ab.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3).map(|c| (a[c] + t * ab[c] - p[c]).powi(2)).sum::<f64>().sqrt()
    }

    fn connected_components(n: usize, edges: &[(usize, usize)]) -> usize {
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &(i, j) in edges {
                    let v = if i == u { j } else if j == u { i } else { continue };
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn category_topologies() {
        for seed in 0..20 {
            let (_, e) = generate_skeleton(Category::Chain, 2, seed).unwrap();
            assert_eq!(e, vec![(0, 1)]);
            for n in 3..=12 {
                let (_, e) = generate_skeleton(Category::Tree, n, seed).unwrap();
                assert_eq!(e.len(), n - 1);
                assert_eq!(connected_components(n, &e), 1);
                let (_, e) = generate_skeleton(Category::Star, n, seed).unwrap();
                assert!(e.iter().all(|&(i, _)| i == 0) && e.len() == n - 1);
                let (j, e) = generate_skeleton(Category::Cycle, n, seed).unwrap();
                assert_eq!(e.len(), n);
                let g = SkeletonGraph::from_edges(j, &e).unwrap();
                let eig = eigh_matrix(&laplacian_matrix(&g.adjacency).unwrap()).unwrap().eigenvalues;
                assert_eq!(eig.iter().filter(|&&x| x < 1e-8).count(), 1);
            }
            for n in 8..=12 {
                let (_, e) = generate_skeleton(Category::BicycleLike, n, seed).unwrap();
                assert!(e.len() + 1 >= n + 2, "cyclomatic number below 2");
                assert_eq!(connected_components(n, &e), 1);
            }
        }
        assert!(generate_skeleton(Category::BicycleLike, 7, 0).is_err());
        assert!(generate_skeleton(Category::Chain, 1, 0).is_err());
    }

    #[test]
    fn noiseless_points_lie_on_edges() {
        let (j, e) = generate_skeleton(Category::Tree, 7, 3).unwrap();
        let pts = sample_raw_points(&j, &e, 500, 0.0, 4).unwrap();
        let row = |m: &Matrix, r: usize| [m[(r, 0)], m[(r, 1)], m[(r, 2)]];
        for r in 0..pts.nrows() {
            let d = e
                .iter()
                .map(|&(a, b)| point_segment_distance(row(&pts, r), row(&j, a), row(&j, b)))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
        let single = Matrix::from_row_slice(2, 3, &[0., 0., 0., 1., 2., 3.]);
        let one = sample_raw_points(&single, &[(0, 1)], 1, 0.0, 1).unwrap();
        assert_eq!(one.nrows(), 1);
        assert!(point_segment_distance(row(&one, 0), [0.; 3], [1., 2., 3.]) < 1e-12);
        assert!(sample_raw_points(&single, &[(0, 1)], 0, 0.0, 1).is_err());
        assert!(sample_raw_points(&single, &[(0, 1)], 5, -1.0, 1).is_err());
    }

    #[test]
    fn records_are_valid_and_deterministic() {
        let ds = DatasetSpec {
            categories: Category::ALL.to_vec(),
            count: 25,
            points: 64,
            noise: 0.01,
            seed: 9,
            min_joints: 2,
            max_joints: 12,
        };
        let a = generate_dataset(&ds).unwrap();
        let b = generate_dataset(&ds).unwrap();
        assert_eq!(a, b);
        for r in &a {
            r.validate().unwrap();
            assert!(r.gt_joints.nrows() <= 12 && r.gt_joints.nrows() >= r.category.min_joints());
            r.graph().unwrap();
        }
        let cats: std::collections::HashSet<_> = a.iter().map(|r| r.category).collect();
        assert_eq!(cats.len(), 5);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{\"schema_version\":1}\n");
        assert!(read_dataset(&path).unwrap().is_empty());

        let mut rec = make_record("x\"y".into(), Category::Cycle, 5, 40, 0.02, 77).unwrap();
        rec.points[(0, 0)] = 0.1 + 0.2;
        rec.points[(1, 1)] = f64::MIN_POSITIVE;
        write_dataset(std::slice::from_ref(&rec), &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 1);
        let bits = |m: &Matrix| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].points), bits(&rec.points));
        assert_eq!(bits(&back[0].gt_joints), bits(&rec.gt_joints));
        assert_eq!(back[0], rec);
    }

    #[test]
    fn malformed_lines_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let rec = make_record("ok".into(), Category::Chain, 3, 10, 0.0, 1).unwrap();
        std::fs::write(&path, format!("{{\"schema_version\":1}}\n{}\nnot json\n", record_to_line(&rec))).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 3, .. })));

        let mut broken = rec.clone();
        broken.gt_edges.push((2, 1));
        std::fs::write(&path, format!("{{\"schema_version\":1}}\n{}\n", record_to_line(&broken))).unwrap();
        match read_dataset(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("ok")),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "{\"schema_version\":2}\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn splits_are_stable_and_roughly_proportional() {
        let ids: Vec<String> = (0..2000).map(|i| format!("chain-{i:05}")).collect();
        let train = ids.iter().filter(|i| split_of(i) == Split::Train).count();
        let val = ids.iter().filter(|i| split_of(i) == Split::Val).count();
        assert!((1500..1700).contains(&train), "{train}");
        assert!((150..250).contains(&val), "{val}");
        assert_eq!(split_of("chain-00001"), split_of("chain-00001"));
    }
}
