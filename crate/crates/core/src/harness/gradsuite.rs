//! Randomized finite-difference checks of every differentiable building
//! block, plus an independent check of eigenvalue derivatives.

use crate::adversarial::{adversarial_losses, DiscriminatorParams};
use crate::attention::{gat_layer, GatLayerParams};
use crate::dgcn::{build_adjacency, EdgeMlpParams};
use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradReport, Perturb, Tolerance};
use crate::graphcore::{laplacian, laplacian_matrix, DiffSkeleton, SkeletonGraph};
use crate::metrics::match_nodes;
use crate::nn::{Activation, ParamStore};
use crate::rng::Rng;
use crate::spectral::{eigh, eigh_matrix, spectral_loss_aligned};

pub const MIN_TRIALS: usize = 100;
const STEP: f64 = 1e-6;
/// Smallest eigenvalue gap accepted for spectral checks.
pub const MIN_EIGEN_GAP: f64 = 1e-3;
/// Distance kept from kinks and clamp bounds.
const KINK_MARGIN: f64 = 0.05;

pub const DIFFCORE_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "leaky_relu",
    "exp",
    "log",
    "square",
    "abs",
    "scale",
    "transpose",
    "rowsoftmax_masked",
    "concat_rows",
    "concat_cols",
    "slice",
    "reshape",
    "sum",
    "mean",
    "trace",
    "frobenius_sq",
    "l2_norm",
    "row_norms",
    "gather_rows",
    "scatter",
    "segment_max",
    "diag",
    "broadcast_rows",
    "broadcast_scalar",
    "mul_scalar",
    "clamp",
    "add_row",
    "custom",
];

pub const COMPOSITE_SUITES: &[&str] = &["build_adjacency", "gat_layer", "spectral_loss", "adversarial"];

/// Every suite name, diffcore ops prefixed with `diffcore.`.
pub fn suite_names() -> Vec<String> {
    DIFFCORE_OPS
        .iter()
        .map(|op| format!("diffcore.{op}"))
        .chain(COMPOSITE_SUITES.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub max_error: f64,
    pub failed_trials: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0 && self.checked > 0
    }
}

/// Runs `trials` random instances of one named suite.
pub fn run_suite(name: &str, trials: usize, seed: u64) -> Result<SuiteReport> {
    let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = Rng::new(seed ^ salt);
    let mut report = SuiteReport {
        name: name.to_string(),
        trials,
        checked: 0,
        max_error: 0.0,
        failed_trials: 0,
    };
    for trial in 0..trials {
        let r = match name.strip_prefix("diffcore.") {
            Some(op) => diffcore_trial(op, &mut rng, trial)?,
            None => match name {
                "build_adjacency" => adjacency_trial(&mut rng)?,
                "gat_layer" => gat_trial(&mut rng)?,
                "spectral_loss" => spectral_trial(&mut rng)?,
                "adversarial" => adversarial_trial(&mut rng)?,
                _ => return Err(Error::Config(format!("unknown gradient suite '{name}'"))),
            },
        };
        report.checked += r.checked;
        report.max_error = report.max_error.max(r.max_error);
        if !r.passed() {
            report.failed_trials += 1;
        }
    }
    Ok(report)
}

pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    suite_names().iter().map(|n| run_suite(n, trials, seed)).collect()
}

fn uniform(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.range(lo, hi))
}

/// Uniform entries in `[lo, hi]` at least `KINK_MARGIN` away from every kink.
fn away_from(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64, kinks: &[f64]) -> Matrix {
    Matrix::from_fn(r, c, |_, _| loop {
        let x = rng.range(lo, hi);
        if kinks.iter().all(|k| (x - k).abs() > KINK_MARGIN) {
            break x;
        }
    })
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// `Σ out ⊙ W` with fixed pseudo-random weights, so every output entry
/// contributes to the checked scalar.
fn readout(t: &mut Tape, out: DiffValue, salt: usize) -> Result<DiffValue> {
    let (r, c) = t.shape(out);
    let w = Matrix::from_fn(r, c, |i, j| {
        let x = ((i * 31 + j * 17 + salt * 7 + 3) as f64 * 0.618_033_988_749_895).fract();
        2.0 * x - 1.0
    });
    let w = t.constant(w);
    let m = t.mul(out, w)?;
    Ok(t.sum(m))
}

fn check<F>(inputs: &[Matrix], perturb: &[Perturb], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[DiffValue]) -> Result<DiffValue>,
{
    check_gradients(inputs, perturb, STEP, Tolerance::default(), f)
}

fn entry_check<F>(inputs: &[Matrix], salt: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[DiffValue]) -> Result<DiffValue>,
{
    check(inputs, &[], |t, l| {
        let out = f(t, l)?;
        readout(t, out, salt)
    })
}

fn diffcore_trial(op: &str, rng: &mut Rng, salt: usize) -> Result<GradReport> {
    let r = dim(rng, 1, 5);
    let c = dim(rng, 1, 5);
    let x = uniform(rng, r, c, -2.0, 2.0);
    match op {
        "matmul" => {
            let k = dim(rng, 1, 5);
            let a = uniform(rng, r, k, -2.0, 2.0);
            let b = uniform(rng, k, c, -2.0, 2.0);
            entry_check(&[a, b], salt, |t, l| Ok(t.matmul(l[0], l[1])?))
        }
        "add" | "sub" | "mul" => {
            let y = uniform(rng, r, c, -2.0, 2.0);
            entry_check(&[x, y], salt, |t, l| {
                Ok(match op {
                    "add" => t.add(l[0], l[1])?,
                    "sub" => t.sub(l[0], l[1])?,
                    _ => t.mul(l[0], l[1])?,
                })
            })
        }
        "sigmoid" => entry_check(&[x], salt, |t, l| Ok(t.sigmoid(l[0]))),
        "leaky_relu" => {
            let slope = rng.range(0.01, 0.5);
            let x = away_from(rng, r, c, -2.0, 2.0, &[0.0]);
            entry_check(&[x], salt, |t, l| Ok(t.leaky_relu(l[0], slope)))
        }
        "exp" => entry_check(&[x], salt, |t, l| Ok(t.exp(l[0]))),
        "log" => {
            let x = uniform(rng, r, c, 0.2, 3.0);
            entry_check(&[x], salt, |t, l| Ok(t.log(l[0])?))
        }
        "square" => entry_check(&[x], salt, |t, l| Ok(t.square(l[0]))),
        "abs" => {
            let x = away_from(rng, r, c, -2.0, 2.0, &[0.0]);
            entry_check(&[x], salt, |t, l| Ok(t.abs(l[0])))
        }
        "scale" => {
            let s = rng.range(-3.0, 3.0);
            entry_check(&[x], salt, |t, l| Ok(t.scale(l[0], s)))
        }
        "transpose" => entry_check(&[x], salt, |t, l| Ok(t.transpose(l[0]))),
        "rowsoftmax_masked" => {
            let mask: Vec<Vec<bool>> = (0..r)
                .map(|_| {
                    let keep = rng.below(c);
                    (0..c).map(|j| j == keep || rng.uniform() < 0.6).collect()
                })
                .collect();
            entry_check(&[x], salt, |t, l| Ok(t.rowsoftmax_masked(l[0], &mask)?))
        }
        "concat_rows" => {
            let rows = dim(rng, 1, 4);
            let y = uniform(rng, rows, c, -2.0, 2.0);
            entry_check(&[x, y], salt, |t, l| Ok(t.concat_rows(&[l[0], l[1], l[0]])?))
        }
        "concat_cols" => {
            let cols = dim(rng, 1, 4);
            let y = uniform(rng, r, cols, -2.0, 2.0);
            entry_check(&[x, y], salt, |t, l| Ok(t.concat_cols(&[l[1], l[0]])?))
        }
        "slice" => {
            let r0 = rng.below(r);
            let c0 = rng.below(c);
            let rows = 1 + rng.below(r - r0);
            let cols = 1 + rng.below(c - c0);
            entry_check(&[x], salt, |t, l| Ok(t.slice(l[0], (r0, c0), (rows, cols))?))
        }
        "reshape" => {
            let len = r * c;
            let divisors: Vec<usize> = (1..=len).filter(|d| len.is_multiple_of(*d)).collect();
            let nr = divisors[rng.below(divisors.len())];
            entry_check(&[x], salt, |t, l| Ok(t.reshape(l[0], nr, len / nr)?))
        }
        "sum" => entry_check(&[x], salt, |t, l| Ok(t.sum(l[0]))),
        "mean" => entry_check(&[x], salt, |t, l| Ok(t.mean(l[0]))),
        "trace" => {
            let x = uniform(rng, r, r, -2.0, 2.0);
            entry_check(&[x], salt, |t, l| Ok(t.trace(l[0])?))
        }
        "frobenius_sq" => entry_check(&[x], salt, |t, l| Ok(t.frobenius_sq(l[0]))),
        "l2_norm" => {
            let x = away_from(rng, r, c, -2.0, 2.0, &[0.0]);
            entry_check(&[x], salt, |t, l| Ok(t.l2_norm(l[0])))
        }
        "row_norms" => {
            let x = away_from(rng, r, c, -2.0, 2.0, &[0.0]);
            entry_check(&[x], salt, |t, l| Ok(t.row_norms(l[0])))
        }
        "gather_rows" => {
            let rows: Vec<usize> = (0..dim(rng, 1, 7)).map(|_| rng.below(r)).collect();
            entry_check(&[x], salt, |t, l| Ok(t.gather_rows(l[0], &rows)?))
        }
        "scatter" => {
            let (rows, cols) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let positions: Vec<(usize, usize)> = (0..dim(rng, 1, 8)).map(|_| (rng.below(rows), rng.below(cols))).collect();
            let x = uniform(rng, positions.len(), 1, -2.0, 2.0);
            entry_check(&[x], salt, |t, l| Ok(t.scatter(l[0], &positions, rows, cols)?))
        }
        "segment_max" => {
            let n = dim(rng, 2, 8);
            // Distinct levels per column keep every comparison far from a tie.
            let mut x = Matrix::zeros(n, c);
            for j in 0..c {
                let mut levels: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut levels);
                for (i, &lv) in levels.iter().enumerate() {
                    x[(i, j)] = lv as f64 * 0.5 + rng.range(-0.1, 0.1);
                }
            }
            let segments: Vec<Vec<usize>> = (0..dim(rng, 1, 4))
                .map(|_| (0..dim(rng, 1, n)).map(|_| rng.below(n)).collect())
                .collect();
            entry_check(&[x], salt, |t, l| Ok(t.segment_max(l[0], &segments)?))
        }
        "diag" => {
            let x = uniform(rng, r, 1, -2.0, 2.0);
            entry_check(&[x], salt, |t, l| Ok(t.diag(l[0])?))
        }
        "broadcast_rows" => {
            let x = uniform(rng, 1, c, -2.0, 2.0);
            entry_check(&[x], salt, |t, l| Ok(t.broadcast_rows(l[0], r)?))
        }
        "broadcast_scalar" => {
            let s = uniform(rng, 1, 1, -2.0, 2.0);
            entry_check(&[s], salt, |t, l| Ok(t.broadcast_scalar(l[0], r, c)?))
        }
        "mul_scalar" => {
            let s = uniform(rng, 1, 1, -2.0, 2.0);
            entry_check(&[x, s], salt, |t, l| Ok(t.mul_scalar(l[0], l[1])?))
        }
        "clamp" => {
            let x = away_from(rng, r, c, -2.0, 2.0, &[-0.5, 0.75]);
            entry_check(&[x], salt, |t, l| Ok(t.clamp(l[0], -0.5, 0.75)))
        }
        "add_row" => {
            let b = uniform(rng, 1, c, -2.0, 2.0);
            entry_check(&[x, b], salt, |t, l| Ok(t.add_row(l[0], l[1])?))
        }
        "custom" => {
            // Elementwise x·y² with a hand-written product rule.
            let y = uniform(rng, r, c, -2.0, 2.0);
            entry_check(&[x, y], salt, |t, l| {
                let (xv, yv) = (t.value(l[0]).clone(), t.value(l[1]).clone());
                let value = xv.component_mul(&yv.component_mul(&yv));
                let vjp = Box::new(move |g: &Matrix| {
                    vec![g.component_mul(&yv.component_mul(&yv)), g.component_mul(&xv.component_mul(&yv)) * 2.0]
                });
                Ok(t.custom(&[l[0], l[1]], value, vjp))
            })
        }
        _ => Err(Error::Config(format!("unknown diffcore op '{op}'"))),
    }
}

fn adjacency_trial(rng: &mut Rng) -> Result<GradReport> {
    let n = dim(rng, 2, 6);
    let f = dim(rng, 1, 4);
    let hidden = [dim(rng, 3, 8)];
    let mut store = ParamStore::new();
    let params = EdgeMlpParams::new(&mut store, rng, f, &hidden, Activation::LeakyRelu(0.2));
    let w = params.mlp.layers[0].weight;
    let joints = uniform(rng, n, 3, 0.0, 1.0);
    let feats = uniform(rng, n, f, -1.0, 1.0);
    check(&[joints, feats, store.get(w).clone()], &[], |t, l| {
        let p = store.bind(t).with(w, l[2]);
        let a = build_adjacency(t, &p, l[1], l[0], &params)?;
        readout(t, a, n)
    })
}

fn random_mask(rng: &mut Rng, n: usize) -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let e = rng.uniform() < 0.5;
            m[i][j] = e;
            m[j][i] = e;
        }
    }
    m
}

fn gat_trial(rng: &mut Rng) -> Result<GradReport> {
    let n = dim(rng, 2, 6);
    let f_in = dim(rng, 1, 5);
    let f_out = dim(rng, 1, 5);
    let gated = rng.uniform() < 0.5;
    let mut store = ParamStore::new();
    let params = GatLayerParams::new(&mut store, rng, 0, f_in, f_out, gated);
    if let Some(g) = params.gate {
        store.get_mut(g)[(0, 0)] = rng.range(-2.0, 2.0);
    }
    let mask = random_mask(rng, n);
    let feats = uniform(rng, n, f_in, -1.0, 1.0);
    let ids = params.params();
    let mut inputs = vec![feats];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    check(&inputs, &[], |t, l| {
        let mut p = store.bind(t);
        for (k, &id) in ids.iter().enumerate() {
            p = p.with(id, l[k + 1]);
        }
        let out = gat_layer(t, &p, l[0], &mask, &params, true)?;
        readout(t, out.features, n)
    })
}

fn symmetric_weights(rng: &mut Rng, n: usize) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = rng.uniform();
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
    }
    a
}

fn min_gap(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Random soft adjacency whose Laplacian spectrum is well separated.
fn separated_adjacency(rng: &mut Rng, n: usize) -> Result<Matrix> {
    loop {
        let a = symmetric_weights(rng, n);
        let eig = eigh_matrix(&laplacian_matrix(&a)?)?;
        if min_gap(eig.eigenvalues.as_slice()) > MIN_EIGEN_GAP {
            return Ok(a);
        }
    }
}

fn binary_adjacency(rng: &mut Rng, n: usize) -> Matrix {
    let m = random_mask(rng, n);
    Matrix::from_fn(n, n, |i, j| if m[i][j] { 1.0 } else { 0.0 })
}

fn spectral_trial(rng: &mut Rng) -> Result<GradReport> {
    let n_pred = dim(rng, 2, 7);
    let n_gt = dim(rng, 2, 7);
    let a = separated_adjacency(rng, n_pred)?;
    let l_gt = laplacian_matrix(&binary_adjacency(rng, n_gt))?;
    let gt_spectrum: Vec<f64> = eigh_matrix(&l_gt)?.eigenvalues.as_slice().to_vec();
    let k = dim(rng, 1, n_pred.max(n_gt));
    let alpha = rng.range(-1.0, 1.0);
    let aligned = laplacian_matrix(&binary_adjacency(rng, n_pred))?;
    check(&[a], &[Perturb::Symmetric], |t, l| {
        let lp = laplacian(t, l[0])?;
        spectral_loss_aligned(t, lp, &gt_spectrum, Some(&aligned), Some(k), alpha)
    })
}

fn adversarial_trial(rng: &mut Rng) -> Result<GradReport> {
    let n_pred = dim(rng, 2, 6);
    let n_gt = dim(rng, 2, 6);
    let k = dim(rng, 1, 6);
    let bins = dim(rng, 1, 6);
    let mut store = ParamStore::new();
    let hidden = [dim(rng, 3, 10)];
    let disc = DiscriminatorParams::new(&mut store, rng, k, bins, &hidden, 0.2)?;
    let pred = SkeletonGraph::new(
        uniform(rng, n_pred, 3, 0.0, 1.0),
        separated_adjacency(rng, n_pred)?,
        Matrix::zeros(n_pred, 0),
    )?;
    let gt = SkeletonGraph::new(
        uniform(rng, n_gt, 3, 0.0, 1.0),
        binary_adjacency(rng, n_gt),
        Matrix::zeros(n_gt, 0),
    )?;
    let pairs = match_nodes(&pred.joints, &gt.joints);
    let w = disc.mlp.layers[0].weight;
    let inputs = [pred.joints.clone(), pred.adjacency.clone(), store.get(w).clone()];
    check(&inputs, &[Perturb::Entry, Perturb::Symmetric, Perturb::Entry], |t, l| {
        let p = store.bind(t).with(w, l[2]);
        let ps = DiffSkeleton {
            joints: l[0],
            adjacency: l[1],
            features: l[0],
        };
        let gs = DiffSkeleton::constant(t, &gt);
        let losses = adversarial_losses(t, &p, &ps, &gs, &pairs, &disc)?;
        let g = t.scale(losses.generator, 0.7);
        let d = t.scale(losses.discriminator, 0.3);
        Ok(t.add(g, d)?)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenCheck {
    pub matrices: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl EigenCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

/// Compares the backward pass of the eigendecomposition against central
/// differences of every eigenvalue of `count` random symmetric `n × n`
/// matrices with gaps above [`MIN_EIGEN_GAP`].
pub fn eigenvalue_gradient_check(count: usize, n: usize, seed: u64, tolerance: f64) -> Result<EigenCheck> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < count {
        let m = uniform(&mut rng, n, n, -1.0, 1.0);
        let s = (&m + m.transpose()) * 0.5;
        let base = eigh_matrix(&s)?;
        if min_gap(base.eigenvalues.as_slice()) <= MIN_EIGEN_GAP {
            continue;
        }
        done += 1;
        for k in 0..n {
            let mut tape = Tape::new();
            let leaf = tape.leaf(s.clone());
            let (eig, _) = eigh(&mut tape, leaf)?;
            let root = tape.slice(eig, (k, 0), (1, 1))?;
            tape.backward(root)?;
            let g = tape.grad(leaf);
            for i in 0..n {
                for j in i..n {
                    let bumped = |d: f64| -> Result<f64> {
                        let mut p = s.clone();
                        p[(i, j)] += d;
                        if i != j {
                            p[(j, i)] += d;
                        }
                        Ok(eigh_matrix(&p)?.eigenvalues[k])
                    };
                    let numeric = (bumped(STEP)? - bumped(-STEP)?) / (2.0 * STEP);
                    let analytic = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                    worst = worst.max((numeric - analytic).abs());
                }
            }
        }
    }
    Ok(EigenCheck {
        matrices: count,
        max_abs_error: worst,
        tolerance,
    })
}
