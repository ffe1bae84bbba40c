//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so every line is printed; exits non-zero if any criterion fails.

use std::time::Instant;

use skelsynth::attention::{gat_layer, GatLayerParams};
use skelsynth::diffcore::{Matrix, Tape};
use skelsynth::graphcore::{laplacian, laplacian_matrix, SkeletonGraph};
use skelsynth::harness::{
    ablate, eigenvalue_gradient_check, evaluate_checkpoint, run_all, train, Checkpoint, TrainConfig, TrainOptions,
    MIN_TRIALS,
};
use skelsynth::metrics::{evaluate_pair, exact_ged, mapped_edit_cost, match_nodes, EdgeGraph, MetricSettings};
use skelsynth::nn::ParamStore;
use skelsynth::rng::Rng;
use skelsynth::spectral::{eigh_matrix, spectral_loss};
use skelsynth::synthdata::{
    generate_dataset, generate_skeleton, read_dataset, write_dataset, Category, DatasetSpec, SampleRecord, Split,
};

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn training_data() -> Vec<SampleRecord> {
    generate_dataset(&DatasetSpec {
        categories: Category::ALL.to_vec(),
        count: 200,
        points: 256,
        noise: 0.01,
        seed: 42,
        min_joints: 12,
        max_joints: 12,
    })
    .expect("dataset")
}

fn gradient_suites() -> Outcome {
    let start = Instant::now();
    let reports = run_all(MIN_TRIALS, 0).expect("suites");
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let min_trials = reports.iter().map(|r| r.trials).min().unwrap_or(0);
    outcome(
        failed.is_empty() && min_trials >= MIN_TRIALS && elapsed < 60.0,
        format!(
            "{} suites, >= {min_trials} trials each, failing {failed:?}, {elapsed:.1}s",
            reports.len()
        ),
    )
}

fn eigen_derivatives() -> Outcome {
    let r = eigenvalue_gradient_check(50, 8, 7, 1e-5).expect("eigen check");
    outcome(
        r.passed(),
        format!("{} matrices, max abs error {:.2e}", r.matrices, r.max_abs_error),
    )
}

fn soft_adjacency(rng: &mut Rng, n: usize) -> Matrix {
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

fn permute(a: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(perm[i], perm[j])])
}

fn laplacian_invariants() -> Outcome {
    let mut rng = Rng::new(3);
    let (mut row_sum, mut min_eig, mut self_loss, mut perm_gap): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let n = 2 + rng.below(11);
        let a = soft_adjacency(&mut rng, n);
        let l = laplacian_matrix(&a).expect("laplacian");
        for i in 0..n {
            row_sum = row_sum.max(l.row(i).sum().abs());
        }
        min_eig = min_eig.min(eigh_matrix(&l).expect("eigh").eigenvalues[0]);
        let k = 1 + rng.below(n);
        let mut t = Tape::new();
        let lv = t.leaf(l.clone());
        let s = spectral_loss(&mut t, lv, &l, Some(k), 0.0).expect("loss");
        self_loss = self_loss.max(t.scalar(s).abs());

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let gt = laplacian_matrix(&soft_adjacency(&mut rng, n)).expect("laplacian");
        let loss_of = |adj: &Matrix| {
            let mut t = Tape::new();
            let av = t.leaf(adj.clone());
            let lp = laplacian(&mut t, av).expect("laplacian");
            let s = spectral_loss(&mut t, lp, &gt, Some(k), 0.0).expect("loss");
            t.scalar(s)
        };
        perm_gap = perm_gap.max((loss_of(&a) - loss_of(&permute(&a, &perm))).abs());
    }
    outcome(
        row_sum <= 1e-9 && min_eig >= -1e-8 && self_loss == 0.0 && perm_gap <= 1e-9,
        format!(
            "1000 graphs: max |row sum| {row_sum:.1e}, min eigenvalue {min_eig:.1e}, self loss {self_loss:.1e}, permutation gap {perm_gap:.1e}"
        ),
    )
}

fn random_graph(rng: &mut Rng, n: usize) -> EdgeGraph {
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

/// Unit-cost edit distance by enumerating every partial injection `a → b`.
fn brute_force_ged(a: &EdgeGraph, b: &EdgeGraph) -> usize {
    fn cost(a: &EdgeGraph, b: &EdgeGraph, map: &[Option<usize>]) -> usize {
        let mut inv = vec![None; b.nodes];
        for (i, m) in map.iter().enumerate() {
            if let Some(j) = *m {
                inv[j] = Some(i);
            }
        }
        let mut c = map.iter().filter(|m| m.is_none()).count() + inv.iter().filter(|m| m.is_none()).count();
        for &(i, j) in a.edges() {
            match (map[i], map[j]) {
                (Some(u), Some(v)) if b.has_edge(u, v) => {}
                _ => c += 1,
            }
        }
        for &(u, v) in b.edges() {
            match (inv[u], inv[v]) {
                (Some(i), Some(j)) if a.has_edge(i, j) => {}
                _ => c += 1,
            }
        }
        c
    }
    fn go(a: &EdgeGraph, b: &EdgeGraph, map: &mut Vec<Option<usize>>, used: &mut Vec<bool>, best: &mut usize) {
        if map.len() == a.nodes {
            *best = (*best).min(cost(a, b, map));
            return;
        }
        map.push(None);
        go(a, b, map, used, best);
        map.pop();
        for j in 0..b.nodes {
            if !used[j] {
                used[j] = true;
                map.push(Some(j));
                go(a, b, map, used, best);
                map.pop();
                used[j] = false;
            }
        }
    }
    let mut best = usize::MAX;
    go(a, b, &mut Vec::new(), &mut vec![false; b.nodes], &mut best);
    best
}

fn edit_distance() -> Outcome {
    let mut rng = Rng::new(4);
    let (mut mismatches, mut below) = (0, 0);
    for _ in 0..200 {
        let (na, nb) = (1 + rng.below(6), 1 + rng.below(6));
        let (a, b) = (random_graph(&mut rng, na), random_graph(&mut rng, nb));
        let exact = exact_ged(&a, &b);
        if exact != brute_force_ged(&a, &b) {
            mismatches += 1;
        }
        let ja = Matrix::from_fn(na, 3, |_, _| rng.uniform());
        let jb = Matrix::from_fn(nb, 3, |_, _| rng.uniform());
        if mapped_edit_cost(&a, &b, &match_nodes(&ja, &jb)) < exact {
            below += 1;
        }
    }
    outcome(
        mismatches == 0 && below == 0,
        format!("200 pairs: {mismatches} exact/brute-force mismatches, {below} approximations below exact"),
    )
}

fn metric_identities() -> Outcome {
    let settings = MetricSettings::default();
    let mut rng = Rng::new(5);
    let mut bad = Vec::new();
    for cat in Category::ALL {
        for n in [cat.min_joints(), 8, 12] {
            let (joints, edges) = generate_skeleton(cat, n, rng.next_u64()).expect("skeleton");
            let g = SkeletonGraph::from_edges(joints.clone(), &edges).expect("graph");
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let pj = Matrix::from_fn(n, 3, |i, c| joints[(perm[i], c)]);
            let relabeled = SkeletonGraph::new(pj, permute(&g.adjacency, &perm), Matrix::zeros(n, 0)).expect("graph");
            for pred in [&g, &relabeled] {
                let m = evaluate_pair(pred, &g, &settings).expect("metrics");
                if m.mpjpe.abs() > 1e-12 || m.ged != 0.0 || (m.sc - 1.0).abs() > 1e-9 || m.tf != 1.0 {
                    bad.push(format!("{}/{n}: {m:?}", cat.name()));
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("5 categories x 3 sizes, identity and relabeling; violations {bad:?}"),
    )
}

fn attention_properties() -> Outcome {
    let mut rng = Rng::new(6);
    let (mut row_gap, mut equiv_gap): (f64, f64) = (0.0, 0.0);
    for trial in 0..200 {
        let n = 2 + rng.below(9);
        let (f_in, f_out) = (1 + rng.below(6), 1 + rng.below(6));
        let mut store = ParamStore::new();
        let params = GatLayerParams::new(&mut store, &mut rng, 0, f_in, f_out, trial % 2 == 0);
        let feats = Matrix::from_fn(n, f_in, |_, _| rng.range(-1.0, 1.0));
        let mask: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i != j && rng.uniform() < 0.4).collect()).collect();
        let mut mask_sym = mask.clone();
        for i in 0..n {
            for j in 0..n {
                mask_sym[i][j] = mask[i][j] || mask[j][i];
            }
        }
        let run = |f: &Matrix, m: &[Vec<bool>]| {
            let mut t = Tape::new();
            let p = store.bind(&mut t);
            let x = t.constant(f.clone());
            let out = gat_layer(&mut t, &p, x, m, &params, true).expect("gat");
            (t.value(out.features).clone(), t.value(out.attention).clone())
        };
        let (out, att) = run(&feats, &mask_sym);
        for i in 0..n {
            row_gap = row_gap.max((att.row(i).sum() - 1.0).abs());
        }
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pf = Matrix::from_fn(n, f_in, |i, c| feats[(perm[i], c)]);
        let pm: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| mask_sym[perm[i]][perm[j]]).collect()).collect();
        let (pout, _) = run(&pf, &pm);
        for i in 0..n {
            for c in 0..f_out {
                equiv_gap = equiv_gap.max((pout[(i, c)] - out[(perm[i], c)]).abs());
            }
        }
    }
    outcome(
        row_gap <= 1e-6 && equiv_gap <= 1e-9,
        format!("200 layers: max |row sum - 1| {row_gap:.1e}, equivariance gap {equiv_gap:.1e}"),
    )
}

fn training_convergence(data: &[SampleRecord]) -> Outcome {
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let out = train(&cfg, data, &TrainOptions::default()).expect("training");
    let elapsed = start.elapsed().as_secs_f64();
    let first = out.log[0].val.mpjpe;
    let last = out.log.last().expect("log").val.mpjpe;
    outcome(
        last <= 0.5 * first && elapsed < 900.0 && out.log.len() == cfg.epochs + 1,
        format!(
            "val MPJPE {first:.4} -> {last:.4} (ratio {:.3}) over {} epochs in {elapsed:.0}s",
            last / first,
            cfg.epochs
        ),
    )
}

fn ablation_directions(data: &[SampleRecord]) -> Outcome {
    let cfg = TrainConfig::default();
    let runs = ablate(&cfg, data, Some(&["full", "no_spectral_loss", "no_hierarchical_attention"]), None).expect("ablation");
    let find = |name: &str, seed: u64| runs.iter().find(|r| r.configuration == name && r.seed == seed).expect("run");
    let (mut ged, mut tf, mut mpjpe) = (0, 0, 0);
    for &seed in &cfg.ablation_seeds {
        let full = find("full", seed);
        let no_spec = find("no_spectral_loss", seed);
        let no_att = find("no_hierarchical_attention", seed);
        ged += usize::from(full.ged <= no_spec.ged);
        tf += usize::from(full.tf >= no_spec.tf);
        mpjpe += usize::from(full.mpjpe <= no_att.mpjpe);
    }
    let seeds = cfg.ablation_seeds.len();
    let rows: Vec<String> = runs
        .iter()
        .map(|r| format!("{}@{}: mpjpe {:.4} ged {:.2} tf {:.3}", r.configuration, r.seed, r.mpjpe, r.ged, r.tf))
        .collect();
    outcome(
        ged >= 2 && tf >= 2 && mpjpe >= 2,
        format!(
            "seeds holding: GED {ged}/{seeds}, TF {tf}/{seeds}, MPJPE {mpjpe}/{seeds} [{}]",
            rows.join("; ")
        ),
    )
}

fn reproducibility(data: &[SampleRecord]) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let ds = DatasetSpec {
        categories: Category::ALL.to_vec(),
        count: 40,
        points: 128,
        noise: 0.01,
        seed: 9,
        min_joints: 4,
        max_joints: 12,
    };
    let (p1, p2, p3) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    write_dataset(&generate_dataset(&ds).expect("data"), &p1).expect("write");
    write_dataset(&generate_dataset(&ds).expect("data"), &p2).expect("write");
    let bytes = |p: &std::path::Path| std::fs::read(p).expect("read");
    let same_dataset = bytes(&p1) == bytes(&p2);
    let read = read_dataset(&p1).expect("read");
    write_dataset(&read, &p3).expect("write");
    let round_trip = read == generate_dataset(&ds).expect("data") && bytes(&p1) == bytes(&p3);

    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let a = train(&cfg, data, &TrainOptions::default()).expect("training");
    let b = train(&cfg, data, &TrainOptions::default()).expect("training");
    let same_loss = a.log[0].train_loss.to_bits() == b.log[0].train_loss.to_bits();

    let ckpt_path = dir.path().join("ckpt.json");
    a.last.save(&ckpt_path).expect("save");
    let loaded = Checkpoint::load(&ckpt_path).expect("load");
    let before = evaluate_checkpoint(&a.last, data, Split::Val).expect("eval").to_json().expect("json");
    let after = evaluate_checkpoint(&loaded, data, Split::Val).expect("eval").to_json().expect("json");
    let same_report = before == after && loaded == a.last;
    outcome(
        same_dataset && round_trip && same_loss && same_report,
        format!(
            "identical dataset bytes {same_dataset}, read/write identity {round_trip}, epoch-0 loss {same_loss}, reloaded report {same_report}"
        ),
    )
}

fn main() {
    let data = training_data();
    let criteria: Vec<Criterion> = vec![
        ("gradient suites", Box::new(gradient_suites)),
        ("eigenvalue derivatives", Box::new(eigen_derivatives)),
        ("laplacian invariants", Box::new(laplacian_invariants)),
        ("edit distance", Box::new(edit_distance)),
        ("metric identities", Box::new(metric_identities)),
        ("attention properties", Box::new(attention_properties)),
        ("training convergence", Box::new(|| training_convergence(&data))),
        ("ablation directions", Box::new(|| ablation_directions(&data))),
        ("reproducibility", Box::new(|| reproducibility(&data))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.passed {
            failures += 1;
        }
        println!(
            "criterion {} ({name}): {} - {}",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
