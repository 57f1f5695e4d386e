//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria on Cora and Citeseer need the datasets under `$GCMA_DATA_DIR`,
//! either as canonical dataset directories (`cora/`, `citeseer/`) or as raw
//! `cora.content`/`cora.cites` pairs. Without them those criteria print FAIL
//! with the reason and are counted as not runnable; every criterion that
//! runs and fails makes the binary exit non-zero.

mod common;

use std::path::PathBuf;
use std::rc::Rc;
use std::time::{Duration, Instant};

use gcma_core::dpeaks::{cluster_at, estimate_k, Distances, DEFAULT_PERCENTILES};
use gcma_core::graph_io::synthetic::{attributed_sbm, gaussian_blobs, SbmSpec};
use gcma_core::graph_io::{load_planetoid, read_dataset, Graph};
use gcma_core::metrics::{accuracy, ari, k_protocol, nmi, EvalResult};
use gcma_core::numeric::gradcheck::check;
use gcma_core::numeric::{Elementwise, ParamStore, SparseMatrix, Tensor2, Var};
use gcma_core::selfopt::{kl_value, soft_assign_value, target_distribution};
use gcma_core::trainer::{train, JointTerms, TrainConfig, TrainReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_ENV: &str = "GCMA_DATA_DIR";

enum Outcome {
    Pass(String),
    Fail(String),
    Unavailable(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let mut t = random(rng, rows, cols, 0.0, 1.0);
    for i in 0..rows {
        let s: f64 = t.row(i).iter().sum();
        t.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    t
}

type OpCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);

/// Worst relative error of one randomized check per tape operation.
fn op_cases() -> Vec<OpCase> {
    const H: f64 = 1e-5;
    let unary = |op: Elementwise| -> Box<dyn Fn(&mut ChaCha8Rng) -> f64> {
        Box::new(move |rng| {
            let mut ps = ParamStore::new();
            let init = if op == Elementwise::Log { random(rng, 6, 5, 0.2, 2.0) } else { random(rng, 6, 5, -1.0, 1.0) };
            let x = ps.insert("x", init);
            let w = random(rng, 6, 5, -1.0, 1.0);
            check(&mut ps, H, |t, ps| {
                let xv = t.param(ps, x);
                let y = t.elementwise(op, xv)?;
                let wv = t.constant(w.clone());
                let p = t.hadamard(y, wv)?;
                Ok(t.sum(p))
            })
            .unwrap()
            .worst()
        })
    };
    vec![
        ("leaky_relu", unary(Elementwise::LeakyRelu(0.2))),
        ("elu", unary(Elementwise::Elu)),
        ("exp", unary(Elementwise::Exp)),
        ("log", unary(Elementwise::Log)),
        ("softmax_row", unary(Elementwise::SoftmaxRow)),
        ("l2_normalize_row", unary(Elementwise::L2NormalizeRow)),
        (
            "matmul",
            Box::new(|rng| {
                let mut ps = ParamStore::new();
                let a = ps.insert("a", random(rng, 4, 5, -1.0, 1.0));
                let b = ps.insert("b", random(rng, 5, 3, -1.0, 1.0));
                let w = random(rng, 4, 3, -1.0, 1.0);
                check(&mut ps, H, |t, ps| {
                    let (av, bv) = (t.param(ps, a), t.param(ps, b));
                    let m = t.matmul(av, bv)?;
                    let wv = t.constant(w.clone());
                    let p = t.hadamard(m, wv)?;
                    Ok(t.sum(p))
                })
                .unwrap()
                .worst()
            }),
        ),
        (
            "spmm",
            Box::new(|rng| {
                let n = 6;
                let entries: Vec<_> = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .filter(|_| rng.random_bool(0.4))
                    .map(|(i, j)| (i, j, 1.0 + i as f64 * 0.1 + j as f64))
                    .collect();
                let a = Rc::new(SparseMatrix::from_triplets(n, entries).unwrap());
                let mut ps = ParamStore::new();
                let x = ps.insert("x", random(rng, n, 3, -1.0, 1.0));
                let w = random(rng, n, 3, -1.0, 1.0);
                check(&mut ps, H, |t, ps| {
                    let xv = t.param(ps, x);
                    let m = t.spmm(a.clone(), xv)?;
                    let wv = t.constant(w.clone());
                    let p = t.hadamard(m, wv)?;
                    Ok(t.sum(p))
                })
                .unwrap()
                .worst()
            }),
        ),
        (
            "add/sub/hadamard/add_row/scale/scale_by/replace_rows/gather_rows/mean",
            Box::new(|rng| {
                let mut ps = ParamStore::new();
                let a = ps.insert("a", random(rng, 5, 4, -1.0, 1.0));
                let b = ps.insert("b", random(rng, 5, 4, -1.0, 1.0));
                let bias = ps.insert("bias", random(rng, 1, 4, -1.0, 1.0));
                let s = ps.insert("s", Tensor2::scalar(rng.random_range(-1.0..1.0)));
                let token = ps.insert("token", random(rng, 1, 4, -1.0, 1.0));
                let w = random(rng, 3, 4, -1.0, 1.0);
                check(&mut ps, H, |t, ps| {
                    let (av, bv, biasv, sv, tok) =
                        (t.param(ps, a), t.param(ps, b), t.param(ps, bias), t.param(ps, s), t.param(ps, token));
                    let sum = t.add(av, bv)?;
                    let diff = t.sub(sum, bv)?;
                    let had = t.hadamard(diff, bv)?;
                    let biased = t.add_row(had, biasv)?;
                    let scaled = t.scale(biased, 1.7);
                    let scaled = t.scale_by(scaled, sv)?;
                    let replaced = t.replace_rows(scaled, Rc::new(vec![1, 4]), tok)?;
                    let gathered = t.gather_rows(replaced, Rc::new(vec![3, 0, 1]))?;
                    let wv = t.constant(w.clone());
                    let p = t.hadamard(gathered, wv)?;
                    let p = t.sum(p);
                    let m = t.mean(av)?;
                    t.add(p, m)
                })
                .unwrap()
                .worst()
            }),
        ),
        (
            "mse/xent_diag/edge_dot/bce_with_logits",
            Box::new(|rng| {
                let mut ps = ParamStore::new();
                let x = ps.insert("x", random(rng, 4, 3, -1.0, 1.0));
                let l = ps.insert("l", random(rng, 4, 4, -1.0, 1.0));
                let target = Rc::new(random(rng, 4, 3, -1.0, 1.0));
                check(&mut ps, H, |t, ps| {
                    let (xv, lv) = (t.param(ps, x), t.param(ps, l));
                    let mse = t.mse(xv, target.clone())?;
                    let xe = t.xent_diag(lv)?;
                    let dots = t.edge_dot(xv, Rc::new(vec![(0, 1), (2, 3), (1, 1)]))?;
                    let bce = t.bce_with_logits(dots, Rc::new(vec![1.0, 0.0, 1.0]))?;
                    let s = t.add(mse, xe)?;
                    t.add(s, bce)
                })
                .unwrap()
                .worst()
            }),
        ),
        (
            "sq_dist/student_t/row_normalize/kl",
            Box::new(|rng| {
                let mut ps = ParamStore::new();
                let z = ps.insert("z", random(rng, 6, 3, -1.0, 1.0));
                let mu = ps.insert("mu", random(rng, 2, 3, -1.0, 1.0));
                let p = Rc::new(stochastic(rng, 6, 2));
                check(&mut ps, H, |t, ps| {
                    let (zv, mv) = (t.param(ps, z), t.param(ps, mu));
                    let d = t.sq_dist(zv, mv)?;
                    let k = t.student_t(d, 1.0)?;
                    let q = t.row_normalize(k)?;
                    t.kl(p.clone(), q)
                })
                .unwrap()
                .worst()
            }),
        ),
        (
            "gat_attention",
            Box::new(|rng| {
                let n = 5;
                let mut entries = vec![];
                for i in 0..n {
                    for j in (i + 1)..n {
                        if rng.random_bool(0.5) {
                            entries.push((i, j, 1.0));
                            entries.push((j, i, 1.0));
                        }
                    }
                }
                let adj = Rc::new(SparseMatrix::from_triplets(n, entries).unwrap().with_self_loops());
                let mut worst: f64 = 0.0;
                for (heads, concat) in [(2, true), (3, false)] {
                    let mut ps = ParamStore::new();
                    let wh = ps.insert("wh", random(rng, n, heads * 3, -1.0, 1.0));
                    let src = ps.insert("src", random(rng, heads, 3, -1.0, 1.0));
                    let dst = ps.insert("dst", random(rng, heads, 3, -1.0, 1.0));
                    let out_cols = if concat { heads * 3 } else { 3 };
                    let proj = random(rng, n, out_cols, -1.0, 1.0);
                    let r = check(&mut ps, H, |t, ps| {
                        let (w, s, d) = (t.param(ps, wh), t.param(ps, src), t.param(ps, dst));
                        let out = t.gat_attention(w, s, d, adj.clone(), heads, 0.2, concat)?;
                        let pv = t.constant(proj.clone());
                        let p = t.hadamard(out, pv)?;
                        Ok(t.sum(p))
                    })
                    .unwrap();
                    worst = worst.max(r.worst());
                }
                worst
            }),
        ),
    ]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, case) in op_cases() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = case(&mut rng);
            if !(e <= worst.0) {
                worst = (e, name.to_string());
            }
        }
    }
    let terms: [(&str, fn(&JointTerms) -> Var); 5] = [
        ("L_p", |t| t.l_p.expect("masked nodes")),
        ("L_a", |t| t.l_a),
        ("L_c", |t| t.l_c),
        ("L_s", |t| t.l_s),
        ("total", |t| t.total.expect("nonzero weights")),
    ];
    for (name, pick) in terms {
        let (e, _) = common::objective::check_term(pick, 1e-6);
        if !(e <= worst.0) {
            worst = (e, name.to_string());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(60),
        format!("worst relative error {:.2e} ({}), {:.1} s", worst.0, worst.1, elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let d = rng.random_range(1..=4);
        let points = random(&mut rng, n, d, -1.0, 1.0);
        let pct = [1.0, 1.5, 2.0, 2.5, 3.0][rng.random_range(0..5)];
        let d_c = common::ref_cutoff(&points, pct);
        let (state, profile) = cluster_at(&points, &Distances::euclidean(&points), d_c).unwrap();
        let r = common::ref_peaks(&points, d_c);
        if profile.rho != r.rho
            || profile.delta != r.delta
            || profile.nn_higher != r.nn
            || state.centers != r.centers
            || state.labels != r.labels
        {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(60),
        format!("{mismatches}/100 point sets differ from the brute-force reference, {:.1} s", elapsed.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut per_k = Vec::new();
    for k in 2..=10 {
        let hits = (0..10)
            .filter(|&seed| {
                let (x, _) = gaussian_blobs(k, 50, 0.05, 0.5, 2.0, 100 * k as u64 + seed).unwrap();
                estimate_k(&x, &DEFAULT_PERCENTILES).unwrap().state.k == k
            })
            .count();
        per_k.push(hits);
    }
    let elapsed = start.elapsed();
    let detail = per_k.iter().enumerate().map(|(i, h)| format!("k={}:{h}/10", i + 2)).collect::<Vec<_>>().join(" ");
    verdict(
        per_k.iter().all(|&h| h >= 9) && elapsed < Duration::from_secs(30),
        format!("{detail}, {:.1} s", elapsed.as_secs_f64()),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_acc: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=30);
        let (kp, kt) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        worst_acc = worst_acc.max((accuracy(&pred, &truth).unwrap() - common::brute_accuracy(&pred, &truth)).abs());
    }
    let same: Vec<usize> = (0..500).map(|_| rng.random_range(0..7)).collect();
    let identical = nmi(&same, &same).unwrap() == 1.0 && ari(&same, &same).unwrap() == 1.0;
    let n = 100_000;
    let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
    let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
    let (ni, ar) = (nmi(&a, &b).unwrap(), ari(&a, &b).unwrap());
    verdict(
        worst_acc < 1e-12 && identical && ni.abs() < 0.02 && ar.abs() < 0.02,
        format!(
            "max |acc - exhaustive| {worst_acc:.1e} over 1000 pairs; identical NMI/ARI exactly 1: {identical}; independent NMI {ni:.2e}, ARI {ar:.2e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut row_err: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..=8);
        let q = soft_assign_value(&random(&mut rng, 20, 4, -3.0, 3.0), &random(&mut rng, k, 4, -3.0, 3.0), 1.0).unwrap();
        for i in 0..q.rows() {
            row_err = row_err.max((q.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let k = rng.random_range(2..=6);
        let (p, q) = (stochastic(&mut rng, 3, k), stochastic(&mut rng, 3, k));
        min_kl = min_kl.min(kl_value(&p, &q).unwrap());
    }
    let onehot = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
    let fixed = target_distribution(&onehot).unwrap() == onehot;
    // f = [1.2, 0.8]; rows ∝ [0.64/1.2, 0.04/0.8] and [0.16/1.2, 0.36/0.8].
    let p = target_distribution(&Tensor2::from_rows(&[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap()).unwrap();
    let r1 = [0.64 / 1.2, 0.04 / 0.8];
    let r2 = [0.16 / 1.2, 0.36 / 0.8];
    let expect = [r1[0] / (r1[0] + r1[1]), r1[1] / (r1[0] + r1[1]), r2[0] / (r2[0] + r2[1]), r2[1] / (r2[0] + r2[1])];
    let hand = p.data().iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        row_err <= 1e-9 && min_kl >= 0.0 && fixed && hand < 1e-6,
        format!("max |row sum - 1| {row_err:.1e}; min KL over 10^4 pairs {min_kl:.2e}; one-hot fixed point: {fixed}; hand value error {hand:.1e}"),
    )
}

fn find_dataset(name: &str) -> Result<Graph, String> {
    let root = std::env::var_os(DATA_ENV).map(PathBuf::from).ok_or(format!("{DATA_ENV} is not set"))?;
    let canonical = root.join(name);
    if canonical.join("header.json").exists() {
        return read_dataset(&canonical).map_err(|e| e.to_string());
    }
    let (content, cites) = (root.join(format!("{name}.content")), root.join(format!("{name}.cites")));
    if content.exists() && cites.exists() {
        return load_planetoid(&content, &cites).map(|(g, _)| g).map_err(|e| e.to_string());
    }
    Err(format!("no {name} dataset under {}", root.display()))
}

fn run_seeds(graph: &Graph, base: &TrainConfig, seeds: &[u64]) -> Vec<Result<TrainReport, String>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            train(graph, &cfg).map(|o| o.report).map_err(|e| e.to_string())
        })
        .collect()
}

fn mean_eval(reports: &[Result<TrainReport, String>]) -> Option<(f64, f64, f64)> {
    let evals: Vec<&EvalResult> = reports.iter().filter_map(|r| r.as_ref().ok()?.eval.as_ref()).collect();
    if evals.is_empty() {
        return None;
    }
    let m = evals.len() as f64;
    Some((
        evals.iter().map(|e| e.acc).sum::<f64>() / m,
        evals.iter().map(|e| e.nmi).sum::<f64>() / m,
        evals.iter().map(|e| e.ari).sum::<f64>() / m,
    ))
}

fn k_summary(reports: &[Result<TrainReport, String>], seeds: &[u64], k_true: usize) -> gcma_core::metrics::KProtocolResult {
    let mut it = reports.iter();
    k_protocol(
        |_| it.next().unwrap().as_ref().map(|r| r.k).map_err(|e| gcma_core::Error::Parameter(e.clone())),
        seeds.len(),
        seeds,
        k_true,
    )
    .unwrap()
}

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn criterion_6(cora: &Result<(Graph, Vec<Result<TrainReport, String>>), String>) -> Outcome {
    let (_, reports) = match cora {
        Ok(c) => c,
        Err(e) => return Outcome::Unavailable(e.clone()),
    };
    let ks = k_summary(reports, &SEEDS, 7);
    let Some((acc, nmi, ari)) = mean_eval(reports) else {
        return Outcome::Fail("no run produced an evaluation".into());
    };
    verdict(
        acc >= 0.65 && nmi >= 0.45 && ari >= 0.40 && ks.hits >= 7,
        format!("mean ACC {acc:.4} NMI {nmi:.4} ARI {ari:.4}; k=7 in {}/10 (k per run {:?})", ks.hits, ks.runs),
    )
}

fn criterion_7() -> Outcome {
    let graph = match find_dataset("citeseer") {
        Ok(g) => g,
        Err(e) => return Outcome::Unavailable(e),
    };
    let reports = run_seeds(&graph, &TrainConfig::default(), &SEEDS);
    let ks = k_summary(&reports, &SEEDS, 6);
    let Some((acc, _, _)) = mean_eval(&reports) else {
        return Outcome::Fail("no run produced an evaluation".into());
    };
    verdict(
        (5.0..=7.0).contains(&ks.mean) && acc >= 0.58,
        format!("mean k {:.2} (±{:.2}), mean ACC {acc:.4}", ks.mean, ks.std),
    )
}

fn criterion_8(cora: &Result<(Graph, Vec<Result<TrainReport, String>>), String>) -> Outcome {
    let (graph, full) = match cora {
        Ok(c) => c,
        Err(e) => return Outcome::Unavailable(e.clone()),
    };
    let seeds = &SEEDS[..5];
    let ablated_cfg = TrainConfig { epsilon_init: 0.0, epsilon_trainable: false, ..TrainConfig::default() };
    let ablated = run_seeds(graph, &ablated_cfg, seeds);
    let nmi_of = |r: &Result<TrainReport, String>| r.as_ref().ok().and_then(|r| r.eval.as_ref()).map(|e| e.nmi);
    let pairs: Vec<(Option<f64>, Option<f64>)> = full[..5].iter().zip(&ablated).map(|(f, a)| (nmi_of(f), nmi_of(a))).collect();
    let wins = pairs.iter().filter(|(f, a)| matches!((f, a), (Some(f), Some(a)) if a < f)).count();
    verdict(wins >= 4, format!("ablated NMI below full model in {wins}/5 paired seeds: {pairs:?}"))
}

fn criterion_9() -> Outcome {
    let graph = attributed_sbm(&SbmSpec::default(), 9).unwrap();
    let cfg = TrainConfig { pretrain_epochs: 3, joint_epochs: 5, seed: 9, ..TrainConfig::default() };
    let json = || serde_json::to_vec(&train(&graph, &cfg).unwrap().report).unwrap();
    let (a, b) = (json(), json());
    verdict(a == b, format!("two runs, {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() {
    let cora = find_dataset("cora").map(|g| {
        let reports = run_seeds(&g, &TrainConfig::default(), &SEEDS);
        (g, reports)
    });
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 gradient integrity", Box::new(criterion_1)),
        ("2 density-peaks oracle equivalence", Box::new(criterion_2)),
        ("3 synthetic k recovery", Box::new(criterion_3)),
        ("4 metric oracles", Box::new(criterion_4)),
        ("5 self-optimization invariants", Box::new(criterion_5)),
        ("6 Cora end-to-end", Box::new(|| criterion_6(&cora))),
        ("7 Citeseer end-to-end", Box::new(criterion_7)),
        ("8 fusion ablation direction", Box::new(|| criterion_8(&cora))),
        ("9 determinism", Box::new(criterion_9)),
    ];
    let (mut failed, mut unavailable) = (0, 0);
    for (name, run) in &criteria {
        match run() {
            Outcome::Pass(d) => println!("PASS  criterion {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d}");
            }
            Outcome::Unavailable(d) => {
                unavailable += 1;
                println!("FAIL  criterion {name}: not run, {d}");
            }
        }
    }
    println!("SKIP  criterion 10 ogbn-arxiv: excluded from desk-scale reproduction");
    let passed = criteria.len() - failed - unavailable;
    println!("acceptance: {passed} passed, {failed} failed, {unavailable} failed for lack of data");
    if failed > 0 {
        std::process::exit(1);
    }
}
