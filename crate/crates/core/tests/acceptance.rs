//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no test harness) so that the summary lines are
//! always printed. The process exits non-zero if any criterion fails.

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use feaslab::bounds::{binomial_tail, chernoff_estimate};
use feaslab::experiments::{self, active, bound_check, decay, multistage, tightness, ExperimentConfig, ExperimentKind, TightnessCell};
use feaslab::polyhedral::farkas::simplex_feasible;
use feaslab::polyhedral::rays::satisfies_inequalities;
use feaslab::polyhedral::{enumerate_rays, farkas_feasible, ConeGenerators, Matrix, PolyError};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_260_101;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool").install(f)
}

fn criterion_1() -> Outcome {
    let cells = [(1, 10, 0.1), (2, 20, 0.05), (3, 30, 0.1)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (m, n, alpha)) in cells.into_iter().enumerate() {
        let cell = TightnessCell { m, n, alpha };
        let start = Instant::now();
        let (res, _) = in_pool(1, || tightness::run_cell(&cell, 100_000, SEED, i as u32)).expect("tightness cell");
        let elapsed = start.elapsed();
        let ok = res.within_tolerance() && elapsed <= Duration::from_secs(60);
        pass &= ok;
        parts.push(format!(
            "(m={m},N={n},a={alpha}) p_hat={:.5} bound={:.5} se={:.5} {:.1}s",
            res.estimate.value,
            res.bound,
            res.estimate.stderr,
            elapsed.as_secs_f64()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_2() -> Outcome {
    let catalog = [
        "bc_m1_uniform.json",
        "bc_m2_independent.json",
        "bc_m2_comonotone.json",
        "bc_m4_independent.json",
        "bc_m4_comonotone.json",
    ];
    let mut violations = 0;
    let mut points = 0;
    let mut parts = Vec::new();
    for name in catalog {
        let cfg = config(name);
        let ExperimentKind::BoundCheck { problem, grid, tol, .. } = &cfg.kind else {
            panic!("{name} is not a bound_check config");
        };
        let (pts, _) = in_pool(1, || bound_check::simulate(problem, grid, cfg.trials, 0, *tol, cfg.seed)).expect(name);
        let v = pts.iter().filter(|p| p.violated()).count();
        violations += v;
        points += pts.len();
        let domain = problem.domain.as_ref().expect("chain domain");
        parts.push(format!(
            "{}(m={},{}) {v} violations",
            name.trim_end_matches(".json"),
            domain.order(),
            if domain.independent_thresholds { "indep" } else { "comon" }
        ));
    }
    outcome(violations == 0, format!("{points} grid points, R=1e4: {}", parts.join("; ")))
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for m in 1..=8u64 {
        for n in [10u64, 20, 50, 100, 200, 500] {
            if n < m {
                continue;
            }
            let mut alphas: Vec<f64> = vec![0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.9];
            // the boundary case N alpha = m - 1
            if m > 1 {
                alphas.push((m - 1) as f64 / n as f64);
            }
            for alpha in alphas {
                let na = n as f64 * alpha;
                if na < (m - 1) as f64 {
                    continue;
                }
                let tail = binomial_tail(m, n, alpha).expect("tail");
                let Ok(ch) = chernoff_estimate(m, n, alpha) else {
                    bad.push(format!("chernoff undefined at m={m} N={n} a={alpha}"));
                    continue;
                };
                checked += 1;
                if ch < tail {
                    bad.push(format!("chernoff {ch} < tail {tail} at m={m} N={n} a={alpha}"));
                }
                let boundary = (na - (m - 1) as f64).abs() <= 1e-12 * na.max(1.0);
                // compare relatively: far in the tail both values are tiny
                let equal = (ch - tail).abs() <= 1e-12 * tail.max(f64::MIN_POSITIVE);
                if equal && !boundary && tail > 0.0 {
                    bad.push(format!("equality away from the boundary at m={m} N={n} a={alpha}"));
                }
            }
        }
    }
    outcome(bad.is_empty(), format!("{checked} points checked; {}", if bad.is_empty() { "no issues".into() } else { bad.join("; ") }))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, integer: bool) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| if integer { rng.random_range(-3i32..=3) as f64 } else { rng.random_range(-2.0..2.0) })
                .collect()
        })
        .collect();
    Matrix::from_rows(&data).expect("matrix")
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut agree = 0;
    let mut feasible = 0;
    let mut redrawn = 0;
    let mut done = 0;
    while done < 1000 {
        let d = rng.random_range(1..=4usize);
        let p = rng.random_range(d..=d + 3);
        let n = rng.random_range(1..=3usize);
        let integer = done % 2 == 0;
        let w = random_matrix(&mut rng, d, p, integer);
        let gen = match enumerate_rays(&w) {
            Ok(g) => g,
            Err(PolyError::Degenerate(_)) => {
                redrawn += 1;
                continue;
            }
            Err(e) => panic!("ray enumeration: {e}"),
        };
        let t = random_matrix(&mut rng, d, n, false);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = if done % 4 < 2 {
            // h = W y + T x with y >= 0 and some zero entries
            let y: Vec<f64> = (0..p).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..2.0) }).collect();
            w.mul_vec(&y).iter().zip(t.mul_vec(&x)).map(|(a, b)| a + b).collect()
        } else {
            (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let a = farkas_feasible(&gen, &h, &t, &x).expect("farkas");
        let b = simplex_feasible(&w, &h, &t, &x).expect("simplex");
        agree += (a == b) as usize;
        feasible += b as usize;
        done += 1;
    }
    outcome(
        agree == 1000,
        format!("{agree}/1000 agree ({feasible} feasible); {redrawn} degenerate W redrawn"),
    )
}

/// Unit-normalized, sorted copy of a set of directions.
fn normalized(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = v
        .iter()
        .map(|r| {
            let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / s).collect()
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    out
}

fn same_set(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    let (a, b) = (normalized(a), normalized(b));
    a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.iter().zip(y).all(|(u, v)| (u - v).abs() <= 1e-9))
}

fn membership_agreement(w: &Matrix, gen: &ConeGenerators, rng: &mut ChaCha8Rng) -> usize {
    let d = w.rows();
    let mut agree = 0;
    for i in 0..1000 {
        let a: Vec<f64> = if i % 2 == 0 && !gen.rays.is_empty() {
            // a nonnegative combination of the rays, inside the cone
            let mut a = vec![0.0; d];
            for r in &gen.rays {
                let c: f64 = rng.random_range(0.0..1.0);
                a.iter_mut().zip(r).for_each(|(ai, ri)| *ai += c * ri);
            }
            a
        } else {
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let inside = satisfies_inequalities(w, &a, 1e-9);
        let generated = gen.contains(&a).expect("membership LP");
        agree += (inside == generated) as usize;
    }
    agree
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let mut cones = 0;
    let mut bad = Vec::new();
    let mut check = |label: String, w: Matrix, expected: Vec<Vec<f64>>, rng: &mut ChaCha8Rng| {
        let gen = enumerate_rays(&w).expect("rays");
        cones += 1;
        if !gen.lineality.is_empty() || !same_set(&gen.rays, &expected) {
            bad.push(format!("{label}: ray set mismatch"));
        }
        let agree = membership_agreement(&w, &gen, rng);
        if agree != 1000 {
            bad.push(format!("{label}: membership {agree}/1000"));
        }
    };
    for d in 1..=6 {
        let id = Matrix::identity(d);
        check(format!("I_{d}"), id.clone(), id.to_rows(), &mut rng);
    }
    let mut invertible = 0;
    while invertible < 10 {
        let d = 2 + invertible % 4;
        let w = random_matrix(&mut rng, d, d, false);
        let m = DMatrix::from_row_slice(d, d, &w.to_rows().concat());
        let sv = m.clone().svd(false, false).singular_values;
        if sv.min() < 0.1 {
            continue;
        }
        // rays of {r : W^T r >= 0} are the rows of W^{-1}
        let inv = m.try_inverse().expect("invertible");
        let rows: Vec<Vec<f64>> = (0..d).map(|i| inv.row(i).iter().copied().collect()).collect();
        check(format!("invertible {d}x{d} #{invertible}"), w, rows, &mut rng);
        invertible += 1;
    }
    for d in 1..=4 {
        // [I, -I] forces r = 0
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..2 * d).map(|j| if j == i { 1.0 } else if j == i + d { -1.0 } else { 0.0 }).collect())
            .collect();
        check(format!("zero cone d={d}"), Matrix::from_rows(&rows).expect("matrix"), Vec::new(), &mut rng);
    }
    outcome(bad.is_empty(), format!("{cones} cones, 1000 directions each; {}", if bad.is_empty() { "all match".into() } else { bad.join("; ") }))
}

fn criterion_6() -> Outcome {
    let cfg = config("interior_decay.json");
    let ExperimentKind::InteriorDecay { problem, n_values, tol } = &cfg.kind else {
        panic!("interior_decay.json has the wrong kind");
    };
    let (res, _) = in_pool(1, || decay::simulate(problem, n_values, cfg.trials, *tol, cfg.seed)).expect("decay");
    match res.fit {
        Some(f) => outcome(
            f.slope < 0.0 && f.r_squared >= 0.9,
            format!("N in {:?}: slope={:.5} R2={:.4} ({} points)", n_values, f.slope, f.r_squared, f.points),
        ),
        None => outcome(false, "no fit: too few nonzero frequencies"),
    }
}

fn criterion_7() -> Outcome {
    let cfg = config("active_constraints.json");
    let ExperimentKind::ActiveConstraints {
        problem,
        n_values,
        active,
        tol,
        ..
    } = &cfg.kind
    else {
        panic!("active_constraints.json has the wrong kind");
    };
    let ns: Vec<usize> = n_values.iter().copied().filter(|&n| n >= 100).collect();
    let (pts, _) = in_pool(1, || active::simulate(problem, &ns, &[0.05], active, None, cfg.trials, *tol, cfg.seed)).expect("active");
    let pass = !pts.is_empty() && pts.iter().all(|p| p.active_bound_holds());
    let parts: Vec<String> = pts
        .iter()
        .map(|p| {
            let e = p.estimate().expect("estimate");
            format!("N={} freq={:.5} tail1={:.5} tail4={:.5}", p.n, e.value, p.bound_active, p.bound_m)
        })
        .collect();
    outcome(pass, format!("m=4 |J|=1 a=0.05: {}", parts.join("; ")))
}

fn criterion_8() -> Outcome {
    let cfg = config("multistage.json");
    let ExperimentKind::Multistage {
        problem,
        branching,
        alpha,
        dof_draws,
    } = &cfg.kind
    else {
        panic!("multistage.json has the wrong kind");
    };
    let start = Instant::now();
    let (s, _) = in_pool(1, || multistage::simulate(problem, branching, alpha, *dof_draws, cfg.trials, cfg.seed)).expect("multistage");
    let elapsed = start.elapsed();
    let dom = s.stage_dominance();
    let je = s.joint_estimate().expect("joint");
    let pass = problem.horizon() == 3 && dom.iter().all(|&b| b) && s.joint_holds() && elapsed <= Duration::from_secs(300);
    let stages: Vec<String> = s
        .low
        .iter()
        .zip(&s.bounds)
        .enumerate()
        .map(|(i, (c, b))| format!("t={} freq={:.3} bound={:.4}", i + 2, c.estimate().map_or(f64::NAN, |e| e.value), b))
        .collect();
    outcome(
        pass,
        format!(
            "T=3 branching {:?}, R={}: {}; joint={:.3} (se {:.4}) product={:.4}; censored={}; {:.1}s",
            branching,
            cfg.trials,
            stages.join("; "),
            je.value,
            je.stderr,
            s.product_bound,
            s.censored,
            elapsed.as_secs_f64()
        ),
    )
}

fn csv_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("read dir")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).expect("read csv")))
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let mut runs: Vec<ExperimentConfig> = Vec::new();
    for (name, trials) in [
        ("tightness.json", 2000),
        ("bc_m4_comonotone.json", 300),
        ("bc_norm_chain.json", 100),
        ("two_stage.json", 200),
        ("interior_decay.json", 500),
        ("active_constraints.json", 300),
        ("multistage.json", 100),
    ] {
        let mut cfg = config(name);
        cfg.trials = trials;
        runs.push(cfg);
    }
    let mut bad = Vec::new();
    let mut compared = 0;
    for cfg in &runs {
        let one = tempfile::tempdir().expect("tempdir");
        let eight = tempfile::tempdir().expect("tempdir");
        let a = experiments::run(cfg, 1).expect("run at 1 worker");
        experiments::write_outputs(&a, one.path()).expect("write");
        let b = experiments::run(cfg, 8).expect("run at 8 workers");
        experiments::write_outputs(&b, eight.path()).expect("write");
        let (fa, fb) = (csv_bytes(one.path()), csv_bytes(eight.path()));
        compared += fa.len();
        if fa != fb {
            bad.push(cfg.label());
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} experiments, {compared} CSV files compared at 1 and 8 workers; {}", runs.len(), if bad.is_empty() { "identical".into() } else { format!("differ: {}", bad.join(", ")) }),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches nothing here skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("tightness", criterion_1),
        ("bound dominance", criterion_2),
        ("chernoff consistency", criterion_3),
        ("farkas/simplex equivalence", criterion_4),
        ("ray enumeration", criterion_5),
        ("interior decay", criterion_6),
        ("active-constraint refinement", criterion_7),
        ("multistage", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        failed += (!o.pass) as usize;
        println!(
            "criterion {} ({name}): {} [{:.1}s] {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
