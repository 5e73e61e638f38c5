//! Exit criteria. Runs every criterion in sequence, prints one line each and
//! exits non-zero if any criterion fails.
//!
//! Criterion 10 needs an external feature table; point `OSFSL_REAL_FEATURES`
//! at it to enable the check.

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use clap::Parser;
use osfsl_cli::args::{Cli, Command as Sub};
use osfsl_cli::commands::{
    check_grad_with, compute_ablation, compute_bench, compute_sweep, IMBALANCE_PRESETS,
};
use osfsl_cli::config::{MethodName, RunConfig};
use osfsl_core::losses::{class_weights, ostim_co, ostim_ma};
use osfsl_core::metrics::{aupr, auroc, paired_difference, precision_at_recall};
use osfsl_core::optim::gradients;
use osfsl_core::{Matrix, Rng};

const REAL_FEATURES_ENV: &str = "OSFSL_REAL_FEATURES";

/// Pool of criterion 5: center scale / within-class sigma = 6, D = 16.
const SEPARABLE_POOL: &str = "synth:classes=20,samples=60,dim=16,scale=6,sigma=1,seed=0";

/// Suite for the b-sweep and calibration ablation. On the separable pool every
/// setting reaches AUROC 1, so those comparisons would be decided by ties.
const HARD_POOL: &str = "synth:classes=20,samples=60,dim=16,scale=2,sigma=1,seed=0";

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn run_config(args: &[&str]) -> RunConfig {
    let argv: Vec<OsString> = ["osfsl", "bench"]
        .iter()
        .chain(args)
        .map(OsString::from)
        .collect();
    match Cli::try_parse_from(argv).expect("valid arguments").command {
        Sub::Bench(a) => RunConfig::from_args(&a).expect("valid config"),
        _ => unreachable!(),
    }
}

fn simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn xlogx(p: f64) -> f64 {
    p * p.max(1e-300).ln()
}

fn criterion_1() -> Verdict {
    let mut rng = Rng::new(1001);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n_in = 1 + rng.below(10) as usize;
        let rows = 1 + rng.below(150) as usize;
        let table: Vec<Vec<f64>> = (0..rows).map(|_| simplex(&mut rng, n_in + 1)).collect();
        let m = Matrix::from_rows(&table).unwrap();
        let marg: Vec<f64> = (0..=n_in)
            .map(|j| table.iter().map(|r| r[j]).sum::<f64>() / rows as f64)
            .collect();

        let ma = ostim_ma(&marg);
        let co = ostim_co(&m);
        // full sums straight from the definitions, and the two-part split
        let ma_full: f64 = marg.iter().map(|&p| xlogx(p)).sum();
        let ma_split = marg[..n_in].iter().map(|&p| xlogx(p)).sum::<f64>() + xlogx(marg[n_in]);
        let co_full: f64 = table.iter().flatten().map(|&p| xlogx(p)).sum();
        let co_split = table
            .iter()
            .map(|r| r[..n_in].iter().map(|&p| xlogx(p)).sum::<f64>())
            .sum::<f64>()
            + table.iter().map(|r| xlogx(r[n_in])).sum::<f64>();
        for e in [
            ma.total - (ma.inlier + ma.outlier),
            co.total - (co.inlier + co.outlier),
            ma.total - ma_full,
            ma.total - ma_split,
            co.total - co_full,
            co.total - co_split,
        ] {
            worst = worst.max(e.abs());
        }
    }
    verdict(
        worst <= 1e-12,
        format!("1000 tables, worst |difference| {worst:.2e}"),
    )
}

fn criterion_2() -> Verdict {
    let r = check_grad_with(2002, 50, gradients).expect("gradient check runs");
    verdict(
        r.episodes >= 200 && r.passed(),
        format!(
            "{} episodes x 4 flag sets, worst rel. error prototypes {:.2e} eta {:.2e} delta {:.2e}",
            r.episodes, r.worst_prototypes, r.worst_eta, r.worst_delta
        ),
    )
}

fn pairwise_auroc(s: &[f64], p: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if p[i] && !p[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// (AUPR, Prec@0.9) by enumerating every distinct threshold from the top.
fn threshold_oracle(s: &[f64], p: &[bool]) -> (f64, f64) {
    let total = p.iter().filter(|&&x| x).count() as f64;
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    let (mut area, mut prev, mut prec90) = (0.0, 0.0, None);
    for th in t {
        let tp = s.iter().zip(p).filter(|(v, &y)| **v >= th && y).count() as f64;
        let sel = s.iter().filter(|v| **v >= th).count() as f64;
        let r = tp / total;
        area += (r - prev) * (tp / sel);
        prev = r;
        if prec90.is_none() && r >= 0.9 {
            prec90 = Some(tp / sel);
        }
    }
    (area, prec90.unwrap())
}

fn instance(rng: &mut Rng, max_n: u64) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = 2 + rng.below(max_n - 1) as usize;
        let levels = 1 + rng.below(2 * n as u64);
        let s: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let frac = rng.uniform_range(0.1, 0.9);
        let p: Vec<bool> = (0..n).map(|_| rng.uniform() < frac).collect();
        if p.iter().any(|&x| x) && p.iter().any(|&x| !x) {
            return (s, p);
        }
    }
}

fn criterion_3() -> Verdict {
    let mut rng = Rng::new(3003);
    let mut worst_auroc: f64 = 0.0;
    for _ in 0..500 {
        let (s, p) = instance(&mut rng, 200);
        worst_auroc = worst_auroc.max((auroc(&s, &p).unwrap() - pairwise_auroc(&s, &p)).abs());
    }
    let mut mismatches = 0;
    for _ in 0..500 {
        let (s, p) = instance(&mut rng, 30);
        let (area, prec) = threshold_oracle(&s, &p);
        mismatches += usize::from(aupr(&s, &p).unwrap() != area);
        mismatches += usize::from(precision_at_recall(&s, &p, 0.9).unwrap() != prec);
    }
    verdict(
        worst_auroc <= 1e-12 && mismatches == 0,
        format!("AUROC worst |diff| {worst_auroc:.2e}; AUPR/Prec@0.9 mismatches {mismatches}"),
    )
}

fn criterion_4() -> Verdict {
    let a = class_weights(0.5, 5);
    let b = class_weights(0.8, 5);
    let rejected = [0.0, 1.0, -0.5, 1.5, f64::NAN]
        .iter()
        .all(|&x| class_weights(x, 5).is_err());
    let ok =
        a.as_ref().ok() == Some(&(10.0, 2.0)) && b.as_ref().ok() == Some(&(25.0, 1.25)) && rejected;
    verdict(
        ok,
        format!("b=0.5 -> {a:?}, b=0.8 -> {b:?}, out-of-range rejected: {rejected}"),
    )
}

struct SeparableSuite {
    eol_acc: Vec<Option<f64>>,
    eol_auroc: Vec<Option<f64>>,
    ostim_auroc: Vec<Option<f64>>,
    simpleshot_acc: Vec<Option<f64>>,
    failed: bool,
}

fn separable_suite() -> SeparableSuite {
    let cfg = run_config(&[
        "--pool",
        SEPARABLE_POOL,
        "--preset",
        "balanced",
        "--episodes",
        "500",
        "--methods",
        "eol,ostim,simpleshot",
        "--seed",
        "5005",
        "--jobs",
        "8",
    ]);
    let pool = cfg.pool.load().unwrap();
    let r = compute_bench(&cfg, &pool).unwrap();
    SeparableSuite {
        eol_acc: r.column(MethodName::Eol, "acc"),
        eol_auroc: r.column(MethodName::Eol, "auroc"),
        ostim_auroc: r.column(MethodName::Ostim, "auroc"),
        simpleshot_acc: r.column(MethodName::SimpleShot, "acc"),
        failed: r.status() != osfsl_cli::commands::Status::Complete,
    }
}

fn mean(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    d.iter().sum::<f64>() / d.len() as f64
}

fn criterion_5(s: &SeparableSuite) -> Verdict {
    let (acc, au) = (mean(&s.eol_acc), mean(&s.eol_auroc));
    verdict(
        !s.failed && acc >= 0.95 && au >= 0.95,
        format!("500 balanced episodes: EOL acc {acc:.4}, AUROC {au:.4} (thresholds 0.95)"),
    )
}

fn criterion_6(s: &SeparableSuite) -> Verdict {
    let du = paired_difference(&s.eol_auroc, &s.ostim_auroc).unwrap();
    let da = paired_difference(&s.eol_acc, &s.simpleshot_acc).unwrap();
    let ok = du.mean > 0.0 && du.excludes_zero() && da.mean > 0.0 && da.excludes_zero();
    verdict(
        ok,
        format!(
            "AUROC(EOL-OSTIM) {:+.5} ± {:.5}; Acc(EOL-SimpleShot) {:+.5} ± {:.5}",
            du.mean, du.ci95, da.mean, da.ci95
        ),
    )
}

fn criterion_7() -> Verdict {
    let cfg = run_config(&[
        "--pool",
        HARD_POOL,
        "--episodes",
        "300",
        "--methods",
        "eol",
        "--seed",
        "7007",
        "--jobs",
        "8",
    ]);
    let pool = cfg.pool.load().unwrap();
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let r = compute_sweep(&cfg, &pool, &grid, &IMBALANCE_PRESETS).unwrap();
    let best: Vec<f64> = IMBALANCE_PRESETS
        .iter()
        .map(|p| r.best_b(p, "auroc").unwrap())
        .collect();
    let ok = r.failed == 0
        && best[0] <= best[1]
        && best[1] <= best[2]
        && best[0] <= 0.5
        && 0.5 <= best[2];
    verdict(
        ok,
        format!(
            "argmax-b of AUROC: ood20 {}, ood50 {}, ood80 {}",
            best[0], best[1], best[2]
        ),
    )
}

fn criterion_8() -> Verdict {
    let cfg = run_config(&[
        "--pool",
        HARD_POOL,
        "--episodes",
        "300",
        "--methods",
        "eol",
        "--seed",
        "8008",
        "--jobs",
        "8",
    ]);
    let pool = cfg.pool.load().unwrap();
    let r = compute_ablation(&cfg, &pool, &["ood80"]).unwrap();
    let full = r
        .row("ood80", true, true)
        .unwrap()
        .summary
        .mean("auroc")
        .unwrap();
    let none = r
        .row("ood80", false, false)
        .unwrap()
        .summary
        .mean("auroc")
        .unwrap();
    verdict(
        r.failed == 0 && full >= none,
        format!("ood80 AUROC with eta,delta {full:.5} vs neither {none:.5}"),
    )
}

fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_osfsl"))
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for jobs in ["1", "8"] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let status = Command::new(binary())
            .args([
                "bench",
                "--pool",
                SEPARABLE_POOL,
                "--episodes",
                "60",
                "--seed",
                "9009",
                "--jobs",
                jobs,
                "--out",
            ])
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return Verdict::Fail(format!("bench --jobs {jobs} exited with {}", status.status));
        }
        csv.push(std::fs::read(out.join("summary.csv")).unwrap());
    }
    verdict(
        csv[0] == csv[1],
        format!(
            "summary.csv identical at --jobs 1 and 8: {}",
            csv[0] == csv[1]
        ),
    )
}

fn criterion_10() -> Verdict {
    let Some(path) = std::env::var_os(REAL_FEATURES_ENV) else {
        return Verdict::Skip(format!("{REAL_FEATURES_ENV} not set"));
    };
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(binary())
        .args([
            "bench",
            "--preset",
            "balanced",
            "--episodes",
            "1000",
            "--pool",
        ])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    if !output.status.success() {
        return Verdict::Fail(format!("bench exited with {}", output.status));
    }
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut missing = Vec::new();
    for m in ["eol", "ostim", "simpleshot", "knn"] {
        for metric in ["acc", "auroc", "aupr", "prec_at_90"] {
            let found = csv.lines().any(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f.len() == 6 && f[0] == m && f[2] == metric && !f[3].is_empty()
            });
            if !found {
                missing.push(format!("{m}/{metric}"));
            }
        }
    }
    verdict(
        missing.is_empty(),
        format!("missing summary cells: {missing:?}"),
    )
}

fn run(index: usize, name: &str, failed: &mut usize, f: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let (tag, detail) = match v {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => {
            *failed += 1;
            ("FAIL", d)
        }
        Verdict::Skip(d) => ("SKIP", d),
    };
    println!(
        "criterion {index:>2} {tag} {name}: {detail} [{:.1}s]",
        start.elapsed().as_secs_f64()
    );
}

fn main() {
    let mut failed = 0;
    run(1, "decomposition identity", &mut failed, criterion_1);
    run(2, "gradient oracle", &mut failed, criterion_2);
    run(3, "metric oracles", &mut failed, criterion_3);
    run(4, "class weight formula", &mut failed, criterion_4);
    // criteria 5 and 6 read the same 500 episodes
    let start = Instant::now();
    let suite = catch_unwind(separable_suite).ok();
    let shared = start.elapsed().as_secs_f64();
    println!("(separable suite: {shared:.1}s)");
    let missing = || Verdict::Fail("separable suite did not run".into());
    run(5, "separable benchmark", &mut failed, || {
        suite.as_ref().map_or_else(missing, criterion_5)
    });
    run(6, "paired method gaps", &mut failed, || {
        suite.as_ref().map_or_else(missing, criterion_6)
    });
    run(7, "b-sweep trend", &mut failed, criterion_7);
    run(8, "calibration ablation", &mut failed, criterion_8);
    run(9, "determinism across jobs", &mut failed, criterion_9);
    run(10, "real-feature pathway", &mut failed, criterion_10);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
