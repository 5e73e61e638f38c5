//! The subcommands, split into a compute step and a report-writing step.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use osfsl_core::data::{synth_gaussian_features, write_feature_table};
use osfsl_core::gradcheck::{
    check_gradients, mask_for, random_case, BlockErrors, FLAG_COMBINATIONS, TOLERANCE,
};
use osfsl_core::model::TaskEmbedding;
use osfsl_core::optim::{gradients, Gradient};
use osfsl_core::{
    FeatureSet, LossWeights, Method, MetricValues, ModelState, ParamMask, Scorer, SyntheticSpec,
    TableFormat,
};
use serde::Serialize;
use serde_json::json;

use crate::args::{CheckGradArgs, GenArgs};
use crate::config::{MethodName, RunConfig};
use crate::run::{failures, run_episodes, EpisodeResult, MethodSummary};

/// Presets covered by `sweep-b` and `ablate`.
pub const IMBALANCE_PRESETS: [&str; 3] = ["ood20", "ood50", "ood80"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some episode of some method failed; the rest was still reported.
    Partial {
        failed: usize,
    },
}

impl Status {
    fn from_failures(failed: usize) -> Self {
        if failed == 0 {
            Status::Complete
        } else {
            Status::Partial { failed }
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub preset: String,
    pub methods: Vec<MethodName>,
    pub results: Vec<EpisodeResult>,
    pub summaries: Vec<MethodSummary>,
}

impl BenchReport {
    pub fn summary(&self, method: MethodName) -> Option<&MethodSummary> {
        let k = self.methods.iter().position(|&m| m == method)?;
        Some(&self.summaries[k])
    }

    /// Per-episode values of `metric` for `method`, `None` where undefined or failed.
    pub fn column(&self, method: MethodName, metric: &str) -> Vec<Option<f64>> {
        let Some(k) = self.methods.iter().position(|&m| m == method) else {
            return Vec::new();
        };
        self.results
            .iter()
            .map(|r| r.per_method[k].as_ref().ok().and_then(|m| m.get(metric)))
            .collect()
    }

    pub fn status(&self) -> Status {
        Status::from_failures(failures(&self.results))
    }
}

pub fn compute_bench(cfg: &RunConfig, pool: &FeatureSet) -> anyhow::Result<BenchReport> {
    let scorers: Vec<Scorer> = cfg.scorers().into_iter().map(|(_, s)| s).collect();
    let results = run_episodes(
        pool,
        &cfg.episode,
        &scorers,
        cfg.episodes,
        cfg.seed,
        cfg.jobs,
    )?;
    let summaries = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(k, m)| MethodSummary::new(m.as_str(), &results, k))
        .collect();
    Ok(BenchReport {
        preset: cfg.preset.clone(),
        methods: cfg.methods.clone(),
        results,
        summaries,
    })
}

#[derive(Serialize)]
struct OutcomeLine<'a> {
    episode: usize,
    seed: u64,
    preset: &'a str,
    method: &'a str,
    acc: Option<f64>,
    auroc: Option<f64>,
    aupr: Option<f64>,
    prec_at_90: Option<f64>,
    error: Option<&'a str>,
}

/// Writes `outcomes.jsonl`, `summary.csv` and `summary.json` into `cfg.out`.
pub fn write_bench(cfg: &RunConfig, report: &BenchReport) -> anyhow::Result<()> {
    create_dir(&cfg.out)?;

    let path = cfg.out_path("outcomes.jsonl");
    let mut w = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    for r in &report.results {
        for (m, res) in report.methods.iter().zip(&r.per_method) {
            let v = res.as_ref().copied().unwrap_or_default();
            let line = OutcomeLine {
                episode: r.index,
                seed: r.seed,
                preset: &report.preset,
                method: m.as_str(),
                acc: v.acc,
                auroc: v.auroc,
                aupr: v.aupr,
                prec_at_90: v.prec_at_90,
                error: res.as_ref().err().map(String::as_str),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;

    let mut csv = String::from("method,preset,metric,mean,ci95,n\n");
    for s in &report.summaries {
        for row in &s.metrics {
            csv += &format!(
                "{},{},{},{},{},{}\n",
                s.method,
                report.preset,
                row.metric,
                fmt_opt(row.mean),
                fmt_opt(row.ci95),
                row.n
            );
        }
    }
    let path = cfg.out_path("summary.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    write_json(
        &cfg.out_path("summary.json"),
        &json!({
            "preset": report.preset,
            "episodes": cfg.episodes,
            "seed": cfg.seed,
            "b": cfg.weights.b,
            "orientation": cfg.weights.orientation.to_string(),
            "failed": failures(&report.results),
            "methods": report.summaries,
        }),
    )
}

// ---------------------------------------------------------------- sweep-b

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub preset: String,
    pub b: f64,
    pub summary: MethodSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestB {
    pub preset: String,
    pub metric: &'static str,
    pub b: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub best: Vec<BestB>,
    pub failed: usize,
}

impl SweepReport {
    pub fn best_b(&self, preset: &str, metric: &str) -> Option<f64> {
        self.best
            .iter()
            .find(|b| b.preset == preset && b.metric == metric)
            .map(|b| b.b)
    }

    pub fn status(&self) -> Status {
        Status::from_failures(self.failed)
    }
}

pub fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    let grid = text
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("bad b value `{t}`"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if grid.is_empty() {
        bail!("--b-grid is empty");
    }
    if let Some(b) = grid.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
        bail!("b values must lie in (0, 1), got {b}");
    }
    Ok(grid)
}

/// Runs EOL at every `b` on shared episodes per preset. Ties in the argmax
/// go to the smallest `b`.
pub fn compute_sweep(
    cfg: &RunConfig,
    pool: &FeatureSet,
    grid: &[f64],
    presets: &[&str],
) -> anyhow::Result<SweepReport> {
    let mut points = Vec::new();
    let mut best = Vec::new();
    let mut failed = 0;
    for &name in presets {
        let mut c = cfg.clone();
        c.set_preset(name)?;
        let scorers: Vec<Scorer> = grid
            .iter()
            .map(|&b| Scorer::Transductive {
                weights: c.weights.with_b(b),
                optim: c.optim,
            })
            .collect();
        let results = run_episodes(pool, &c.episode, &scorers, c.episodes, c.seed, c.jobs)?;
        failed += failures(&results);
        let start = points.len();
        for (k, &b) in grid.iter().enumerate() {
            points.push(SweepPoint {
                preset: name.to_string(),
                b,
                summary: MethodSummary::new("eol", &results, k),
            });
        }
        for metric in MetricValues::NAMES {
            let mut top: Option<(f64, f64)> = None;
            for p in &points[start..] {
                if let Some(m) = p.summary.mean(metric) {
                    if top.is_none_or(|(_, t)| m > t) {
                        top = Some((p.b, m));
                    }
                }
            }
            if let Some((b, mean)) = top {
                best.push(BestB {
                    preset: name.to_string(),
                    metric,
                    b,
                    mean,
                });
            }
        }
    }
    Ok(SweepReport {
        points,
        best,
        failed,
    })
}

fn wide_header(lead: &str) -> String {
    let mut h = lead.to_string();
    for m in MetricValues::NAMES {
        h += &format!(",{m}_mean,{m}_ci95");
    }
    h + ",n\n"
}

fn wide_cells(s: &MethodSummary) -> String {
    let mut line = String::new();
    for m in MetricValues::NAMES {
        let r = s.row(m).expect("every metric has a row");
        line += &format!(",{},{}", fmt_opt(r.mean), fmt_opt(r.ci95));
    }
    line + &format!(",{}\n", s.completed)
}

/// Writes `sweep.csv` (one row per preset and b), `sweep_best.csv` and `sweep.json`.
pub fn write_sweep(cfg: &RunConfig, report: &SweepReport) -> anyhow::Result<()> {
    create_dir(&cfg.out)?;
    let mut csv = wide_header("preset,b");
    for p in &report.points {
        csv += &format!("{},{}", p.preset, p.b);
        csv += &wide_cells(&p.summary);
    }
    fs::write(cfg.out_path("sweep.csv"), csv)?;
    let mut best = String::from("preset,metric,best_b,mean\n");
    for b in &report.best {
        best += &format!("{},{},{},{}\n", b.preset, b.metric, b.b, b.mean);
    }
    fs::write(cfg.out_path("sweep_best.csv"), best)?;
    write_json(&cfg.out_path("sweep.json"), report)
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub eta: bool,
    pub delta: bool,
    pub b: f64,
    pub summary: MethodSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub failed: usize,
}

impl AblationReport {
    pub fn row(&self, preset: &str, eta: bool, delta: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.preset == preset && r.eta == eta && r.delta == delta)
    }

    pub fn status(&self) -> Status {
        Status::from_failures(self.failed)
    }
}

/// EOL under the four calibration flag combinations on shared episodes.
pub fn compute_ablation(
    cfg: &RunConfig,
    pool: &FeatureSet,
    presets: &[&str],
) -> anyhow::Result<AblationReport> {
    if !cfg.methods.contains(&MethodName::Eol) {
        bail!("ablate needs eol among --methods");
    }
    let mut rows = Vec::new();
    let mut failed = 0;
    for &name in presets {
        let mut c = cfg.clone();
        c.set_preset(name)?;
        let scorers: Vec<Scorer> = FLAG_COMBINATIONS
            .iter()
            .map(|&(eta, delta)| Scorer::Transductive {
                weights: c.weights,
                optim: osfsl_core::OptimConfig {
                    optimize_eta: eta,
                    optimize_delta: delta,
                    ..c.optim
                },
            })
            .collect();
        let results = run_episodes(pool, &c.episode, &scorers, c.episodes, c.seed, c.jobs)?;
        failed += failures(&results);
        for (k, &(eta, delta)) in FLAG_COMBINATIONS.iter().enumerate() {
            rows.push(AblationRow {
                preset: name.to_string(),
                eta,
                delta,
                b: c.weights.b,
                summary: MethodSummary::new("eol", &results, k),
            });
        }
    }
    Ok(AblationReport { rows, failed })
}

/// Writes `ablation.csv` (one row per preset and flag pair) and `ablation.json`.
pub fn write_ablation(cfg: &RunConfig, report: &AblationReport) -> anyhow::Result<()> {
    create_dir(&cfg.out)?;
    let mut csv = wide_header("preset,eta,delta,b");
    for r in &report.rows {
        csv += &format!("{},{},{},{}", r.preset, r.eta, r.delta, r.b);
        csv += &wide_cells(&r.summary);
    }
    fs::write(cfg.out_path("ablation.csv"), csv)?;
    write_json(&cfg.out_path("ablation.json"), report)
}

// ---------------------------------------------------------------- gen-synthetic

pub fn gen_synthetic(a: &GenArgs) -> anyhow::Result<FeatureSet> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        samples_per_class: a.samples,
        dim: a.dim,
        center_scale: a.scale,
        within_class_sigma: a.sigma,
        seed: a.seed,
    };
    spec.validate()?;
    let format = match a.format.as_str() {
        "text" => TableFormat::Text,
        "binary" => TableFormat::Binary,
        other => bail!("unknown format `{other}` (expected text or binary)"),
    };
    let fs = synth_gaussian_features(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_feature_table(&fs, &a.out, format)?;
    Ok(fs)
}

// ---------------------------------------------------------------- check-grad

/// Dimensions exercised by the gradient check.
pub const CHECK_DIMS: [usize; 2] = [3, 16];

#[derive(Debug, Clone, Serialize)]
pub struct GradFailure {
    pub method: String,
    pub dim: usize,
    pub case: u64,
    pub eta: bool,
    pub delta: bool,
    pub block: &'static str,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub episodes: usize,
    pub checks: usize,
    pub tolerance: f64,
    pub worst_prototypes: f64,
    pub worst_eta: f64,
    pub worst_delta: f64,
    pub failures: Vec<GradFailure>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.worst_prototypes
            .max(self.worst_eta)
            .max(self.worst_delta)
    }
}

/// `trials` random episodes per method and dimension, each checked under all
/// four calibration flag combinations.
pub fn check_grad_with<G>(seed: u64, trials: u64, analytic: G) -> anyhow::Result<GradReport>
where
    G: Fn(&ModelState, &TaskEmbedding, &LossWeights, ParamMask) -> osfsl_core::Result<Gradient>,
{
    if trials < 1 {
        bail!("--trials must be at least 1");
    }
    let mut all = BlockErrors::default();
    let mut failures = Vec::new();
    let mut episodes = 0;
    let mut checks = 0;
    for (mi, method) in [Method::Ostim, Method::Eol].into_iter().enumerate() {
        for (di, &dim) in CHECK_DIMS.iter().enumerate() {
            for case in 0..trials {
                let index = (mi * CHECK_DIMS.len() + di) as u64 * trials + case;
                let c = random_case(seed, index, dim, method)?;
                episodes += 1;
                for (eta, delta) in FLAG_COMBINATIONS {
                    let mask = mask_for(method, eta, delta);
                    let e = check_gradients(&c.state, &c.embedding, &c.weights, mask, &analytic)?;
                    checks += 1;
                    if let Some(block) = e.failing_block(TOLERANCE) {
                        let error = match block {
                            "prototypes" => e.prototypes,
                            "eta" => e.eta,
                            _ => e.delta,
                        }
                        .unwrap_or(f64::INFINITY);
                        failures.push(GradFailure {
                            method: method.to_string(),
                            dim,
                            case,
                            eta,
                            delta,
                            block,
                            error,
                        });
                    }
                    all.merge(&e);
                }
            }
        }
    }
    Ok(GradReport {
        episodes,
        checks,
        tolerance: TOLERANCE,
        worst_prototypes: all.prototypes.unwrap_or(0.0),
        worst_eta: all.eta.unwrap_or(0.0),
        worst_delta: all.delta.unwrap_or(0.0),
        failures,
    })
}

pub fn check_grad(a: &CheckGradArgs) -> anyhow::Result<GradReport> {
    let report = check_grad_with(a.seed, a.trials, gradients)?;
    if let Some(path) = &a.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_json(path, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.1, 0.5,0.9").unwrap(), [0.1, 0.5, 0.9]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("0.5,1.0").is_err());
        assert!(parse_grid("0,0.5").is_err());
        assert!(parse_grid("half").is_err());
    }

    #[test]
    fn gradient_check_passes_and_catches_a_flipped_delta() {
        let ok = check_grad_with(1, 2, gradients).unwrap();
        assert!(ok.passed(), "{:?}", ok.failures);
        assert_eq!(ok.episodes, 8);
        assert_eq!(ok.checks, 32);

        let bad = check_grad_with(
            1,
            2,
            |s: &ModelState, te: &TaskEmbedding, w: &LossWeights, m: ParamMask| {
                let mut g = gradients(s, te, w, m)?;
                g.delta.iter_mut().for_each(|d| *d = -*d);
                Ok(g)
            },
        )
        .unwrap();
        assert!(!bad.passed());
        assert!(bad
            .failures
            .iter()
            .all(|f| f.block == "delta" && f.method == "eol"));
        assert!(bad.worst_delta >= TOLERANCE);
        assert!(bad.worst_prototypes < TOLERANCE);
    }
}
