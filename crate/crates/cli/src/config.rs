//! Resolved run settings, built from parsed flags and an optional config file.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use osfsl_core::data::{load_feature_table, synth_gaussian_features};
use osfsl_core::episodes::preset;
use osfsl_core::{
    EpisodeSpec, FeatureSet, InlierOrientation, LossWeights, Method, OptimConfig, Scorer,
    SyntheticSpec,
};

use crate::args::RunArgs;

/// Flags that take no value; `true` in a config file adds them, `false` omits them.
const SWITCHES: &[&str] = &["no-eta", "no-delta"];

/// Splices the `--config` file (if any) into `argv` right after the
/// subcommand, so that flags given on the command line override it.
pub fn expand_config_file(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let mut path = None;
    let mut it = argv.iter().enumerate();
    while let Some((_, a)) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = it.next().map(|(_, p)| PathBuf::from(p));
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    if argv.len() < 2 {
        return Ok(argv);
    }
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let tokens = config_tokens(&text).with_context(|| format!("in config {}", path.display()))?;
    let mut out = argv[..2].to_vec();
    out.extend(tokens.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Turns `key = value` lines into flag tokens. `#` starts a comment.
pub fn config_tokens(text: &str) -> anyhow::Result<Vec<String>> {
    let mut tokens = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key == "config" {
            bail!(
                "line {}: config files cannot include other config files",
                n + 1
            );
        }
        if SWITCHES.contains(&key) {
            match value {
                "true" => tokens.push(format!("--{key}")),
                "false" => {}
                _ => bail!("line {}: `{key}` takes true or false", n + 1),
            }
        } else {
            tokens.push(format!("--{key}"));
            tokens.push(value.to_string());
        }
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

impl PoolSource {
    pub fn load(&self) -> anyhow::Result<FeatureSet> {
        match self {
            PoolSource::File(p) => {
                load_feature_table(p).with_context(|| format!("loading pool {}", p.display()))
            }
            PoolSource::Synthetic(s) => Ok(synth_gaussian_features(s)?),
        }
    }
}

impl FromStr for PoolSource {
    type Err = anyhow::Error;

    /// `synth:classes=20,samples=60,dim=16,scale=6,sigma=1,seed=0`; any key
    /// may be left out. Anything else is a file path.
    fn from_str(s: &str) -> anyhow::Result<Self> {
        let Some(rest) = s.strip_prefix("synth:") else {
            return Ok(PoolSource::File(PathBuf::from(s)));
        };
        let mut spec = SyntheticSpec::default();
        for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("pool option `{item}` lacks `=`"))?;
            let bad = |e: &dyn fmt::Display| anyhow!("pool option `{k}`: {e}");
            match k {
                "classes" => spec.num_classes = v.parse().map_err(|e| bad(&e))?,
                "samples" => spec.samples_per_class = v.parse().map_err(|e| bad(&e))?,
                "dim" => spec.dim = v.parse().map_err(|e| bad(&e))?,
                "scale" => spec.center_scale = v.parse().map_err(|e| bad(&e))?,
                "sigma" => spec.within_class_sigma = v.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = v.parse().map_err(|e| bad(&e))?,
                _ => bail!("unknown pool option `{k}`"),
            }
        }
        spec.validate()?;
        Ok(PoolSource::Synthetic(spec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodName {
    Eol,
    Ostim,
    SimpleShot,
    Knn,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Eol => "eol",
            MethodName::Ostim => "ostim",
            MethodName::SimpleShot => "simpleshot",
            MethodName::Knn => "knn",
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s.trim() {
            "eol" => MethodName::Eol,
            "ostim" => MethodName::Ostim,
            "simpleshot" => MethodName::SimpleShot,
            "knn" => MethodName::Knn,
            other => bail!("unknown method `{other}` (expected eol, ostim, simpleshot or knn)"),
        })
    }
}

/// b suggested for a preset's outlier share: 0.3 at 20%, 0.5 at 50%, 0.7 at 80%.
pub fn default_b(outlier_fraction: f64) -> f64 {
    if outlier_fraction <= 0.35 {
        0.3
    } else if outlier_fraction >= 0.65 {
        0.7
    } else {
        0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pool: PoolSource,
    pub preset: String,
    /// Episode shape; its `seed` is replaced per episode.
    pub episode: EpisodeSpec,
    pub episodes: usize,
    pub methods: Vec<MethodName>,
    /// Shared by both transductive methods; `b` only matters for EOL.
    pub weights: LossWeights,
    /// Whether `weights.b` came from the user rather than the preset default.
    pub b_explicit: bool,
    pub optim: OptimConfig,
    pub knn_k: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_args(a: &RunArgs) -> anyhow::Result<Self> {
        let pool: PoolSource = a.pool.parse()?;
        let methods = a
            .methods
            .split(',')
            .filter(|m| !m.trim().is_empty())
            .map(str::parse)
            .collect::<anyhow::Result<Vec<MethodName>>>()?;
        let orientation: InlierOrientation =
            a.eol.orientation.parse().map_err(|e| anyhow!("{e}"))?;
        let mut cfg = RunConfig {
            pool,
            preset: String::new(),
            episode: EpisodeSpec::default(),
            episodes: a.episodes,
            methods,
            weights: LossWeights {
                lambda_ce: a.eol.lambda_ce,
                lambda_ma: a.eol.lambda_ma,
                lambda_co: a.eol.lambda_co,
                orientation,
                ..LossWeights::new(Method::Eol)
            },
            b_explicit: a.eol.b.is_some(),
            optim: OptimConfig {
                step_size: a.eol.step_size,
                iterations: a.eol.iters,
                optimize_eta: !a.eol.no_eta,
                optimize_delta: !a.eol.no_delta,
                eta0: a.eol.eta0,
                ..OptimConfig::default()
            },
            knn_k: a.eol.knn_k,
            seed: a.seed,
            jobs: a.jobs,
            out: a.out.clone(),
        };
        cfg.set_preset(&a.preset)?;
        if let Some(b) = a.eol.b {
            cfg.weights.b = b;
        }
        let e = &a.episode;
        let spec = &mut cfg.episode;
        spec.n_in = e.ways.unwrap_or(spec.n_in);
        spec.k_shot = e.shots.unwrap_or(spec.k_shot);
        spec.n_out_classes = e.outlier_classes.unwrap_or(spec.n_out_classes);
        spec.k_in_query = e.in_query.unwrap_or(spec.k_in_query);
        spec.k_out_query = e.out_query.unwrap_or(spec.k_out_query);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Switches to a named preset; `b` follows unless it was set explicitly.
    pub fn set_preset(&mut self, name: &str) -> anyhow::Result<()> {
        let p = preset(name).ok_or_else(|| {
            anyhow!("unknown preset `{name}` (expected balanced, ood20, ood50 or ood80)")
        })?;
        self.preset = name.to_string();
        self.episode = self.episode.with_preset(&p);
        if !self.b_explicit {
            self.weights.b = default_b(p.outlier_fraction());
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.episodes < 1 {
            bail!("--episodes must be at least 1");
        }
        if self.methods.is_empty() {
            bail!("--methods must name at least one method");
        }
        if self.knn_k < 1 || self.knn_k > self.episode.support_size() {
            bail!("--knn-k must lie in 1..={}", self.episode.support_size());
        }
        self.episode.validate()?;
        self.weights.validate()?;
        LossWeights {
            method: Method::Ostim,
            ..self.weights
        }
        .validate()?;
        self.optim.validate()?;
        Ok(())
    }

    pub fn scorer(&self, m: MethodName) -> Scorer {
        match m {
            MethodName::Eol => Scorer::Transductive {
                weights: self.weights,
                optim: self.optim,
            },
            MethodName::Ostim => Scorer::Transductive {
                weights: LossWeights {
                    method: Method::Ostim,
                    ..self.weights
                },
                optim: self.optim,
            },
            MethodName::SimpleShot => Scorer::SimpleShot {
                eta0: self.optim.eta0,
            },
            MethodName::Knn => Scorer::Knn { k: self.knn_k },
        }
    }

    pub fn scorers(&self) -> Vec<(MethodName, Scorer)> {
        self.methods.iter().map(|&m| (m, self.scorer(m))).collect()
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out).join(name)
    }
}
