//! Run configuration: a TOML file, then the `CRFCONV_OUTPUT_DIR` environment
//! variable, then command-line flags, later sources winning.
//!
//! ```toml
//! seed = 0
//! threads = 0                    # 0 = all cores
//!
//! [input]
//! path = "cloud.ply"             # omit to generate the planted-cluster fixture
//! format = "ply"                 # optional, guessed from the extension
//! probabilities = "probs.csv"    # refine-labels only
//!
//! [input.synthetic]
//! points = 300
//! clusters = 3
//! spread = 0.6
//! noise = 0.5
//!
//! [output]
//! dir = "out"
//! format = "csv"
//!
//! [graph]
//! k = 8
//! dilation = 1
//! radius = 0.25                  # squared-distance radius; replaces kNN when set
//! symmetrize = true
//! sample_ratio = 1.0             # farthest-point subsampling before graph building
//!
//! [crf]
//! steps = 10
//! schedule = "jacobi"            # or "gauss-seidel"
//! epsilon = 1e-4
//! activation = "leaky-relu:0.1"
//! tol = 0.0
//! unary = "unary.toml"           # optional transform files; identity otherwise
//! projection = "projection.toml"
//! sweep = [1, 2, 5, 10, 20, 50]
//!
//! [discrete]
//! labels = 3
//! steps = 5
//! compat = "potts-complement"    # "identity", "potts-complement" or a CSV path
//! kernel = "kernel.toml"         # optional; unit kernel otherwise
//!
//! [diffusion]
//! c = 0.5
//! steps = 50
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use crfconv::cloud::CloudFormat;
use crfconv::{Activation, Schedule};
use serde::Deserialize;

pub const OUTPUT_DIR_ENV: &str = "CRFCONV_OUTPUT_DIR";

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub input: InputConfig,
    pub output: OutputConfig,
    pub graph: GraphConfig,
    pub crf: CrfSection,
    pub discrete: DiscreteSection,
    pub diffusion: DiffusionSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub path: Option<PathBuf>,
    pub format: Option<String>,
    pub probabilities: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub points: usize,
    pub clusters: usize,
    pub spread: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k: usize,
    pub dilation: usize,
    pub radius: Option<f64>,
    pub symmetrize: bool,
    pub sample_ratio: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CrfSection {
    pub steps: usize,
    pub schedule: String,
    pub epsilon: f64,
    pub activation: String,
    pub tol: f64,
    pub unary: Option<PathBuf>,
    pub projection: Option<PathBuf>,
    pub sweep: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteSection {
    pub labels: Option<usize>,
    pub steps: usize,
    pub compat: String,
    pub kernel: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub c: f64,
    pub steps: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            points: 300,
            clusters: 3,
            spread: 0.6,
            noise: 0.5,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: "csv".into(),
        }
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 8,
            dilation: 1,
            radius: None,
            symmetrize: true,
            sample_ratio: 1.0,
        }
    }
}

impl Default for CrfSection {
    fn default() -> Self {
        Self {
            steps: 10,
            schedule: "jacobi".into(),
            epsilon: crfconv::energy::DEFAULT_EPSILON,
            activation: "leaky-relu:0.1".into(),
            tol: 0.0,
            unary: None,
            projection: None,
            sweep: vec![1, 2, 5, 10, 20, 50],
        }
    }
}

impl Default for DiscreteSection {
    fn default() -> Self {
        Self {
            labels: None,
            steps: 5,
            compat: "potts-complement".into(),
            kernel: None,
        }
    }
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self { c: 0.5, steps: 50 }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Relative paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.input.path);
        fix(&mut self.input.probabilities);
        fix(&mut self.crf.unary);
        fix(&mut self.crf.projection);
        fix(&mut self.discrete.kernel);
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
        if !matches!(self.discrete.compat.as_str(), "identity" | "potts-complement") {
            let p = PathBuf::from(&self.discrete.compat);
            if p.is_relative() {
                self.discrete.compat = base.join(p).to_string_lossy().into_owned();
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.input.synthetic;
        ensure!(s.points >= 1, "input.synthetic.points must be at least 1");
        ensure!(s.clusters >= 1, "input.synthetic.clusters must be at least 1");
        ensure!(s.spread.is_finite() && s.spread >= 0.0, "input.synthetic.spread must be >= 0");
        ensure!(s.noise.is_finite() && s.noise >= 0.0, "input.synthetic.noise must be >= 0");
        if let Some(f) = &self.input.format {
            f.parse::<CloudFormat>()?;
        }
        self.output_format()?;

        let g = &self.graph;
        ensure!(g.k >= 1, "graph.k must be at least 1");
        ensure!(g.dilation >= 1, "graph.dilation must be at least 1");
        if let Some(r) = g.radius {
            ensure!(r > 0.0 && r.is_finite(), "graph.radius must be positive");
        }
        ensure!(
            g.sample_ratio > 0.0 && g.sample_ratio <= 1.0,
            "graph.sample_ratio must be in (0, 1]"
        );

        let c = &self.crf;
        self.schedule()?;
        self.activation()?;
        ensure!(c.epsilon > 0.0 && c.epsilon.is_finite(), "crf.epsilon must be positive");
        ensure!(c.tol >= 0.0 && !c.tol.is_nan(), "crf.tol must be >= 0");
        ensure!(!c.sweep.is_empty(), "crf.sweep must list at least one step count");

        ensure!(self.discrete.steps >= 1, "discrete.steps must be at least 1");
        if let Some(l) = self.discrete.labels {
            ensure!(l >= 1, "discrete.labels must be at least 1");
        }
        ensure!(!self.discrete.compat.is_empty(), "discrete.compat must not be empty");

        let d = &self.diffusion;
        ensure!(d.c > 0.0 && d.c <= 1.0, "diffusion.c must be in (0, 1]");
        ensure!(d.steps >= 1, "diffusion.steps must be at least 1");
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(self.crf.schedule.parse()?)
    }

    pub fn activation(&self) -> Result<Activation> {
        Ok(self.crf.activation.parse()?)
    }

    pub fn input_format(&self, path: &Path) -> Result<CloudFormat> {
        match &self.input.format {
            Some(f) => Ok(f.parse()?),
            None => match CloudFormat::from_path(path) {
                Some(f) => Ok(f),
                None => bail!("cannot tell the format of {}; set input.format", path.display()),
            },
        }
    }

    pub fn output_format(&self) -> Result<CloudFormat> {
        Ok(self.output.format.parse()?)
    }

    pub fn cloud_extension(&self) -> &'static str {
        match self.output_format() {
            Ok(CloudFormat::PlyAscii) => "ply",
            _ => "csv",
        }
    }
}
