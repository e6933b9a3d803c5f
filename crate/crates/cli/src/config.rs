//! TOML run configuration.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use pressure_lab::measure::{BSequence, Metric};
use pressure_lab::tree::TreeConfig;
use pressure_lab::validators::{ReturnTest, Window};
use pressure_lab::{Family, TranscendentalMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const AUTO_START: &str = "auto-repelling-fixed-point";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub map: MapSection,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub pressure: Option<PressureSection>,
    #[serde(default)]
    pub bowen: BowenSection,
    #[serde(default)]
    pub measure: Option<MeasureSection>,
    #[serde(default)]
    pub validators: ValidatorSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Real(f64),
    Complex([f64; 2]),
}

impl Default for LambdaSpec {
    fn default() -> Self {
        LambdaSpec::Real(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    Keyword(String),
    Point([f64; 2]),
}

impl Default for StartSpec {
    fn default() -> Self {
        StartSpec::Keyword(AUTO_START.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub family: Family,
    #[serde(default)]
    pub lambda: LambdaSpec,
    #[serde(default)]
    pub z0: StartSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cutoff {
    Keyword(String),
    Fixed(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSection {
    pub n_max: usize,
    /// `"adaptive"` or a fixed sheet cutoff `K`.
    pub cutoff: Cutoff,
    pub eps_trunc: f64,
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            n_max: 8,
            cutoff: Cutoff::Keyword("adaptive".into()),
            eps_trunc: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureSection {
    #[serde(default)]
    pub t_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub t_range: Option<TRange>,
    /// Extra disc restrictions evaluated on the same trees.
    #[serde(default)]
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BowenSection {
    pub bracket: [f64; 2],
    pub tol: f64,
}

impl Default for BowenSection {
    fn default() -> Self {
        Self {
            bracket: [1.0, 2.0],
            tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureT {
    Value(f64),
    /// `"bowen"`: use the bisection estimate of the zero.
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    pub t: MeasureT,
    pub s_grid: Vec<f64>,
    #[serde(default = "default_measure_depth")]
    pub depth: usize,
    #[serde(default)]
    pub b: BSequence,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
    /// Test disc centers; defaults to `z0`, `z0 ± 2πi` and two period-2 points.
    #[serde(default)]
    pub panel: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_panel_radius")]
    pub panel_radius: f64,
    #[serde(default)]
    pub metric: Metric,
}

fn default_measure_depth() -> usize {
    80
}

fn default_k_max() -> u32 {
    24
}

fn default_panel_radius() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidatorSection {
    pub samples: usize,
    /// Defaults to `z0`.
    pub koebe_center: Option<[f64; 2]>,
    pub koebe_radius: f64,
    pub koebe_lambdas: Vec<f64>,
    pub koebe_address: Vec<i64>,
    pub tract_r: f64,
    pub tract_l: f64,
    pub one_step_t: f64,
    pub one_step_r0: f64,
    pub chained_depth: usize,
    pub chained_n_max: usize,
    pub chained_k: [u32; 2],
    /// `[x0, x1, y0, y1]`
    pub window: [f64; 4],
    /// Box sides `2^-k` for `k` in this inclusive range.
    pub eps_exponents: [i32; 2],
    pub return_test: ReturnTest,
}

impl Default for ValidatorSection {
    fn default() -> Self {
        Self {
            samples: 1000,
            koebe_center: None,
            koebe_radius: 1.0,
            koebe_lambdas: vec![0.25, 0.5, 0.75],
            koebe_address: vec![1],
            tract_r: 10.0,
            tract_l: 10.0,
            one_step_t: 1.5,
            one_step_r0: 8.0,
            chained_depth: 4,
            chained_n_max: 3,
            chained_k: [3, 8],
            window: [0.0, 4.0, 0.0, std::f64::consts::TAU],
            eps_exponents: [6, 10],
            return_test: ReturnTest::default(),
        }
    }
}

impl ValidatorSection {
    pub fn window(&self) -> Window {
        let [x0, x1, y0, y1] = self.window;
        Window { x0, x1, y0, y1 }
    }

    pub fn eps_list(&self) -> Vec<f64> {
        (self.eps_exponents[0]..=self.eps_exponents[1]).map(|k| 2f64.powi(-k)).collect()
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if let StartSpec::Keyword(k) = &self.map.z0 {
            if k != AUTO_START {
                return Err(invalid(format!("z0 must be [re, im] or {AUTO_START:?}, got {k:?}")));
            }
        }
        if self.tree.n_max < 4 {
            return Err(invalid("tree.n_max must be at least 4"));
        }
        positive("tree.eps_trunc", self.tree.eps_trunc)?;
        match &self.tree.cutoff {
            Cutoff::Keyword(k) if k != "adaptive" => {
                return Err(invalid(format!("tree.cutoff must be \"adaptive\" or an integer, got {k:?}")))
            }
            Cutoff::Fixed(0) => return Err(invalid("tree.cutoff must be at least 1")),
            _ => {}
        }
        if let Some(p) = &self.pressure {
            let grid = p.grid()?;
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("pressure t grid must be strictly increasing"));
            }
            for (i, r) in p.radii.iter().enumerate() {
                positive("pressure.radii", *r)?;
                if i > 0 && *r <= p.radii[i - 1] {
                    return Err(invalid("pressure.radii must be increasing"));
                }
            }
        }
        let [lo, hi] = self.bowen.bracket;
        positive("bowen.bracket", lo)?;
        if hi <= lo {
            return Err(invalid("bowen.bracket must be increasing"));
        }
        positive("bowen.tol", self.bowen.tol)?;
        if let Some(m) = &self.measure {
            match &m.t {
                MeasureT::Value(t) => positive("measure.t", *t)?,
                MeasureT::Keyword(k) if k != "bowen" => {
                    return Err(invalid(format!("measure.t must be a number or \"bowen\", got {k:?}")))
                }
                _ => {}
            }
            if m.s_grid.is_empty() {
                return Err(invalid("measure.s_grid is empty"));
            }
            for s in &m.s_grid {
                positive("measure.s_grid", *s)?;
            }
            if m.s_grid.windows(2).any(|w| w[1] >= w[0]) {
                return Err(invalid("measure.s_grid must be strictly decreasing"));
            }
            if m.depth < 1 {
                return Err(invalid("measure.depth must be at least 1"));
            }
            positive("measure.panel_radius", m.panel_radius)?;
        }
        let v = &self.validators;
        if v.samples == 0 {
            return Err(invalid("validators.samples must be positive"));
        }
        for (name, x) in [
            ("koebe_radius", v.koebe_radius),
            ("tract_r", v.tract_r),
            ("tract_l", v.tract_l),
            ("one_step_t", v.one_step_t),
            ("one_step_r0", v.one_step_r0),
        ] {
            positive(&format!("validators.{name}"), x)?;
        }
        if v.eps_exponents[1] < v.eps_exponents[0] {
            return Err(invalid("validators.eps_exponents must be [coarse, fine]"));
        }
        Ok(())
    }

    pub fn build_map(&self) -> CliResult<TranscendentalMap> {
        if self.map.family == Family::Zexp {
            return Ok(TranscendentalMap::zexp());
        }
        let lambda = match self.map.lambda {
            LambdaSpec::Real(x) => Complex64::new(x, 0.0),
            LambdaSpec::Complex([re, im]) => Complex64::new(re, im),
        };
        Ok(TranscendentalMap::new(self.map.family, lambda)?)
    }

    pub fn start_point(&self, map: &TranscendentalMap) -> CliResult<Complex64> {
        match self.map.z0 {
            StartSpec::Point([re, im]) => Ok(Complex64::new(re, im)),
            StartSpec::Keyword(_) => Ok(map.default_start_point()?),
        }
    }

    pub fn tree_config(&self) -> TreeConfig {
        let base = match self.tree.cutoff {
            Cutoff::Fixed(k) => TreeConfig::exact(k),
            Cutoff::Keyword(_) => TreeConfig::default(),
        };
        TreeConfig {
            eps_trunc: self.tree.eps_trunc,
            ..base
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

impl PressureSection {
    pub fn grid(&self) -> CliResult<Vec<f64>> {
        let grid = match (&self.t_grid, &self.t_range) {
            (Some(g), None) => g.clone(),
            (None, Some(r)) => {
                positive("t_range.step", r.step)?;
                let n = ((r.stop - r.start) / r.step + 1e-9).floor() as usize;
                (0..=n).map(|i| r.start + i as f64 * r.step).collect()
            }
            _ => return Err(invalid("pressure needs exactly one of t_grid and t_range")),
        };
        if grid.is_empty() {
            return Err(invalid("pressure t grid is empty"));
        }
        for t in &grid {
            positive("pressure t", *t)?;
        }
        Ok(grid)
    }
}
