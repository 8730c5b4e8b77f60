//! TOML experiment configuration.
//!
//! ```toml
//! [space]
//! mu = [0.0, 0.0]
//! m = 1
//! d = 1
//!
//! [model]
//! family = "tangential-rotation"
//! gamma = 0.0
//! params = { kappa = 1.0, sigma = 1.0 }
//!
//! [constraint]
//! variant = "ball"
//! params = { radius = 1.0 }
//!
//! [experiment]
//! kind = "tangency"
//! seed = 7
//! xi = [1.0, 0.0]
//! h_ladder = [0.0625, 0.03125, 0.015625, 0.0078125]
//! ```

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintSet, SmoothFunction};
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlSet, ControlShape, Family, LinearModel};
use crate::spectral::SpectralSpace;
use crate::tangency::EtaRule;
use crate::viability::FeedbackMode;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Tangency,
    Nagumo,
    Approx,
    Viability,
    Galerkin,
    LinearEquiv,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Tangency => "tangency",
            ExperimentKind::Nagumo => "nagumo",
            ExperimentKind::Approx => "approx",
            ExperimentKind::Viability => "viability",
            ExperimentKind::Galerkin => "galerkin",
            ExperimentKind::LinearEquiv => "linear-equiv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    /// Defaults to `mu.len()`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub mu: Vec<f64>,
    pub m: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: String,
    #[serde(default)]
    pub params: toml::Table,
    /// Declared Lipschitz/growth constant; defaults to the family's natural one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default)]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub variant: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    /// `singleton` (default), `box` or `ball`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_widths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

fn default_samples() -> usize {
    10_000
}

fn default_paths() -> usize {
    1_000
}

fn default_nagumo_samples() -> usize {
    256
}

fn default_feedback_samples() -> usize {
    200
}

fn default_eta() -> EtaRule {
    EtaRule::Balanced
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_ladder: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_ladder: Option<Vec<f64>>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_eta")]
    pub eta: EtaRule,
    #[serde(default)]
    pub refine: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_abs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_nagumo_samples")]
    pub nagumo_samples: usize,
    #[serde(default)]
    pub feedback: FeedbackMode,
    #[serde(default = "default_feedback_samples")]
    pub feedback_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_values: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_values: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_directory() -> String {
    ".".into()
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceSection,
    pub model: ModelSection,
    pub constraint: ConstraintSection,
    #[serde(default)]
    pub control: ControlSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantParams {
    drift: Vec<f64>,
    /// Rows of the `n × m` noise matrix.
    noise: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    b: Vec<Vec<f64>>,
    c: Vec<Vec<Vec<f64>>>,
    d: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    drift_offset: Option<Vec<f64>>,
    #[serde(default)]
    noise_offset: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KappaSigma {
    kappa: f64,
    sigma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClippedParams {
    linear: f64,
    cubic: f64,
    radius: f64,
    sigma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BallParams {
    #[serde(default)]
    center: Option<Vec<f64>>,
    radius: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HalfSpaceParams {
    normal: Vec<f64>,
    offset: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipsoidParams {
    #[serde(default)]
    center: Option<Vec<f64>>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
    radius: f64,
    #[serde(default = "one")]
    scale: f64,
    /// Interior point; defaults to the center.
    #[serde(default)]
    anchor: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

fn params<T: DeserializeOwned>(table: &toml::Table, what: &str) -> Result<T> {
    table
        .clone()
        .try_into()
        .map_err(|e| Error::config(format!("{what} params: {e}")))
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!("{what} must be a {nrows}×{ncols} array of rows")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(values: &[f64], len: usize, what: &str) -> Result<Vector> {
    if values.len() != len {
        return Err(Error::config(format!("{what} must have length {len}, got {}", values.len())));
    }
    Ok(Vector::from_column_slice(values))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Effective configuration; floats use the shortest round-trip form, so
    /// parsing it back reproduces every value bit for bit.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks everything that does not need the numerical layer: registry
    /// names, dimensions and the parameter tables.
    pub fn validate(&self) -> Result<()> {
        let space = self.build_space()?;
        self.build_model(&space)?;
        self.build_constraint()?;
        self.build_control()?;
        if let Some(xi) = &self.experiment.xi {
            vector(xi, space.dim(), "experiment.xi")?;
        }
        Ok(())
    }

    pub fn build_space(&self) -> Result<SpectralSpace> {
        let s = &self.space;
        if let Some(n) = s.n {
            if n != s.mu.len() {
                return Err(Error::config(format!("space.n = {n} but mu has {} entries", s.mu.len())));
            }
        }
        SpectralSpace::new(s.mu.clone(), s.m, s.d).map_err(|e| Error::config(format!("space: {e}")))
    }

    pub fn build_model(&self, space: &SpectralSpace) -> Result<CoefficientModel> {
        let (n, m, d) = (space.dim(), space.noise_dim(), space.control_dim());
        let p = &self.model.params;
        let family = match self.model.family.as_str() {
            "zero" => {
                if !p.is_empty() {
                    return Err(Error::config("model 'zero' takes no params"));
                }
                Family::Zero
            }
            "constant" => {
                let c: ConstantParams = params(p, "constant")?;
                Family::Constant {
                    drift: vector(&c.drift, n, "model.params.drift")?,
                    noise: matrix(&c.noise, n, m, "model.params.noise")?,
                }
            }
            "linear" => {
                let l: LinearParams = params(p, "linear")?;
                let b = matrix(&l.b, n, d, "model.params.b")?;
                if l.c.len() != m || l.d.len() != m {
                    return Err(Error::config(format!("linear model needs {m} C and D matrices")));
                }
                let c = l.c.iter().map(|c| matrix(c, n, n, "model.params.c[j]")).collect::<Result<Vec<_>>>()?;
                let dm = l.d.iter().map(|c| matrix(c, n, d, "model.params.d[j]")).collect::<Result<Vec<_>>>()?;
                let mut lin = LinearModel::new(b, c, dm).map_err(|e| Error::config(e.to_string()))?;
                if l.drift_offset.is_some() || l.noise_offset.is_some() {
                    let drift = match &l.drift_offset {
                        Some(v) => vector(v, n, "model.params.drift_offset")?,
                        None => Vector::zeros(n),
                    };
                    let noise = match &l.noise_offset {
                        Some(rows) => matrix(rows, n, m, "model.params.noise_offset")?,
                        None => Matrix::zeros(n, m),
                    };
                    lin = lin.with_offsets(drift, noise).map_err(|e| Error::config(e.to_string()))?;
                }
                Family::Linear(lin)
            }
            "radial-restoring" => {
                let k: KappaSigma = params(p, "radial-restoring")?;
                Family::RadialRestoring {
                    kappa: k.kappa,
                    sigma: k.sigma,
                }
            }
            "tangential-rotation" => {
                let k: KappaSigma = params(p, "tangential-rotation")?;
                Family::TangentialRotation {
                    kappa: k.kappa,
                    sigma: k.sigma,
                }
            }
            "clipped-polynomial" => {
                let c: ClippedParams = params(p, "clipped-polynomial")?;
                Family::ClippedPolynomial {
                    linear: c.linear,
                    cubic: c.cubic,
                    radius: c.radius,
                    sigma: c.sigma,
                }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown model family '{other}' (known: {})",
                    Family::REGISTRY.join(", ")
                )))
            }
        };
        let built = match self.model.c {
            Some(c) => CoefficientModel::new(space, family, c, self.model.gamma),
            None => {
                let probe = CoefficientModel::new(space, family, 1.0, self.model.gamma)?;
                let natural = probe.natural_lipschitz();
                let c = if natural > 0.0 { natural } else { 1.0 };
                CoefficientModel::new(space, probe.family().clone(), c, self.model.gamma)
            }
        };
        built.map_err(|e| match e {
            Error::InvalidInput(msg) => Error::config(format!("model: {msg}")),
            other => other,
        })
    }

    pub fn build_constraint(&self) -> Result<ConstraintSet> {
        let n = self.space.mu.len();
        let p = &self.constraint.params;
        let built = match self.constraint.variant.as_str() {
            "ball" => {
                let b: BallParams = params(p, "ball")?;
                let center = match &b.center {
                    Some(c) => vector(c, n, "constraint.params.center")?,
                    None => Vector::zeros(n),
                };
                ConstraintSet::ball(center, b.radius)
            }
            "half-space" => {
                let h: HalfSpaceParams = params(p, "half-space")?;
                ConstraintSet::half_space(vector(&h.normal, n, "constraint.params.normal")?, h.offset)
            }
            "level-set" => {
                let e: EllipsoidParams = params(p, "level-set")?;
                let center = match &e.center {
                    Some(c) => vector(c, n, "constraint.params.center")?,
                    None => Vector::zeros(n),
                };
                let weights = match &e.weights {
                    Some(w) => vector(w, n, "constraint.params.weights")?,
                    None => Vector::from_element(n, 1.0),
                };
                let anchor = match &e.anchor {
                    Some(a) => vector(a, n, "constraint.params.anchor")?,
                    None => center.clone(),
                };
                ConstraintSet::level_set(
                    SmoothFunction::Ellipsoid {
                        center,
                        weights,
                        radius: e.radius,
                        scale: e.scale,
                    },
                    anchor,
                )
            }
            other => {
                return Err(Error::config(format!(
                    "unknown constraint variant '{other}' (known: ball, half-space, level-set)"
                )))
            }
        };
        built.map_err(|e| Error::config(format!("constraint: {e}")))
    }

    pub fn build_control(&self) -> Result<ControlSet> {
        let d = self.space.d;
        let c = &self.control;
        let center = match &c.center {
            Some(v) => vector(v, d, "control.center")?,
            None => Vector::zeros(d),
        };
        let resolution = c.resolution.unwrap_or(1);
        let built = match c.shape.as_deref().unwrap_or("singleton") {
            "singleton" => return Ok(ControlSet::singleton(center)),
            "box" => {
                let w = c
                    .half_widths
                    .clone()
                    .ok_or_else(|| Error::config("control.shape = 'box' needs half_widths"))?;
                ControlSet::new(ControlShape::Box { half_widths: w }, center, resolution)
            }
            "ball" => {
                let r = c.radius.ok_or_else(|| Error::config("control.shape = 'ball' needs radius"))?;
                ControlSet::new(ControlShape::Ball { radius: r }, center, resolution)
            }
            other => return Err(Error::config(format!("unknown control shape '{other}' (known: singleton, box, ball)"))),
        };
        built.map_err(|e| Error::config(format!("control: {e}")))
    }

    pub fn xi(&self) -> Result<Vector> {
        let xi = self
            .experiment
            .xi
            .as_ref()
            .ok_or_else(|| Error::config("experiment.xi is required"))?;
        vector(xi, self.space.mu.len(), "experiment.xi")
    }

    pub fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
        value.clone().ok_or_else(|| Error::config(format!("experiment.{key} is required")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TANGENTIAL: &str = r#"
[space]
mu = [0.0, 0.0]
m = 1
d = 1

[model]
family = "tangential-rotation"
params = { kappa = 1.0, sigma = 1.0 }

[constraint]
variant = "ball"
params = { radius = 1.0 }

[experiment]
kind = "tangency"
seed = 7
xi = [1.0, 0.0]
h_ladder = [0.0625, 0.03125, 0.015625, 0.0078125]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(TANGENTIAL).unwrap();
        assert_eq!(cfg.experiment.kind, ExperimentKind::Tangency);
        assert_eq!(cfg.experiment.eta, EtaRule::Balanced);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
        let model = cfg.build_model(&cfg.build_space().unwrap()).unwrap();
        assert_eq!(model.lipschitz(), 1.0);
    }

    #[test]
    fn floats_round_trip_bit_exactly() {
        let mut cfg = ExperimentConfig::from_toml_str(TANGENTIAL).unwrap();
        cfg.experiment.h_ladder = Some(vec![0.1, 1.0 / 3.0, std::f64::consts::PI * 1e-7, 5e-324]);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        let (a, b) = (cfg.experiment.h_ladder.unwrap(), again.experiment.h_ladder.unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gamma_bound_is_a_config_error() {
        let text = TANGENTIAL.replace("family = \"tangential-rotation\"", "family = \"tangential-rotation\"\ngamma = 0.7");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("gamma"), "{err}");
        assert!(err.to_string().contains("1/2"), "{err}");
    }

    #[test]
    fn rejects_unknown_names_and_missing_seed() {
        let bad = TANGENTIAL.replace("tangential-rotation", "spiral");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("spiral"));
        let bad = TANGENTIAL.replace("variant = \"ball\"", "variant = \"torus\"");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = TANGENTIAL.replace("seed = 7\n", "");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("seed"));
        let bad = TANGENTIAL.replace("kappa = 1.0,", "kappa = 1.0, tau = 2.0,");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = TANGENTIAL.replace("xi = [1.0, 0.0]", "xi = [1.0]");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    /// Every registry family and constraint variant builds from text alone.
    #[test]
    fn schema_completeness() {
        let families = [
            ("zero", "{}"),
            ("constant", "{ drift = [0.0, 0.0], noise = [[1.0], [0.0]] }"),
            (
                "linear",
                "{ b = [[1.0], [0.0]], c = [[[0.0, 1.0], [-1.0, 0.0]]], d = [[[0.0], [0.0]]], drift_offset = [0.0, 0.1] }",
            ),
            ("radial-restoring", "{ kappa = 1.0, sigma = 0.5 }"),
            ("tangential-rotation", "{ kappa = 1.0, sigma = 1.0 }"),
            ("clipped-polynomial", "{ linear = 1.0, cubic = 0.5, radius = 2.0, sigma = 0.1 }"),
        ];
        assert_eq!(families.len(), Family::REGISTRY.len());
        for (family, p) in families {
            let text = TANGENTIAL.replace(
                "family = \"tangential-rotation\"\nparams = { kappa = 1.0, sigma = 1.0 }",
                &format!("family = \"{family}\"\nparams = {p}"),
            );
            let cfg = ExperimentConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{family}: {e}"));
            let model = cfg.build_model(&cfg.build_space().unwrap()).unwrap();
            assert_eq!(model.family().tag(), family);
        }
        let constraints = [
            ("ball", "{ radius = 1.0 }"),
            ("half-space", "{ normal = [1.0, 0.0], offset = 1.0 }"),
            ("level-set", "{ center = [0.0, 0.0], weights = [1.0, 4.0], radius = 1.0 }"),
        ];
        for (variant, p) in constraints {
            let text = TANGENTIAL.replace(
                "variant = \"ball\"\nparams = { radius = 1.0 }",
                &format!("variant = \"{variant}\"\nparams = {p}"),
            );
            let cfg = ExperimentConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{variant}: {e}"));
            assert_eq!(cfg.build_constraint().unwrap().variant(), variant);
        }
    }

    #[test]
    fn control_sections() {
        let text = format!("{TANGENTIAL}\n[control]\nshape = \"box\"\nhalf_widths = [1.0]\nresolution = 5\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.build_control().unwrap().control_grid().len(), 5);
        let text = format!("{TANGENTIAL}\n[control]\nshape = \"box\"\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }
}
