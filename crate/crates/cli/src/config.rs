//! Declarative run configuration (YAML or JSON).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use metakit::escalc::EsInput;
use metakit::ingest::ColumnType;
use metakit::mv::VcalcSpec;
use metakit::plots::{FunnelCenter, PlotSpec};
use metakit::postfit::{Adjustment, Weighting};
use metakit::pubbias::{Estimator, FailSafeMethod, Side};
use metakit::robust::RobustKind;
use metakit::uni::mh::MhMeasure;
use metakit::uni::{Method, TestKind, Transform};
use serde::Deserialize;

use crate::exit::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV path, relative to the config file.
    pub data: PathBuf,
    #[serde(default)]
    pub column_types: HashMap<String, ColumnType>,
    pub effect_size: EffectSizeConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub clustering: Option<ClusteringConfig>,
    #[serde(default)]
    pub subgroup: Option<String>,
    #[serde(default)]
    pub outputs: OutputsConfig,
    /// Always on; accepted so configs can state it.
    #[serde(default = "yes")]
    pub deterministic: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSizeConfig {
    /// Computation steps applied in order; later steps fill rows earlier ones left empty.
    #[serde(default)]
    pub compute: Vec<EsStep>,
    #[serde(default)]
    pub columns: Option<EsColumns>,
    /// Largest tolerated fraction of rows without an effect size.
    #[serde(default = "default_threshold")]
    pub failure_threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
pub struct EsStep {
    #[serde(flatten)]
    pub input: EsInput,
    /// Only rows where this column is present and nonempty in the raw data.
    #[serde(default)]
    pub rows_with: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsColumns {
    pub yi: String,
    #[serde(default)]
    pub sei: Option<String>,
    #[serde(default)]
    pub vi: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub method: Method,
    pub test: TestKind,
    pub ci_level: f64,
    pub kh_truncate: bool,
    pub fixed_tau2: Option<f64>,
    pub transform: Transform,
    pub terms: Vec<String>,
    pub intercept: bool,
    pub scale_terms: Option<Vec<String>>,
    pub scale_intercept: bool,
    pub multilevel: Option<MultilevelConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            method: Method::Reml,
            test: TestKind::KnappHartung,
            ci_level: 0.95,
            kh_truncate: false,
            fixed_tau2: None,
            transform: Transform::None,
            terms: Vec::new(),
            intercept: true,
            scale_terms: None,
            scale_intercept: true,
            multilevel: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultilevelConfig {
    pub level1: String,
    #[serde(default)]
    pub level2: Option<String>,
    #[serde(default)]
    pub vcov: Option<VcovConfig>,
    /// Write the effect-size covariance matrix here (relative to the output directory).
    #[serde(default)]
    pub save_v: Option<PathBuf>,
    #[serde(default = "yes")]
    pub profile_ci: bool,
    #[serde(default = "yes")]
    pub inclusion_tests: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(try_from = "VcovRaw")]
pub enum VcovConfig {
    Vcalc(VcalcSpec),
    /// CSV matrix, relative to the config file.
    Precomputed(PathBuf),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VcovRaw {
    vcalc: Option<VcalcSpec>,
    precomputed: Option<PathBuf>,
}

impl TryFrom<VcovRaw> for VcovConfig {
    type Error = String;
    fn try_from(r: VcovRaw) -> Result<Self, String> {
        match (r.vcalc, r.precomputed) {
            (Some(v), None) => Ok(VcovConfig::Vcalc(v)),
            (None, Some(p)) => Ok(VcovConfig::Precomputed(p)),
            _ => Err("vcov takes exactly one of `vcalc` or `precomputed`".into()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub column: String,
    #[serde(default, rename = "type")]
    pub kind: RobustKind,
    #[serde(default)]
    pub allow_pseudo_inverse: bool,
}

pub const TABLE_CATALOG: [&str; 10] = [
    "meta_analytic_tests",
    "meta_analytic_estimates",
    "meta_regression_terms",
    "meta_regression_coefficients",
    "random_effects_summary",
    "component_inclusion_tests",
    "emm",
    "contrasts",
    "diagnostics",
    "pubbias",
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsConfig {
    /// Table selection; `None` means every table that applies.
    pub tables: Option<Vec<String>>,
    pub emm: Option<EmmConfig>,
    pub pubbias: Option<PubbiasConfig>,
    pub mantel_haenszel: Option<MhMeasure>,
    pub peto: bool,
    pub plots: PlotsConfig,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig {
            tables: None,
            emm: None,
            pubbias: None,
            mantel_haenszel: None,
            peto: false,
            plots: PlotsConfig::default(),
        }
    }
}

impl OutputsConfig {
    pub fn wants(&self, table: &str) -> bool {
        self.tables
            .as_ref()
            .map_or(true, |t| t.iter().any(|x| x == table))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmmConfig {
    /// Focal terms; an empty list gives the adjusted overall estimate only.
    pub terms: Vec<String>,
    pub weighting: Weighting,
    pub contrasts: bool,
    pub adjustment: Adjustment,
    pub test_against: f64,
    pub scale: bool,
}

impl Default for EmmConfig {
    fn default() -> Self {
        EmmConfig {
            terms: Vec::new(),
            weighting: Weighting::Weighted,
            contrasts: false,
            adjustment: Adjustment::None,
            test_against: 0.0,
            scale: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PubbiasConfig {
    pub egger: bool,
    pub begg: bool,
    pub trim_and_fill: Option<TrimFillConfig>,
    pub failsafe: Option<FailSafeConfig>,
}

impl Default for PubbiasConfig {
    fn default() -> Self {
        PubbiasConfig {
            egger: true,
            begg: true,
            trim_and_fill: Some(TrimFillConfig::default()),
            failsafe: Some(FailSafeConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimFillConfig {
    pub estimator: Estimator,
    pub side: Side,
    pub max_iter: usize,
}

impl Default for TrimFillConfig {
    fn default() -> Self {
        TrimFillConfig {
            estimator: Estimator::L0,
            side: Side::Auto,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailSafeConfig {
    pub method: FailSafeMethod,
    pub alpha: f64,
    pub target: Option<f64>,
}

impl Default for FailSafeConfig {
    fn default() -> Self {
        FailSafeConfig {
            method: FailSafeMethod::Rosenthal,
            alpha: 0.05,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotsConfig {
    pub funnel: Option<FunnelConfig>,
    pub forest: Option<ForestConfig>,
    pub bubble: Option<BubbleConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunnelConfig {
    pub center: FunnelCenter,
    pub levels: Vec<f64>,
    pub heterogeneity_widened: bool,
    pub spec: PlotSpec,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig {
            center: FunnelCenter::H0Zero,
            levels: vec![0.90, 0.95, 0.99],
            heterogeneity_widened: false,
            spec: PlotSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub label: Option<String>,
    pub columns: Vec<String>,
    pub aggregation: Option<String>,
    pub predicted: bool,
    pub subgroup: bool,
    pub emm_rows: bool,
    pub heterogeneity: bool,
    pub estimate_test: bool,
    pub show_weights: bool,
    pub reference_line: Option<f64>,
    pub spec: PlotSpec,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            label: None,
            columns: Vec::new(),
            aggregation: None,
            predicted: true,
            subgroup: false,
            emm_rows: false,
            heterogeneity: true,
            estimate_test: true,
            show_weights: false,
            reference_line: Some(0.0),
            spec: PlotSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BubbleConfig {
    pub focal: String,
    pub separate_lines: Option<String>,
    pub separate_plots: Option<String>,
    pub ci: bool,
    pub pi: bool,
    pub spec: PlotSpec,
}

impl Default for BubbleConfig {
    fn default() -> Self {
        BubbleConfig {
            focal: String::new(),
            separate_lines: None,
            separate_plots: None,
            ci: true,
            pi: true,
            spec: PlotSpec::default(),
        }
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

/// Read and validate a config. YAML is a superset of JSON, so one parser serves both.
pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config("config is not UTF-8".into()))?;
    let config: RunConfig =
        serde_yaml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, dir, bytes })
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let es = &self.effect_size;
        match (es.compute.is_empty(), &es.columns) {
            (true, None) => {
                return Err(CliError::Config(
                    "effect_size needs either compute steps or columns".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(CliError::Config(
                    "effect_size takes compute steps or columns, not both".into(),
                ))
            }
            _ => {}
        }
        if let Some(c) = &es.columns {
            if c.sei.is_some() == c.vi.is_some() {
                return Err(CliError::Config(
                    "effect_size.columns needs exactly one of sei and vi".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&es.failure_threshold) {
            return Err(CliError::Config(
                "failure_threshold must lie in [0, 1]".into(),
            ));
        }
        if !self.deterministic {
            return Err(CliError::Config(
                "deterministic cannot be switched off".into(),
            ));
        }
        let m = &self.model;
        if !(m.ci_level > 0.0 && m.ci_level < 1.0) {
            return Err(CliError::Config("ci_level must lie in (0, 1)".into()));
        }
        if m.multilevel.is_some() && m.scale_terms.is_some() {
            return Err(CliError::Config(
                "scale terms are not available for multilevel models".into(),
            ));
        }
        if m.multilevel.is_some() && self.subgroup.is_some() {
            return Err(CliError::Config(
                "subgroup analysis is available for univariate models only".into(),
            ));
        }
        if let Some(t) = &self.outputs.tables {
            if let Some(bad) = t.iter().find(|x| !TABLE_CATALOG.contains(&x.as_str())) {
                return Err(CliError::Config(format!("unknown table '{bad}'")));
            }
        }
        if let Some(b) = &self.outputs.plots.bubble {
            if b.focal.is_empty() {
                return Err(CliError::Config(
                    "bubble plot needs a focal moderator".into(),
                ));
            }
        }
        Ok(())
    }

    /// Every column the config mentions, for existence checks.
    pub fn referenced_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut add = |s: &str| {
            if !out.iter().any(|x| x == s) {
                out.push(s.to_string());
            }
        };
        for step in &self.effect_size.compute {
            match &step.input {
                EsInput::TwoByTwo { a, b, c, d, .. } => [a, b, c, d].iter().for_each(|s| add(s)),
                EsInput::Smd {
                    m1,
                    m2,
                    sd1,
                    sd2,
                    n1,
                    n2,
                } => [m1, m2, sd1, sd2, n1, n2].iter().for_each(|s| add(s)),
                EsInput::FisherZ { r, n } => [r, n].iter().for_each(|s| add(s)),
            }
            if let Some(r) = &step.rows_with {
                add(r);
            }
        }
        if let Some(c) = &self.effect_size.columns {
            add(&c.yi);
            c.sei.iter().chain(c.vi.iter()).for_each(|s| add(s));
        }
        let m = &self.model;
        for t in m.terms.iter().chain(m.scale_terms.iter().flatten()) {
            t.split([':', '*']).for_each(|v| add(v.trim()));
        }
        if let Some(ml) = &m.multilevel {
            add(&ml.level1);
            ml.level2.iter().for_each(|s| add(s));
            if let Some(VcovConfig::Vcalc(v)) = &ml.vcov {
                add(&v.cluster);
                v.construct
                    .iter()
                    .chain(v.construct_type.iter())
                    .for_each(|s| add(s));
            }
        }
        if let Some(c) = &self.clustering {
            add(&c.column);
        }
        if let Some(s) = &self.subgroup {
            add(s);
        }
        let p = &self.outputs.plots;
        if let Some(f) = &p.forest {
            f.label
                .iter()
                .chain(f.columns.iter())
                .chain(f.aggregation.iter())
                .for_each(|s| add(s));
        }
        for spec in [
            p.funnel.as_ref().map(|f| &f.spec),
            p.forest.as_ref().map(|f| &f.spec),
            p.bubble.as_ref().map(|b| &b.spec),
        ]
        .into_iter()
        .flatten()
        {
            spec.color_var
                .iter()
                .chain(spec.shape_var.iter())
                .chain(spec.label_var.iter())
                .for_each(|s| add(s));
        }
        out
    }
}
