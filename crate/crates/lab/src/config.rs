//! Experiment configuration: one TOML file per invocation.
//!
//! Every section has defaults, so an empty file (or no file) is a valid
//! config. `--set a.b=value` edits are applied to the parsed document
//! before it is checked against the schema. The schema is versioned through
//! the top-level `schema_version` key.

use std::path::{Path, PathBuf};

use dmvae_core::data::{grid8, ToyDataSpec};
use dmvae_core::dm::{AlignmentObjective, DmvaeConfig, RefineConfig};
use dmvae_core::flow::GateConfig;
use dmvae_core::reference::{parse_points, ReferenceDistribution};
use dmvae_core::Array;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, LabResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Teach,
    ObjectivePanel,
    DirectionField,
    RefSweep,
    Ablation,
    Pipeline,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Teach => "teach",
            ExperimentKind::ObjectivePanel => "objective-panel",
            ExperimentKind::DirectionField => "direction-field",
            ExperimentKind::RefSweep => "ref-sweep",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::Pipeline => "pipeline",
        }
    }
}

/// A reference distribution: a preset name, a point file, or a full spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RefSpec {
    Preset(String),
    File { points_file: PathBuf },
    Explicit(ReferenceDistribution),
}

pub const PRESETS: &[&str] = &[
    "ring8",
    "ring8_subsampled",
    "standard_gaussian",
    "grid8",
    "two_rings",
    "spiral",
    "checkerboard",
    "diffused_ring8",
];

pub fn preset(name: &str) -> Option<ReferenceDistribution> {
    Some(match name {
        "ring8" => ReferenceDistribution::ring8(),
        "ring8_subsampled" => ReferenceDistribution::ring8_subsampled(),
        "standard_gaussian" => ReferenceDistribution::standard_gaussian(2),
        "grid8" => ReferenceDistribution::Gmm(grid8()),
        "two_rings" => ReferenceDistribution::TwoRings {
            inner: 1.0,
            outer: 2.0,
            noise: 0.05,
        },
        "spiral" => ReferenceDistribution::Spiral {
            turns: 1.5,
            radius: 2.0,
            noise: 0.05,
        },
        "checkerboard" => ReferenceDistribution::Checkerboard {
            cells: 4,
            half_width: 2.0,
        },
        "diffused_ring8" => ReferenceDistribution::Diffused {
            source: Box::new(ReferenceDistribution::ring8()),
            t: 0.5,
        },
        _ => return None,
    })
}

impl RefSpec {
    pub fn preset(name: &str) -> Self {
        RefSpec::Preset(name.into())
    }

    /// Short name for tables and directory names.
    pub fn label(&self) -> String {
        match self {
            RefSpec::Preset(n) => n.clone(),
            RefSpec::File { points_file } => points_file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "points".into()),
            RefSpec::Explicit(r) => r.name().into(),
        }
    }

    /// Relative point-file paths are resolved against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> LabResult<ReferenceDistribution> {
        let r = match self {
            RefSpec::Preset(n) => preset(n).ok_or_else(|| {
                LabError::Config(format!("unknown reference preset `{n}` (known: {})", PRESETS.join(", ")))
            })?,
            RefSpec::File { points_file } => {
                let path = base_dir.join(points_file);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                ReferenceDistribution::Empirical {
                    points: parse_points(&text)?,
                }
            }
            RefSpec::Explicit(r) => r.clone(),
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub data_dim: usize,
    pub noise: f64,
    pub map_seed: u64,
    /// Distribution of the hidden cause; its labels are the guidance classes.
    pub source: RefSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = ToyDataSpec::default();
        Self {
            data_dim: d.data_dim,
            noise: d.noise,
            map_seed: d.map_seed,
            source: RefSpec::preset("grid8"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_final_frac: f64,
    pub conditional: bool,
    pub p_drop: f64,
    /// Loaded when the file exists; otherwise the trained teacher is saved here.
    pub checkpoint: Option<PathBuf>,
    pub gate: GateConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            steps: 20_000,
            batch: 128,
            lr: 1e-3,
            lr_final_frac: 0.05,
            conditional: false,
            p_drop: 0.1,
            checkpoint: None,
            gate: GateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSection {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub projector_hidden: Vec<usize>,
    pub stochastic: bool,
    /// Projector regression onto the paired features after pretraining.
    pub projector_steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AeSection {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            encoder_hidden: vec![128, 128, 128],
            decoder_hidden: vec![128, 128, 128],
            projector_hidden: vec![64, 64],
            stochastic: false,
            projector_steps: 1000,
            lr: 1e-3,
            batch: 128,
        }
    }
}

/// The generative prior fitted to `q(z)` after joint training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_final_frac: f64,
    /// Number of ODE samples drawn for evaluation.
    pub samples: usize,
    pub ode_steps: usize,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            steps: 10_000,
            batch: 256,
            lr: 1e-3,
            lr_final_frac: 0.05,
            samples: 4000,
            ode_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelsSection {
    pub steps: usize,
    pub metrics_every: usize,
    pub variants: Vec<AlignmentObjective>,
}

impl Default for PanelsSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            metrics_every: 300,
            variants: AlignmentObjective::score_variants(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSource {
    /// Closed-form scores of `q` (fake side) and the reference (real side).
    Analytic { q: RefSpec },
    /// Teacher and fake nets after `joint_steps` of DM training.
    Nets { joint_steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub times: Vec<f64>,
    /// Arrows per axis; the field has `resolution^2` arrows.
    pub resolution: usize,
    /// The grid spans `[-extent, extent]^2`.
    pub extent: f64,
    pub source: FieldSource,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self {
            times: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            resolution: 15,
            extent: 3.0,
            source: FieldSource::Nets { joint_steps: 1000 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub references: Vec<RefSpec>,
    pub lambda_structured: f64,
    pub lambda_synthetic: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            references: ["ring8", "ring8_subsampled", "standard_gaussian", "two_rings", "diffused_ring8"]
                .iter()
                .map(|n| RefSpec::preset(n))
                .collect(),
            lambda_structured: 10.0,
            lambda_synthetic: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateMode {
    OneAtATime,
    Cartesian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerChoice {
    Uniform,
    Annealed,
}

/// Width of the teacher and fake score nets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetSize {
    Small,
    Large,
}

impl NetSize {
    pub fn hidden(&self) -> Vec<usize> {
        match self {
            NetSize::Small => vec![128, 128],
            NetSize::Large => vec![256, 256, 256],
        }
    }
}

/// Sweeps with more cells than this need `allow_large = true`.
pub const MAX_CELLS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub mode: AblateMode,
    pub allow_large: bool,
    pub lambda: Vec<f64>,
    pub guidance: Vec<f64>,
    pub sampler: Vec<SamplerChoice>,
    pub net_size: Vec<NetSize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            mode: AblateMode::OneAtATime,
            allow_large: false,
            lambda: vec![1.0, 10.0, 20.0, 100.0],
            guidance: vec![1.0, 3.0, 5.0],
            sampler: vec![SamplerChoice::Uniform, SamplerChoice::Annealed],
            net_size: vec![NetSize::Large, NetSize::Small],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub guidance: Vec<f64>,
    /// Also run with `lambda_dm = 0` as the reconstruction baseline.
    pub baseline: bool,
    /// Train a class-conditional teacher so guidance has an effect.
    pub conditional_teacher: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            guidance: vec![1.0, 5.0],
            baseline: true,
            conditional_teacher: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: Option<ExperimentKind>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads for independent cells.
    pub workers: usize,
    pub reference: RefSpec,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub ae: AeSection,
    pub dmvae: DmvaeConfig,
    pub refine: RefineConfig,
    pub prior: PriorSection,
    pub panels: PanelsSection,
    pub field: FieldSection,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
    pub pipeline: PipelineSection,
    /// Directory that relative paths in the config are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: None,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            workers: 1,
            reference: RefSpec::preset("ring8"),
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            ae: AeSection::default(),
            dmvae: DmvaeConfig::default(),
            refine: RefineConfig::default(),
            prior: PriorSection::default(),
            panels: PanelsSection::default(),
            field: FieldSection::default(),
            sweep: SweepSection::default(),
            ablate: AblateSection::default(),
            pipeline: PipelineSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML document, creating missing tables.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> LabResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(LabError::Config(format!("override `{spec}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("override `{spec}`: `{k}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> LabResult<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> LabResult<Self> {
        let (text, base_dir) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(io_err(p))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), PathBuf::from(".")),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        cfg.base_dir = base_dir;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> LabResult<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn resolve_reference(&self) -> LabResult<ReferenceDistribution> {
        self.reference.resolve(&self.base_dir)
    }

    pub fn data_spec(&self) -> LabResult<ToyDataSpec> {
        Ok(ToyDataSpec {
            data_dim: self.data.data_dim,
            source: self.data.source.resolve(&self.base_dir)?,
            noise: self.data.noise,
            map_seed: self.data.map_seed,
        })
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        let reference = self.resolve_reference()?;
        self.data_spec()?.source.validate()?;
        self.dmvae.validate()?;
        if self.ae.latent_dim == 0 {
            return bad("ae.latent_dim must be >= 1".into());
        }
        if self.field.resolution == 0 || !(self.field.extent > 0.0) {
            return bad("field.resolution and field.extent must be positive".into());
        }
        if let Some(t) = self.field.times.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return bad(format!("field time {t} is outside (0, 1]"));
        }
        if let FieldSource::Analytic { q } = &self.field.source {
            if q.resolve(&self.base_dir)?.dim() != reference.dim() {
                return bad("field.source.q and the reference differ in dimension".into());
            }
        }
        for r in &self.sweep.references {
            r.resolve(&self.base_dir)?;
        }
        if self.panels.variants.is_empty() || self.pipeline.guidance.is_empty() {
            return bad("panels.variants and pipeline.guidance must not be empty".into());
        }
        let a = &self.ablate;
        if a.lambda.is_empty() || a.guidance.is_empty() || a.sampler.is_empty() || a.net_size.is_empty() {
            return bad("every ablation axis needs at least one value".into());
        }
        Ok(())
    }
}

/// Writes `points` in the format read by point-file references.
pub fn format_points(points: &Array) -> String {
    let mut s = String::new();
    for row in points.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_config() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.reference = RefSpec::Explicit(ReferenceDistribution::Gaussian {
            mean: vec![1.0, -2.0],
            cov: Array::from_rows(&[[1.0, 0.2], [0.2, 0.5]]),
        });
        c.teacher.checkpoint = Some("teacher.json".into());
        c.field.source = FieldSource::Analytic {
            q: RefSpec::preset("standard_gaussian"),
        };
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = [
            "dmvae.lambda_dm=20".to_string(),
            "seeds=[3, 4]".to_string(),
            "reference=ring8_subsampled".to_string(),
            "dmvae.objective.objective=loss_diff".to_string(),
            "field.source = { mode = \"nets\", joint_steps = 7 }".to_string(),
        ];
        let c = ExperimentConfig::from_toml_str("[dmvae]\nsteps = 10\n", &o).unwrap();
        assert_eq!(c.dmvae.lambda_dm, 20.0);
        assert_eq!(c.dmvae.steps, 10);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.reference, RefSpec::preset("ring8_subsampled"));
        assert_eq!(c.dmvae.objective, AlignmentObjective::LossDiff);
        assert_eq!(c.field.source, FieldSource::Nets { joint_steps: 7 });
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(ExperimentConfig::from_toml_str("[teacher]\nstepz = 3\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["noequals".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["seeds.x=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.reference = RefSpec::preset("nope");
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.field.times = vec![0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_preset_resolves() {
        for p in PRESETS {
            RefSpec::preset(p).resolve(Path::new(".")).unwrap();
        }
    }

    #[test]
    fn point_files_resolve_relative_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let pts = Array::from_rows(&[[0.5, 1.0], [-1.0, 2.0], [0.0, 0.0]]);
        std::fs::write(dir.path().join("pts.txt"), format_points(&pts)).unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(&cfg_path, "reference = { points_file = \"pts.txt\" }\n").unwrap();
        let c = ExperimentConfig::load(Some(&cfg_path), &[]).unwrap();
        match c.resolve_reference().unwrap() {
            ReferenceDistribution::Empirical { points } => assert_eq!(points, pts),
            other => panic!("{other:?}"),
        }
    }
}
