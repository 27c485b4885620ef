//! Experiment drivers behind the CLI subcommands.
//!
//! Output layout: `<out>/<kind>/summary.json` for the invocation and
//! `<out>/<kind>/seed-<s>/` per seed, holding the resolved `config.toml`
//! and one subdirectory per cell. Data files are written as soon as they
//! exist; figures are rendered only after all of a cell's data is on disk.

pub mod ablate;
pub mod field;
pub mod panels;
pub mod pipeline;
pub mod sweep;
pub mod teach;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use dmvae_core::data::ToyData;
use dmvae_core::dm::{fit_projector, pretrain_ae, TrainHooks};
use dmvae_core::flow::{train_flow_on, FlowTrainConfig, GatedTeacher, LossTrace};
use dmvae_core::networks::{AutoEncoder, AutoEncoderSpec, VelocityNet, VelocityNetSpec};
use dmvae_core::reference::ReferenceDistribution;
use dmvae_core::{rng, Array};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, ExperimentKind, TeacherSection};
use crate::error::{io_err, LabError, LabResult};
use crate::table::Table;

/// Wall clock for the trainer's timing hooks.
pub struct Clock(Instant);

impl Clock {
    pub fn start() -> Self {
        Clock(Instant::now())
    }
}

impl TrainHooks for Clock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

type Render = Box<dyn FnOnce() -> LabResult<String> + Send>;

/// Files of one cell. Figures are queued and rendered by [`Artifacts::finish`].
pub struct Artifacts {
    dir: PathBuf,
    /// Path of `dir` relative to the invocation's output directory.
    rel: PathBuf,
    files: Vec<String>,
    renders: Vec<(String, Render)>,
}

impl Artifacts {
    pub fn new(root: &Path, rel: impl Into<PathBuf>) -> LabResult<Self> {
        let rel = rel.into();
        let dir = root.join(&rel);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            rel,
            files: Vec::new(),
            renders: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Lists a file that was written into the cell directory by other means.
    pub fn record(&mut self, name: &str) {
        self.files.push(self.rel.join(name).to_string_lossy().into_owned());
    }

    pub fn table(&mut self, name: &str, t: &Table) -> LabResult<()> {
        t.write(&self.dir.join(name))?;
        self.record(name);
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> LabResult<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))?;
        self.record(name);
        Ok(())
    }

    /// One row per point, columns `x0, x1, ...`.
    pub fn points(&mut self, name: &str, a: &Array) -> LabResult<()> {
        let header: Vec<String> = (0..a.cols()).map(|c| format!("x{c}")).collect();
        let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
        for r in a.iter_rows() {
            t.push(r.iter().map(|&v| v.into()).collect());
        }
        self.table(name, &t)
    }

    pub fn plot(&mut self, name: &str, render: impl FnOnce() -> LabResult<String> + Send + 'static) {
        self.renders.push((name.into(), Box::new(render)));
    }

    /// Renders the queued figures. A failed render is reported, never fatal.
    pub fn finish(mut self, report: &mut CellReport) {
        for (name, render) in std::mem::take(&mut self.renders) {
            match render().and_then(|svg| self.text(&name, &svg)) {
                Ok(()) => {}
                Err(e) => report.render_errors.push(format!("{}: {e}", self.rel.join(&name).display())),
            }
        }
        report.files.extend(self.files);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub seed: u64,
    pub ok: bool,
    pub status: String,
    pub error: Option<String>,
    pub files: Vec<String>,
    pub render_errors: Vec<String>,
    /// Headline numbers for machine consumers.
    pub values: BTreeMap<String, f64>,
}

impl CellReport {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            ok: true,
            status: "completed".into(),
            ..Self::default()
        }
    }

    pub fn fail(&mut self, status: &str, error: impl ToString) {
        self.ok = false;
        self.status = status.into();
        self.error = Some(error.to_string());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: String,
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub all_ok: bool,
    pub cells: Vec<CellReport>,
}

type TeacherSlot = Arc<OnceLock<Result<GatedTeacher, String>>>;

/// Teachers shared by the cells of one invocation, trained at most once per key.
#[derive(Default)]
pub struct TeacherCache {
    slots: Mutex<HashMap<String, TeacherSlot>>,
}

/// A teacher request: which section, on which reference, under which checkpoint tag.
pub struct TeacherRequest<'a> {
    pub section: &'a TeacherSection,
    pub reference: &'a ReferenceDistribution,
    /// Distinguishes teachers that would share a checkpoint path.
    pub tag: &'a str,
    pub seed: u64,
}

impl TeacherRequest<'_> {
    fn key(&self) -> String {
        serde_json::to_string(&(self.section, self.reference, self.tag, self.seed)).expect("plain data serializes")
    }

    pub fn spec(&self) -> LabResult<VelocityNetSpec> {
        let mut spec = VelocityNetSpec::new(self.reference.dim()).with_hidden(&self.section.hidden);
        if self.section.conditional {
            let c = self.reference.num_classes().ok_or_else(|| {
                LabError::Config(format!("a conditional teacher needs a labelled reference, not {}", self.reference.name()))
            })?;
            spec = spec.conditional(c);
        }
        Ok(spec)
    }

    pub fn checkpoint_path(&self, base_dir: &Path) -> Option<PathBuf> {
        let p = base_dir.join(self.section.checkpoint.as_ref()?);
        if self.tag.is_empty() {
            return Some(p);
        }
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ext = p.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
        Some(p.with_file_name(format!("{stem}-{}{ext}", self.tag)))
    }
}

/// A trained teacher and how it was obtained.
pub struct TrainedTeacher {
    pub net: VelocityNet,
    pub trace: Option<LossTrace>,
    pub loaded_from: Option<PathBuf>,
}

pub fn train_teacher(req: &TeacherRequest<'_>) -> LabResult<TrainedTeacher> {
    let s = req.section;
    let mut net = VelocityNet::new(req.spec()?, "teacher", &mut rng::stream(req.seed, 60))?;
    let cfg = FlowTrainConfig {
        steps: s.steps,
        batch: s.batch,
        lr: s.lr,
        lr_final_frac: s.lr_final_frac,
        conditional: s.conditional,
        p_drop: s.p_drop,
        seed: req.seed,
        ..FlowTrainConfig::default()
    };
    let trace = train_flow_on(&mut net, req.reference, &cfg)?;
    Ok(TrainedTeacher {
        net,
        trace: Some(trace),
        loaded_from: None,
    })
}

/// Loads the teacher from its checkpoint if one exists, else trains (and saves) it.
pub fn obtain_teacher(req: &TeacherRequest<'_>, base_dir: &Path) -> LabResult<TrainedTeacher> {
    let path = req.checkpoint_path(base_dir);
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let (net, _) = checkpoint::load(p)?;
        let want = req.spec()?;
        if net.spec != want {
            return Err(LabError::Checkpoint {
                path: p.clone(),
                reason: format!("spec {:?} differs from the configured {want:?}", net.spec),
            });
        }
        return Ok(TrainedTeacher {
            net,
            trace: None,
            loaded_from: Some(p.clone()),
        });
    }
    let t = train_teacher(req)?;
    if let Some(p) = path {
        checkpoint::save(&p, &t.net, "teacher", req.section.steps)?;
    }
    Ok(t)
}

impl TeacherCache {
    /// The gated teacher for `req`, trained or loaded on first use.
    pub fn get(&self, req: &TeacherRequest<'_>, base_dir: &Path, log: &Log) -> Result<GatedTeacher, String> {
        let slot = self
            .slots
            .lock()
            .expect("teacher cache lock")
            .entry(req.key())
            .or_default()
            .clone();
        slot.get_or_init(|| {
            let started = Instant::now();
            let t = obtain_teacher(req, base_dir).map_err(|e| e.to_string())?;
            let how = match &t.loaded_from {
                Some(p) => format!("loaded {}", p.display()),
                None => format!("trained {} steps", req.section.steps),
            };
            let g = GatedTeacher::new(t.net, req.reference, &req.section.gate).map_err(|e| e.to_string())?;
            log.line(&format!(
                "teacher[{}] {how} in {:.1}s, gate {:?}",
                req.reference.name(),
                started.elapsed().as_secs_f64(),
                g.report()
            ));
            Ok(g)
        })
        .clone()
    }
}

/// Progress lines on stderr.
#[derive(Clone, Copy, Debug, Default)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn line(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[dmvae] {msg}");
        }
    }
}

/// What a per-seed driver gets to work with.
pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    /// The invocation's output directory.
    pub root: &'a Path,
    /// `seed-<s>` relative to `root`.
    pub seed_dir: PathBuf,
    pub teachers: &'a TeacherCache,
    pub log: Log,
}

impl Ctx<'_> {
    pub fn artifacts(&self, cell: &str) -> LabResult<Artifacts> {
        Artifacts::new(self.root, self.seed_dir.join(cell))
    }

    pub fn data(&self) -> LabResult<ToyData> {
        Ok(ToyData::new(self.cfg.data_spec()?)?)
    }

    pub fn teacher(&self, section: &TeacherSection, reference: &ReferenceDistribution, tag: &str) -> Result<GatedTeacher, String> {
        let req = TeacherRequest {
            section,
            reference,
            tag,
            seed: self.seed,
        };
        self.teachers.get(&req, &self.cfg.base_dir, &self.log)
    }

    /// The autoencoder after reconstruction pretraining and, when the
    /// feature and reference widths agree, the projector fit.
    pub fn init_autoencoder(&self, data: &ToyData, ref_dim: usize) -> LabResult<AutoEncoder> {
        let a = &self.cfg.ae;
        let mut spec = AutoEncoderSpec::new(data.spec.data_dim, a.latent_dim, ref_dim);
        spec.encoder_hidden = a.encoder_hidden.clone();
        spec.decoder_hidden = a.decoder_hidden.clone();
        spec.projector_hidden = a.projector_hidden.clone();
        spec.stochastic = a.stochastic;
        let mut ae = AutoEncoder::new(spec, &mut rng::stream(self.seed, 61))?;
        pretrain_ae(&mut ae, data, self.cfg.dmvae.pretrain_steps, a.batch, a.lr, self.seed)?;
        if ae.projector.is_some() && data.spec.source.dim() == ref_dim && a.projector_steps > 0 {
            fit_projector(&mut ae, data, a.projector_steps, a.batch, a.lr, self.seed)?;
        }
        Ok(ae)
    }
}

/// Directory-safe version of a label.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn driver(kind: ExperimentKind) -> fn(&Ctx<'_>) -> LabResult<Vec<CellReport>> {
    match kind {
        ExperimentKind::Teach => teach::run,
        ExperimentKind::ObjectivePanel => panels::run,
        ExperimentKind::DirectionField => field::run,
        ExperimentKind::RefSweep => sweep::run,
        ExperimentKind::Ablation => ablate::run,
        ExperimentKind::Pipeline => pipeline::run,
    }
}

/// Runs `kind` once per configured seed and writes `summary.json`.
///
/// Errors are reserved for problems that stop the whole invocation (bad
/// config, unwritable output); failed cells are reported in the summary.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig, log: Log) -> LabResult<Summary> {
    if let Some(k) = cfg.kind.filter(|k| *k != kind) {
        return Err(LabError::Config(format!("config is for `{}`, not `{}`", k.name(), kind.name())));
    }
    cfg.validate()?;
    if kind == ExperimentKind::Ablation {
        ablate::cells(cfg)?;
    }
    let root = cfg.base_dir.join(&cfg.out).join(kind.name());
    std::fs::create_dir_all(&root).map_err(io_err(&root))?;
    let teachers = TeacherCache::default();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = PathBuf::from(format!("seed-{seed}"));
        let mut resolved = cfg.clone();
        resolved.kind = Some(kind);
        resolved.seeds = vec![seed];
        resolved.dmvae.seed = seed;
        let dir = root.join(&seed_dir);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, resolved.to_toml()?).map_err(io_err(&p))?;
        let ctx = Ctx {
            cfg: &resolved,
            seed,
            root: &root,
            seed_dir,
            teachers: &teachers,
            log,
        };
        log.line(&format!("{} seed {seed} -> {}", kind.name(), dir.display()));
        cells.extend(driver(kind)(&ctx)?);
    }
    let summary = Summary {
        kind: kind.name().into(),
        schema_version: crate::config::SCHEMA_VERSION,
        seeds: cfg.seeds.clone(),
        out: root.clone(),
        all_ok: cells.iter().all(|c| c.ok),
        cells,
    };
    let p = root.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| LabError::Config(e.to_string()))?;
    std::fs::write(&p, text).map_err(io_err(&p))?;
    Ok(summary)
}
