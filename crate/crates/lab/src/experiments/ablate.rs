//! Hyperparameter ablation over `lambda_dm`, guidance, the timestep sampler
//! and the score-net size.

use dmvae_core::dm::{joint_train, DmvaeConfig, RunRecord};
use dmvae_core::schedules::TimestepSampler;

use super::{CellReport, Clock, Ctx};
use crate::config::{AblateMode, ExperimentConfig, NetSize, SamplerChoice, MAX_CELLS};
use crate::error::{LabError, LabResult};
use crate::pool::run_cells;
use crate::svg;
use crate::table::{metrics_table, Cell as TCell, Table};

/// Latent MMD below which a run counts as converged.
pub const CONVERGED_MMD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub lambda: f64,
    pub guidance: f64,
    pub sampler: SamplerChoice,
    pub net_size: NetSize,
}

impl Cell {
    pub fn name(&self) -> String {
        format!(
            "lambda{}-w{}-{}-{}",
            self.lambda,
            self.guidance,
            sampler_name(self.sampler),
            net_name(self.net_size)
        )
    }
}

fn sampler_name(s: SamplerChoice) -> &'static str {
    match s {
        SamplerChoice::Uniform => "uniform",
        SamplerChoice::Annealed => "annealed",
    }
}

fn net_name(n: NetSize) -> &'static str {
    match n {
        NetSize::Small => "small",
        NetSize::Large => "large",
    }
}

fn dedup<T: PartialEq + Copy>(v: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for &x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// The configured value when the axis contains it, else the axis' first value.
fn base<T: PartialEq + Copy>(axis: &[T], configured: Option<T>) -> T {
    configured.filter(|c| axis.contains(c)).unwrap_or(axis[0])
}

/// The cells of the configured ablation, in run order.
///
/// One-at-a-time mode varies each axis around the base cell, giving
/// `sum(axis sizes) - axes + 1` cells. More than [`MAX_CELLS`] is an error
/// unless `allow_large` is set.
pub fn cells(cfg: &ExperimentConfig) -> LabResult<Vec<Cell>> {
    let a = &cfg.ablate;
    let (lambda, guidance, sampler, net_size) = (dedup(&a.lambda), dedup(&a.guidance), dedup(&a.sampler), dedup(&a.net_size));
    if lambda.is_empty() || guidance.is_empty() || sampler.is_empty() || net_size.is_empty() {
        return Err(LabError::Config("every ablation axis needs at least one value".into()));
    }
    let mut out = Vec::new();
    match a.mode {
        AblateMode::Cartesian => {
            for &l in &lambda {
                for &g in &guidance {
                    for &s in &sampler {
                        for &n in &net_size {
                            out.push(Cell {
                                lambda: l,
                                guidance: g,
                                sampler: s,
                                net_size: n,
                            });
                        }
                    }
                }
            }
        }
        AblateMode::OneAtATime => {
            let configured_sampler = match cfg.dmvae.sampler {
                TimestepSampler::Uniform => SamplerChoice::Uniform,
                TimestepSampler::Annealed { .. } => SamplerChoice::Annealed,
            };
            let configured_net = [NetSize::Small, NetSize::Large]
                .into_iter()
                .find(|n| n.hidden() == cfg.teacher.hidden);
            let b = Cell {
                lambda: base(&lambda, Some(cfg.dmvae.lambda_dm)),
                guidance: base(&guidance, Some(cfg.dmvae.guidance)),
                sampler: base(&sampler, Some(configured_sampler)),
                net_size: base(&net_size, configured_net),
            };
            out.push(b);
            out.extend(lambda.iter().filter(|&&v| v != b.lambda).map(|&lambda| Cell { lambda, ..b }));
            out.extend(guidance.iter().filter(|&&v| v != b.guidance).map(|&guidance| Cell { guidance, ..b }));
            out.extend(sampler.iter().filter(|&&v| v != b.sampler).map(|&sampler| Cell { sampler, ..b }));
            out.extend(net_size.iter().filter(|&&v| v != b.net_size).map(|&net_size| Cell { net_size, ..b }));
        }
    }
    if out.len() > MAX_CELLS && !a.allow_large {
        return Err(LabError::Config(format!(
            "the ablation has {} cells, more than {MAX_CELLS}; set ablate.allow_large = true to run it",
            out.len()
        )));
    }
    Ok(out)
}

/// First snapshot step with latent MMD below [`CONVERGED_MMD`].
pub fn converged_at(record: &RunRecord) -> Option<usize> {
    record.rows.iter().find(|r| r.metrics.mmd < CONVERGED_MMD).map(|r| r.step)
}

pub fn run(ctx: &Ctx<'_>) -> LabResult<Vec<CellReport>> {
    let cfg = ctx.cfg;
    let plan = cells(cfg)?;
    let reference = cfg.resolve_reference()?;
    let data = ctx.data()?;
    // Guidance only acts on a class-conditional teacher.
    let conditional = plan.iter().any(|c| c.guidance != 1.0) && reference.num_classes().is_some();
    let ae0 = ctx.init_autoencoder(&data, reference.dim());

    let results = run_cells(plan, cfg.workers, |_, cell| -> LabResult<(CellReport, Option<RunRecord>)> {
        let name = cell.name();
        let mut report = CellReport::new(name.clone(), ctx.seed);
        let mut art = ctx.artifacts(&name)?;
        let mut section = cfg.teacher.clone();
        section.hidden = cell.net_size.hidden();
        section.conditional = conditional;
        let tag = format!("{}{}", net_name(cell.net_size), if conditional { "-conditional" } else { "" });
        let setup = ctx
            .teacher(&section, &reference, &tag)
            .and_then(|t| Ok((t, ae0.as_ref().map_err(|e| e.to_string())?.clone())));
        let mut record = None;
        match setup {
            Err(e) => report.fail("setup_failed", e),
            Ok((teacher, ae)) => {
                let dcfg = DmvaeConfig {
                    lambda_dm: cell.lambda,
                    guidance: cell.guidance,
                    sampler: match cell.sampler {
                        SamplerChoice::Uniform => TimestepSampler::Uniform,
                        SamplerChoice::Annealed => TimestepSampler::annealed(),
                    },
                    seed: ctx.seed,
                    ..cfg.dmvae.clone()
                };
                match joint_train(&dcfg, ae, Some(&teacher), &data, &reference, &mut Clock::start()) {
                    Err(e) => report.fail("error", e),
                    Ok(out) => {
                        let rec = out.record;
                        art.table("metrics.tsv", &metrics_table(&rec.rows))?;
                        if rec.diverged() {
                            report.fail("diverged", format!("{:?}", rec.status));
                        }
                        if let Some(last) = rec.last() {
                            report.values.insert("latent_mmd".into(), last.metrics.mmd);
                            report.values.insert("recon_mse".into(), last.recon_mse);
                        }
                        if let Some(s) = converged_at(&rec) {
                            report.values.insert("converged_at".into(), s as f64);
                        }
                        let curve: Vec<(f64, f64)> = rec.rows.iter().map(|r| (r.step as f64, r.metrics.mmd)).collect();
                        let title = name.clone();
                        art.plot("mmd.svg", move || svg::loss_curves(&title, &[("mmd".into(), curve)], true));
                        record = Some(rec);
                    }
                }
            }
        }
        ctx.log.line(&format!("{name}: {} {:?}", report.status, report.values));
        art.finish(&mut report);
        Ok((report, record))
    });

    let mut t = Table::new(&[
        "cell",
        "lambda_dm",
        "guidance",
        "sampler",
        "net_size",
        "status",
        "latent_mmd",
        "latent_recall",
        "recon_mse",
        "converged_at",
    ]);
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    for (cell, r) in cells(cfg)?.into_iter().zip(results) {
        let (report, record) = r?;
        let last = record.as_ref().and_then(RunRecord::last);
        t.push(vec![
            cell.name().into(),
            cell.lambda.into(),
            cell.guidance.into(),
            sampler_name(cell.sampler).into(),
            net_name(cell.net_size).into(),
            report.status.clone().into(),
            last.map(|l| l.metrics.mmd).into(),
            last.and_then(|l| l.metrics.mode_recall).into(),
            last.map(|l| l.recon_mse).into(),
            record.as_ref().and_then(converged_at).map_or(TCell::Missing, TCell::from),
        ]);
        if let Some(rec) = &record {
            curves.push((cell.name(), rec.rows.iter().map(|r| (r.step as f64, r.metrics.mmd)).collect()));
        }
        reports.push(report);
    }
    let mut s = ctx.artifacts("")?;
    s.table("ablation.tsv", &t)?;
    s.plot("convergence.svg", move || svg::loss_curves("latent MMD by cell", &curves, true));
    s.plot("ablation.svg", move || svg::table("ablation", &t));
    if let Some(r) = reports.first_mut() {
        s.finish(r);
    }
    Ok(reports)
}
