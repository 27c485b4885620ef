//! The end-to-end run: joint training, decoder refinement, then a fresh
//! flow prior on the encoder latents whose samples are decoded.

use dmvae_core::data::ToyData;
use dmvae_core::dm::{decoder_refine, joint_train, recon_loss, DmvaeConfig, RefineConfig, RefineReport, RunRecord};
use dmvae_core::flow::{ode_sample, train_flow, FlowTrainConfig, GatedTeacher, LossTrace, OdeSampleConfig};
use dmvae_core::metrics::MetricReport;
use dmvae_core::networks::{AutoEncoder, VelocityNet, VelocityNetSpec};
use dmvae_core::reference::{Labeled, ReferenceDistribution};
use dmvae_core::{rng, Array};

use super::{CellReport, Clock, Ctx};
use crate::config::PriorSection;
use crate::error::LabResult;
use crate::pool::run_cells;
use crate::svg::{self, Series};
use crate::table::{metrics_table, report_cells, trace_table, Cell, Table, REPORT_COLUMNS};

/// Prior samples judged in reference space (through the projector) and in
/// data space (through the decoder).
pub struct PriorRun {
    pub trace: LossTrace,
    pub ref_samples: Array,
    pub data_samples: Array,
    pub ref_metrics: MetricReport,
    pub data_metrics: MetricReport,
}

pub struct FullRun {
    pub record: RunRecord,
    pub refine: Option<RefineReport>,
    /// Held-out reconstruction MSE of the final model.
    pub recon_test: f64,
    pub prior: Option<PriorRun>,
    pub ae: AutoEncoder,
}

/// Fits a fresh flow prior to `z_e = E(x)` on fresh data each step.
pub fn train_prior(ae: &AutoEncoder, data: &ToyData, p: &PriorSection, seed: u64) -> LabResult<(VelocityNet, LossTrace)> {
    let spec = VelocityNetSpec::new(ae.spec.latent_dim).with_hidden(&p.hidden);
    let mut net = VelocityNet::new(spec, "prior", &mut rng::stream(seed, 80))?;
    let cfg = FlowTrainConfig {
        steps: p.steps,
        batch: p.batch,
        lr: p.lr,
        lr_final_frac: p.lr_final_frac,
        seed: seed.wrapping_add(0x9e37_79b9),
        ..FlowTrainConfig::default()
    };
    let trace = train_flow(
        &mut net,
        |n, r| {
            let x = data.sample(n, r)?.x;
            Ok(Labeled {
                points: ae.encode(&x)?,
                labels: None,
            })
        },
        &cfg,
    )?;
    Ok((net, trace))
}

pub fn sample_prior(
    ae: &AutoEncoder,
    data: &ToyData,
    reference: &ReferenceDistribution,
    p: &PriorSection,
    seed: u64,
) -> LabResult<PriorRun> {
    let (net, trace) = train_prior(ae, data, p, seed)?;
    let ode = OdeSampleConfig {
        n_steps: p.ode_steps,
        ..OdeSampleConfig::default()
    };
    let z = ode_sample(&net, p.samples, &ode, &mut rng::stream(seed, 82))?;
    let ref_samples = ae.project(&z)?;
    let data_samples = ae.decode(&z)?;
    let drawn = reference.sample(p.samples, &mut rng::stream(seed, 83))?.points;
    let modes = reference.modes();
    let ref_metrics = MetricReport::compute(&ref_samples, &drawn, modes.as_ref().map(|(c, s)| (c.as_slice(), *s)))?;
    let x = data.sample(p.samples, &mut rng::stream(seed, 84))?.x;
    let data_metrics = MetricReport::compute(&data_samples, &x, None)?;
    Ok(PriorRun {
        trace,
        ref_samples,
        data_samples,
        ref_metrics,
        data_metrics,
    })
}

/// Joint training, then decoder refinement and (if `prior`) the latent prior.
/// A diverged joint run stops there.
#[allow(clippy::too_many_arguments)]
pub fn full_run(
    dcfg: &DmvaeConfig,
    refine: &RefineConfig,
    prior: Option<&PriorSection>,
    teacher: &GatedTeacher,
    ae0: AutoEncoder,
    data: &ToyData,
    reference: &ReferenceDistribution,
) -> LabResult<FullRun> {
    let out = joint_train(dcfg, ae0, Some(teacher), data, reference, &mut Clock::start())?;
    let mut ae = out.ae;
    let test = data.sample(dcfg.eval_samples, &mut rng::stream(dcfg.seed, 85))?.x;
    if out.record.diverged() {
        return Ok(FullRun {
            recon_test: recon_loss(&ae, &test)?,
            record: out.record,
            refine: None,
            prior: None,
            ae,
        });
    }
    let report = decoder_refine(
        &mut ae,
        data,
        &RefineConfig {
            seed: dcfg.seed,
            ..*refine
        },
    )?;
    let prior = match prior {
        Some(p) => Some(sample_prior(&ae, data, reference, p, dcfg.seed)?),
        None => None,
    };
    Ok(FullRun {
        recon_test: recon_loss(&ae, &test)?,
        record: out.record,
        refine: Some(report),
        prior,
        ae,
    })
}

pub struct PipelineCell {
    pub name: String,
    pub guidance: f64,
    pub lambda: f64,
    pub run: Option<FullRun>,
    pub report: CellReport,
}

/// Writes the standard files of a full run into `art` and fills `report`.
pub(crate) fn write_full_run(
    art: &mut super::Artifacts,
    report: &mut CellReport,
    run: &FullRun,
    reference_points: &Array,
    title: &str,
) -> LabResult<()> {
    art.table("metrics.tsv", &metrics_table(&run.record.rows))?;
    art.table("fake_trace.tsv", &trace_table(&run.record.fake_trace))?;
    if run.record.diverged() {
        report.fail("diverged", format!("{:?}", run.record.status));
    }
    if let Some(last) = run.record.last() {
        report.values.insert("latent_mmd".into(), last.metrics.mmd);
        if let Some(r) = last.metrics.mode_recall {
            report.values.insert("latent_recall".into(), r);
        }
    }
    report.values.insert("recon_test".into(), run.recon_test);
    if let Some(p) = &run.prior {
        art.table("prior_trace.tsv", &trace_table(&p.trace))?;
        art.points("prior_ref_samples.tsv", &p.ref_samples)?;
        art.points("prior_data_samples.tsv", &p.data_samples)?;
        let mut t = Table::new(&[&["space"][..], REPORT_COLUMNS].concat());
        for (space, m) in [("reference", &p.ref_metrics), ("data", &p.data_metrics)] {
            let mut row: Vec<Cell> = vec![space.into()];
            row.extend(report_cells(m));
            t.push(row);
        }
        art.table("prior_metrics.tsv", &t)?;
        if let Some(r) = p.ref_metrics.mode_recall {
            report.values.insert("prior_recall".into(), r);
        }
        report.values.insert("prior_mmd".into(), p.ref_metrics.mmd);
        let (s, rp, title) = (p.ref_samples.clone(), reference_points.clone(), format!("{title}: prior samples"));
        art.plot("prior_samples.svg", move || {
            svg::scatter(
                &title,
                &[
                    Series {
                        label: "reference",
                        points: &rp,
                    },
                    Series {
                        label: "H(prior)",
                        points: &s,
                    },
                ],
            )
        });
    }
    let curve: Vec<(f64, f64)> = run.record.rows.iter().map(|r| (r.step as f64, r.metrics.mmd)).collect();
    let title = format!("{title}: latent MMD");
    art.plot("mmd.svg", move || svg::loss_curves(&title, &[("mmd".into(), curve)], false));
    Ok(())
}

pub fn execute(ctx: &Ctx<'_>) -> LabResult<Vec<PipelineCell>> {
    let cfg = ctx.cfg;
    let reference = cfg.resolve_reference()?;
    let data = ctx.data()?;
    let mut section = cfg.teacher.clone();
    section.conditional = cfg.pipeline.conditional_teacher;
    let tag = if section.conditional { "conditional" } else { "" };
    let setup = ctx
        .teacher(&section, &reference, tag)
        .and_then(|t| Ok((t, ctx.init_autoencoder(&data, reference.dim()).map_err(|e| e.to_string())?)));

    let mut plan: Vec<(String, f64, f64)> = cfg
        .pipeline
        .guidance
        .iter()
        .map(|&w| (format!("dm-w{w}"), w, cfg.dmvae.lambda_dm))
        .collect();
    if cfg.pipeline.baseline {
        plan.push(("baseline".into(), 1.0, 0.0));
    }
    let ref_points = reference.sample(cfg.dmvae.eval_samples, &mut rng::stream(ctx.seed, 72))?.points;

    let cells = run_cells(plan, cfg.workers, |_, (name, guidance, lambda)| -> LabResult<PipelineCell> {
        let mut report = CellReport::new(name.clone(), ctx.seed);
        let mut art = ctx.artifacts(&name)?;
        let mut run = None;
        match &setup {
            Err(e) => report.fail("setup_failed", e),
            Ok((teacher, ae0)) => {
                let dcfg = DmvaeConfig {
                    lambda_dm: lambda,
                    guidance,
                    seed: ctx.seed,
                    ..cfg.dmvae.clone()
                };
                let prior = (lambda > 0.0).then_some(&cfg.prior);
                match full_run(&dcfg, &cfg.refine, prior, teacher, ae0.clone(), &data, &reference) {
                    Err(e) => report.fail("error", e),
                    Ok(r) => {
                        write_full_run(&mut art, &mut report, &r, &ref_points, &name)?;
                        ctx.log.line(&format!("{name}: {} {:?}", report.status, report.values));
                        run = Some(r);
                    }
                }
            }
        }
        art.finish(&mut report);
        Ok(PipelineCell {
            name,
            guidance,
            lambda,
            run,
            report,
        })
    });
    let mut cells: Vec<PipelineCell> = cells.into_iter().collect::<LabResult<_>>()?;

    let base = cells
        .iter()
        .find(|c| c.lambda == 0.0)
        .and_then(|c| c.run.as_ref())
        .map(|r| r.recon_test);
    let mut t = Table::new(&[
        "cell",
        "guidance",
        "lambda_dm",
        "status",
        "latent_mmd",
        "latent_recall",
        "recon_test",
        "recon_vs_baseline",
        "refine_before",
        "refine_after",
        "refine_restored",
        "prior_recall",
        "prior_mmd",
        "data_mmd",
        "data_energy",
    ]);
    for c in &mut cells {
        let mut row: Vec<Cell> = vec![c.name.clone().into(), c.guidance.into(), c.lambda.into(), c.report.status.clone().into()];
        match &c.run {
            None => row.extend((0..11).map(|_| Cell::Missing)),
            Some(r) => {
                let last = r.record.last();
                let ratio = base.map(|b| r.recon_test / b);
                if let Some(v) = ratio {
                    c.report.values.insert("recon_vs_baseline".into(), v);
                }
                let p = r.prior.as_ref();
                row.extend([
                    last.map(|l| l.metrics.mmd).into(),
                    last.and_then(|l| l.metrics.mode_recall).into(),
                    r.recon_test.into(),
                    ratio.into(),
                    r.refine.map(|f| f.validation_before).into(),
                    r.refine.map(|f| f.validation_after).into(),
                    r.refine.map_or(Cell::Missing, |f| f.restored.to_string().into()),
                    p.and_then(|p| p.ref_metrics.mode_recall).into(),
                    p.map(|p| p.ref_metrics.mmd).into(),
                    p.map(|p| p.data_metrics.mmd).into(),
                    p.map(|p| p.data_metrics.energy_distance).into(),
                ]);
            }
        }
        t.push(row);
    }
    let mut s = ctx.artifacts("")?;
    s.table("pipeline.tsv", &t)?;
    s.plot("pipeline.svg", move || svg::table("pipeline", &t));
    if let Some(c) = cells.first_mut() {
        s.finish(&mut c.report);
    }
    Ok(cells)
}

pub fn run(ctx: &Ctx<'_>) -> LabResult<Vec<CellReport>> {
    Ok(execute(ctx)?.into_iter().map(|c| c.report).collect())
}
