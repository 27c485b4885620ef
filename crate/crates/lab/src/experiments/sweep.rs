//! The full pipeline once per reference distribution.
//!
//! Structured references run with `lambda_structured`, synthetic ones
//! (Gaussian and mixture families) with `lambda_synthetic`. Each row has
//! its own teacher.

use dmvae_core::dm::DmvaeConfig;
use dmvae_core::rng;

use super::pipeline::{full_run, write_full_run};
use super::{slug, CellReport, Ctx};
use crate::error::LabResult;
use crate::pool::run_cells;
use crate::svg;
use crate::table::{Cell, Table};

pub fn run(ctx: &Ctx<'_>) -> LabResult<Vec<CellReport>> {
    let cfg = ctx.cfg;
    let data = ctx.data()?;
    let refs: Vec<_> = cfg.sweep.references.clone();

    let rows = run_cells(refs, cfg.workers, |_, spec| -> LabResult<(CellReport, Vec<Cell>)> {
        let label = spec.label();
        let name = format!("ref-{}", slug(&label));
        let mut report = CellReport::new(name.clone(), ctx.seed);
        let mut art = ctx.artifacts(&name)?;
        let reference = spec.resolve(&cfg.base_dir)?;
        let lambda = if reference.is_synthetic() {
            cfg.sweep.lambda_synthetic
        } else {
            cfg.sweep.lambda_structured
        };
        let mut row: Vec<Cell> = vec![label.clone().into(), reference.name().into(), lambda.into()];
        let outcome = ctx.teacher(&cfg.teacher, &reference, &slug(&label)).and_then(|t| {
            let ae = ctx.init_autoencoder(&data, reference.dim()).map_err(|e| e.to_string())?;
            Ok((t, ae))
        });
        let run = match outcome {
            Err(e) => {
                report.fail("setup_failed", e);
                None
            }
            Ok((teacher, ae0)) => {
                let dcfg = DmvaeConfig {
                    lambda_dm: lambda,
                    seed: ctx.seed,
                    ..cfg.dmvae.clone()
                };
                match full_run(&dcfg, &cfg.refine, Some(&cfg.prior), &teacher, ae0, &data, &reference) {
                    Err(e) => {
                        report.fail("error", e);
                        None
                    }
                    Ok(r) => Some(r),
                }
            }
        };
        match &run {
            None => row.extend((0..8).map(|_| Cell::Missing)),
            Some(r) => {
                let points = reference.sample(cfg.dmvae.eval_samples, &mut rng::stream(ctx.seed, 72))?.points;
                write_full_run(&mut art, &mut report, r, &points, &label)?;
                let last = r.record.last();
                let p = r.prior.as_ref();
                row.extend([
                    report.status.clone().into(),
                    last.map(|l| l.metrics.mmd).into(),
                    last.and_then(|l| l.metrics.mode_recall).into(),
                    r.recon_test.into(),
                    p.map(|p| p.ref_metrics.mmd).into(),
                    p.and_then(|p| p.ref_metrics.mode_recall).into(),
                    p.map(|p| p.data_metrics.mmd).into(),
                    p.map(|p| p.data_metrics.energy_distance).into(),
                ]);
            }
        }
        if run.is_none() {
            row[3] = report.status.clone().into();
        }
        ctx.log.line(&format!("{name}: {} {:?}", report.status, report.values));
        art.finish(&mut report);
        Ok((report, row))
    });

    let mut t = Table::new(&[
        "reference",
        "family",
        "lambda_dm",
        "status",
        "latent_mmd",
        "latent_recall",
        "recon_test",
        "prior_mmd",
        "prior_recall",
        "data_mmd",
        "data_energy",
    ]);
    let mut reports = Vec::new();
    for r in rows {
        let (report, row) = r?;
        t.push(row);
        reports.push(report);
    }
    let mut s = ctx.artifacts("")?;
    s.table("sweep.tsv", &t)?;
    s.plot("sweep.svg", move || svg::table("reference sweep", &t));
    if let Some(r) = reports.first_mut() {
        s.finish(r);
    }
    Ok(reports)
}
