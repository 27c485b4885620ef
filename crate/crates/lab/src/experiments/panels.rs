//! The twelve-panel objective study.
//!
//! Panel `a` is the reference itself; `b` is DM, `c` LossDiff, `d`-`f`
//! RealScoreMax, `g`-`i` FakeScoreMax and `j`-`l` ScoreDiff, each trio in
//! the stop-gradient order input/target/none (fake/real/none for ScoreDiff).
//! Every objective starts from the same pretrained autoencoder and teacher.

use dmvae_core::dm::{joint_train, AlignmentObjective, DmvaeConfig, RunRecord, RunStatus, ScoreDiffStop};
use dmvae_core::flow::FmStopGrad;
use dmvae_core::{rng, Array};

use super::{slug, CellReport, Clock, Ctx};
use crate::error::LabResult;
use crate::pool::run_cells;
use crate::svg::{self, Series};
use crate::table::{metrics_table, report_cells, timings_table, trace_table, Cell, Table, REPORT_COLUMNS};

pub fn panel_letter(o: &AlignmentObjective) -> Option<char> {
    let fm = |s: FmStopGrad| match s {
        FmStopGrad::Input => 0,
        FmStopGrad::Target => 1,
        FmStopGrad::None => 2,
    };
    Some(match *o {
        AlignmentObjective::Dm => 'b',
        AlignmentObjective::LossDiff => 'c',
        AlignmentObjective::RealScoreMax { stop } => (b'd' + fm(stop)) as char,
        AlignmentObjective::FakeScoreMax { stop } => (b'g' + fm(stop)) as char,
        AlignmentObjective::ScoreDiff { stop } => match stop {
            ScoreDiffStop::Fake => 'j',
            ScoreDiffStop::Real => 'k',
            ScoreDiffStop::None => 'l',
        },
        _ => return None,
    })
}

/// One objective's run.
pub struct PanelResult {
    pub panel: String,
    pub objective: AlignmentObjective,
    pub record: Option<RunRecord>,
    /// Final aligned latents of the held-out evaluation batch.
    pub latents: Option<Array>,
    pub report: CellReport,
}

impl PanelResult {
    pub fn spread_ratio(&self) -> Option<f64> {
        let r = self.record.as_ref()?;
        Some(r.first()?.metrics.spread / r.last()?.metrics.spread)
    }
}

fn summary_header() -> Vec<&'static str> {
    let mut h = vec![
        "panel",
        "objective",
        "status",
        "last_step",
        "recon_mse",
        "fake_loss",
        "spread_init",
        "spread_shrink",
        "align_peak_bytes",
    ];
    h.extend_from_slice(REPORT_COLUMNS);
    h
}

fn summary_row(p: &PanelResult) -> Vec<Cell> {
    let mut row: Vec<Cell> = vec![p.panel.clone().into(), p.objective.label().into(), p.report.status.clone().into()];
    match p.record.as_ref().and_then(|r| Some((r, r.first()?, r.last()?))) {
        Some((r, first, last)) => {
            row.extend([
                last.step.into(),
                last.recon_mse.into(),
                last.fake_loss.into(),
                first.metrics.spread.into(),
                p.spread_ratio().into(),
                r.align_peak_bytes.into(),
            ]);
            row.extend(report_cells(&last.metrics));
        }
        None => row.extend((0..6 + REPORT_COLUMNS.len()).map(|_| Cell::Missing)),
    }
    row
}

/// Runs every configured objective and writes the panels and the summary table.
pub fn execute(ctx: &Ctx<'_>) -> LabResult<Vec<PanelResult>> {
    let cfg = ctx.cfg;
    let reference = cfg.resolve_reference()?;
    let data = ctx.data()?;

    let mut a = ctx.artifacts("panel-a-reference")?;
    let ref_points = reference.sample(cfg.dmvae.eval_samples, &mut rng::stream(ctx.seed, 72))?.points;
    a.points("points.tsv", &ref_points)?;
    let pts = ref_points.clone();
    a.plot("scatter.svg", move || {
        svg::scatter(
            "(a) reference",
            &[Series {
                label: "reference",
                points: &pts,
            }],
        )
    });
    let mut ref_report = CellReport::new("panel-a-reference", ctx.seed);
    a.finish(&mut ref_report);

    let mut extra = 0;
    let named: Vec<(String, AlignmentObjective)> = cfg
        .panels
        .variants
        .iter()
        .map(|o| {
            let letter = panel_letter(o).map(String::from).unwrap_or_else(|| {
                extra += 1;
                format!("x{extra}")
            });
            (format!("panel-{letter}-{}", slug(&o.label())), *o)
        })
        .collect();

    let setup = ctx
        .teacher(&cfg.teacher, &reference, "")
        .and_then(|t| Ok((t, ctx.init_autoencoder(&data, reference.dim()).map_err(|e| e.to_string())?)));
    let eval_x = data.sample(cfg.dmvae.eval_samples, &mut rng::stream(ctx.seed, 73))?.x;

    let results = run_cells(named, cfg.workers, |_, (name, objective)| -> LabResult<PanelResult> {
        let mut report = CellReport::new(name.clone(), ctx.seed);
        let mut art = ctx.artifacts(&name)?;
        let mut result = PanelResult {
            panel: name.clone(),
            objective,
            record: None,
            latents: None,
            report: CellReport::default(),
        };
        match &setup {
            Err(e) => report.fail("setup_failed", e),
            Ok((teacher, ae0)) => {
                let dcfg = DmvaeConfig {
                    objective,
                    steps: cfg.panels.steps,
                    metrics_every: cfg.panels.metrics_every,
                    seed: ctx.seed,
                    ..cfg.dmvae.clone()
                };
                let started = std::time::Instant::now();
                match joint_train(&dcfg, ae0.clone(), Some(teacher), &data, &reference, &mut Clock::start()) {
                    Err(e) => report.fail("error", e),
                    Ok(out) => {
                        let rec = out.record;
                        art.table("metrics.tsv", &metrics_table(&rec.rows))?;
                        art.table("fake_trace.tsv", &trace_table(&rec.fake_trace))?;
                        art.table("timings.tsv", &timings_table(&rec))?;
                        if let RunStatus::Diverged { step, reason, .. } = &rec.status {
                            report.status = "diverged".into();
                            report.error = Some(format!("step {step}: {reason}"));
                        }
                        let z = out.ae.aligned_latents(&eval_x)?;
                        art.points("latents.tsv", &z)?;
                        if let Some(last) = rec.last() {
                            report.values.insert("mmd".into(), last.metrics.mmd);
                            report.values.insert("spread".into(), last.metrics.spread);
                            if let Some(r) = last.metrics.mode_recall {
                                report.values.insert("mode_recall".into(), r);
                            }
                        }
                        report.values.insert("align_seconds_per_call".into(), rec.align_seconds_per_call());
                        report.values.insert("align_peak_bytes".into(), rec.align_peak_bytes as f64);
                        let (zp, rp, title) = (z.clone(), ref_points.clone(), format!("({}) {}", &name[6..7], objective.label()));
                        art.plot("scatter.svg", move || {
                            svg::scatter(
                                &title,
                                &[
                                    Series {
                                        label: "reference",
                                        points: &rp,
                                    },
                                    Series {
                                        label: "latents",
                                        points: &zp,
                                    },
                                ],
                            )
                        });
                        let curve: Vec<(f64, f64)> =
                            rec.rows.iter().map(|r| (r.step as f64, r.metrics.mmd)).collect();
                        art.plot("mmd.svg", move || svg::loss_curves("latent MMD", &[("mmd".into(), curve)], false));
                        ctx.log.line(&format!(
                            "{name}: {} in {:.1}s, mmd {:?}",
                            report.status,
                            started.elapsed().as_secs_f64(),
                            rec.last().map(|r| r.metrics.mmd)
                        ));
                        result.record = Some(rec);
                        result.latents = Some(z);
                    }
                }
            }
        }
        art.finish(&mut report);
        result.report = report;
        Ok(result)
    });

    let mut out = Vec::new();
    for r in results {
        out.push(r?);
    }
    let mut t = Table::new(&summary_header());
    for p in &out {
        t.push(summary_row(p));
    }
    let mut s = ctx.artifacts("")?;
    s.table("summary.tsv", &t)?;
    s.plot("summary.svg", move || svg::table("objective panels", &t));
    let mut sr = CellReport::new("summary", ctx.seed);
    s.finish(&mut sr);
    if let Some(p) = out.first_mut() {
        p.report.files.extend(ref_report.files.into_iter().chain(sr.files));
        p.report.render_errors.extend(ref_report.render_errors.into_iter().chain(sr.render_errors));
    }
    Ok(out)
}

pub fn run(ctx: &Ctx<'_>) -> LabResult<Vec<CellReport>> {
    Ok(execute(ctx)?.into_iter().map(|p| p.report).collect())
}
