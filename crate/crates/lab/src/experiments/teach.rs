//! Teacher training with its fidelity report.

use dmvae_core::flow::{ode_sample, teacher_fidelity, GateConfig, GateReport, GatedTeacher, OdeSampleConfig};
use dmvae_core::metrics::MetricReport;
use dmvae_core::networks::VelocityNet;
use dmvae_core::reference::ReferenceDistribution;
use dmvae_core::rng;

use super::{obtain_teacher, CellReport, Ctx, TeacherRequest};
use crate::checkpoint;
use crate::error::LabResult;
use crate::svg::{self, Series};
use crate::table::{report_cells, trace_table, Cell, Table, REPORT_COLUMNS};

pub const FIDELITY_TIMES: &[f64] = &[0.1, 0.25, 0.5, 0.75, 0.9];

/// Mean cosine between the net's score and the closed form at each fixed `t`.
pub fn fidelity_by_t(
    net: &VelocityNet,
    reference: &ReferenceDistribution,
    times: &[f64],
    n: usize,
    seed: u64,
) -> LabResult<Vec<(f64, f64)>> {
    times
        .iter()
        .map(|&t| {
            let cfg = GateConfig {
                t_lo: t,
                t_hi: t,
                n_points: n,
                seed,
                ..GateConfig::default()
            };
            match teacher_fidelity(net, reference, &cfg)? {
                GateReport::Cosine { score, .. } => Ok((t, score)),
                GateReport::Energy { .. } => Err(dmvae_core::Error::NotAnalytic(reference.name()).into()),
            }
        })
        .collect()
}

pub fn run(ctx: &Ctx<'_>) -> LabResult<Vec<CellReport>> {
    let mut report = CellReport::new("teacher", ctx.seed);
    let reference = ctx.cfg.resolve_reference()?;
    let mut art = ctx.artifacts("teacher")?;
    let req = TeacherRequest {
        section: &ctx.cfg.teacher,
        reference: &reference,
        tag: "",
        seed: ctx.seed,
    };
    let trained = match obtain_teacher(&req, &ctx.cfg.base_dir) {
        Ok(t) => t,
        Err(e) => {
            report.fail("error", e);
            art.finish(&mut report);
            return Ok(vec![report]);
        }
    };
    checkpoint::save(&art.dir().join("teacher.json"), &trained.net, "teacher", ctx.cfg.teacher.steps)?;
    art.record("teacher.json");
    if let Some(trace) = &trained.trace {
        art.table("trace.tsv", &trace_table(trace))?;
        let pts: Vec<(f64, f64)> = trace.steps.iter().map(|&s| s as f64).zip(trace.losses.iter().copied()).collect();
        art.plot("trace.svg", move || svg::loss_curves("teacher flow-matching loss", &[("loss".into(), pts)], true));
    }

    if reference.is_analytic() {
        let fid = fidelity_by_t(&trained.net, &reference, FIDELITY_TIMES, 2000, ctx.seed)?;
        let mut t = Table::new(&["t", "cosine"]);
        for &(ti, c) in &fid {
            t.push(vec![ti.into(), c.into()]);
            report.values.insert(format!("cosine_t{ti}"), c);
        }
        art.table("fidelity.tsv", &t)?;
    }

    let n = 4000;
    let samples = ode_sample(&trained.net, n, &OdeSampleConfig::default(), &mut rng::stream(ctx.seed, 70))?;
    let drawn = reference.sample(n, &mut rng::stream(ctx.seed, 71))?.points;
    let modes = reference.modes();
    let m = MetricReport::compute(&samples, &drawn, modes.as_ref().map(|(c, s)| (c.as_slice(), *s)))?;
    let mut t = Table::new(REPORT_COLUMNS);
    t.push(report_cells(&m));
    art.table("samples_metrics.tsv", &t)?;
    art.points("samples.tsv", &samples)?;
    report.values.insert("energy_distance".into(), m.energy_distance);
    if let Some(r) = m.mode_recall {
        report.values.insert("mode_recall".into(), r);
    }

    let mut gate = Table::new(&["check", "value", "threshold", "passed"]);
    match GatedTeacher::new(trained.net, &reference, &ctx.cfg.teacher.gate) {
        Ok(g) => {
            let (check, v, th) = gate_fields(g.report());
            gate.push(vec![check.into(), v.into(), th.into(), "true".into()]);
            report.values.insert("gate".into(), v);
        }
        Err(e) => {
            gate.push(vec!["gate".into(), Cell::Missing, Cell::Missing, "false".into()]);
            report.fail("gate_failed", e);
        }
    }
    art.table("gate.tsv", &gate)?;

    art.plot("samples.svg", move || {
        svg::scatter(
            "teacher samples vs reference",
            &[
                Series {
                    label: "reference",
                    points: &drawn,
                },
                Series {
                    label: "teacher",
                    points: &samples,
                },
            ],
        )
    });
    art.finish(&mut report);
    Ok(vec![report])
}

fn gate_fields(r: GateReport) -> (&'static str, f64, f64) {
    match r {
        GateReport::Cosine { score, threshold } => ("cosine", score, threshold),
        GateReport::Energy { distance, threshold } => ("energy", distance, threshold),
    }
}
