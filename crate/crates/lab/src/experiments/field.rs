//! The DM update direction on a 2-D grid.
//!
//! Grid points are taken as noisy latents `z_t`; the arrow at each point is
//! the descent direction `-w_t (s_fake - s_real)`.

use dmvae_core::dm::{joint_train, AlignmentObjective, DmvaeConfig, ScoreModel};
use dmvae_core::networks::Conditioning;
use dmvae_core::schedules::{DmWeight, NoiseSchedule};
use dmvae_core::Array;

use super::{CellReport, Clock, Ctx};
use crate::config::FieldSource;
use crate::error::LabResult;
use crate::svg;
use crate::table::Table;

/// `-w_t (s_fake - s_real)` at `points`, all at time `t`.
pub fn direction_field(
    real: &dyn ScoreModel,
    fake: &dyn ScoreModel,
    points: &Array,
    t: f64,
    weighting: DmWeight,
    guidance: f64,
) -> LabResult<Array> {
    let schedule = NoiseSchedule::default();
    let ts = vec![t; points.rows()];
    let s_real = real.score(&schedule, points, &ts, Conditioning::Unconditional, guidance)?;
    let s_fake = fake.score(&schedule, points, &ts, Conditioning::Unconditional, 1.0)?;
    let diff = s_fake.sub(&s_real)?;
    let w: Vec<f64> = weighting.weights(&schedule, &ts, &diff).iter().map(|w| -w).collect();
    Ok(diff.scale_rows(&w))
}

/// `resolution^2` points on `[-extent, extent]^2`, row-major from the bottom left.
pub fn grid(resolution: usize, extent: f64) -> Array {
    let step = if resolution > 1 { 2.0 * extent / (resolution - 1) as f64 } else { 0.0 };
    let at = |i: usize| if resolution > 1 { -extent + step * i as f64 } else { 0.0 };
    let mut g = Array::zeros(resolution * resolution, 2);
    for i in 0..resolution {
        for j in 0..resolution {
            let r = g.row_mut(i * resolution + j);
            r[0] = at(j);
            r[1] = at(i);
        }
    }
    g
}

pub fn run(ctx: &Ctx<'_>) -> LabResult<Vec<CellReport>> {
    let cfg = ctx.cfg;
    let f = &cfg.field;
    let reference = cfg.resolve_reference()?;
    let mut report = CellReport::new("field", ctx.seed);
    let mut art = ctx.artifacts("field")?;
    if reference.dim() != 2 {
        report.fail("error", format!("the direction field needs a 2-D reference, got {}", reference.dim()));
        art.finish(&mut report);
        return Ok(vec![report]);
    }
    let points = grid(f.resolution, f.extent);
    let cell = if f.resolution > 1 { 2.0 * f.extent / (f.resolution - 1) as f64 } else { f.extent };

    // Keeps whichever models the source needs alive for the loop below.
    let teacher;
    let fake_net;
    let q;
    let (real, fake, title): (&dyn ScoreModel, &dyn ScoreModel, String) = match &f.source {
        FieldSource::Analytic { q: spec } => {
            q = spec.resolve(&cfg.base_dir)?;
            (&reference, &q, format!("{} vs {}", spec.label(), cfg.reference.label()))
        }
        FieldSource::Nets { joint_steps } => {
            teacher = match ctx.teacher(&cfg.teacher, &reference, "") {
                Ok(t) => t,
                Err(e) => {
                    report.fail("setup_failed", e);
                    art.finish(&mut report);
                    return Ok(vec![report]);
                }
            };
            let data = ctx.data()?;
            let ae = ctx.init_autoencoder(&data, reference.dim())?;
            let dcfg = DmvaeConfig {
                objective: AlignmentObjective::Dm,
                steps: *joint_steps,
                metrics_every: (*joint_steps).max(1),
                seed: ctx.seed,
                ..cfg.dmvae.clone()
            };
            let out = joint_train(&dcfg, ae, Some(&teacher), &data, &reference, &mut Clock::start())?;
            if out.record.diverged() {
                report.status = "diverged".into();
            }
            fake_net = out.fake.expect("DM runs carry a fake model");
            (teacher.net(), &fake_net, format!("teacher vs fake after {joint_steps} steps"))
        }
    };

    let mut summary = Table::new(&["t", "mean_norm", "max_norm", "mean_u", "mean_v"]);
    for &t in &f.times {
        let arrows = direction_field(real, fake, &points, t, cfg.dmvae.weighting, cfg.dmvae.guidance)?;
        let mut tsv = Table::new(&["x", "y", "u", "v", "norm"]);
        let (mut sum, mut max, mut su, mut sv) = (0.0, 0.0f64, 0.0, 0.0);
        for (p, a) in points.iter_rows().zip(arrows.iter_rows()) {
            let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
            sum += norm;
            max = max.max(norm);
            su += a[0];
            sv += a[1];
            tsv.push(vec![p[0].into(), p[1].into(), a[0].into(), a[1].into(), norm.into()]);
        }
        let n = points.rows() as f64;
        summary.push(vec![t.into(), (sum / n).into(), max.into(), (su / n).into(), (sv / n).into()]);
        report.values.insert(format!("mean_norm_t{t}"), sum / n);
        art.table(&format!("field-t{t}.tsv"), &tsv)?;
        let (o, title) = (points.clone(), format!("{title}, t = {t}"));
        art.plot(&format!("field-t{t}.svg"), move || svg::quiver(&title, &o, &arrows, cell));
    }
    art.table("summary.tsv", &summary)?;
    art.finish(&mut report);
    Ok(vec![report])
}
