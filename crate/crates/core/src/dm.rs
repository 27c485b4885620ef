//! Joint autoencoder training with a distribution-matching latent regularizer.
//!
//! The autoencoder has an encoder `E`, decoder `G` and optional projector `H`.
//! Latents `z_0 = H(E(x))` are pulled toward the reference prior by the score
//! difference between a frozen teacher (trained on the prior) and a fake score
//! model that tracks the current latent distribution. Gradients are routed so
//! that the decoder only sees reconstruction, the projector only sees the
//! alignment term, and the fake model only sees its own flow-matching loss.
//!
//! The alignment objective is pluggable: besides the distribution-matching
//! gradient, the score-maximization, score-difference and loss-difference
//! variants and three classic regularizers (KL to a Gaussian, pairwise feature
//! alignment, adversarial) run in the same loop for comparison.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::TapeStats;
use crate::data::ToyData;
use crate::flow::{self, cosine_lr, fm_graph, perturb_var, FmStopGrad, GatedTeacher, LossTrace, TraceWindow};
use crate::metrics::MetricReport;
use crate::networks::{Adam, AdamConfig, AutoEncoder, Binding, Conditioning, Mlp, MlpSpec, VelocityNet};
use crate::reference::ReferenceDistribution;
use crate::rng::{self, Rng};
use crate::schedules::{DmWeight, NoiseSchedule, TimestepSampler};
use crate::{Array, Error, Result, Tape, Var};

/// Which score is detached in the score-difference objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScoreDiffStop {
    Fake,
    Real,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "objective", rename_all = "snake_case"))]
pub enum AlignmentObjective {
    /// `w_t (s_fake - s_real)` injected at `z_0`.
    Dm,
    /// Flow-matching loss of the teacher on `z_0`.
    RealScoreMax { stop: FmStopGrad },
    /// Flow-matching loss of the fake model on `z_0`.
    FakeScoreMax { stop: FmStopGrad },
    /// `w_t ||s_fake - s_real||^2`.
    ScoreDiff { stop: ScoreDiffStop },
    /// Teacher flow-matching loss minus fake flow-matching loss.
    LossDiff,
    /// KL of a Gaussian posterior to `N(0, I)`, weighted by `beta`.
    BetaVae { beta: f64 },
    /// `lambda ||z_0 - phi(x)||^2` against paired features.
    PairwiseAlign { lambda: f64 },
    /// Encoder fools a latent discriminator; `weight` scales its loss.
    Aae { weight: f64 },
}

impl Default for AlignmentObjective {
    fn default() -> Self {
        AlignmentObjective::Dm
    }
}

fn fm_stop_label(s: FmStopGrad) -> &'static str {
    match s {
        FmStopGrad::None => "none",
        FmStopGrad::Input => "input",
        FmStopGrad::Target => "target",
    }
}

impl AlignmentObjective {
    /// The eleven score-based objectives compared side by side.
    pub fn score_variants() -> Vec<AlignmentObjective> {
        let fm = [FmStopGrad::Input, FmStopGrad::Target, FmStopGrad::None];
        let mut v = vec![AlignmentObjective::Dm];
        v.extend(fm.iter().map(|&stop| AlignmentObjective::RealScoreMax { stop }));
        v.extend(fm.iter().map(|&stop| AlignmentObjective::FakeScoreMax { stop }));
        v.extend(
            [ScoreDiffStop::Fake, ScoreDiffStop::Real, ScoreDiffStop::None]
                .iter()
                .map(|&stop| AlignmentObjective::ScoreDiff { stop }),
        );
        v.push(AlignmentObjective::LossDiff);
        v
    }

    /// Short identifier, e.g. `real_score_max[sg=input]`.
    pub fn label(&self) -> String {
        match *self {
            AlignmentObjective::Dm => "dm".into(),
            AlignmentObjective::RealScoreMax { stop } => format!("real_score_max[sg={}]", fm_stop_label(stop)),
            AlignmentObjective::FakeScoreMax { stop } => format!("fake_score_max[sg={}]", fm_stop_label(stop)),
            AlignmentObjective::ScoreDiff { stop } => format!(
                "score_diff[sg={}]",
                match stop {
                    ScoreDiffStop::Fake => "fake",
                    ScoreDiffStop::Real => "real",
                    ScoreDiffStop::None => "none",
                }
            ),
            AlignmentObjective::LossDiff => "loss_diff".into(),
            AlignmentObjective::BetaVae { beta } => format!("beta_vae[beta={beta}]"),
            AlignmentObjective::PairwiseAlign { lambda } => format!("pairwise_align[lambda={lambda}]"),
            AlignmentObjective::Aae { weight } => format!("aae[weight={weight}]"),
        }
    }

    /// Objectives that need a teacher and a fake score model.
    pub fn is_score_based(&self) -> bool {
        !matches!(
            self,
            AlignmentObjective::BetaVae { .. } | AlignmentObjective::PairwiseAlign { .. } | AlignmentObjective::Aae { .. }
        )
    }
}

/// How an externally computed `z_0` gradient enters the autoencoder graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Injection {
    /// Seed the backward pass at `z_0` directly.
    #[default]
    Seed,
    /// Backpropagate `1/2 ||z_0 - sg(z_0 - g)||^2`, whose gradient at `z_0` is `g`.
    PseudoLoss,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DmvaeConfig {
    pub objective: AlignmentObjective,
    pub lambda_dm: f64,
    /// Scales the fake model's learning rate. Its loss touches no other
    /// parameters, so a loss weight only matters through the step size.
    pub gamma: f64,
    pub recon_weight: f64,
    /// Guidance weight applied to the teacher score.
    pub guidance: f64,
    /// The autoencoder is updated on steps `k * vae_update_every` (1-based);
    /// the fake model on every step. Baseline objectives update every step.
    pub vae_update_every: usize,
    pub steps: usize,
    pub batch: usize,
    pub ae_lr: f64,
    pub fake_lr: f64,
    pub disc_lr: f64,
    pub sampler: TimestepSampler,
    pub weighting: DmWeight,
    /// Start the fake model from the teacher's weights.
    pub fake_from_teacher: bool,
    /// Reconstruction-only steps before joint training.
    pub pretrain_steps: usize,
    pub injection: Injection,
    /// Label dropout for the fake model.
    pub p_drop: f64,
    pub metrics_every: usize,
    pub eval_samples: usize,
    /// Abort when the smoothed reconstruction loss grows by this factor...
    pub divergence_ratio: f64,
    /// ...within this many steps.
    pub divergence_window: usize,
    pub seed: u64,
}

impl Default for DmvaeConfig {
    fn default() -> Self {
        Self {
            objective: AlignmentObjective::Dm,
            lambda_dm: 10.0,
            gamma: 1.0,
            recon_weight: 1.0,
            guidance: 1.0,
            vae_update_every: 5,
            steps: 5000,
            batch: 128,
            ae_lr: 1e-3,
            fake_lr: 1e-3,
            disc_lr: 1e-3,
            sampler: TimestepSampler::Uniform,
            weighting: DmWeight::SigmaSquared,
            fake_from_teacher: true,
            pretrain_steps: 2000,
            injection: Injection::Seed,
            p_drop: 0.1,
            metrics_every: 500,
            eval_samples: 2000,
            divergence_ratio: 10.0,
            divergence_window: 1000,
            seed: 0,
        }
    }
}

impl DmvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lambda_dm >= 0.0) {
            return bad("lambda_dm must be >= 0");
        }
        if self.vae_update_every == 0 {
            return bad("vae_update_every must be >= 1");
        }
        if self.batch < 2 || self.eval_samples < 10 {
            return bad("batch must be >= 2 and eval_samples >= 10");
        }
        if !(self.gamma > 0.0 && self.ae_lr > 0.0 && self.fake_lr > 0.0 && self.disc_lr > 0.0) {
            return bad("learning rates and gamma must be positive");
        }
        if !(self.recon_weight >= 0.0) || !(0.0..=1.0).contains(&self.p_drop) {
            return bad("recon_weight must be >= 0 and p_drop in [0, 1]");
        }
        if self.metrics_every == 0 || self.divergence_window == 0 || !(self.divergence_ratio > 1.0) {
            return bad("metrics cadence, divergence window and ratio must be positive");
        }
        Ok(())
    }

    /// Whether the autoencoder is updated on 1-based `step`.
    pub fn ae_updates_on(&self, step: usize) -> bool {
        !self.objective.is_score_based() || step % self.vae_update_every == 0
    }
}

/// Mean over the batch of `||x - G(E(x))||^2`.
pub fn recon_loss(ae: &AutoEncoder, x: &Array) -> Result<f64> {
    squared_error(&ae.reconstruct(x)?, x)
}

/// Mean over rows of the squared Euclidean distance between `a` and `b`.
pub fn squared_error(a: &Array, b: &Array) -> Result<f64> {
    let r = a.sub(b)?;
    Ok(r.data().iter().map(|v| v * v).sum::<f64>() / a.rows().max(1) as f64)
}

/// Anything that can produce `grad log p_t(z_t)`.
pub trait ScoreModel {
    fn score(
        &self,
        schedule: &NoiseSchedule,
        z_t: &Array,
        t: &[f64],
        cond: Conditioning<'_>,
        guidance: f64,
    ) -> Result<Array>;
}

impl ScoreModel for VelocityNet {
    fn score(
        &self,
        schedule: &NoiseSchedule,
        z_t: &Array,
        t: &[f64],
        cond: Conditioning<'_>,
        guidance: f64,
    ) -> Result<Array> {
        flow::eval_score(self, schedule, z_t, t, cond, guidance)
    }
}

/// The closed-form score; conditioning and guidance are ignored.
impl ScoreModel for ReferenceDistribution {
    fn score(&self, _: &NoiseSchedule, z_t: &Array, t: &[f64], _: Conditioning<'_>, _: f64) -> Result<Array> {
        self.analytic_score_rows(z_t, t)
    }
}

/// Buckets of `t` with the mean row norm of `rows` and the count in each.
pub fn t_histogram(t: &[f64], rows: &Array, buckets: usize) -> Vec<(f64, f64, f64, usize)> {
    let mut sums = vec![0.0; buckets];
    let mut counts = vec![0usize; buckets];
    for (i, &ti) in t.iter().enumerate() {
        let b = ((ti * buckets as f64) as usize).min(buckets - 1);
        sums[b] += crate::math::sqrt(rows.row(i).iter().map(|v| v * v).sum());
        counts[b] += 1;
    }
    (0..buckets)
        .map(|b| {
            let lo = b as f64 / buckets as f64;
            let mean = if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 };
            (lo, lo + 1.0 / buckets as f64, mean, counts[b])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmGradient {
    /// `w_t (s_fake - s_real)` per row.
    pub delta: Array,
    /// `alpha_t * delta / n`: the gradient of the batch-mean objective at `z_0`.
    pub grad: Array,
}

/// The distribution-matching gradient at `z_0`.
///
/// A non-finite `delta` returns [`Error::Diverged`] (with `step` 0) carrying
/// the per-`t` histogram of `|delta|`.
#[allow(clippy::too_many_arguments)]
pub fn dm_gradient(
    schedule: &NoiseSchedule,
    z0: &Array,
    eps: &Array,
    t: &[f64],
    real: &dyn ScoreModel,
    fake: &dyn ScoreModel,
    cond: Conditioning<'_>,
    weighting: DmWeight,
    guidance: f64,
) -> Result<DmGradient> {
    let z_t = schedule.perturb(z0, t, eps)?;
    let s_real = real.score(schedule, &z_t, t, cond, guidance)?;
    let s_fake = fake.score(schedule, &z_t, t, cond, 1.0)?;
    let diff = s_fake.sub(&s_real)?;
    let w = weighting.weights(schedule, t, &diff);
    let delta = diff.scale_rows(&w);
    if !delta.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            reason: "non-finite score difference".into(),
            t_histogram: t_histogram(t, &delta, 10),
        });
    }
    let n = z0.rows() as f64;
    let scale: Vec<f64> = t.iter().map(|&ti| schedule.alpha(ti) / n).collect();
    let grad = delta.scale_rows(&scale);
    Ok(DmGradient { delta, grad })
}

/// Routes `grad` (same shape as `z0`) into the graph behind `z0`.
pub fn inject(tape: &mut Tape, z0: Var, grad: &Array, injection: Injection) -> Result<()> {
    match injection {
        Injection::Seed => tape.backward_seeded(z0, grad),
        Injection::PseudoLoss => {
            let target = tape.constant(tape.value(z0).sub(grad)?);
            let d = tape.sub(z0, target)?;
            let sq = tape.square(d);
            let s = tape.sum(sq);
            let loss = tape.scale(s, 0.5);
            tape.backward(loss)
        }
    }
}

/// Scores implied by a velocity net, built on the tape so they stay differentiable in `z_t`.
fn score_var(
    tape: &mut Tape,
    schedule: &NoiseSchedule,
    net: &VelocityNet,
    z_t: Var,
    t: &[f64],
    cond: Conditioning<'_>,
    guidance: f64,
) -> Result<Var> {
    let (mut v, _) = net.forward(tape, z_t, t, cond, false)?;
    if guidance != 1.0 && net.is_conditional() {
        let (vu, _) = net.forward(tape, z_t, t, Conditioning::Unconditional, false)?;
        let dv = tape.sub(v, vu)?;
        let dv = tape.scale(dv, guidance);
        v = tape.add(vu, dv)?;
    }
    let d = tape.shape(z_t).1;
    if let Some(&bad) = t.iter().find(|&&ti| ti < schedule.t_min) {
        return Err(Error::TimeOutOfRange {
            t: bad,
            lo: schedule.t_min,
            hi: schedule.t_max,
        });
    }
    let a: Vec<f64> = t.iter().map(|&ti| -1.0 / ti).collect();
    let b: Vec<f64> = t.iter().map(|&ti| -schedule.alpha(ti) / ti).collect();
    let zs = tape.mul_const(z_t, Array::from_row_values(&a, d))?;
    let vs = tape.mul_const(v, Array::from_row_values(&b, d))?;
    tape.add(zs, vs)
}

/// The alignment gradient at `z_0` and what it cost to compute.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantGradient {
    pub grad: Array,
    /// Largest tape footprint among the tapes used.
    pub peak_bytes: usize,
}

fn peak(stats: &[TapeStats]) -> usize {
    stats.iter().map(TapeStats::peak_bytes).max().unwrap_or(0)
}

fn predict_with_stats(net: &VelocityNet, z: &Array, t: &[f64], cond: Conditioning<'_>) -> Result<(Array, TapeStats)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (v, _) = net.forward(&mut tape, zv, t, cond, false)?;
    Ok((tape.value(v).clone(), tape.stats()))
}

/// Objective-specific gradient of the batch-mean alignment loss at `z_0`.
///
/// The teacher and fake nets are read-only here. Baseline objectives are not
/// score based and return [`Error::InvalidConfig`].
#[allow(clippy::too_many_arguments)]
pub fn variant_gradient(
    objective: AlignmentObjective,
    schedule: &NoiseSchedule,
    z0: &Array,
    eps: &Array,
    t: &[f64],
    teacher: &VelocityNet,
    fake: &VelocityNet,
    cond: Conditioning<'_>,
    weighting: DmWeight,
    guidance: f64,
) -> Result<VariantGradient> {
    let n = z0.rows() as f64;
    match objective {
        AlignmentObjective::Dm => {
            let z_t = schedule.perturb(z0, t, eps)?;
            let (v_real, st_r) = if guidance != 1.0 && teacher.is_conditional() {
                let (vc, a) = predict_with_stats(teacher, &z_t, t, cond)?;
                let (vu, b) = predict_with_stats(teacher, &z_t, t, Conditioning::Unconditional)?;
                (crate::schedules::cfg_combine(&vc, &vu, guidance)?, [a, b])
            } else {
                let (v, a) = predict_with_stats(teacher, &z_t, t, cond)?;
                (v, [a, TapeStats::default()])
            };
            let (v_fake, st_f) = predict_with_stats(fake, &z_t, t, cond)?;
            let s_real = schedule.velocity_to_score(&v_real, &z_t, t)?;
            let s_fake = schedule.velocity_to_score(&v_fake, &z_t, t)?;
            let diff = s_fake.sub(&s_real)?;
            let w = weighting.weights(schedule, t, &diff);
            let delta = diff.scale_rows(&w);
            if !delta.is_finite() {
                return Err(Error::Diverged {
                    step: 0,
                    reason: "non-finite score difference".into(),
                    t_histogram: t_histogram(t, &delta, 10),
                });
            }
            let scale: Vec<f64> = t.iter().map(|&ti| schedule.alpha(ti) / n).collect();
            Ok(VariantGradient {
                grad: delta.scale_rows(&scale),
                peak_bytes: peak(&[st_r[0], st_r[1], st_f]),
            })
        }
        AlignmentObjective::RealScoreMax { stop } | AlignmentObjective::FakeScoreMax { stop } => {
            let net = if matches!(objective, AlignmentObjective::RealScoreMax { .. }) {
                teacher
            } else {
                fake
            };
            let mut tape = Tape::new();
            let z = tape.param(z0.clone());
            let g = fm_graph(&mut tape, net, schedule, z, eps, t, cond, false, stop)?;
            tape.backward(g.loss)?;
            Ok(VariantGradient {
                grad: tape.grad(z),
                peak_bytes: tape.stats().peak_bytes(),
            })
        }
        AlignmentObjective::ScoreDiff { stop } => {
            let mut tape = Tape::new();
            let z = tape.param(z0.clone());
            let z_t = perturb_var(&mut tape, schedule, z, eps, t)?;
            let mut s_fake = score_var(&mut tape, schedule, fake, z_t, t, cond, 1.0)?;
            let mut s_real = score_var(&mut tape, schedule, teacher, z_t, t, cond, guidance)?;
            match stop {
                ScoreDiffStop::Fake => s_fake = tape.stop_grad(s_fake),
                ScoreDiffStop::Real => s_real = tape.stop_grad(s_real),
                ScoreDiffStop::None => {}
            }
            let diff = tape.sub(s_fake, s_real)?;
            let w = weighting.weights(schedule, t, tape.value(diff));
            let d = z0.cols();
            let sq = tape.square(diff);
            let wsq = tape.mul_const(sq, Array::from_row_values(&w, d))?;
            let s = tape.sum(wsq);
            let loss = tape.scale(s, 1.0 / n);
            tape.backward(loss)?;
            Ok(VariantGradient {
                grad: tape.grad(z),
                peak_bytes: tape.stats().peak_bytes(),
            })
        }
        AlignmentObjective::LossDiff => {
            let mut tape = Tape::new();
            let z = tape.param(z0.clone());
            let z_t = perturb_var(&mut tape, schedule, z, eps, t)?;
            let target = tape.constant(eps.sub(z0)?);
            let fm = |tape: &mut Tape, net: &VelocityNet| -> Result<Var> {
                let (v, _) = net.forward(tape, z_t, t, cond, false)?;
                let r = tape.sub(v, target)?;
                let sq = tape.square(r);
                Ok(tape.sum(sq))
            };
            let l_real = fm(&mut tape, teacher)?;
            let l_fake = fm(&mut tape, fake)?;
            let l = tape.sub(l_real, l_fake)?;
            let loss = tape.scale(l, 1.0 / n);
            // The gradient is built as a differentiable graph through both
            // networks' Jacobians.
            let g = tape.grad_graph(loss, &[z])?[0];
            Ok(VariantGradient {
                grad: tape.value(g).clone(),
                peak_bytes: tape.stats().peak_bytes(),
            })
        }
        other => Err(Error::InvalidConfig(format!(
            "{} is not a score-based objective",
            other.label()
        ))),
    }
}

/// Gradient norms that must be zero under the routing contract.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoutingReport {
    /// Decoder gradient produced by the alignment term.
    pub decoder_from_align: f64,
    /// Projector gradient produced by reconstruction.
    pub projector_from_recon: f64,
    /// Fake-model gradient produced by the autoencoder update.
    pub fake_from_ae: f64,
    /// Encoder/projector gradient produced by the fake-model update.
    pub encoder_from_fake: f64,
}

fn tape_grad_norm(tape: &Tape, b: &Binding) -> f64 {
    crate::math::sqrt(
        b.vars()
            .iter()
            .map(|&v| tape.grad(v).data().iter().map(|g| g * g).sum::<f64>())
            .sum(),
    )
}

/// One snapshot of run quality.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub step: usize,
    /// Reconstruction MSE (per-sample squared error) on the fixed evaluation set.
    pub recon_mse: f64,
    /// Mean fake-model loss since the previous snapshot.
    pub fake_loss: f64,
    /// Norm of the last alignment gradient at `z_0`.
    pub align_grad_norm: f64,
    /// Norm of the last encoder gradient.
    pub encoder_grad_norm: f64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "status", rename_all = "snake_case"))]
pub enum RunStatus {
    Completed,
    Diverged {
        step: usize,
        reason: String,
        t_histogram: Vec<(f64, f64, f64, usize)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunRecord {
    pub objective: String,
    pub rows: Vec<MetricRow>,
    pub fake_trace: LossTrace,
    pub status: RunStatus,
    /// Largest tape footprint of any alignment-gradient computation.
    pub align_peak_bytes: usize,
    /// Total clock time spent computing alignment gradients, per the hooks clock.
    pub align_seconds: f64,
    pub align_calls: usize,
    /// `(step, clock)` at each snapshot. Kept apart from `rows` so metric
    /// tables stay reproducible.
    pub timings: Vec<(usize, f64)>,
}

impl RunRecord {
    pub fn first(&self) -> Option<&MetricRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn align_seconds_per_call(&self) -> f64 {
        self.align_seconds / self.align_calls.max(1) as f64
    }
}

/// What the loop exposes after every step.
pub struct StepInfo<'a> {
    /// 1-based.
    pub step: usize,
    pub ae: &'a AutoEncoder,
    pub fake: Option<&'a VelocityNet>,
    pub ae_updated: bool,
    pub routing: RoutingReport,
}

/// Observation points into [`joint_train`].
pub trait TrainHooks {
    /// Monotonic clock in seconds; the core library has none of its own.
    fn now(&mut self) -> f64 {
        0.0
    }

    fn after_step(&mut self, _info: &StepInfo<'_>) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Models produced by a run.
#[derive(Clone, Debug)]
pub struct JointOutput {
    pub ae: AutoEncoder,
    pub fake: Option<VelocityNet>,
    pub discriminator: Option<Mlp>,
    pub record: RunRecord,
}

struct AeOpt {
    enc: Adam,
    dec: Adam,
    proj: Option<Adam>,
}

impl AeOpt {
    fn new(ae: &AutoEncoder, lr: f64) -> Self {
        let c = AdamConfig::with_lr(lr);
        Self {
            enc: Adam::new(&ae.encoder.params, c),
            dec: Adam::new(&ae.decoder.params, c),
            proj: ae.projector.as_ref().map(|p| Adam::new(&p.params, c)),
        }
    }

    fn step(&mut self, ae: &mut AutoEncoder) -> Result<()> {
        self.enc.step(&mut ae.encoder.params)?;
        self.dec.step(&mut ae.decoder.params)?;
        if let (Some(o), Some(p)) = (&mut self.proj, &mut ae.projector) {
            o.step(&mut p.params)?;
        }
        Ok(())
    }
}

/// The autoencoder forward pass on a tape.
struct AeGraph {
    z0: Var,
    recon: Var,
    enc: Binding,
    dec: Binding,
    proj: Option<Binding>,
    /// `(mean, clamped log-variance)` for stochastic encoders.
    posterior: Option<(Var, Var)>,
}

fn ae_forward(tape: &mut Tape, ae: &AutoEncoder, x: &Array, trainable: bool, rng: Option<&mut Rng>) -> Result<AeGraph> {
    let n = x.rows();
    let xv = tape.constant(x.clone());
    let (out, enc) = ae.encoder.forward(tape, xv, trainable)?;
    let d = ae.spec.latent_dim;
    let (z_e, posterior) = if ae.spec.stochastic {
        let mu = tape.slice_cols(out, 0, d)?;
        let lv = tape.slice_cols(out, d, 2 * d)?;
        let lv = tape.clamp(lv, -10.0, 10.0);
        let z = match rng {
            Some(r) => {
                let half = tape.scale(lv, 0.5);
                let std = tape.exp(half);
                let noise = tape.mul_const(std, rng::normal_array(r, n, d))?;
                tape.add(mu, noise)?
            }
            None => mu,
        };
        (z, Some((mu, lv)))
    } else {
        (out, None)
    };
    let (z0, proj) = match &ae.projector {
        Some(h) => {
            let (z0, b) = h.forward(tape, z_e, trainable)?;
            (z0, Some(b))
        }
        None => (z_e, None),
    };
    let (xh, dec) = ae.decoder.forward(tape, z_e, trainable)?;
    let r = tape.sub(xh, xv)?;
    let sq = tape.square(r);
    let s = tape.sum(sq);
    let recon = tape.scale(s, 1.0 / n as f64);
    Ok(AeGraph {
        z0,
        recon,
        enc,
        dec,
        proj,
        posterior,
    })
}

fn accumulate_ae(ae: &mut AutoEncoder, tape: &Tape, g: &AeGraph) -> Result<()> {
    ae.encoder.params.accumulate(tape, &g.enc)?;
    ae.decoder.params.accumulate(tape, &g.dec)?;
    if let (Some(h), Some(b)) = (&mut ae.projector, &g.proj) {
        h.params.accumulate(tape, b)?;
    }
    Ok(())
}

/// Reconstruction-only training of encoder and decoder.
pub fn pretrain_ae(ae: &mut AutoEncoder, data: &ToyData, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<LossTrace> {
    let mut data_rng = rng::stream(seed, 20);
    let mut noise_rng = rng::stream(seed, 21);
    let mut opt = AeOpt::new(ae, lr);
    let mut trace = LossTrace::default();
    let mut window = TraceWindow::new(100);
    for step in 0..steps {
        let b = data.sample(batch, &mut data_rng)?;
        let mut tape = Tape::new();
        let g = ae_forward(&mut tape, ae, &b.x, true, Some(&mut noise_rng))?;
        let loss = tape.value(g.recon).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(g.recon)?;
        ae.zero_grad();
        accumulate_ae(ae, &tape, &g)?;
        opt.step(ae)?;
        window.push(step, loss, &mut trace);
    }
    Ok(trace)
}

/// Fits the projector so that `H(E(x))` regresses the paired features `phi(x)`,
/// with the encoder frozen. Gives the latent distribution a structured,
/// full-scale starting point.
pub fn fit_projector(ae: &mut AutoEncoder, data: &ToyData, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<LossTrace> {
    let mut data_rng = rng::stream(seed, 22);
    let Some(h) = ae.projector.as_mut() else {
        return Err(Error::InvalidConfig("autoencoder has no projector".into()));
    };
    if data.spec.source.dim() != h.spec.output_dim {
        return Err(Error::InvalidConfig("feature and reference widths differ".into()));
    }
    let mut opt = Adam::new(&h.params, AdamConfig::with_lr(lr));
    let mut trace = LossTrace::default();
    let mut window = TraceWindow::new(100);
    for step in 0..steps {
        let b = data.sample(batch, &mut data_rng)?;
        let z_e = ae.encode(&b.x)?;
        let h = ae.projector.as_mut().expect("checked above");
        let mut tape = Tape::new();
        let z = tape.constant(z_e);
        let (z0, bind) = h.forward(&mut tape, z, true)?;
        let phi = tape.constant(b.features);
        let d = tape.sub(z0, phi)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 1.0 / batch as f64);
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(loss)?;
        h.params.zero_grad();
        h.params.accumulate(&tape, &bind)?;
        opt.step(&mut h.params)?;
        window.push(step, l, &mut trace);
    }
    Ok(trace)
}

/// A fake score model for a run: the teacher's weights, or a fresh net of the same shape.
pub fn init_fake(teacher: &VelocityNet, from_teacher: bool, seed: u64) -> Result<VelocityNet> {
    if from_teacher {
        Ok(teacher.clone())
    } else {
        VelocityNet::new(teacher.spec.clone(), "fake", &mut rng::stream(seed, 30))
    }
}

fn discriminator(ref_dim: usize, seed: u64) -> Result<Mlp> {
    Mlp::new(MlpSpec::new(ref_dim, &[64, 64], 1), "discriminator", &mut rng::stream(seed, 31))
}

/// Everything the joint loop mutates.
struct Loop<'a> {
    cfg: &'a DmvaeConfig,
    schedule: NoiseSchedule,
    teacher: Option<&'a VelocityNet>,
    data: &'a ToyData,
    reference: &'a ReferenceDistribution,
    ae: AutoEncoder,
    fake: Option<VelocityNet>,
    disc: Option<Mlp>,
    ae_opt: AeOpt,
    fake_opt: Option<Adam>,
    disc_opt: Option<Adam>,
    data_rng: Rng,
    ae_rng: Rng,
    fake_rng: Rng,
    ref_rng: Rng,
    conditional: bool,
    last_align_norm: f64,
    last_encoder_norm: f64,
    last_align: Option<(Vec<f64>, Array)>,
    align_peak_bytes: usize,
    align_seconds: f64,
    align_calls: usize,
}

impl Loop<'_> {
    fn classes(&self, labels: &Option<Vec<usize>>, n: usize) -> Vec<Option<usize>> {
        match labels {
            Some(l) if self.conditional => l.iter().map(|&c| Some(c)).collect(),
            _ => vec![None; n],
        }
    }

    /// One flow-matching step of the fake model on detached latents.
    fn fake_step(&mut self) -> Result<(f64, f64)> {
        let Some(fake) = self.fake.as_mut() else {
            return Ok((0.0, 0.0));
        };
        let b = self.data.sample(self.cfg.batch, &mut self.data_rng)?;
        let n = b.x.rows();
        let mut tape = Tape::new();
        let g = ae_forward(&mut tape, &self.ae, &b.x, true, None)?;
        let z0 = tape.stop_grad(g.z0);
        let t = TimestepSampler::Uniform.sample(&self.schedule, 0, 1, n, &mut self.fake_rng);
        let eps = rng::normal_array(&mut self.fake_rng, n, self.ae.spec.ref_dim);
        let labels = if self.conditional { b.labels.as_deref() } else { None };
        let classes = flow::drop_labels(labels, n, self.cfg.p_drop, &mut self.fake_rng);
        let cond = if fake.is_conditional() {
            Conditioning::Classes(&classes)
        } else {
            Conditioning::Unconditional
        };
        let fm = fm_graph(&mut tape, fake, &self.schedule, z0, &eps, &t, cond, true, FmStopGrad::None)?;
        let loss = tape.value(fm.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite("fake-model loss".into()));
        }
        tape.backward(fm.loss)?;
        let mut leak = tape_grad_norm(&tape, &g.enc);
        if let Some(p) = &g.proj {
            leak += tape_grad_norm(&tape, p);
        }
        if leak != 0.0 {
            return Err(Error::GradientLeak(format!(
                "fake-model loss reached the encoder (grad norm {leak:e})"
            )));
        }
        fake.params.zero_grad();
        fake.params.accumulate(&tape, &fm.binding)?;
        self.fake_opt.as_mut().expect("fake optimizer").step(&mut fake.params)?;
        Ok((loss, leak))
    }

    fn timed_alignment(
        &mut self,
        hooks: &mut dyn TrainHooks,
        z0: &Array,
        eps: &Array,
        t: &[f64],
        classes: &[Option<usize>],
    ) -> Result<Array> {
        let teacher = self.teacher.expect("score-based objective has a teacher");
        let fake = self.fake.as_ref().expect("score-based objective has a fake model");
        let cond = if teacher.is_conditional() {
            Conditioning::Classes(classes)
        } else {
            Conditioning::Unconditional
        };
        let start = hooks.now();
        let vg = variant_gradient(
            self.cfg.objective,
            &self.schedule,
            z0,
            eps,
            t,
            teacher,
            fake,
            cond,
            self.cfg.weighting,
            self.cfg.guidance,
        )?;
        self.align_seconds += hooks.now() - start;
        self.align_calls += 1;
        self.align_peak_bytes = self.align_peak_bytes.max(vg.peak_bytes);
        Ok(vg.grad)
    }

    /// One autoencoder update; returns the reconstruction loss.
    fn ae_step(&mut self, step: usize, hooks: &mut dyn TrainHooks) -> Result<(f64, RoutingReport)> {
        let cfg = self.cfg;
        let b = self.data.sample(cfg.batch, &mut self.data_rng)?;
        let n = b.x.rows();
        let classes = self.classes(&b.labels, n);
        let mut routing = RoutingReport::default();
        let fake_before = self.fake.as_ref().map(|f| (f.params.fingerprint(), f.params.grad_norm()));
        let mut tape = Tape::new();
        let g = ae_forward(&mut tape, &self.ae, &b.x, true, Some(&mut self.ae_rng))?;
        let recon = tape.value(g.recon).item();
        self.ae.zero_grad();

        // Reconstruction path: encoder and decoder.
        if cfg.recon_weight > 0.0 {
            let l = tape.scale(g.recon, cfg.recon_weight);
            tape.backward(l)?;
            if let Some(p) = &g.proj {
                routing.projector_from_recon = tape_grad_norm(&tape, p);
            }
            accumulate_ae(&mut self.ae, &tape, &g)?;
            tape.zero_grads();
        }

        // Alignment path: projector and encoder.
        let z0 = tape.value(g.z0).clone();
        let d_r = z0.cols();
        match cfg.objective {
            obj if obj.is_score_based() => {
                if cfg.lambda_dm > 0.0 {
                    let t = cfg.sampler.sample(&self.schedule, step, cfg.steps, n, &mut self.ae_rng);
                    let eps = rng::normal_array(&mut self.ae_rng, n, d_r);
                    let grad = match self.timed_alignment(hooks, &z0, &eps, &t, &classes) {
                        Err(Error::Diverged { reason, t_histogram, .. }) => {
                            return Err(Error::Diverged {
                                step,
                                reason,
                                t_histogram,
                            })
                        }
                        r => r?,
                    };
                    if !grad.is_finite() {
                        return Err(Error::Diverged {
                            step,
                            reason: "non-finite alignment gradient".into(),
                            t_histogram: t_histogram(&t, &grad, 10),
                        });
                    }
                    self.last_align_norm = grad.norm();
                    inject(&mut tape, g.z0, &grad.scale(cfg.lambda_dm), cfg.injection)?;
                    self.last_align = Some((t, grad));
                }
            }
            AlignmentObjective::BetaVae { beta } => {
                let (mu, lv) = g.posterior.ok_or_else(|| {
                    Error::InvalidConfig("beta_vae needs a stochastic encoder".into())
                })?;
                // KL(N(mu, e^lv) || N(0, 1)) = 1/2 (mu^2 + e^lv - lv - 1), summed over dims.
                let mu2 = tape.square(mu);
                let ev = tape.exp(lv);
                let a = tape.add(mu2, ev)?;
                let a = tape.sub(a, lv)?;
                let s = tape.sum(a);
                let kl_sum = tape.scale(s, 0.5 / n as f64);
                let dim = tape.shape(mu).1 as f64;
                let c = tape.constant(Array::scalar(0.5 * dim));
                let kl = tape.sub(kl_sum, c)?;
                let l = tape.scale(kl, beta);
                tape.backward(l)?;
                self.last_align_norm = tape.value(kl).item();
            }
            AlignmentObjective::PairwiseAlign { lambda } => {
                let phi = tape.constant(b.features.clone());
                let d = tape.sub(g.z0, phi)?;
                let sq = tape.square(d);
                let s = tape.sum(sq);
                let l = tape.scale(s, lambda / n as f64);
                tape.backward(l)?;
                self.last_align_norm = tape.value(s).item() / n as f64;
            }
            AlignmentObjective::Aae { weight } => {
                self.disc_step(&z0)?;
                let disc = self.disc.as_ref().expect("aae has a discriminator");
                let (logit, _) = disc.forward(&mut tape, g.z0, false)?;
                // log(1 - D(z)) = -softplus(logit).
                let sp = tape.softplus(logit);
                let s = tape.sum(sp);
                let l = tape.scale(s, -weight / n as f64);
                tape.backward(l)?;
                self.last_align_norm = tape.value(s).item() / n as f64;
            }
            _ => unreachable!("score-based objectives handled above"),
        }
        routing.decoder_from_align = tape_grad_norm(&tape, &g.dec);
        accumulate_ae(&mut self.ae, &tape, &g)?;
        if let (Some(fake), Some((hash, grad))) = (&self.fake, fake_before) {
            routing.fake_from_ae = if fake.params.fingerprint() != hash {
                f64::INFINITY
            } else {
                (fake.params.grad_norm() - grad).abs()
            };
        }
        self.last_encoder_norm = self.ae.encoder.params.grad_norm();
        for (what, v) in [
            ("decoder received alignment gradient", routing.decoder_from_align),
            ("projector received reconstruction gradient", routing.projector_from_recon),
            ("fake model received autoencoder gradient", routing.fake_from_ae),
        ] {
            if v != 0.0 {
                return Err(Error::GradientLeak(format!("{what} (norm {v:e})")));
            }
        }
        match self.ae_opt.step(&mut self.ae) {
            Err(Error::NonFiniteGradient(p)) => Err(Error::Diverged {
                step,
                reason: format!("non-finite gradient for `{p}`"),
                t_histogram: self.histogram(),
            }),
            r => r.map(|_| (recon, routing)),
        }
    }

    fn disc_step(&mut self, z_fake: &Array) -> Result<()> {
        let n = z_fake.rows();
        let real = self.reference.sample(n, &mut self.ref_rng)?.points;
        let disc = self.disc.as_mut().expect("aae has a discriminator");
        let mut tape = Tape::new();
        let xr = tape.constant(real);
        let xf = tape.constant(z_fake.clone());
        let (lr, b1) = disc.forward(&mut tape, xr, true)?;
        let (lf, b2) = disc.forward(&mut tape, xf, true)?;
        // -log D(real) - log(1 - D(fake)).
        let nr = tape.neg(lr);
        let a = tape.softplus(nr);
        let c = tape.softplus(lf);
        let sa = tape.sum(a);
        let sc = tape.sum(c);
        let s = tape.add(sa, sc)?;
        let loss = tape.scale(s, 1.0 / n as f64);
        tape.backward(loss)?;
        disc.params.zero_grad();
        disc.params.accumulate(&tape, &b1)?;
        disc.params.accumulate(&tape, &b2)?;
        self.disc_opt.as_mut().expect("disc optimizer").step(&mut disc.params)
    }

    fn histogram(&self) -> Vec<(f64, f64, f64, usize)> {
        match &self.last_align {
            Some((t, g)) => t_histogram(t, g, 10),
            None => Vec::new(),
        }
    }
}

struct Eval {
    x: Array,
    reference: Array,
    modes: Option<(Vec<Vec<f64>>, f64)>,
}

impl Eval {
    fn row(&self, ae: &AutoEncoder, step: usize, fake_loss: f64, align: f64, enc: f64) -> Result<MetricRow> {
        let z = ae.aligned_latents(&self.x)?;
        let modes = self.modes.as_ref().map(|(c, s)| (c.as_slice(), *s));
        Ok(MetricRow {
            step,
            recon_mse: recon_loss(ae, &self.x)?,
            fake_loss,
            align_grad_norm: align,
            encoder_grad_norm: enc,
            metrics: MetricReport::compute(&z, &self.reference, modes)?,
        })
    }
}

/// Runs the joint loop on a (typically pretrained) autoencoder.
///
/// Score-based objectives need a teacher that passed its fidelity gate and
/// train a fake model alongside. Divergence ends the run early with
/// [`RunStatus::Diverged`]; contract violations (gradient leaks, a changed
/// teacher) are errors.
pub fn joint_train(
    cfg: &DmvaeConfig,
    ae: AutoEncoder,
    teacher: Option<&GatedTeacher>,
    data: &ToyData,
    reference: &ReferenceDistribution,
    hooks: &mut dyn TrainHooks,
) -> Result<JointOutput> {
    cfg.validate()?;
    if reference.dim() != ae.spec.ref_dim {
        return Err(Error::InvalidConfig(format!(
            "reference dimension {} does not match the latent width {}",
            reference.dim(),
            ae.spec.ref_dim
        )));
    }
    let score_based = cfg.objective.is_score_based();
    let teacher = match (score_based, teacher) {
        (true, None) => {
            return Err(Error::InvalidConfig(format!(
                "{} needs a gated teacher",
                cfg.objective.label()
            )))
        }
        (true, Some(t)) => Some(t.net()),
        (false, _) => None,
    };
    if let Some(t) = teacher {
        if t.spec.data_dim != ae.spec.ref_dim {
            return Err(Error::InvalidConfig("teacher and latent widths differ".into()));
        }
    }
    let teacher_hash = teacher.map(|t| t.params.fingerprint());
    let fake = match teacher {
        Some(t) => Some(init_fake(t, cfg.fake_from_teacher, cfg.seed)?),
        None => None,
    };
    let disc = match cfg.objective {
        AlignmentObjective::Aae { .. } => Some(discriminator(ae.spec.ref_dim, cfg.seed)?),
        _ => None,
    };
    let fake_lr = cfg.fake_lr * cfg.gamma;
    let mut ev_rng = rng::stream(cfg.seed, 5);
    let eval = Eval {
        x: data.sample(cfg.eval_samples, &mut ev_rng)?.x,
        reference: reference.sample(cfg.eval_samples, &mut ev_rng)?.points,
        modes: reference.modes(),
    };
    let conditional = teacher.is_some_and(VelocityNet::is_conditional) && data.num_classes().is_some();
    let mut lp = Loop {
        cfg,
        schedule: NoiseSchedule::default(),
        teacher,
        data,
        reference,
        ae_opt: AeOpt::new(&ae, cfg.ae_lr),
        fake_opt: fake.as_ref().map(|f| Adam::new(&f.params, AdamConfig::with_lr(fake_lr))),
        disc_opt: disc.as_ref().map(|d| Adam::new(&d.params, AdamConfig::with_lr(cfg.disc_lr))),
        ae,
        fake,
        disc,
        data_rng: rng::stream(cfg.seed, 1),
        ae_rng: rng::stream(cfg.seed, 2),
        fake_rng: rng::stream(cfg.seed, 3),
        ref_rng: rng::stream(cfg.seed, 4),
        conditional,
        last_align_norm: 0.0,
        last_encoder_norm: 0.0,
        last_align: None,
        align_peak_bytes: 0,
        align_seconds: 0.0,
        align_calls: 0,
    };

    let mut rows = vec![eval.row(&lp.ae, 0, f64::NAN, 0.0, 0.0)?];
    rows[0].fake_loss = 0.0;
    let mut timings = vec![(0, hooks.now())];
    let mut fake_trace = LossTrace::default();
    let mut fake_window = TraceWindow::new(100);
    let (mut snap_sum, mut snap_count) = (0.0, 0usize);
    let mut smoothed: Option<f64> = None;
    let mut history: Vec<(usize, f64)> = Vec::new();
    let mut status = RunStatus::Completed;

    for step in 1..=cfg.steps {
        let mut routing = RoutingReport::default();
        if score_based {
            let (loss, leak) = match lp.fake_step() {
                Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient(_)) => {
                    status = RunStatus::Diverged {
                        step,
                        reason: "fake-model loss became non-finite".into(),
                        t_histogram: lp.histogram(),
                    };
                    break;
                }
                r => r?,
            };
            routing.encoder_from_fake = leak;
            fake_window.push(step - 1, loss, &mut fake_trace);
            snap_sum += loss;
            snap_count += 1;
            let lr = cosine_lr(fake_lr, 1.0, step, cfg.steps);
            if let Some(o) = lp.fake_opt.as_mut() {
                o.config.lr = lr;
            }
        }
        let ae_updated = cfg.ae_updates_on(step);
        if ae_updated {
            match lp.ae_step(step, hooks) {
                Ok((recon, r)) => {
                    routing = RoutingReport {
                        encoder_from_fake: routing.encoder_from_fake,
                        ..r
                    };
                    let s = match smoothed {
                        Some(s) => 0.95 * s + 0.05 * recon,
                        None => recon,
                    };
                    smoothed = Some(s);
                    history.push((step, s));
                    let past = history
                        .iter()
                        .rev()
                        .find(|(k, _)| step - k >= cfg.divergence_window)
                        .map(|&(_, v)| v);
                    if let Some(p) = past {
                        if s > cfg.divergence_ratio * p || !s.is_finite() {
                            status = RunStatus::Diverged {
                                step,
                                reason: format!(
                                    "smoothed reconstruction loss grew from {p:.4e} to {s:.4e} within {} steps",
                                    cfg.divergence_window
                                ),
                                t_histogram: lp.histogram(),
                            };
                        }
                    }
                }
                Err(Error::Diverged {
                    step,
                    reason,
                    t_histogram,
                }) => {
                    status = RunStatus::Diverged {
                        step,
                        reason,
                        t_histogram,
                    };
                }
                Err(e) => return Err(e),
            }
        }
        hooks.after_step(&StepInfo {
            step,
            ae: &lp.ae,
            fake: lp.fake.as_ref(),
            ae_updated,
            routing,
        });
        if lp.diverged(&status) {
            break;
        }
        if step % cfg.metrics_every == 0 || step == cfg.steps {
            let fl = if snap_count > 0 { snap_sum / snap_count as f64 } else { 0.0 };
            match eval.row(&lp.ae, step, fl, lp.last_align_norm, lp.last_encoder_norm) {
                Ok(row) => rows.push(row),
                Err(Error::NonFinite(_)) => {
                    status = RunStatus::Diverged {
                        step,
                        reason: "latents became non-finite".into(),
                        t_histogram: lp.histogram(),
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
            timings.push((step, hooks.now()));
            snap_sum = 0.0;
            snap_count = 0;
        }
    }

    if let (Some(t), Some(h)) = (teacher, teacher_hash) {
        if t.params.fingerprint() != h {
            return Err(Error::FrozenParamsChanged("teacher".into()));
        }
    }
    Ok(JointOutput {
        record: RunRecord {
            objective: cfg.objective.label(),
            rows,
            fake_trace,
            status,
            align_peak_bytes: lp.align_peak_bytes,
            align_seconds: lp.align_seconds,
            align_calls: lp.align_calls,
            timings,
        },
        ae: lp.ae,
        fake: lp.fake,
        discriminator: lp.disc,
    })
}

impl Loop<'_> {
    fn diverged(&self, status: &RunStatus) -> bool {
        matches!(status, RunStatus::Diverged { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RefineConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Size of the validation batch that guards against regressions.
    pub validation: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 128,
            lr: 5e-4,
            validation: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RefineReport {
    pub validation_before: f64,
    pub validation_after: f64,
    /// The refined decoder validated worse and was discarded.
    pub restored: bool,
}

/// Finetunes the decoder on reconstruction with encoder and projector frozen.
///
/// If the refined decoder does worse on a validation batch, the original
/// decoder is kept.
pub fn decoder_refine(ae: &mut AutoEncoder, data: &ToyData, cfg: &RefineConfig) -> Result<RefineReport> {
    let enc_hash = ae.encoder.params.fingerprint();
    let proj_hash = ae.projector.as_ref().map(|p| p.params.fingerprint());
    let val = data.sample(cfg.validation, &mut rng::stream(cfg.seed, 40))?.x;
    let before = recon_loss(ae, &val)?;
    let original = ae.decoder.clone();
    let mut data_rng = rng::stream(cfg.seed, 41);
    let mut opt = Adam::new(&ae.decoder.params, AdamConfig::with_lr(cfg.lr));
    for step in 0..cfg.steps {
        let x = data.sample(cfg.batch, &mut data_rng)?.x;
        let z_e = ae.encode(&x)?;
        let mut tape = Tape::new();
        let z = tape.constant(z_e);
        let xv = tape.constant(x);
        let (xh, b) = ae.decoder.forward(&mut tape, z, true)?;
        let r = tape.sub(xh, xv)?;
        let sq = tape.square(r);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 1.0 / cfg.batch as f64);
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(loss)?;
        ae.decoder.params.zero_grad();
        ae.decoder.params.accumulate(&tape, &b)?;
        opt.step(&mut ae.decoder.params)?;
    }
    if ae.encoder.params.fingerprint() != enc_hash {
        return Err(Error::FrozenParamsChanged("encoder".into()));
    }
    if ae.projector.as_ref().map(|p| p.params.fingerprint()) != proj_hash {
        return Err(Error::FrozenParamsChanged("projector".into()));
    }
    let after = recon_loss(ae, &val)?;
    let restored = after > before;
    if restored {
        ae.decoder = original;
    }
    Ok(RefineReport {
        validation_before: before,
        validation_after: after.min(before),
        restored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::VelocityNetSpec;

    fn tiny_net(seed: u64) -> VelocityNet {
        VelocityNet::new(VelocityNetSpec::new(2).with_hidden(&[16, 16]), "v", &mut rng::seeded(seed)).unwrap()
    }

    fn batch(n: usize, seed: u64) -> (Array, Array, Vec<f64>) {
        let mut r = rng::seeded(seed);
        let z0 = rng::normal_array(&mut r, n, 2);
        let eps = rng::normal_array(&mut r, n, 2);
        let t = (0..n).map(|_| rng::uniform(&mut r, 0.05, 0.95)).collect();
        (z0, eps, t)
    }

    #[test]
    fn matched_scores_give_zero_gradient() {
        let s = NoiseSchedule::default();
        let (z0, eps, t) = batch(32, 1);
        let r = ReferenceDistribution::ring8();
        let g = dm_gradient(&s, &z0, &eps, &t, &r, &r, Conditioning::Unconditional, DmWeight::SigmaSquared, 1.0).unwrap();
        assert_eq!(g.grad.max_abs(), 0.0);
    }

    #[test]
    fn score_diff_with_same_net_is_zero() {
        let s = NoiseSchedule::default();
        let (z0, eps, t) = batch(16, 2);
        let net = tiny_net(3);
        for stop in [ScoreDiffStop::Fake, ScoreDiffStop::Real, ScoreDiffStop::None] {
            let g = variant_gradient(
                AlignmentObjective::ScoreDiff { stop },
                &s,
                &z0,
                &eps,
                &t,
                &net,
                &net,
                Conditioning::Unconditional,
                DmWeight::SigmaSquared,
                1.0,
            )
            .unwrap();
            assert_eq!(g.grad.max_abs(), 0.0);
        }
    }

    #[test]
    fn seeded_and_pseudo_loss_injection_agree() {
        let mut r = rng::seeded(4);
        let h = Mlp::new(MlpSpec::new(3, &[8], 2), "h", &mut r).unwrap();
        let x = rng::normal_array(&mut r, 5, 3);
        let g = rng::normal_array(&mut r, 5, 2);
        let grads = |inj| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (z, b) = h.forward(&mut tape, xv, true).unwrap();
            inject(&mut tape, z, &g, inj).unwrap();
            b.vars().iter().map(|&v| tape.grad(v)).collect::<Vec<_>>()
        };
        let a = grads(Injection::Seed);
        let p = grads(Injection::PseudoLoss);
        for (u, v) in a.iter().zip(&p) {
            assert!(u.sub(v).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn dm_variant_matches_dm_gradient() {
        let s = NoiseSchedule::default();
        let (z0, eps, t) = batch(16, 5);
        let (a, b) = (tiny_net(6), tiny_net(7));
        let v = variant_gradient(
            AlignmentObjective::Dm,
            &s,
            &z0,
            &eps,
            &t,
            &a,
            &b,
            Conditioning::Unconditional,
            DmWeight::SigmaSquared,
            1.0,
        )
        .unwrap();
        let d = dm_gradient(&s, &z0, &eps, &t, &a, &b, Conditioning::Unconditional, DmWeight::SigmaSquared, 1.0).unwrap();
        assert_eq!(v.grad, d.grad);
    }

    #[test]
    fn relu_nets_cannot_run_loss_diff() {
        let s = NoiseSchedule::default();
        let (z0, eps, t) = batch(4, 8);
        let mut spec = VelocityNetSpec::new(2).with_hidden(&[8]);
        spec.activation = crate::networks::Activation::Relu;
        let net = VelocityNet::new(spec, "v", &mut rng::seeded(1)).unwrap();
        let err = variant_gradient(
            AlignmentObjective::LossDiff,
            &s,
            &z0,
            &eps,
            &t,
            &net,
            &net,
            Conditioning::Unconditional,
            DmWeight::SigmaSquared,
            1.0,
        )
        .unwrap_err();
        assert_eq!(err, Error::NoSecondOrderRule("relu"));
    }

    #[test]
    fn baselines_are_not_score_variants() {
        let s = NoiseSchedule::default();
        let (z0, eps, t) = batch(4, 8);
        let net = tiny_net(1);
        assert!(matches!(
            variant_gradient(
                AlignmentObjective::Aae { weight: 1.0 },
                &s,
                &z0,
                &eps,
                &t,
                &net,
                &net,
                Conditioning::Unconditional,
                DmWeight::SigmaSquared,
                1.0
            ),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn recon_error_is_quadratic() {
        let x = rng::normal_array(&mut rng::seeded(1), 8, 3);
        let xh = rng::normal_array(&mut rng::seeded(2), 8, 3);
        let x2 = xh.add(&x.sub(&xh).unwrap().scale(2.0)).unwrap();
        let a = squared_error(&xh, &x).unwrap();
        let b = squared_error(&xh, &x2).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12 * b);
        assert_eq!(squared_error(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn labels_are_stable() {
        assert_eq!(AlignmentObjective::score_variants().len(), 11);
        assert_eq!(
            AlignmentObjective::FakeScoreMax { stop: FmStopGrad::Target }.label(),
            "fake_score_max[sg=target]"
        );
    }

    #[test]
    fn update_schedule() {
        let c = DmvaeConfig::default();
        let on: Vec<usize> = (1..=12).filter(|&s| c.ae_updates_on(s)).collect();
        assert_eq!(on, vec![5, 10]);
    }
}
