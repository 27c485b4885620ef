//! Flow-matching training, Euler ODE sampling, and score evaluation for
//! velocity networks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::metrics;
use crate::networks::{Adam, AdamConfig, Binding, Conditioning, VelocityNet};
use crate::reference::{Labeled, ReferenceDistribution};
use crate::rng::{self, Rng};
use crate::schedules::{cfg_combine, NoiseSchedule, TimestepSampler};
use crate::{Array, Error, Result, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sampler: TimestepSampler,
    /// Train with class labels (and label dropout) when the source provides them.
    pub conditional: bool,
    /// Probability of replacing a label with the null class.
    pub p_drop: f64,
    pub seed: u64,
    pub trace_every: usize,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_final_frac: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            lr: 1e-3,
            sampler: TimestepSampler::Uniform,
            conditional: false,
            p_drop: 0.1,
            seed: 0,
            trace_every: 100,
            lr_final_frac: 1.0,
        }
    }
}

/// Cosine interpolation from `lr` to `lr * final_frac` over `total` steps.
pub fn cosine_lr(lr: f64, final_frac: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    let c = 0.5 * (1.0 + crate::math::cos(core::f64::consts::PI * p.min(1.0)));
    lr * (final_frac + (1.0 - final_frac) * c)
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::InvalidConfig(format!("flow batch must be >= 2, got {}", self.batch)));
        }
        if !(self.lr > 0.0)
            || !(0.0..=1.0).contains(&self.p_drop)
            || !(0.0..=1.0).contains(&self.lr_final_frac)
            || self.trace_every == 0
        {
            return Err(Error::InvalidConfig("flow lr, p_drop or trace cadence out of range".into()));
        }
        Ok(())
    }
}

/// Mean loss over each window of `trace_every` steps.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTrace {
    /// Last step (1-based) of each window.
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Accumulates per-step losses into windowed means.
#[derive(Clone, Debug)]
pub(crate) struct TraceWindow {
    every: usize,
    sum: f64,
    count: usize,
}

impl TraceWindow {
    pub(crate) fn new(every: usize) -> Self {
        Self { every, sum: 0.0, count: 0 }
    }

    pub(crate) fn push(&mut self, step: usize, loss: f64, trace: &mut LossTrace) {
        self.sum += loss;
        self.count += 1;
        if (step + 1) % self.every == 0 {
            trace.steps.push(step + 1);
            trace.losses.push(self.sum / self.count as f64);
            self.sum = 0.0;
            self.count = 0;
        }
    }
}

/// Which side of the flow-matching residual is detached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FmStopGrad {
    /// Gradient reaches `z_0` through both the input `z_t` and the target.
    #[default]
    None,
    /// `z_t` is detached; only the target carries `z_0` gradients.
    Input,
    /// The target `eps - z_0` is detached; only `z_t` carries `z_0` gradients.
    Target,
}

/// The differentiable pieces of one flow-matching evaluation.
pub struct FmGraph {
    pub z_t: Var,
    pub velocity: Var,
    pub target: Var,
    /// `sum ||v - target||^2 / n`.
    pub loss: Var,
    pub binding: Binding,
}

/// Builds `z_t = alpha z_0 + sigma eps` on the tape.
pub fn perturb_var(tape: &mut Tape, schedule: &NoiseSchedule, z0: Var, eps: &Array, t: &[f64]) -> Result<Var> {
    let (n, d) = tape.shape(z0);
    if eps.shape() != (n, d) || t.len() != n {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            left: (n, d),
            right: eps.shape(),
        });
    }
    let alpha: Vec<f64> = t.iter().map(|&ti| schedule.alpha(ti)).collect();
    let sigma: Vec<f64> = t.iter().map(|&ti| schedule.sigma(ti)).collect();
    let scaled = tape.mul_const(z0, Array::from_row_values(&alpha, d))?;
    let noise = tape.constant(eps.scale_rows(&sigma));
    tape.add(scaled, noise)
}

/// Flow-matching residual for `net` at `z_0` (which may carry gradients).
#[allow(clippy::too_many_arguments)]
pub fn fm_graph(
    tape: &mut Tape,
    net: &VelocityNet,
    schedule: &NoiseSchedule,
    z0: Var,
    eps: &Array,
    t: &[f64],
    cond: Conditioning<'_>,
    trainable: bool,
    stop: FmStopGrad,
) -> Result<FmGraph> {
    let n = t.len();
    let mut z_t = perturb_var(tape, schedule, z0, eps, t)?;
    if stop == FmStopGrad::Input {
        z_t = tape.stop_grad(z_t);
    }
    let e = tape.constant(eps.clone());
    let mut target = tape.sub(e, z0)?;
    if stop == FmStopGrad::Target {
        target = tape.stop_grad(target);
    }
    let (velocity, binding) = net.forward(tape, z_t, t, cond, trainable)?;
    let r = tape.sub(velocity, target)?;
    let sq = tape.square(r);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 1.0 / n as f64);
    Ok(FmGraph {
        z_t,
        velocity,
        target,
        loss,
        binding,
    })
}

/// Applies label dropout: each label becomes the null class with probability `p`.
pub fn drop_labels(labels: Option<&[usize]>, n: usize, p: f64, rng: &mut Rng) -> Vec<Option<usize>> {
    match labels {
        Some(l) => l
            .iter()
            .map(|&c| if rng::bernoulli(rng, p) { None } else { Some(c) })
            .collect(),
        None => vec![None; n],
    }
}

/// One optimizer step of flow matching on a batch of clean samples.
pub fn flow_step(
    net: &mut VelocityNet,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    batch: &Labeled,
    t: &[f64],
    eps: &Array,
    classes: &[Option<usize>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let z0 = tape.constant(batch.points.clone());
    let cond = if net.is_conditional() {
        Conditioning::Classes(classes)
    } else {
        Conditioning::Unconditional
    };
    let g = fm_graph(&mut tape, net, schedule, z0, eps, t, cond, true, FmStopGrad::None)?;
    let loss = tape.value(g.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    tape.backward(g.loss)?;
    net.params.zero_grad();
    net.params.accumulate(&tape, &g.binding)?;
    opt.step(&mut net.params)?;
    Ok(loss)
}

/// Trains `net` by flow matching on batches from `source`.
///
/// A non-finite loss aborts with [`Error::NonFiniteLoss`] carrying the step.
pub fn train_flow(
    net: &mut VelocityNet,
    mut source: impl FnMut(usize, &mut Rng) -> Result<Labeled>,
    cfg: &FlowTrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    let schedule = NoiseSchedule::default();
    let mut data_rng = rng::stream(cfg.seed, 0);
    let mut noise_rng = rng::stream(cfg.seed, 1);
    let mut opt = Adam::new(&net.params, AdamConfig::with_lr(cfg.lr));
    let mut trace = LossTrace::default();
    let mut window = TraceWindow::new(cfg.trace_every);
    for step in 0..cfg.steps {
        opt.config.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, step, cfg.steps);
        let batch = source(cfg.batch, &mut data_rng)?;
        let n = batch.points.rows();
        let t = cfg.sampler.sample(&schedule, step, cfg.steps, n, &mut noise_rng);
        let eps = rng::normal_array(&mut noise_rng, n, batch.points.cols());
        let labels = if cfg.conditional { batch.labels.as_deref() } else { None };
        let classes = drop_labels(labels, n, cfg.p_drop, &mut noise_rng);
        let loss = match flow_step(net, &mut opt, &schedule, &batch, &t, &eps, &classes) {
            Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient(_)) => {
                return Err(Error::NonFiniteLoss { step })
            }
            r => r?,
        };
        window.push(step, loss, &mut trace);
    }
    Ok(trace)
}

/// Trains on i.i.d. draws from a reference distribution.
pub fn train_flow_on(net: &mut VelocityNet, target: &ReferenceDistribution, cfg: &FlowTrainConfig) -> Result<LossTrace> {
    target.validate()?;
    train_flow(net, |n, r| target.sample(n, r), cfg)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OdeSampleConfig {
    pub n_steps: usize,
    /// CFG weight; 1 means plain conditional (or unconditional) sampling.
    pub guidance: f64,
    /// Fixed class for every sample; `None` draws a uniform class per sample
    /// from conditional nets.
    pub class_id: Option<usize>,
}

impl Default for OdeSampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            guidance: 1.0,
            class_id: None,
        }
    }
}

/// Velocity with optional class guidance.
pub fn guided_velocity(net: &VelocityNet, z: &Array, t: &[f64], cond: Conditioning<'_>, guidance: f64) -> Result<Array> {
    let v = net.predict(z, t, cond)?;
    if guidance == 1.0 || !net.is_conditional() {
        return Ok(v);
    }
    let vu = net.predict(z, t, Conditioning::Unconditional)?;
    cfg_combine(&v, &vu, guidance)
}

/// Euler integration of `dz/dt = v` from `t = 1` (standard normal) down to `t_min`.
pub fn ode_sample(net: &VelocityNet, n: usize, cfg: &OdeSampleConfig, rng: &mut Rng) -> Result<Array> {
    if cfg.n_steps == 0 {
        return Err(Error::InvalidConfig("ode sampling needs n_steps >= 1".into()));
    }
    let schedule = NoiseSchedule::default();
    let d = net.spec.data_dim;
    let classes: Vec<Option<usize>> = match (net.spec.num_classes, cfg.class_id) {
        (Some(_), Some(k)) => vec![Some(k); n],
        (Some(c), None) => (0..n).map(|_| Some(rng::index(rng, c))).collect(),
        (None, _) => vec![None; n],
    };
    let cond = if net.is_conditional() {
        Conditioning::Classes(&classes)
    } else {
        Conditioning::Unconditional
    };
    let mut z = rng::normal_array(rng, n, d);
    let (t0, t1) = (schedule.t_max, schedule.t_min);
    let dt = (t0 - t1) / cfg.n_steps as f64;
    for k in 0..cfg.n_steps {
        let t = t0 - k as f64 * dt;
        let v = guided_velocity(net, &z, &vec![t; n], cond, cfg.guidance)?;
        // z_{t - dt} = z_t - dt * v, since v = eps - z_0 = dz/dt.
        z.axpy(-dt, &v)?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("ode state after step {}", k + 1)));
        }
    }
    Ok(z)
}

/// Score `grad log p_t(z_t)` implied by `net`, with optional guidance.
pub fn eval_score(
    net: &VelocityNet,
    schedule: &NoiseSchedule,
    z_t: &Array,
    t: &[f64],
    cond: Conditioning<'_>,
    guidance: f64,
) -> Result<Array> {
    if let Some(&bad) = t.iter().find(|&&ti| ti < schedule.t_min) {
        return Err(Error::TimeOutOfRange {
            t: bad,
            lo: schedule.t_min,
            hi: schedule.t_max,
        });
    }
    let v = guided_velocity(net, z_t, t, cond, guidance)?;
    schedule.velocity_to_score(&v, z_t, t)
}

/// Mean row-wise cosine similarity.
pub fn mean_cosine(a: &Array, b: &Array) -> Result<f64> {
    a.check_same(b, "cosine")?;
    let mut s = 0.0;
    for (x, y) in a.iter_rows().zip(b.iter_rows()) {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx: f64 = x.iter().map(|p| p * p).sum();
        let ny: f64 = y.iter().map(|q| q * q).sum();
        let den = crate::math::sqrt(nx * ny);
        s += if den > 0.0 { dot / den } else { 0.0 };
    }
    Ok(s / a.rows().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GateConfig {
    /// Minimum mean cosine similarity against the analytic score.
    pub cosine_threshold: f64,
    /// Maximum energy distance between teacher samples and target draws, for
    /// targets without a closed-form score.
    pub energy_threshold: f64,
    pub n_points: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            cosine_threshold: 0.95,
            energy_threshold: 0.05,
            n_points: 2048,
            t_lo: 0.1,
            t_hi: 0.9,
            seed: 0,
        }
    }
}

/// Which check a gate ran and its outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "check", rename_all = "snake_case"))]
pub enum GateReport {
    Cosine { score: f64, threshold: f64 },
    Energy { distance: f64, threshold: f64 },
}

impl GateReport {
    pub fn passed(&self) -> bool {
        match *self {
            GateReport::Cosine { score, threshold } => score >= threshold,
            GateReport::Energy { distance, threshold } => distance <= threshold,
        }
    }
}

/// Measures how faithfully `net` represents `target`.
///
/// Analytic targets compare unguided scores with the closed form on noisy
/// target samples at `t` uniform in `[t_lo, t_hi]`; class-conditional nets are
/// compared per class against the matching mixture component. Other targets
/// compare ODE samples with target draws by energy distance.
pub fn teacher_fidelity(net: &VelocityNet, target: &ReferenceDistribution, cfg: &GateConfig) -> Result<GateReport> {
    let schedule = NoiseSchedule::default();
    let mut r = rng::stream(cfg.seed, 0x6a7e);
    let n = cfg.n_points;
    if target.is_analytic() {
        let drawn = target.sample(n, &mut r)?;
        let t: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, cfg.t_lo, cfg.t_hi)).collect();
        let eps = rng::normal_array(&mut r, n, target.dim());
        let z_t = schedule.perturb(&drawn.points, &t, &eps)?;
        let (learned, exact) = match (&drawn.labels, net.spec.num_classes) {
            (Some(labels), Some(c)) if target.num_classes() == Some(c) => {
                let classes: Vec<Option<usize>> = labels.iter().map(|&k| Some(k)).collect();
                (
                    eval_score(net, &schedule, &z_t, &t, Conditioning::Classes(&classes), 1.0)?,
                    target.component_score_rows(&z_t, &t, labels)?,
                )
            }
            _ => (
                eval_score(net, &schedule, &z_t, &t, Conditioning::Unconditional, 1.0)?,
                target.analytic_score_rows(&z_t, &t)?,
            ),
        };
        Ok(GateReport::Cosine {
            score: mean_cosine(&learned, &exact)?,
            threshold: cfg.cosine_threshold,
        })
    } else {
        let drawn = ode_sample(
            net,
            n,
            &OdeSampleConfig {
                guidance: 1.0,
                ..OdeSampleConfig::default()
            },
            &mut r,
        )?;
        let reference = target.sample(n, &mut r)?.points;
        Ok(GateReport::Energy {
            distance: metrics::energy_distance(&drawn, &reference)?,
            threshold: cfg.energy_threshold,
        })
    }
}

/// A teacher that has passed its fidelity gate. The only way to obtain one is
/// through [`GatedTeacher::new`], so DMVAE runs cannot start with an unchecked
/// real-score model.
#[derive(Clone, Debug)]
pub struct GatedTeacher {
    net: VelocityNet,
    report: GateReport,
}

impl GatedTeacher {
    pub fn new(net: VelocityNet, target: &ReferenceDistribution, cfg: &GateConfig) -> Result<Self> {
        let report = teacher_fidelity(&net, target, cfg)?;
        match report {
            GateReport::Cosine { score, threshold } if score < threshold || !score.is_finite() => {
                Err(Error::TeacherGate { score, threshold })
            }
            GateReport::Energy { distance, threshold } if distance > threshold || !distance.is_finite() => {
                Err(Error::TeacherGate {
                    score: distance,
                    threshold,
                })
            }
            _ => Ok(Self { net, report }),
        }
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn report(&self) -> GateReport {
        self.report
    }

    pub fn into_net(self) -> VelocityNet {
        self.net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::VelocityNetSpec;

    fn small_net(seed: u64) -> VelocityNet {
        VelocityNet::new(VelocityNetSpec::new(2).with_hidden(&[32, 32]), "v", &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn zero_steps_leave_net_unchanged() {
        let mut net = small_net(3);
        let before = net.params.fingerprint();
        let cfg = FlowTrainConfig {
            steps: 0,
            ..FlowTrainConfig::default()
        };
        let trace = train_flow_on(&mut net, &ReferenceDistribution::standard_gaussian(2), &cfg).unwrap();
        assert!(trace.losses.is_empty());
        assert_eq!(net.params.fingerprint(), before);
    }

    #[test]
    fn trace_cadence() {
        let mut net = small_net(3);
        let cfg = FlowTrainConfig {
            steps: 250,
            batch: 16,
            trace_every: 100,
            ..FlowTrainConfig::default()
        };
        let trace = train_flow_on(&mut net, &ReferenceDistribution::standard_gaussian(2), &cfg).unwrap();
        assert_eq!(trace.steps, vec![100, 200]);
    }

    #[test]
    fn nan_source_aborts_with_step() {
        let mut net = small_net(3);
        let cfg = FlowTrainConfig {
            steps: 10,
            batch: 4,
            ..FlowTrainConfig::default()
        };
        let mut calls = 0;
        let err = train_flow(
            &mut net,
            |n, _| {
                calls += 1;
                let v = if calls == 4 { f64::NAN } else { 0.0 };
                Ok(Labeled {
                    points: Array::full(n, 2, v),
                    labels: None,
                })
            },
            &cfg,
        )
        .unwrap_err();
        assert_eq!(err, Error::NonFiniteLoss { step: 3 });
    }

    #[test]
    fn single_euler_step_is_deterministic() {
        let net = small_net(5);
        let cfg = OdeSampleConfig {
            n_steps: 1,
            ..OdeSampleConfig::default()
        };
        let a = ode_sample(&net, 8, &cfg, &mut rng::seeded(9)).unwrap();
        let b = ode_sample(&net, 8, &cfg, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_guidance_is_the_plain_conversion() {
        let net = VelocityNet::new(
            VelocityNetSpec::new(2).with_hidden(&[16]).conditional(3),
            "v",
            &mut rng::seeded(1),
        )
        .unwrap();
        let s = NoiseSchedule::default();
        let z = rng::normal_array(&mut rng::seeded(2), 5, 2);
        let t = [0.2, 0.4, 0.5, 0.7, 0.9];
        let cls = [Some(0), Some(1), Some(2), None, Some(1)];
        let got = eval_score(&net, &s, &z, &t, Conditioning::Classes(&cls), 1.0).unwrap();
        let v = net.predict(&z, &t, Conditioning::Classes(&cls)).unwrap();
        assert_eq!(got, s.velocity_to_score(&v, &z, &t).unwrap());
    }

    #[test]
    fn eval_score_rejects_small_t() {
        let net = small_net(1);
        let s = NoiseSchedule::default();
        assert!(matches!(
            eval_score(&net, &s, &Array::zeros(1, 2), &[0.001], Conditioning::Unconditional, 1.0),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn untrained_teacher_fails_gate() {
        let err = GatedTeacher::new(small_net(4), &ReferenceDistribution::ring8(), &GateConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TeacherGate { .. }));
    }
}
