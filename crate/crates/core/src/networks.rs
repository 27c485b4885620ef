//! MLPs, the time/class-conditioned velocity network, the autoencoder with its
//! projection head, and Adam.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, Rng};
use crate::{Array, Error, Result, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    /// No nonlinearity; the whole net is affine.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidSpec("an MLP needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "all widths must be positive: {} -> {:?} -> {}",
                self.input_dim, self.hidden, self.output_dim
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(core::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Array,
}

/// Named parameters with accumulated gradients.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamStore {
    params: Vec<Param>,
}

/// The tape vars a [`ParamStore`] was bound to for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Array) {
        let grad = Array::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape; with `trainable` they collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Adds the tape gradients of a binding into the stored gradients.
    pub fn accumulate(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            p.grad.add_assign(&tape.grad(v))?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.map_inplace(|_| 0.0);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.params.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0))
    }

    pub fn grad_norm(&self) -> f64 {
        math::sqrt(
            self.params
                .iter()
                .flat_map(|p| p.grad.data())
                .map(|g| g * g)
                .sum(),
        )
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter values, got {}",
                self.num_values(),
                values.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of all values; equal iff bit-identical (modulo collisions).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.iter().flat_map(|p| p.value.data()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

fn init_linear(store: &mut ParamStore, prefix: &str, layer: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    // U(-a, a) with a = sqrt(3 / fan_in) has standard deviation 1 / sqrt(fan_in).
    let a = math::sqrt(3.0 / fan_in as f64);
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng::uniform(rng, -a, a)).collect();
    store.push(
        format!("{prefix}.layer{layer}.weight"),
        Array::from_vec(fan_in, fan_out, w).expect("length matches shape"),
    );
    store.push(format!("{prefix}.layer{layer}.bias"), Array::zeros(1, fan_out));
}

/// Hidden layers use the activation; the output layer is linear.
fn mlp_forward(tape: &mut Tape, spec: &MlpSpec, vars: &[Var], x: Var) -> Result<Var> {
    let n_layers = spec.hidden.len() + 1;
    let mut h = x;
    for l in 0..n_layers {
        h = tape.matmul(h, vars[2 * l])?;
        h = tape.add_row(h, vars[2 * l + 1])?;
        if l + 1 < n_layers {
            h = match spec.activation {
                Activation::Silu => tape.silu(h),
                Activation::Relu => tape.relu(h),
                Activation::Identity => h,
            };
        }
    }
    Ok(h)
}

/// A plain multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl Mlp {
    /// Fan-in scaled uniform weights, zero biases. Deterministic in the RNG state.
    pub fn new(spec: MlpSpec, name: &str, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::default();
        for (l, (i, o)) in spec.layer_dims().into_iter().enumerate() {
            init_linear(&mut params, name, l, i, o, rng);
        }
        Ok(Self { spec, params })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Binding)> {
        let (_, c) = tape.shape(x);
        if c != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp_input",
                left: tape.shape(x),
                right: (c, self.spec.input_dim),
            });
        }
        let b = self.params.bind(tape, trainable);
        let y = mlp_forward(tape, &self.spec, &b.vars, x)?;
        Ok((y, b))
    }

    pub fn predict(&self, x: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, _) = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VelocityNetSpec {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub activation: Activation,
    /// Number of sinusoidal frequencies `K`; the embedding has `2K` features.
    pub time_freqs: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    /// Class-conditional when set; slot `num_classes` is the null class.
    pub num_classes: Option<usize>,
    pub class_dim: usize,
}

impl VelocityNetSpec {
    /// 3x256 SiLU trunk, 16 frequencies spaced geometrically in `[1, 1000]`.
    pub fn new(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![256, 256, 256],
            activation: Activation::Silu,
            time_freqs: 16,
            freq_min: 1.0,
            freq_max: 1000.0,
            num_classes: None,
            class_dim: 16,
        }
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn conditional(mut self, num_classes: usize) -> Self {
        self.num_classes = Some(num_classes);
        self
    }

    fn trunk(&self) -> MlpSpec {
        let class = if self.num_classes.is_some() { self.class_dim } else { 0 };
        MlpSpec {
            input_dim: self.data_dim + 2 * self.time_freqs + class,
            hidden: self.hidden.clone(),
            output_dim: self.data_dim,
            activation: self.activation,
        }
    }

    fn frequencies(&self) -> Vec<f64> {
        let k = self.time_freqs;
        if k == 1 {
            return vec![self.freq_min];
        }
        let ratio = self.freq_max / self.freq_min;
        (0..k)
            .map(|i| self.freq_min * math::powf(ratio, i as f64 / (k - 1) as f64))
            .collect()
    }
}

/// Per-row conditioning for a [`VelocityNet`].
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    /// Null class on every row (or no conditioning for unconditional nets).
    Unconditional,
    /// `None` entries use the null class.
    Classes(&'a [Option<usize>]),
}

/// Time- (and optionally class-) conditioned velocity field `v(z_t, t[, c])`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VelocityNet {
    pub spec: VelocityNetSpec,
    pub params: ParamStore,
    freqs: Vec<f64>,
}

impl VelocityNet {
    pub fn new(spec: VelocityNetSpec, name: &str, rng: &mut Rng) -> Result<Self> {
        if spec.time_freqs == 0 || spec.data_dim == 0 {
            return Err(Error::InvalidSpec("velocity net needs data_dim > 0 and time_freqs > 0".into()));
        }
        let trunk = spec.trunk();
        trunk.validate()?;
        let mut params = ParamStore::default();
        for (l, (i, o)) in trunk.layer_dims().into_iter().enumerate() {
            init_linear(&mut params, name, l, i, o, rng);
        }
        if let Some(c) = spec.num_classes {
            let table: Vec<f64> = (0..(c + 1) * spec.class_dim).map(|_| rng::normal(rng)).collect();
            params.push(
                format!("{name}.class_embedding"),
                Array::from_vec(c + 1, spec.class_dim, table).expect("length matches shape"),
            );
        }
        let freqs = spec.frequencies();
        Ok(Self { spec, params, freqs })
    }

    /// Rebuilds a network from its spec and a flat parameter vector.
    pub fn from_flat(spec: VelocityNetSpec, name: &str, values: &[f64]) -> Result<Self> {
        let mut net = Self::new(spec, name, &mut rng::seeded(0))?;
        net.params.load_flat(values)?;
        Ok(net)
    }

    pub fn is_conditional(&self) -> bool {
        self.spec.num_classes.is_some()
    }

    pub fn time_features(&self, t: &[f64]) -> Result<Array> {
        let k = self.freqs.len();
        let mut out = Array::zeros(t.len(), 2 * k);
        for (r, &ti) in t.iter().enumerate() {
            if !(0.0..=1.0).contains(&ti) {
                return Err(Error::TimeOutOfRange { t: ti, lo: 0.0, hi: 1.0 });
            }
            let row = out.row_mut(r);
            for (j, &f) in self.freqs.iter().enumerate() {
                row[j] = math::sin(f * ti);
                row[k + j] = math::cos(f * ti);
            }
        }
        Ok(out)
    }

    fn class_one_hot(&self, n: usize, cond: Conditioning<'_>) -> Result<Option<Array>> {
        let Some(c) = self.spec.num_classes else {
            if let Conditioning::Classes(cls) = cond {
                if cls.iter().any(Option::is_some) {
                    return Err(Error::InvalidSpec("class labels given to an unconditional net".into()));
                }
            }
            return Ok(None);
        };
        let mut oh = Array::zeros(n, c + 1);
        for r in 0..n {
            let slot = match cond {
                Conditioning::Unconditional => c,
                Conditioning::Classes(cls) => {
                    if cls.len() != n {
                        return Err(Error::ShapeMismatch {
                            op: "class_labels",
                            left: (n, 1),
                            right: (cls.len(), 1),
                        });
                    }
                    match cls[r] {
                        Some(k) if k < c => k,
                        Some(k) => return Err(Error::InvalidSpec(format!("class {k} out of range 0..{c}"))),
                        None => c,
                    }
                }
            };
            oh.set(r, slot, 1.0);
        }
        Ok(Some(oh))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        z_t: Var,
        t: &[f64],
        cond: Conditioning<'_>,
        trainable: bool,
    ) -> Result<(Var, Binding)> {
        let (n, d) = tape.shape(z_t);
        if d != self.spec.data_dim || t.len() != n {
            return Err(Error::ShapeMismatch {
                op: "velocity_input",
                left: (n, d),
                right: (t.len(), self.spec.data_dim),
            });
        }
        let tf = self.time_features(t)?;
        let one_hot = self.class_one_hot(n, cond)?;
        let b = self.params.bind(tape, trainable);
        let tf = tape.constant(tf);
        let mut input = tape.concat(z_t, tf)?;
        if let Some(oh) = one_hot {
            let oh = tape.constant(oh);
            let table = *b.vars.last().expect("conditional net has an embedding table");
            let emb = tape.matmul(oh, table)?;
            input = tape.concat(input, emb)?;
        }
        let y = mlp_forward(tape, &self.spec.trunk(), &b.vars, input)?;
        Ok((y, b))
    }

    pub fn predict(&self, z_t: &Array, t: &[f64], cond: Conditioning<'_>) -> Result<Array> {
        let mut tape = Tape::new();
        let z = tape.constant(z_t.clone());
        let (v, _) = self.forward(&mut tape, z, t, cond, false)?;
        Ok(tape.value(v).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AutoEncoderSpec {
    pub data_dim: usize,
    /// Encoder output width `d_e`.
    pub latent_dim: usize,
    /// Reference-space width `d_r`.
    pub ref_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub projector_hidden: Vec<usize>,
    /// Build a projector even when `latent_dim == ref_dim`.
    pub force_projector: bool,
    /// Encoder emits `(mean, log-variance)` for a sampled posterior.
    pub stochastic: bool,
}

impl AutoEncoderSpec {
    /// Encoder/decoder 3x128, projector 2x64.
    pub fn new(data_dim: usize, latent_dim: usize, ref_dim: usize) -> Self {
        Self {
            data_dim,
            latent_dim,
            ref_dim,
            encoder_hidden: vec![128, 128, 128],
            decoder_hidden: vec![128, 128, 128],
            projector_hidden: vec![64, 64],
            force_projector: false,
            stochastic: false,
        }
    }

    pub fn has_projector(&self) -> bool {
        self.force_projector || self.latent_dim != self.ref_dim
    }
}

/// Encoder `E`, decoder `G` and optional projection head `H`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AutoEncoder {
    pub spec: AutoEncoderSpec,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub projector: Option<Mlp>,
}

impl AutoEncoder {
    pub fn new(spec: AutoEncoderSpec, rng: &mut Rng) -> Result<Self> {
        let enc_out = if spec.stochastic { 2 * spec.latent_dim } else { spec.latent_dim };
        let encoder = Mlp::new(MlpSpec::new(spec.data_dim, &spec.encoder_hidden, enc_out), "encoder", rng)?;
        let decoder = Mlp::new(MlpSpec::new(spec.latent_dim, &spec.decoder_hidden, spec.data_dim), "decoder", rng)?;
        let projector = if spec.has_projector() {
            Some(Mlp::new(
                MlpSpec::new(spec.latent_dim, &spec.projector_hidden, spec.ref_dim),
                "projector",
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            encoder,
            decoder,
            projector,
        })
    }

    /// Deterministic latent `z_e` (the posterior mean for stochastic encoders).
    pub fn encode(&self, x: &Array) -> Result<Array> {
        let out = self.encoder.predict(x)?;
        Ok(if self.spec.stochastic {
            out.slice_cols(0, self.spec.latent_dim)
        } else {
            out
        })
    }

    pub fn decode(&self, z: &Array) -> Result<Array> {
        self.decoder.predict(z)
    }

    /// `z_0 = H(z_e)`, or `z_e` itself without a projector.
    pub fn project(&self, z_e: &Array) -> Result<Array> {
        match &self.projector {
            Some(h) => h.predict(z_e),
            None => Ok(z_e.clone()),
        }
    }

    /// Latents in reference space, `H(E(x))`.
    pub fn aligned_latents(&self, x: &Array) -> Result<Array> {
        self.project(&self.encode(x)?)
    }

    pub fn reconstruct(&self, x: &Array) -> Result<Array> {
        self.decode(&self.encode(x)?)
    }

    pub fn zero_grad(&mut self) {
        self.encoder.params.zero_grad();
        self.decoder.params.zero_grad();
        if let Some(p) = &mut self.projector {
            p.params.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Array::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the stored gradients. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - math::powf(beta1, self.step_count as f64);
        let bc2 = 1.0 - math::powf(beta2, self.step_count as f64);
        for (i, p) in params.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let spec = MlpSpec::new(3, &[8, 8], 2);
        let a = Mlp::new(spec.clone(), "m", &mut rng::seeded(5)).unwrap();
        let b = Mlp::new(spec, "m", &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    }

    #[test]
    fn zero_hidden_width_rejected() {
        assert!(Mlp::new(MlpSpec::new(2, &[0], 2), "m", &mut rng::seeded(0)).is_err());
        assert!(Mlp::new(MlpSpec::new(2, &[], 2), "m", &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn init_weight_std_matches_fan_in() {
        // 100 x 100 weight: 10^4 draws, target std 1/sqrt(100) = 0.1.
        let m = Mlp::new(MlpSpec::new(100, &[100], 1), "m", &mut rng::seeded(3)).unwrap();
        let w = &m.params.get(0).value;
        let mean = w.mean();
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let std = math::sqrt(var);
        assert!((std - 0.1).abs() < 0.01, "std {std}");
        assert!(m.params.get(1).value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn fresh_velocity_net_is_finite_and_rowwise_deterministic() {
        let net = VelocityNet::new(VelocityNetSpec::new(2).with_hidden(&[32, 32]), "v", &mut rng::seeded(1)).unwrap();
        let z = Array::from_rows(&[[0.5, -1.0], [0.5, -1.0], [3.0, 2.0]]);
        let v = net.predict(&z, &[0.3, 0.3, 0.9], Conditioning::Unconditional).unwrap();
        assert!(v.is_finite());
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn velocity_net_rejects_time_outside_unit_interval() {
        let net = VelocityNet::new(VelocityNetSpec::new(2).with_hidden(&[8]), "v", &mut rng::seeded(1)).unwrap();
        let z = Array::zeros(1, 2);
        assert!(matches!(
            net.predict(&z, &[1.5], Conditioning::Unconditional),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn null_class_output_ignores_other_embedding_rows() {
        let spec = VelocityNetSpec::new(2).with_hidden(&[16]).conditional(3);
        let mut net = VelocityNet::new(spec, "v", &mut rng::seeded(2)).unwrap();
        let z = Array::from_rows(&[[0.1, 0.2], [1.0, -1.0]]);
        let t = [0.2, 0.7];
        let before = net.predict(&z, &t, Conditioning::Unconditional).unwrap();
        let last = net.params.len() - 1;
        let table = &mut net.params.get_mut(last).value;
        for r in 0..3 {
            for v in table.row_mut(r) {
                *v = 123.0;
            }
        }
        let after = net.predict(&z, &t, Conditioning::Unconditional).unwrap();
        assert_eq!(before, after);
        let labelled = net.predict(&z, &t, Conditioning::Classes(&[Some(0), None])).unwrap();
        assert_ne!(labelled.row(0), before.row(0));
        assert_eq!(labelled.row(1), before.row(1));
    }

    #[test]
    fn projector_presence_rule() {
        assert!(AutoEncoderSpec::new(16, 4, 2).has_projector());
        assert!(!AutoEncoderSpec::new(16, 2, 2).has_projector());
        let mut s = AutoEncoderSpec::new(16, 2, 2);
        s.force_projector = true;
        assert!(s.has_projector());
    }

    #[test]
    fn autoencoder_shapes_round_trip() {
        let mut spec = AutoEncoderSpec::new(16, 4, 2);
        spec.encoder_hidden = vec![8];
        spec.decoder_hidden = vec![8];
        spec.projector_hidden = vec![8];
        let ae = AutoEncoder::new(spec, &mut rng::seeded(0)).unwrap();
        let x = Array::zeros(5, 16);
        assert_eq!(ae.encode(&x).unwrap().shape(), (5, 4));
        assert_eq!(ae.reconstruct(&x).unwrap().shape(), (5, 16));
        assert_eq!(ae.aligned_latents(&x).unwrap().shape(), (5, 2));
    }

    fn store_with(values: &[f64], grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.push("w", Array::row_vector(values));
        s.get_mut(0).grad = Array::row_vector(grads);
        s
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut s = store_with(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.1));
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(0).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_constant_grad_steps_at_lr() {
        let mut s = store_with(&[0.0, 0.0], &[3.0, -0.5]);
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.01));
        let mut prev = s.get(0).value.clone();
        for _ in 0..200 {
            adam.step(&mut s).unwrap();
            let cur = s.get(0).value.clone();
            let step = cur.sub(&prev).unwrap();
            assert!((step.get(0, 0) + 0.01).abs() < 1e-6);
            assert!((step.get(0, 1) - 0.01).abs() < 1e-6);
            prev = cur;
        }
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // f(w) = (w0 - 1)^2 + 3 (w1 + 2)^2
        let mut s = store_with(&[0.0, 0.0], &[0.0, 0.0]);
        let mut adam = Adam::new(&s, AdamConfig::with_lr(1e-2));
        for _ in 0..2000 {
            let w = s.get(0).value.clone();
            s.get_mut(0).grad = Array::row_vector(&[2.0 * (w.get(0, 0) - 1.0), 6.0 * (w.get(0, 1) + 2.0)]);
            adam.step(&mut s).unwrap();
        }
        let w = &s.get(0).value;
        assert!((w.get(0, 0) - 1.0).abs() < 1e-3 && (w.get(0, 1) + 2.0).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn adam_rejects_non_finite_grad_by_name() {
        let mut s = store_with(&[0.0], &[f64::NAN]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert_eq!(adam.step(&mut s), Err(Error::NonFiniteGradient("w".into())));
    }

    #[test]
    fn flat_round_trip() {
        let m = Mlp::new(MlpSpec::new(2, &[4], 1), "m", &mut rng::seeded(9)).unwrap();
        let mut other = Mlp::new(MlpSpec::new(2, &[4], 1), "m", &mut rng::seeded(10)).unwrap();
        other.params.load_flat(&m.params.flat()).unwrap();
        assert_eq!(m.params.fingerprint(), other.params.fingerprint());
        assert!(other.params.load_flat(&[1.0]).is_err());
    }
}
