//! Learned one-step dynamics models and the transition store they train on.
//!
//! [`ModelKind::ResidualPhysics`] wraps the analytic prior and learns an
//! additive correction to its one-step prediction; [`ModelKind::DataDriven`]
//! learns the whole state delta from scratch. Both share features, network
//! shape and training code so the comparison isolates the prior.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neural::{Adam, Mlp, OutputActivation};
use crate::pendulum::{step_prior_substeps, PhysicalParams, State};

pub const FEATURE_DIM: usize = 7;
const INPUT_STD_FLOOR: f64 = 0.1;
const OUTPUT_SCALE_FLOOR: f64 = 1e-6;

/// Residual network shape: four weight layers with 16-unit hidden layers.
/// Residual correction network: 4 weight layers, 16 hidden units.
pub const RESIDUAL_LAYERS: [usize; 5] = [FEATURE_DIM, 16, 16, 16, 4];
/// Wider network for the data-driven kind, which has to learn the whole map.
pub const DATA_DRIVEN_LAYERS: [usize; 5] = [FEATURE_DIM, 64, 64, 64, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ResidualPhysics,
    DataDriven,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::ResidualPhysics => "residual",
            ModelKind::DataDriven => "data-driven",
        }
    }

    pub fn layer_sizes(self) -> &'static [usize] {
        match self {
            ModelKind::ResidualPhysics => &RESIDUAL_LAYERS,
            ModelKind::DataDriven => &DATA_DRIVEN_LAYERS,
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "residual" => Some(ModelKind::ResidualPhysics),
            "data-driven" => Some(ModelKind::DataDriven),
            _ => None,
        }
    }
}

/// One plant (or imagined) transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: State,
    pub a: f64,
    pub r: f64,
    pub s_next: State,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            inserted: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of pushes, including overwritten ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.items
    }

    /// Uniform sample with replacement.
    pub fn sample(&mut self, n: usize) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.items[self.rng.gen_range(0..self.items.len())])
            .collect()
    }

    pub fn sample_state(&mut self) -> Option<State> {
        if self.items.is_empty() {
            None
        } else {
            Some(self.items[self.rng.gen_range(0..self.items.len())].s)
        }
    }
}

/// Per-feature affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
        }
    }

    pub fn apply(&self, x: &mut [f64; FEATURE_DIM]) {
        for i in 0..FEATURE_DIM {
            x[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Unnormalized trig encoding `(cos α, sin α, cos β, sin β, α̇, β̇, a)`.
pub fn raw_features(s: &State, a: f64) -> [f64; FEATURE_DIM] {
    let (sa, ca) = s.alpha.sin_cos();
    let (sb, cb) = s.beta.sin_cos();
    [ca, sa, cb, sb, s.alpha_dot, s.beta_dot, a]
}

/// Running mean/variance (Welford) over feature vectors.
#[derive(Debug, Clone)]
struct Moments<const N: usize> {
    n: f64,
    mean: [f64; N],
    m2: [f64; N],
}

impl<const N: usize> Moments<N> {
    fn new() -> Self {
        Self {
            n: 0.0,
            mean: [0.0; N],
            m2: [0.0; N],
        }
    }

    fn push(&mut self, x: &[f64; N]) {
        self.n += 1.0;
        for i in 0..N {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn std(&self) -> [f64; N] {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = if self.n > 1.0 {
                (self.m2[i] / (self.n - 1.0)).sqrt()
            } else {
                0.0
            };
        }
        out
    }
}

/// Learned dynamics `ŝ' = T̂(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    kind: ModelKind,
    pub net: Mlp,
    pub prior: PhysicalParams,
    pub dt: f64,
    /// RK4 substeps used by the prior inside the residual model.
    pub prior_substeps: usize,
    pub input_normalizer: Normalizer,
    /// Network outputs are multiplied by this to give state deltas.
    pub output_scale: [f64; 4],
}

impl DynamicsModel {
    pub fn new(
        kind: ModelKind,
        prior: PhysicalParams,
        dt: f64,
        prior_substeps: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::with_net(
            kind,
            prior,
            dt,
            prior_substeps,
            Mlp::init(kind.layer_sizes(), OutputActivation::Identity, seed)?,
        )
    }

    pub fn with_net(
        kind: ModelKind,
        prior: PhysicalParams,
        dt: f64,
        prior_substeps: usize,
        net: Mlp,
    ) -> Result<Self> {
        if net.input_dim() != FEATURE_DIM || net.output_dim() != 4 {
            return Err(Error::Shape {
                expected: FEATURE_DIM,
                got: net.input_dim(),
            });
        }
        Ok(Self {
            kind,
            net,
            prior,
            dt,
            prior_substeps: prior_substeps.max(1),
            input_normalizer: Normalizer::identity(),
            output_scale: [1.0; 4],
        })
    }

    /// Model whose network is all zeros: the prior (residual kind) or the
    /// identity map (data-driven kind).
    pub fn zero(kind: ModelKind, prior: PhysicalParams, dt: f64, prior_substeps: usize) -> Self {
        let net = Mlp::zeros(kind.layer_sizes(), OutputActivation::Identity)
            .expect("default layer sizes are valid");
        Self::with_net(kind, prior, dt, prior_substeps, net).expect("default shape")
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Normalized network input for `(s, a)`.
    pub fn features(&self, s: &State, a: f64) -> [f64; FEATURE_DIM] {
        let mut x = raw_features(s, a);
        self.input_normalizer.apply(&mut x);
        x
    }

    /// State the network's delta is added to.
    fn base(&self, s: &State, a: f64) -> State {
        match self.kind {
            ModelKind::ResidualPhysics => {
                step_prior_substeps(s, a, self.dt, self.prior_substeps, &self.prior)
            }
            ModelKind::DataDriven => *s,
        }
    }

    pub fn predict(&self, s: &State, a: f64) -> Result<State> {
        Ok(self.predict_batch(std::slice::from_ref(s), &[a])?[0])
    }

    /// One-step predictions for a batch of `(state, action)` pairs.
    ///
    /// Non-finite inputs produce non-finite outputs rather than an error so
    /// that batched planning can score them individually.
    pub fn predict_batch(&self, states: &[State], actions: &[f64]) -> Result<Vec<State>> {
        if states.len() != actions.len() {
            return Err(Error::Shape {
                expected: states.len(),
                got: actions.len(),
            });
        }
        let n = states.len();
        let mut x = Vec::with_capacity(n * FEATURE_DIM);
        for (s, &a) in states.iter().zip(actions) {
            x.extend_from_slice(&self.features(s, a));
        }
        let cache = self.net.forward_batch(&x, n)?;
        let out = cache.output();
        Ok(states
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(i, (s, &a))| {
                let d = &out[i * 4..i * 4 + 4];
                let delta = [
                    d[0] * self.output_scale[0],
                    d[1] * self.output_scale[1],
                    d[2] * self.output_scale[2],
                    d[3] * self.output_scale[3],
                ];
                self.base(s, a).offset(delta)
            })
            .collect())
    }

    /// Open-loop multi-step prediction; element `k` is the state after `k+1` actions.
    pub fn rollout(&self, s0: &State, actions: &[f64]) -> Result<Vec<State>> {
        if actions.is_empty() {
            return Err(Error::InvalidParams("rollout needs at least one action".into()));
        }
        let mut out = Vec::with_capacity(actions.len());
        let mut s = *s0;
        for (k, &a) in actions.iter().enumerate() {
            if !s.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("rollout input at step {k}")));
            }
            s = self.predict(&s, a)?;
            if !s.is_finite() {
                return Err(Error::Divergence(format!("rollout diverged at step {k}")));
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Regression target: the observed delta beyond the base prediction.
    fn target_delta(&self, t: &Transition) -> [f64; 4] {
        let base = self.base(&t.s, t.a).to_array();
        let next = t.s_next.to_array();
        [
            next[0] - base[0],
            next[1] - base[1],
            next[2] - base[2],
            next[3] - base[3],
        ]
    }

    /// Refits input and output normalization to the buffer's contents.
    pub fn fit_normalizer(&mut self, buffer: &ReplayBuffer) {
        if buffer.len() < 2 {
            return;
        }
        let mut inputs = Moments::<FEATURE_DIM>::new();
        let mut outputs = Moments::<4>::new();
        for t in buffer.as_slice() {
            inputs.push(&raw_features(&t.s, t.a));
            outputs.push(&self.target_delta(t));
        }
        let std = inputs.std();
        for i in 0..FEATURE_DIM {
            self.input_normalizer.mean[i] = inputs.mean[i];
            self.input_normalizer.std[i] = std[i].max(INPUT_STD_FLOOR);
        }
        let out_std = outputs.std();
        let out_rms: Vec<f64> = (0..4)
            .map(|i| (out_std[i].powi(2) + outputs.mean[i].powi(2)).sqrt())
            .collect();
        for i in 0..4 {
            self.output_scale[i] = out_rms[i].max(OUTPUT_SCALE_FLOOR);
        }
    }

    /// Mean squared normalized error and its gradient for one minibatch.
    fn batch_loss(&self, batch: &[&Transition], grads: &mut [f64]) -> Result<f64> {
        let n = batch.len();
        let mut x = Vec::with_capacity(n * FEATURE_DIM);
        let mut targets = Vec::with_capacity(n * 4);
        for t in batch {
            x.extend_from_slice(&self.features(&t.s, t.a));
            let d = self.target_delta(t);
            for i in 0..4 {
                targets.push(d[i] / self.output_scale[i]);
            }
        }
        let cache = self.net.forward_batch(&x, n)?;
        let pred = cache.output();
        let denom = (n * 4) as f64;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(n * 4);
        for (p, y) in pred.iter().zip(&targets) {
            let e = p - y;
            loss += e * e;
            upstream.push(2.0 * e / denom);
        }
        self.net.backward_batch(&cache, &upstream, grads)?;
        Ok(loss / denom)
    }

    /// One shuffled pass over the buffer (capped at `trainer.max_batches`
    /// minibatches). Returns the mean minibatch loss.
    pub fn train_epoch(&mut self, buffer: &ReplayBuffer, trainer: &mut ModelTrainer) -> Result<f64> {
        let bs = trainer.batch_size;
        if buffer.len() < bs || bs == 0 {
            return Err(Error::InsufficientData {
                needed: bs.max(1),
                available: buffer.len(),
            });
        }
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        order.shuffle(&mut trainer.rng);
        let items = buffer.as_slice();
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut grads = vec![0.0; self.net.num_params()];
        for chunk in order.chunks_exact(bs).take(trainer.max_batches) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &items[i]).collect();
            grads.iter_mut().for_each(|g| *g = 0.0);
            let loss = self.batch_loss(&batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("model loss became {loss}")));
            }
            trainer.adam.step_net(&mut self.net, &grads)?;
            total += loss;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Mean squared one-step error in raw state units.
    pub fn one_step_mse(&self, data: &[Transition]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let states: Vec<State> = data.iter().map(|t| t.s).collect();
        let actions: Vec<f64> = data.iter().map(|t| t.a).collect();
        let pred = self.predict_batch(&states, &actions)?;
        let mut sum = 0.0;
        for (p, t) in pred.iter().zip(data) {
            let (p, y) = (p.to_array(), t.s_next.to_array());
            sum += (0..4).map(|i| (p[i] - y[i]).powi(2)).sum::<f64>();
        }
        Ok(sum / (4 * data.len()) as f64)
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dynamics_model");
        let _ = writeln!(s, "kind {}", self.kind.tag());
        let _ = writeln!(s, "dt {:.16e}", self.dt);
        let _ = writeln!(s, "prior_substeps {}", self.prior_substeps);
        let p = &self.prior;
        let prior = [p.m_p, p.l_p, p.l_r, p.j1, p.j2, p.k_t, p.k_m, p.r_m, p.g, p.a_max];
        let _ = writeln!(s, "prior {}", join(&prior));
        let _ = writeln!(s, "input_mean {}", join(&self.input_normalizer.mean));
        let _ = writeln!(s, "input_std {}", join(&self.input_normalizer.std));
        let _ = writeln!(s, "output_scale {}", join(&self.output_scale));
        s.push_str(&self.net.to_checkpoint());
        s
    }

    pub fn read_checkpoint<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = &'a str>,
    {
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))?
                .trim();
            if key == "dynamics_model" {
                return if line == key {
                    Ok(String::new())
                } else {
                    Err(Error::Checkpoint(format!("expected '{key}', got '{line}'")))
                };
            }
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("expected '{key}', got '{line}'")))
        };
        field("dynamics_model")?;
        let kind_tag = field("kind")?;
        let kind = ModelKind::from_tag(&kind_tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown model kind '{kind_tag}'")))?;
        let dt = parse_vec::<1>(&field("dt")?)?[0];
        let prior_substeps: usize = field("prior_substeps")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("prior_substeps: {e}")))?;
        let pv = parse_vec::<10>(&field("prior")?)?;
        let prior = PhysicalParams {
            m_p: pv[0],
            l_p: pv[1],
            l_r: pv[2],
            j1: pv[3],
            j2: pv[4],
            k_t: pv[5],
            k_m: pv[6],
            r_m: pv[7],
            g: pv[8],
            a_max: pv[9],
        };
        let mean = parse_vec::<FEATURE_DIM>(&field("input_mean")?)?;
        let std = parse_vec::<FEATURE_DIM>(&field("input_std")?)?;
        let output_scale = parse_vec::<4>(&field("output_scale")?)?;
        let net = Mlp::read_checkpoint(lines)?;
        let mut model = Self::with_net(kind, prior, dt, prior_substeps, net)?;
        model.input_normalizer = Normalizer { mean, std };
        model.output_scale = output_scale;
        Ok(model)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        Self::read_checkpoint(&mut text.lines())
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_vec<const N: usize>(s: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Checkpoint(format!("value '{t}': {e}")))
        })
        .collect::<Result<_>>()?;
    vals.try_into()
        .map_err(|v: Vec<f64>| Error::Checkpoint(format!("expected {N} values, got {}", v.len())))
}

/// Optimizer and minibatch settings for [`DynamicsModel::train_epoch`].
#[derive(Debug, Clone)]
pub struct ModelTrainer {
    pub adam: Adam,
    pub batch_size: usize,
    pub max_batches: usize,
    rng: ChaCha8Rng,
}

impl ModelTrainer {
    pub fn new(model: &DynamicsModel, lr: f64, batch_size: usize, max_batches: usize, seed: u64) -> Self {
        Self {
            adam: Adam::for_net(&model.net, lr),
            batch_size,
            max_batches: max_batches.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Writes a state trajectory as CSV rows `t, alpha, beta, alpha_dot, beta_dot`.
pub fn write_rollout_csv(path: &Path, states: &[State], dt: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "alpha", "beta", "alpha_dot", "beta_dot"])?;
    for (k, s) in states.iter().enumerate() {
        w.write_record(&[
            format!("{}", k as f64 * dt),
            format!("{}", s.alpha),
            format!("{}", s.beta),
            format!("{}", s.alpha_dot),
            format!("{}", s.beta_dot),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn prior() -> PhysicalParams {
        PhysicalParams::default()
    }

    #[test]
    fn features_of_zero_state() {
        let m = DynamicsModel::zero(ModelKind::ResidualPhysics, prior(), 0.02, 4);
        assert_eq!(m.features(&State::default(), 0.0), [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn features_are_periodic_in_angles() {
        let s = State::new(0.7, -2.0, 1.5, 3.0);
        let t = State::new(0.7 + 2.0 * PI, -2.0 - 2.0 * PI, 1.5, 3.0);
        let (a, b) = (raw_features(&s, 1.0), raw_features(&t, 1.0));
        for i in 0..FEATURE_DIM {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_is_affine() {
        let mut m = DynamicsModel::zero(ModelKind::DataDriven, prior(), 0.02, 4);
        m.input_normalizer = Normalizer {
            mean: [0.5; FEATURE_DIM],
            std: [2.0; FEATURE_DIM],
        };
        let s = State::new(0.0, 0.0, 3.0, -1.0);
        let f = m.features(&s, 4.0);
        let raw = raw_features(&s, 4.0);
        for i in 0..FEATURE_DIM {
            assert_eq!(f[i], (raw[i] - 0.5) / 2.0);
        }
    }

    #[test]
    fn zero_residual_is_the_prior() {
        let m = DynamicsModel::zero(ModelKind::ResidualPhysics, prior(), 0.02, 4);
        let s = State::new(0.3, 2.0, -1.0, 4.0);
        let expected = step_prior_substeps(&s, 1.5, 0.02, 4, &prior());
        assert_eq!(m.predict(&s, 1.5).unwrap(), expected);
    }

    #[test]
    fn zero_data_driven_is_identity() {
        let m = DynamicsModel::zero(ModelKind::DataDriven, prior(), 0.02, 4);
        let s = State::new(0.3, 2.0, -1.0, 4.0);
        assert_eq!(m.predict(&s, 1.5).unwrap(), s);
    }

    #[test]
    fn rollout_base_case_and_errors() {
        let m = DynamicsModel::zero(ModelKind::ResidualPhysics, prior(), 0.02, 4);
        let s = State::new(0.0, 0.5, 0.0, 0.0);
        assert_eq!(m.rollout(&s, &[2.0]).unwrap(), vec![m.predict(&s, 2.0).unwrap()]);
        assert!(m.rollout(&s, &[]).is_err());
        let bad = State::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(m.rollout(&bad, &[0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn train_epoch_needs_data() {
        let mut m = DynamicsModel::new(ModelKind::ResidualPhysics, prior(), 0.02, 4, 0).unwrap();
        let mut tr = ModelTrainer::new(&m, 1e-3, 8, 10, 0);
        let buf = ReplayBuffer::new(10, 0);
        assert!(matches!(
            m.train_epoch(&buf, &mut tr),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn ring_buffer_wraps() {
        let mut b = ReplayBuffer::new(3, 1);
        for i in 0..5 {
            b.push(Transition {
                s: State::new(i as f64, 0.0, 0.0, 0.0),
                a: 0.0,
                r: 0.0,
                s_next: State::default(),
                done: false,
            });
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let alphas: Vec<f64> = b.as_slice().iter().map(|t| t.s.alpha).collect();
        assert_eq!(alphas, vec![3.0, 4.0, 2.0]);
        assert!(b.sample(50).iter().all(|t| t.s.alpha >= 2.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = DynamicsModel::new(ModelKind::DataDriven, prior(), 0.02, 4, 9).unwrap();
        m.input_normalizer.mean[3] = 0.123456789;
        m.output_scale = [0.1, 0.2, 0.3, 1.0 / 3.0];
        let back = DynamicsModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }
}
