//! Variance schedules, closed-form forward noising and the reverse sampling chain.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{Activation, DenseArray, GradientTape, MlpParams, Var};

/// β_t, α_t = 1 − β_t and ᾱ_t = ∏_{i≤t} α_i for t = 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The parameters a linear schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl DiffusionSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Draws t uniformly from 1..=T.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(1..=self.steps())
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(x0: &DenseArray, t: usize, eps: &DenseArray, schedule: &DiffusionSchedule) -> Result<DenseArray> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Row-wise noising where every row carries its own diffusion step.
pub(crate) fn noise_rows(x0: &[f64], eps: &[f64], cols: usize, ts: &[usize], schedule: &DiffusionSchedule) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    for (r, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..cols {
            let i = r * cols + c;
            out.push(sa * x0[i] + sn * eps[i]);
        }
    }
    out
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Sinusoidal embedding of the integer diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |j: usize| (-(10_000f64).ln() * j as f64 / half.max(1) as f64).exp();
    for j in 0..half {
        out.push((t as f64 * freq(j)).sin());
    }
    for j in 0..half {
        out.push((t as f64 * freq(j)).cos());
    }
    if dim % 2 == 1 {
        out.push(t as f64 / 100.0);
    }
    out
}

/// Anything that predicts the injected noise from `(noisy action, state, t)`.
pub trait NoisePredictor {
    fn schedule(&self) -> &DiffusionSchedule;
    fn action_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// `noisy: n × action_dim`, `states: n × state_dim`, one step per row.
    fn predict(&self, noisy: &DenseArray, states: &DenseArray, ts: &[usize]) -> Result<DenseArray>;
}

/// Network sizes for a [`NoiseModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub time_embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl NoiseModelSpec {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.action_dim + self.state_dim + self.time_embed_dim];
        dims.extend(std::iter::repeat(self.hidden).take(self.depth));
        dims.push(self.action_dim);
        dims
    }
}

/// ε_θ(a_t, s, t): an MLP over `[noisy action, state, time embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    net: MlpParams,
    state_dim: usize,
    action_dim: usize,
    time_embed_dim: usize,
    schedule: DiffusionSchedule,
    schedule_spec: ScheduleSpec,
}

impl NoiseModel {
    pub fn new(net: MlpParams, state_dim: usize, action_dim: usize, time_embed_dim: usize, schedule_spec: ScheduleSpec) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::InvalidArgument("action_dim must be positive".into()));
        }
        if net.input_dim() != action_dim + state_dim + time_embed_dim {
            return Err(Error::Shape(format!(
                "network input {} != action {action_dim} + state {state_dim} + time {time_embed_dim}",
                net.input_dim()
            )));
        }
        if net.output_dim() != action_dim {
            return Err(Error::Shape(format!(
                "network output {} != action dim {action_dim}",
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
            time_embed_dim,
            schedule: schedule_spec.build()?,
            schedule_spec,
        })
    }

    pub fn init<R: Rng + ?Sized>(spec: &NoiseModelSpec, schedule: ScheduleSpec, rng: &mut R) -> Result<Self> {
        let net = MlpParams::init(&spec.layer_dims(), spec.activation, rng)?;
        Self::new(net, spec.state_dim, spec.action_dim, spec.time_embed_dim, schedule)
    }

    /// ε_θ ≡ 0.
    pub fn zeros(spec: &NoiseModelSpec, schedule: ScheduleSpec) -> Result<Self> {
        let net = MlpParams::zeros(&spec.layer_dims(), spec.activation)?;
        Self::new(net, spec.state_dim, spec.action_dim, spec.time_embed_dim, schedule)
    }

    pub fn spec(&self) -> NoiseModelSpec {
        let dims = self.net.dims();
        NoiseModelSpec {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            time_embed_dim: self.time_embed_dim,
            hidden: if dims.len() > 2 { dims[1] } else { 0 },
            depth: dims.len() - 2,
            activation: self.net.activation(),
        }
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        self.schedule_spec
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.flatten()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.net.set_flat(flat)
    }

    fn input_matrix(&self, noisy: &[f64], states: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let n = ts.len();
        if noisy.len() != n * self.action_dim || states.len() != n * self.state_dim {
            return Err(Error::Shape(format!(
                "{n} rows need {} action and {} state entries, got {} and {}",
                n * self.action_dim,
                n * self.state_dim,
                noisy.len(),
                states.len()
            )));
        }
        let width = self.action_dim + self.state_dim + self.time_embed_dim;
        let mut out = Vec::with_capacity(n * width);
        for (r, &t) in ts.iter().enumerate() {
            self.schedule.check_t(t)?;
            out.extend_from_slice(&noisy[r * self.action_dim..(r + 1) * self.action_dim]);
            out.extend_from_slice(&states[r * self.state_dim..(r + 1) * self.state_dim]);
            out.extend(time_embedding(t, self.time_embed_dim));
        }
        Ok(out)
    }

    pub(crate) fn predict_flat(&self, noisy: &[f64], states: &[f64], ts: &[usize]) -> Result<DenseArray> {
        let input = self.input_matrix(noisy, states, ts)?;
        let width = self.net.input_dim();
        self.net.forward(&DenseArray::from_parts(ts.len(), width, input))
    }

    /// Records ε_θ on the tape; the noisy inputs are constants.
    pub fn predict_on_tape(&self, tape: &mut GradientTape, noisy: &[f64], states: &[f64], ts: &[usize]) -> Result<Var> {
        let input = self.input_matrix(noisy, states, ts)?;
        let x = tape.constant(ts.len(), self.net.input_dim(), input)?;
        self.net.forward_on_tape(tape, x, 0)
    }
}

impl NoisePredictor for NoiseModel {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict(&self, noisy: &DenseArray, states: &DenseArray, ts: &[usize]) -> Result<DenseArray> {
        self.predict_flat(noisy.data(), states.data(), ts)
    }
}

/// Runs the reverse chain for every row of `states` (`n × state_dim`) and
/// returns `n × action_dim` actions, optionally clipped to `[-clip, clip]`.
///
/// For unconditional generation pass an `n × 0` state matrix.
pub fn sample_actions<P: NoisePredictor, R: Rng + ?Sized>(model: &P, states: &DenseArray, clip: Option<f64>, rng: &mut R) -> Result<DenseArray> {
    if states.cols() != model.state_dim() {
        return Err(Error::Shape(format!(
            "model expects state dim {}, got {}",
            model.state_dim(),
            states.cols()
        )));
    }
    let n = states.rows();
    let ad = model.action_dim();
    let sched = model.schedule();
    let mut a = DenseArray::from_parts(n, ad, standard_normals(rng, n * ad));
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&a, states, &vec![t; n])?;
        let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        let z = if t > 1 {
            standard_normals(rng, n * ad)
        } else {
            vec![0.0; n * ad]
        };
        let next: Vec<f64> = a
            .data()
            .iter()
            .zip(eps.data())
            .zip(&z)
            .map(|((x, e), zi)| inv_sqrt_alpha * (x - coef * e) + sigma * zi)
            .collect();
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "reverse chain at step {t}, entry {i}: {}",
                next[i]
            )));
        }
        let peak = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 1e12 {
            return Err(Error::NonFinite(format!(
                "reverse chain exploded at step {t}: max |a| = {peak:e}"
            )));
        }
        a = DenseArray::from_parts(n, ad, next);
    }
    let mut out = a.into_data();
    if let Some(c) = clip {
        out.iter_mut().for_each(|v| *v = v.clamp(-c, c));
    }
    ensure_finite(&out, "sampled actions")?;
    Ok(DenseArray::from_parts(n, ad, out))
}

/// Single-state convenience wrapper around [`sample_actions`].
pub fn reverse_sample<P: NoisePredictor, R: Rng + ?Sized>(model: &P, state: &[f64], clip: Option<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let states = DenseArray::matrix(1, state.len(), state.to_vec())?;
    Ok(sample_actions(model, &states, clip, rng)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_step_cumulative_product() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let expect = [0.9, 0.72, 0.504];
        for (a, e) in s.alpha_bars().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(DiffusionSchedule::linear(1, 0.5, 0.5).unwrap().alpha_bars(), &[0.5]);
    }

    #[test]
    fn fifty_step_schedule_matches_independent_product() {
        // independent recomputation: each ᾱ_t as a fresh product, not a running one
        let s = DiffusionSchedule::linear(50, 1e-4, 0.2).unwrap();
        let beta = |i: usize| 1e-4 + (0.2 - 1e-4) * i as f64 / 49.0;
        let ab50: f64 = (0..50).map(|i| 1.0 - beta(i)).product();
        assert!((s.alpha_bar(50) - ab50).abs() < 1e-12);
        // frozen value of the same product, computed offline in Python with math.prod
        assert!((s.alpha_bar(50) - 0.004_616_111_011_266_998).abs() < 1e-12, "{}", s.alpha_bar(50));
        assert!(s.alpha_bar(50) < 0.05);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = DiffusionSchedule::linear(50, 1e-4, 0.2).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_noise_and_zero_signal_cases() {
        let s = DiffusionSchedule::from_betas(vec![0.19]).unwrap();
        let x0 = DenseArray::vector(vec![1.0, 0.0]).unwrap();
        let zero = DenseArray::vector(vec![0.0, 0.0]).unwrap();
        let out = forward_noise(&x0, 1, &zero, &s).unwrap();
        assert!((out.data()[0] - 0.9).abs() < 1e-15 && out.data()[1] == 0.0);

        let e = DenseArray::vector(vec![0.3, -1.7]).unwrap();
        let out = forward_noise(&zero, 1, &e, &s).unwrap();
        let k = (1.0f64 - 0.81).sqrt();
        assert_eq!(out.data(), &[k * 0.3, k * -1.7]);
        assert!(forward_noise(&x0, 2, &zero, &s).is_err());
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
    }

    #[test]
    fn time_embedding_has_requested_width() {
        assert_eq!(time_embedding(7, 16).len(), 16);
        assert_eq!(time_embedding(7, 5).len(), 5);
        assert!(time_embedding(0, 0).is_empty());
    }

    fn toy_spec() -> NoiseModelSpec {
        NoiseModelSpec {
            state_dim: 0,
            action_dim: 2,
            time_embed_dim: 4,
            hidden: 8,
            depth: 2,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NoiseModel::init(&toy_spec(), ScheduleSpec::default(), &mut rng).unwrap();
        let a = reverse_sample(&model, &[], None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = reverse_sample(&model, &[], None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_bounds_actions() {
        let model = NoiseModel::zeros(&toy_spec(), ScheduleSpec::default()).unwrap();
        let states = DenseArray::zeros(500, 0);
        let acts = sample_actions(&model, &states, Some(0.1), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(acts.data().iter().all(|a| a.abs() <= 0.1));
    }

    #[test]
    fn state_dimension_mismatch_is_rejected() {
        let model = NoiseModel::zeros(&toy_spec(), ScheduleSpec::default()).unwrap();
        let states = DenseArray::zeros(3, 1);
        assert!(sample_actions(&model, &states, None, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }
}
