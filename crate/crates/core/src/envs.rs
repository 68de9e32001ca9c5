//! Desk-scale testbeds: a 2D Gaussian mixture for unconditional generation and
//! a point-mass goal-reaching task for state-conditioned segment preferences.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::numeric::DenseArray;

/// Isotropic Gaussian mixture in the plane with a shared standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(means: Vec<[f64; 2]>, std: f64, weights: Vec<f64>) -> Result<Self> {
        let spec = Self { means, std, weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(Error::InvalidArgument("need one weight per component".into()));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::InvalidArgument(format!("std must be > 0, got {}", self.std)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Five equally weighted components of std 0.15 on the radius-2 circle.
    ///
    /// The angles are uneven so that the mixture's mean reward is clearly
    /// positive; with equal spacing it would be exactly zero and relative
    /// reward improvements would be undefined.
    pub fn default_ring() -> Self {
        let angles_deg = [-30.0, 30.0, 80.0, 150.0, 240.0];
        let means = angles_deg
            .iter()
            .map(|a: &f64| {
                let r = a.to_radians();
                [2.0 * r.cos(), 2.0 * r.sin()]
            })
            .collect();
        Self {
            means,
            std: 0.15,
            weights: vec![0.2; 5],
        }
    }

    /// Expected reward of a ground-truth sample.
    pub fn mean_reward(&self) -> f64 {
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w * toy_reward(m))
            .sum()
    }

    /// Index of the component mean nearest to `x`, and its distance.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        self.means
            .iter()
            .enumerate()
            .map(|(i, m)| (i, ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)).sqrt()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

/// Projection onto (1, 1)/√2.
pub fn toy_reward(x: &[f64]) -> f64 {
    (x[0] + x[1]) / std::f64::consts::SQRT_2
}

/// i.i.d. draws with their component labels.
pub fn sample_mixture_labeled<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<(DenseArray, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need n >= 1 samples".into()));
    }
    let pick = WeightedIndex::new(&spec.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = pick.sample(rng);
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        data.push(spec.means[c][0] + spec.std * z0);
        data.push(spec.means[c][1] + spec.std * z1);
        labels.push(c);
    }
    Ok((DenseArray::matrix(n, 2, data)?, labels))
}

pub fn sample_mixture<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<DenseArray> {
    Ok(sample_mixture_labeled(spec, n, rng)?.0)
}

/// Fraction of samples farther than `radius_mult · std` from every component mean.
pub fn ood_fraction(samples: &DenseArray, spec: &MixtureSpec, radius_mult: f64) -> Result<f64> {
    if samples.rows() == 0 || samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if samples.cols() != 2 {
        return Err(Error::Shape("mixture samples must be 2D".into()));
    }
    if !(radius_mult > 0.0) {
        return Err(Error::InvalidArgument("radius_mult must be > 0".into()));
    }
    let radius = radius_mult * spec.std;
    let far = (0..samples.rows())
        .filter(|&i| spec.nearest(samples.row(i)).1 > radius)
        .count();
    Ok(far as f64 / samples.rows() as f64)
}

/// Share of samples whose nearest component is each mean.
pub fn mode_occupancy(samples: &DenseArray, spec: &MixtureSpec) -> Vec<f64> {
    let mut counts = vec![0usize; spec.means.len()];
    for i in 0..samples.rows() {
        counts[spec.nearest(samples.row(i)).0] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / samples.rows().max(1) as f64)
        .collect()
}

pub fn mean_toy_reward(samples: &DenseArray) -> f64 {
    let n = samples.rows().max(1) as f64;
    (0..samples.rows()).map(|i| toy_reward(samples.row(i))).sum::<f64>() / n
}

/// Point mass in the box `[-arena, arena]²` moving toward a fixed goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassEnv {
    pub goal: [f64; 2],
    /// Half-width of the arena.
    pub arena: f64,
    /// Per-coordinate action bound.
    pub a_max: f64,
    pub horizon: usize,
    pub success_threshold: f64,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        Self {
            goal: [5.0, 5.0],
            arena: 10.0,
            a_max: 1.0,
            horizon: 32,
            // 0.1 × arena side length
            success_threshold: 2.0,
        }
    }
}

impl PointMassEnv {
    pub const STATE_DIM: usize = 2;
    pub const ACTION_DIM: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if !(self.arena > 0.0 && self.a_max > 0.0 && self.success_threshold > 0.0) || self.horizon == 0 {
            return Err(Error::InvalidArgument("point-mass parameters must be positive".into()));
        }
        if self.goal.iter().any(|g| g.abs() > self.arena) {
            return Err(Error::InvalidArgument("goal outside the arena".into()));
        }
        Ok(())
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            rng.gen_range(-self.arena..=self.arena),
            rng.gen_range(-self.arena..=self.arena),
        ]
    }

    /// Moves by the action and clips to the arena; returns the next position and
    /// the reward `−‖next − goal‖`.
    pub fn step(&self, pos: &[f64], action: &[f64]) -> Result<([f64; 2], f64)> {
        ensure_finite(action, "action")?;
        let next = [
            (pos[0] + action[0].clamp(-self.a_max, self.a_max)).clamp(-self.arena, self.arena),
            (pos[1] + action[1].clamp(-self.a_max, self.a_max)).clamp(-self.arena, self.arena),
        ];
        Ok((next, -self.distance(&next)))
    }

    pub fn distance(&self, pos: &[f64]) -> f64 {
        ((pos[0] - self.goal[0]).powi(2) + (pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Greedy optimal action `clip(goal − position)`.
    pub fn oracle_action(&self, pos: &[f64]) -> [f64; 2] {
        [
            (self.goal[0] - pos[0]).clamp(-self.a_max, self.a_max),
            (self.goal[1] - pos[1]).clamp(-self.a_max, self.a_max),
        ]
    }
}

/// Scripted noisy-suboptimal behavior: with probability `random_prob` a uniform
/// action from the box, otherwise the oracle action plus Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub noise_std: f64,
    pub random_prob: f64,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        Self {
            noise_std: 0.2,
            random_prob: 0.6,
        }
    }
}

impl ScriptedPolicy {
    pub fn act<R: Rng + ?Sized>(&self, env: &PointMassEnv, pos: &[f64], rng: &mut R) -> [f64; 2] {
        if rng.gen_bool(self.random_prob) {
            [
                rng.gen_range(-env.a_max..=env.a_max),
                rng.gen_range(-env.a_max..=env.a_max),
            ]
        } else {
            let o = env.oracle_action(pos);
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            [
                (o[0] + self.noise_std * z0).clamp(-env.a_max, env.a_max),
                (o[1] + self.noise_std * z1).clamp(-env.a_max, env.a_max),
            ]
        }
    }
}

/// A finished point-mass episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `horizon × 2` positions at which each action was taken.
    pub states: Vec<[f64; 2]>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub success: bool,
    pub ret: f64,
}

/// Runs one episode per start in lock-step; `policy` maps an `n × 2` state
/// matrix to an `n × 2` action matrix.
pub fn rollout_batch<F>(env: &PointMassEnv, starts: &[[f64; 2]], mut policy: F) -> Result<Vec<Rollout>>
where
    F: FnMut(&DenseArray) -> Result<DenseArray>,
{
    env.validate()?;
    let n = starts.len();
    let mut pos: Vec<[f64; 2]> = starts.to_vec();
    let mut out: Vec<Rollout> = (0..n)
        .map(|_| Rollout {
            states: Vec::with_capacity(env.horizon),
            actions: Vec::with_capacity(env.horizon),
            rewards: Vec::with_capacity(env.horizon),
            success: false,
            ret: 0.0,
        })
        .collect();
    for _ in 0..env.horizon {
        let flat: Vec<f64> = pos.iter().flatten().copied().collect();
        let states = DenseArray::matrix(n, 2, flat)?;
        let actions = policy(&states)?;
        if actions.rows() != n || actions.cols() != 2 {
            return Err(Error::Shape(format!(
                "policy returned {:?} for {n} states",
                actions.shape()
            )));
        }
        for i in 0..n {
            let a = actions.row(i);
            let (next, r) = env.step(&pos[i], a)?;
            out[i].states.push(pos[i]);
            out[i].actions.push([a[0], a[1]]);
            out[i].rewards.push(r);
            out[i].ret += r;
            pos[i] = next;
        }
    }
    for (ro, p) in out.iter_mut().zip(&pos) {
        ro.success = env.distance(p) < env.success_threshold;
    }
    Ok(out)
}

/// Single-episode rollout with a per-state policy.
pub fn rollout<F>(env: &PointMassEnv, start: [f64; 2], mut policy: F) -> Result<Rollout>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut res = rollout_batch(env, &[start], |s| {
        let a = policy(s.row(0))?;
        DenseArray::matrix(1, a.len(), a)
    })?;
    Ok(res.remove(0))
}

/// Environment description stored next to datasets and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Toy { mixture: MixtureSpec },
    PointMass { env: PointMassEnv, behavior: ScriptedPolicy },
}

impl EnvSpec {
    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Toy { .. } => 0,
            EnvSpec::PointMass { .. } => PointMassEnv::STATE_DIM,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    /// Action clipping bound applied after the reverse chain, if any.
    pub fn action_clip(&self) -> Option<f64> {
        match self {
            EnvSpec::Toy { .. } => None,
            EnvSpec::PointMass { env, .. } => Some(env.a_max),
        }
    }
}
