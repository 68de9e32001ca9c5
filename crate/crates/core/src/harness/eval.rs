//! Policy evaluation on either testbed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use crate::diffusion::{sample_actions, NoiseModel, NoisePredictor};
use crate::envs::{mean_toy_reward, mode_occupancy, ood_fraction, rollout_batch, EnvSpec, MixtureSpec, PointMassEnv};
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub success: bool,
    pub ret: f64,
    pub final_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    pub mean_reward: f64,
    pub ood_fraction: f64,
    pub occupancy: Vec<f64>,
    pub modes_covered: usize,
}

impl ToyMetrics {
    pub fn compute(samples: &DenseArray, mixture: &MixtureSpec, cfg: &EvalConfig) -> Result<Self> {
        let occupancy = mode_occupancy(samples, mixture);
        Ok(Self {
            mean_reward: mean_toy_reward(samples),
            ood_fraction: ood_fraction(samples, mixture, cfg.ood_radius)?,
            modes_covered: occupancy.iter().filter(|&&o| o >= cfg.mode_min_share).count(),
            occupancy,
        })
    }
}

/// U plus the per-episode (point mass) or per-sample (toy) details behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Success rate (point mass) or mean toy reward (toy).
    pub u: f64,
    pub episodes: Vec<EpisodeRecord>,
    pub toy: Option<ToyMetrics>,
    #[serde(skip)]
    pub samples: Option<DenseArray>,
}

fn check_dims(model: &NoiseModel, env: &EnvSpec) -> Result<()> {
    if model.state_dim() != env.state_dim() || model.action_dim() != env.action_dim() {
        return Err(Error::Shape(format!(
            "model (state {}, action {}) does not fit env (state {}, action {})",
            model.state_dim(),
            model.action_dim(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    Ok(())
}

/// Evaluates `model` with `n` fresh rollouts or samples.
pub fn evaluate<R: Rng + ?Sized>(model: &NoiseModel, env: &EnvSpec, n: usize, cfg: &EvalConfig, rng: &mut R) -> Result<EvalOutcome> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs n >= 1".into()));
    }
    check_dims(model, env)?;
    match env {
        EnvSpec::Toy { mixture } => {
            let samples = sample_actions(model, &DenseArray::zeros(n, 0), None, rng)?;
            let toy = ToyMetrics::compute(&samples, mixture, cfg)?;
            Ok(EvalOutcome {
                u: toy.mean_reward,
                episodes: Vec::new(),
                toy: Some(toy),
                samples: Some(samples),
            })
        }
        EnvSpec::PointMass { env: pm, .. } => {
            let clip = env.action_clip();
            let starts: Vec<[f64; 2]> = (0..n).map(|_| pm.sample_start(rng)).collect();
            evaluate_policy(pm, &starts, |s| sample_actions(model, s, clip, rng))
        }
    }
}

/// Point-mass evaluation of an arbitrary batched policy.
pub fn evaluate_policy<F>(env: &PointMassEnv, starts: &[[f64; 2]], policy: F) -> Result<EvalOutcome>
where
    F: FnMut(&DenseArray) -> Result<DenseArray>,
{
    if starts.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs n >= 1".into()));
    }
    let rollouts = rollout_batch(env, starts, policy)?;
    let episodes: Vec<EpisodeRecord> = rollouts
        .iter()
        .map(|r| {
            let last = r.states.last().copied().unwrap_or([0.0; 2]);
            let a = r.actions.last().copied().unwrap_or([0.0; 2]);
            let (end, _) = env.step(&last, &a).unwrap_or((last, 0.0));
            EpisodeRecord {
                success: r.success,
                ret: r.ret,
                final_distance: env.distance(&end),
            }
        })
        .collect();
    let u = episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64;
    Ok(EvalOutcome {
        u,
        episodes,
        toy: None,
        samples: None,
    })
}
