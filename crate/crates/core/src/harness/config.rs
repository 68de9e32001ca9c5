//! Experiment configuration, read from TOML. Every field has a default, so a
//! config file only needs the values it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TeacherConfig;
use crate::diffusion::{NoiseModelSpec, ScheduleSpec};
use crate::envs::{EnvSpec, MixtureSpec, PointMassEnv, ScriptedPolicy};
use crate::error::{Error, Result};
use crate::losses::AlignConfig;
use crate::numeric::{Activation, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Fallback seed; the CLI requires `--seed` for training regardless.
    pub seed: Option<u64>,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub bc: BcConfig,
    pub align: AlignRunConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing offline dataset; generated from `env` when absent.
    pub dataset: Option<PathBuf>,
    /// Existing preference file; labeled from the dataset when absent.
    pub prefs: Option<PathBuf>,
    /// Episodes (point mass) or samples (toy) to generate.
    pub n_episodes: usize,
    /// Segment length.
    pub k: usize,
    /// Training pairs.
    pub n_pairs: usize,
    /// Extra pairs kept aside for held-out implicit accuracy.
    pub heldout_pairs: usize,
    pub teacher: TeacherConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub time_embed_dim: usize,
    pub hidden: usize,
    /// Hidden layers.
    pub depth: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// The run fails if the mean loss of the last `log_every` steps ends above this.
    pub max_final_loss: f64,
    pub log_every: usize,
    /// Segments and draws per segment for the reference D-MSE estimate.
    pub reference_segments: usize,
    pub reference_draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignRunConfig {
    pub loss: AlignConfig,
    pub steps: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    /// Replace `loss.b` with `μ ·` (reference D-MSE) so the FKPD term starts near zero.
    pub auto_b: bool,
    /// Training pairs used for the E_winning / E_losing / I_acc diagnostics.
    pub diag_pairs: usize,
    /// Fixed noise draws per diagnostic pair.
    pub diag_draws: usize,
    /// Episodes or samples for the U column of the trace; 0 disables it.
    pub trace_eval: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rollouts (point mass) or samples (toy).
    pub episodes: usize,
    /// OOD radius in component standard deviations.
    pub ood_radius: f64,
    /// Minimum sample share for a mode to count as covered.
    pub mode_min_share: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            prefs: None,
            n_episodes: 2000,
            k: 16,
            n_pairs: 2000,
            heldout_pairs: 200,
            teacher: TeacherConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            time_embed_dim: 16,
            hidden: 64,
            depth: 2,
            activation: Activation::Silu,
        }
    }
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 256,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            max_final_loss: 0.9,
            log_every: 100,
            reference_segments: 512,
            reference_draws: 8,
        }
    }
}

impl Default for AlignRunConfig {
    fn default() -> Self {
        Self {
            loss: AlignConfig::default(),
            steps: 600,
            adam: AdamConfig::default(),
            eval_every: 50,
            auto_b: true,
            diag_pairs: 256,
            diag_draws: 4,
            trace_eval: 0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            ood_radius: 3.0,
            mode_min_share: 0.05,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::point_mass()
    }
}

impl ExperimentConfig {
    /// Segment-level alignment on the point-mass MDP.
    pub fn point_mass() -> Self {
        Self {
            name: "point-mass".into(),
            seed: None,
            env: EnvSpec::PointMass {
                env: PointMassEnv::default(),
                behavior: ScriptedPolicy::default(),
            },
            data: DataConfig::default(),
            schedule: ScheduleSpec::default(),
            model: ModelConfig::default(),
            bc: BcConfig::default(),
            align: AlignRunConfig {
                loss: AlignConfig {
                    mu: 1.5,
                    ..AlignConfig::default()
                },
                ..AlignRunConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// Unconditional 2D mixture with single-action segments.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            seed: None,
            env: EnvSpec::Toy {
                mixture: MixtureSpec::default_ring(),
            },
            data: DataConfig {
                n_episodes: 10_000,
                k: 1,
                n_pairs: 4000,
                heldout_pairs: 500,
                ..DataConfig::default()
            },
            schedule: ScheduleSpec::default(),
            model: ModelConfig {
                hidden: 64,
                depth: 3,
                ..ModelConfig::default()
            },
            bc: BcConfig {
                steps: 20_000,
                ..BcConfig::default()
            },
            align: AlignRunConfig {
                loss: AlignConfig {
                    pref_batch: 128,
                    reg_batch: 128,
                    ..AlignConfig::default()
                },
                steps: 2000,
                ..AlignRunConfig::default()
            },
            eval: EvalConfig {
                episodes: 2000,
                ..EvalConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "point-mass" | "pointmass" => Ok(Self::point_mass()),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.align.loss.validate()?;
        self.schedule.build()?;
        match &self.env {
            EnvSpec::Toy { mixture } => {
                mixture.validate()?;
                if self.data.k != 1 {
                    return Err(Error::InvalidArgument("toy segments have length 1".into()));
                }
            }
            EnvSpec::PointMass { env, .. } => {
                env.validate()?;
                if self.data.k == 0 || self.data.k > env.horizon {
                    return Err(Error::InvalidArgument(format!("k must be in 1..={}", env.horizon)));
                }
            }
        }
        if self.model.hidden == 0 || self.model.depth == 0 {
            return Err(Error::InvalidArgument("model needs at least one hidden layer".into()));
        }
        if self.bc.batch_size == 0 || self.bc.log_every == 0 || self.align.eval_every == 0 {
            return Err(Error::InvalidArgument("batch size and logging cadence must be >= 1".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
        }
        Ok(())
    }

    /// Files named in the config must exist before a run starts.
    pub fn check_files(&self) -> Result<()> {
        for p in [&self.data.dataset, &self.data.prefs].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("missing file {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> NoiseModelSpec {
        NoiseModelSpec {
            state_dim: self.env.state_dim(),
            action_dim: self.env.action_dim(),
            time_embed_dim: self.model.time_embed_dim,
            hidden: self.model.hidden,
            depth: self.model.depth,
            activation: self.model.activation,
        }
    }
}
