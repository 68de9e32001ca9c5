//! End-to-end runs: data, BC, labels, alignment and evaluation from one seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalOutcome, ToyMetrics};
use super::report::{report, samples_csv, scatter_plot};
use super::train::{stream_rng, train_align, train_bc, BcOutcome, Stream, TrainTrace};
use crate::checkpoint::Checkpoint;
use crate::data::{build_pref_dataset, point_mass_dataset, toy_dataset, OfflineDataset, PreferenceDataset};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::losses::{improvement_factor, Variant};
use crate::diffusion::NoiseModel;

/// Offline dataset D sampled from the configured environment.
pub fn generate_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<OfflineDataset> {
    let mut rng = stream_rng(seed, Stream::Data);
    let mut ds = match &cfg.env {
        EnvSpec::Toy { mixture } => toy_dataset(mixture, cfg.data.n_episodes, &mut rng)?,
        EnvSpec::PointMass { env, behavior } => point_mass_dataset(env, behavior, cfg.data.n_episodes, &mut rng)?,
    };
    ds.seed = Some(seed);
    Ok(ds)
}

/// Training and held-out preference pairs, labeled by the script teacher.
pub fn label_dataset(cfg: &ExperimentConfig, dataset: &OfflineDataset, seed: u64) -> Result<(PreferenceDataset, PreferenceDataset)> {
    let mut rng = stream_rng(seed, Stream::Labels);
    let total = cfg.data.n_pairs + cfg.data.heldout_pairs;
    let mut prefs = build_pref_dataset(dataset, cfg.data.k, total, &cfg.data.teacher, &mut rng)?;
    prefs.seed = Some(seed);
    Ok(prefs.split_tail(cfg.data.heldout_pairs))
}

/// Loads the files named in the config, generating whatever is missing.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(OfflineDataset, PreferenceDataset, PreferenceDataset)> {
    cfg.check_files()?;
    let dataset = match &cfg.data.dataset {
        Some(p) => OfflineDataset::read(p)?,
        None => generate_dataset(cfg, seed)?,
    };
    let (train, held) = match &cfg.data.prefs {
        Some(p) => PreferenceDataset::read(p)?.split_tail(cfg.data.heldout_pairs),
        None => label_dataset(cfg, &dataset, seed)?,
    };
    Ok((dataset, train, held))
}

/// Evaluation with the run's evaluation stream, so U₀ and U₁ share starts and noise.
pub fn evaluate_seeded(model: &NoiseModel, cfg: &ExperimentConfig, seed: u64) -> Result<EvalOutcome> {
    evaluate(model, &cfg.env, cfg.eval.episodes, &cfg.eval, &mut stream_rng(seed, Stream::Eval))
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub eval: EvalOutcome,
    /// `(U₁ − U₀) / U₀`; `None` when U₀ = 0.
    pub f_im: Option<f64>,
    pub trace: TrainTrace,
    pub checkpoint: Checkpoint,
    pub reference_digests: Option<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub seed: u64,
    pub bc: BcOutcome,
    pub bc_eval: EvalOutcome,
    pub runs: Vec<VariantRun>,
}

impl PipelineOutcome {
    pub fn run(&self, variant: Variant) -> Option<&VariantRun> {
        self.runs.iter().find(|r| r.variant == variant)
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, variants: &[Variant]) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (dataset, train, held) = prepare_data(cfg, seed)?;
    let bc = train_bc(cfg, &dataset, seed)?;
    let bc_eval = evaluate_seeded(&bc.checkpoint.model, cfg, seed)?;
    let mut runs = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut trace_eval = |m: &NoiseModel| -> Result<f64> {
            let n = cfg.align.trace_eval;
            Ok(evaluate(m, &cfg.env, n, &cfg.eval, &mut stream_rng(seed, Stream::Eval))?.u)
        };
        let out = train_align(cfg, &bc.checkpoint, &dataset, &train.pairs, &held.pairs, variant, seed, Some(&mut trace_eval))?;
        let eval = evaluate_seeded(&out.checkpoint.model, cfg, seed)?;
        let f_im = improvement_factor(bc_eval.u, eval.u).ok();
        runs.push(VariantRun {
            variant,
            eval,
            f_im,
            trace: out.trace,
            checkpoint: out.checkpoint,
            reference_digests: out.reference_digests,
        });
    }
    Ok(PipelineOutcome { seed, bc, bc_eval, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub u: f64,
    pub f_im: Option<f64>,
    pub toy: Option<ToyMetrics>,
    pub final_e_winning: f64,
    pub final_e_losing: f64,
    pub final_i_acc: f64,
    pub final_heldout_i_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub reference_dmse: f64,
    pub u0: f64,
    pub bc_toy: Option<ToyMetrics>,
    pub variants: Vec<VariantSummary>,
}

impl RunSummary {
    pub fn from_outcome(cfg: &ExperimentConfig, out: &PipelineOutcome) -> Self {
        Self {
            name: cfg.name.clone(),
            seed: out.seed,
            reference_dmse: out.bc.trace.reference_dmse,
            u0: out.bc_eval.u,
            bc_toy: out.bc_eval.toy.clone(),
            variants: out
                .runs
                .iter()
                .map(|r| {
                    let last = r.trace.last().expect("trace has a final record");
                    VariantSummary {
                        variant: r.variant,
                        u: r.eval.u,
                        f_im: r.f_im,
                        toy: r.eval.toy.clone(),
                        final_e_winning: last.e_winning,
                        final_e_losing: last.e_losing,
                        final_i_acc: last.i_acc,
                        final_heldout_i_acc: last.heldout_i_acc,
                    }
                })
                .collect(),
        }
    }

    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

/// Writes checkpoints, traces, plots and a JSON summary for a finished pipeline.
pub fn write_outputs(cfg: &ExperimentConfig, out: &PipelineOutcome, dir: impl AsRef<Path>) -> Result<RunSummary> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let summary = RunSummary::from_outcome(cfg, out);
    out.bc.checkpoint.save(dir.join("bc.ckpt"))?;
    let traces: Vec<TrainTrace> = out.runs.iter().map(|r| r.trace.clone()).collect();
    for r in &out.runs {
        r.checkpoint.save(dir.join(format!("{}.ckpt", r.variant)))?;
        r.trace.save_json(dir.join(format!("trace_{}.json", r.variant)))?;
    }
    if !traces.is_empty() {
        report(&traces, dir)?;
    }
    if let EnvSpec::Toy { mixture } = &cfg.env {
        let mut plots = vec![("bc".to_string(), &out.bc_eval)];
        plots.extend(out.runs.iter().map(|r| (r.variant.to_string(), &r.eval)));
        for (name, ev) in plots {
            let samples = ev.samples.as_ref().ok_or_else(|| Error::InvalidArgument("missing samples".into()))?;
            fs::write(dir.join(format!("samples_{name}.csv")), samples_csv(samples))?;
            let title = format!("{} samples (reward {:.3})", name.to_uppercase(), ev.u);
            fs::write(dir.join(format!("scatter_{name}.svg")), scatter_plot(&title, samples, mixture, cfg.eval.ood_radius))?;
        }
    }
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// One-shot toy reproduction with all three variants.
pub fn toy_demo(cfg: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunSummary> {
    if !matches!(cfg.env, EnvSpec::Toy { .. }) {
        return Err(Error::InvalidArgument("toy-demo needs a toy environment".into()));
    }
    let out = run_pipeline(cfg, seed, &Variant::ALL)?;
    match out_dir {
        Some(d) => write_outputs(cfg, &out, d),
        None => Ok(RunSummary::from_outcome(cfg, &out)),
    }
}
