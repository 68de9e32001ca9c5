//! The behavior-cloning and alignment loops.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::checkpoint::{params_digest, Checkpoint, CheckpointMeta};
use crate::data::{sample_segments, OfflineDataset, PreferencePair};
use crate::diffusion::NoiseModel;
use crate::error::{Error, Result};
use crate::losses::{self, draw_pair_noise, implicit_accuracy_on, pair_diagnostics_on, AlignConfig, PairDraw, Variant};
use crate::numeric::{Adam, DenseArray};
use crate::policy::{avg_dmse_estimate, SegmentBatch};

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Labels = 2,
    Init = 3,
    Bc = 4,
    Align = 5,
    Diagnostics = 6,
    Eval = 7,
    Reference = 8,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-step behavior-cloning losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcTrace {
    pub losses: Vec<f64>,
    pub reference_dmse: f64,
}

#[derive(Debug, Clone)]
pub struct BcOutcome {
    pub checkpoint: Checkpoint,
    pub trace: BcTrace,
}

/// Flags non-finite losses and a windowed mean that grew 5× over the last 1000 steps.
struct DivergenceGuard {
    window: usize,
    horizon: usize,
    means: Vec<f64>,
    acc: f64,
    count: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        Self {
            window: 100,
            horizon: 1000,
            means: Vec::new(),
            acc: 0.0,
            count: 0,
        }
    }

    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        self.acc += loss;
        self.count += 1;
        if self.count == self.window {
            let mean = self.acc / self.window as f64;
            self.means.push(mean);
            self.acc = 0.0;
            self.count = 0;
            let back = self.horizon / self.window;
            if self.means.len() > back {
                let old = self.means[self.means.len() - 1 - back];
                if old > 0.0 && mean > 5.0 * old {
                    return Err(Error::Diverged {
                        step,
                        reason: format!("windowed loss rose from {old:.4} to {mean:.4}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Average D-MSE of `model` on segments from D, with a fixed seed-derived sample.
pub fn reference_dmse(model: &NoiseModel, dataset: &OfflineDataset, cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Reference);
    let segs = sample_segments(dataset, cfg.data.k, cfg.bc.reference_segments.max(1), &mut rng)?;
    let batch = SegmentBatch::new(segs)?;
    Ok(avg_dmse_estimate(model, &batch, &mut rng, cfg.bc.reference_draws.max(1))?.mean)
}

pub fn init_model(cfg: &ExperimentConfig, seed: u64) -> Result<NoiseModel> {
    NoiseModel::init(&cfg.model_spec(), cfg.schedule, &mut stream_rng(seed, Stream::Init))
}

/// Fits the noise model to D with the simplified objective.
pub fn train_bc(cfg: &ExperimentConfig, dataset: &OfflineDataset, seed: u64) -> Result<BcOutcome> {
    cfg.validate()?;
    let spec = cfg.model_spec();
    if dataset.state_dim != spec.state_dim || dataset.action_dim != spec.action_dim {
        return Err(Error::Shape(format!(
            "dataset dims (state {}, action {}) vs config (state {}, action {})",
            dataset.state_dim, dataset.action_dim, spec.state_dim, spec.action_dim
        )));
    }
    let mut model = init_model(cfg, seed)?;
    let (states, actions) = dataset.transitions();
    let n = actions.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut rng = stream_rng(seed, Stream::Bc);
    let mut adam = Adam::new(cfg.bc.adam, model.n_params());
    let mut params = model.params();
    let mut guard = DivergenceGuard::new();
    let mut losses_seen = Vec::with_capacity(cfg.bc.steps);
    let batch = cfg.bc.batch_size.min(n);
    for step in 0..cfg.bc.steps {
        let rows: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let s = gather(&states, &rows);
        let a = gather(&actions, &rows);
        let (loss, grads) = losses::bc_loss(&model, &s, &a, &mut rng)?;
        guard.observe(step, loss)?;
        adam.step(&mut params, &grads)?;
        model.set_params(&params)?;
        losses_seen.push(loss);
    }
    if cfg.bc.steps > 0 {
        let tail = &losses_seen[losses_seen.len().saturating_sub(cfg.bc.log_every)..];
        let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
        if final_loss > cfg.bc.max_final_loss {
            return Err(Error::Diverged {
                step: cfg.bc.steps,
                reason: format!("final loss {final_loss:.4} above threshold {}", cfg.bc.max_final_loss),
            });
        }
    }
    let reference = reference_dmse(&model, dataset, cfg, seed)?;
    let meta = CheckpointMeta {
        stage: "bc".into(),
        seed: Some(seed),
        steps: cfg.bc.steps,
        reference_dmse: Some(reference),
    };
    Ok(BcOutcome {
        checkpoint: Checkpoint::new(model, meta),
        trace: BcTrace {
            losses: losses_seen,
            reference_dmse: reference,
        },
    })
}

fn gather(x: &DenseArray, rows: &[usize]) -> DenseArray {
    let c = x.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    DenseArray::from_parts(rows.len(), c, out)
}

/// One row of the alignment trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean D-MSE⁺ − D-MSE⁻ on the step's minibatch.
    pub preference: f64,
    /// Mean regularization contribution inside the sigmoid.
    pub regularization: f64,
    pub e_winning: f64,
    pub e_losing: f64,
    pub i_acc: f64,
    pub heldout_i_acc: f64,
    /// Evaluation metric, when enabled.
    pub u: Option<f64>,
}

impl TraceRecord {
    pub const COLUMNS: [&'static str; 9] = [
        "step",
        "loss",
        "preference",
        "regularization",
        "e_winning",
        "e_losing",
        "i_acc",
        "heldout_i_acc",
        "u",
    ];

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            Some(self.step as f64),
            Some(self.loss),
            Some(self.preference),
            Some(self.regularization),
            Some(self.e_winning),
            Some(self.e_losing),
            Some(self.i_acc),
            Some(self.heldout_i_acc),
            self.u,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub variant: Variant,
    pub seed: u64,
    pub reference_dmse: f64,
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub checkpoint: Checkpoint,
    pub trace: TrainTrace,
    /// Digest of the frozen reference before and after the run (RKPD only).
    pub reference_digests: Option<(String, String)>,
}

/// Fixed pairs and draws so diagnostic curves are not dominated by sampling noise.
struct DiagnosticSet {
    pairs: Vec<PreferencePair>,
    draws: Vec<PairDraw>,
}

impl DiagnosticSet {
    fn new(model: &NoiseModel, pool: &[PreferencePair], n: usize, draws: usize, rng: &mut ChaCha8Rng) -> Option<Self> {
        if pool.is_empty() || n == 0 {
            return None;
        }
        let n = n.min(pool.len());
        let mut idx = index::sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        let pairs: Vec<_> = idx.into_iter().map(|i| pool[i].clone()).collect();
        let draws = draw_pair_noise(model, &pairs, draws.max(1), rng);
        Some(Self { pairs, draws })
    }
}


/// Runs the selected alignment loss starting from the BC checkpoint.
///
/// `evaluator`, when given and `trace_eval > 0`, fills the U column at each
/// evaluation step.
pub fn train_align(
    cfg: &ExperimentConfig,
    bc: &Checkpoint,
    dataset: &OfflineDataset,
    train_pairs: &[PreferencePair],
    heldout_pairs: &[PreferencePair],
    variant: Variant,
    seed: u64,
    mut evaluator: Option<&mut dyn FnMut(&NoiseModel) -> Result<f64>>,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let reference_dmse = bc
        .meta
        .reference_dmse
        .ok_or_else(|| Error::InvalidArgument("BC checkpoint has no reference D-MSE".into()))?;
    let mut loss_cfg: AlignConfig = cfg.align.loss;
    loss_cfg.variant = variant;
    if cfg.align.auto_b {
        loss_cfg.b = loss_cfg.mu * reference_dmse;
    }
    loss_cfg.validate()?;

    let reference = bc.model.clone();
    let digest_before = params_digest(&reference);
    let mut model = bc.model.clone();
    let mut params = model.params();
    let mut adam = Adam::new(cfg.align.adam, model.n_params());
    let mut rng = stream_rng(seed, Stream::Align);
    let mut diag_rng = stream_rng(seed, Stream::Diagnostics);
    let diag = DiagnosticSet::new(&model, train_pairs, cfg.align.diag_pairs, cfg.align.diag_draws, &mut diag_rng)
        .expect("training pairs are non-empty");
    let held = DiagnosticSet::new(&model, heldout_pairs, heldout_pairs.len(), cfg.align.diag_draws, &mut diag_rng);

    let mut records = Vec::new();
    let mut last_report = None;
    for step in 0..=cfg.align.steps {
        let pairs: Vec<PreferencePair> = (0..loss_cfg.pref_batch)
            .map(|_| train_pairs[rng.gen_range(0..train_pairs.len())].clone())
            .collect();
        let out = if step < cfg.align.steps {
            let out = match variant {
                Variant::Fkpd => {
                    let segs = sample_segments(dataset, cfg.data.k, loss_cfg.reg_batch, &mut rng)?;
                    let batch = SegmentBatch::new(segs.into_iter().map(|s| s.erased()).collect())?;
                    losses::fkpd_loss(&model, &pairs, &batch, &loss_cfg, &mut rng)?
                }
                Variant::Rkpd => losses::rkpd_loss(&model, Some(&reference), &pairs, &loss_cfg, &mut rng)?,
                Variant::Nrpd => losses::nrpd_loss(&model, &pairs, &loss_cfg, &mut rng)?,
            };
            if !out.report.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("alignment loss is {}", out.report.total),
                });
            }
            Some(out)
        } else {
            None
        };

        if step % cfg.align.eval_every == 0 || step == cfg.align.steps {
            let d = pair_diagnostics_on(&model, &diag.pairs, &diag.draws)?;
            let heldout_i_acc = match &held {
                Some(h) => implicit_accuracy_on(&model, &h.pairs, &h.draws)?,
                None => f64::NAN,
            };
            let report = out.as_ref().map(|o| &o.report).or(last_report.as_ref());
            let u = match evaluator.as_mut() {
                Some(f) if cfg.align.trace_eval > 0 => Some(f(&model)?),
                _ => None,
            };
            records.push(TraceRecord {
                step,
                loss: report.map_or(f64::NAN, |r| r.total),
                preference: report.map_or(f64::NAN, |r| r.mean_preference()),
                regularization: report.map_or(f64::NAN, |r| r.mean_regularization()),
                e_winning: d.e_winning,
                e_losing: d.e_losing,
                i_acc: d.implicit_accuracy,
                heldout_i_acc,
                u,
            });
        }

        if let Some(out) = out {
            adam.step(&mut params, &out.grads).map_err(|e| Error::Diverged {
                step,
                reason: e.to_string(),
            })?;
            model.set_params(&params)?;
            last_report = Some(out.report);
        }
    }

    let digests = (variant == Variant::Rkpd).then(|| (digest_before.clone(), params_digest(&reference)));
    if let Some((a, b)) = &digests {
        if a != b {
            return Err(Error::InvalidArgument("frozen reference changed during alignment".into()));
        }
    }
    let meta = CheckpointMeta {
        stage: format!("align-{variant}"),
        seed: Some(seed),
        steps: cfg.align.steps,
        reference_dmse: Some(reference_dmse),
    };
    Ok(AlignOutcome {
        checkpoint: Checkpoint::new(model, meta),
        trace: TrainTrace {
            variant,
            seed,
            reference_dmse,
            records,
        },
        reference_digests: digests,
    })
}
