//! Training objectives and alignment diagnostics.
//!
//! All three alignment variants share one computation graph:
//!
//! ```text
//! argument_i = (D-MSE⁺_i − D-MSE⁻_i) + regularization_i
//! loss       = −mean_i sigmoid(−ρ · argument_i)
//! ```
//!
//! * FKPD: `regularization = μ · avgD-MSE_θ(D) − b`, the same scalar for every pair,
//!   with gradients flowing through it.
//! * RKPD: `regularization_i = −(D-MSE_ref⁺_i − D-MSE_ref⁻_i)` on the same draws,
//!   evaluated with the frozen reference network only.
//! * NRPD: no regularization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::diffusion::{noise_rows, standard_normals, NoiseModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::numeric::kernels::{self, sigmoid};
use crate::numeric::{DenseArray, GradientTape, Var};
use crate::policy::{draw_noise, stack_with, stacked_dmse, stacked_dmse_on_tape, Segment, SegmentBatch, StackedDraw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fkpd,
    Rkpd,
    Nrpd,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fkpd => "fkpd",
            Variant::Rkpd => "rkpd",
            Variant::Nrpd => "nrpd",
        }
    }

    pub const ALL: [Variant; 3] = [Variant::Fkpd, Variant::Rkpd, Variant::Nrpd];
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fkpd" => Ok(Variant::Fkpd),
            "rkpd" => Ok(Variant::Rkpd),
            "nrpd" => Ok(Variant::Nrpd),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Alignment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Temperature ρ.
    pub rho: f64,
    /// Balance factor μ of the forward-KL term (FKPD only).
    pub mu: f64,
    /// Bias b inside the sigmoid (FKPD only).
    pub b: f64,
    pub variant: Variant,
    pub pref_batch: usize,
    pub reg_batch: usize,
    /// (t, ε) draws per pair per step.
    pub n_noise_draws: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            rho: 5.0,
            mu: 1.0,
            b: 0.0,
            variant: Variant::Fkpd,
            pref_batch: 64,
            reg_batch: 64,
            n_noise_draws: 1,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !self.b.is_finite() {
            return Err(Error::InvalidArgument("b must be finite".into()));
        }
        if self.pref_batch == 0 || self.reg_batch == 0 || self.n_noise_draws == 0 {
            return Err(Error::InvalidArgument("batch sizes and draws must be >= 1".into()));
        }
        Ok(())
    }
}

/// Decomposition of one alignment-loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// D-MSE⁺ − D-MSE⁻ per pair (per draw).
    pub preference: Vec<f64>,
    /// Regularization contribution inside the sigmoid per pair.
    pub regularization: Vec<f64>,
    /// Sigmoid arguments before the −ρ scaling; `preference[i] + regularization[i]` exactly.
    pub arguments: Vec<f64>,
    pub implicit_accuracy: f64,
    pub e_winning: f64,
    pub e_losing: f64,
    /// Average D-MSE of the regularization minibatch (FKPD only).
    pub dataset_dmse: Option<f64>,
}

impl LossReport {
    pub fn mean_preference(&self) -> f64 {
        kernels::mean(&self.preference)
    }

    pub fn mean_regularization(&self) -> f64 {
        kernels::mean(&self.regularization)
    }
}

/// Loss value, its decomposition and d(loss)/dθ aligned with [`NoiseModel::params`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub report: LossReport,
    pub grads: Vec<f64>,
}

/// Noise draw shared by both members of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub t: usize,
    pub eps_winner: Vec<f64>,
    pub eps_loser: Vec<f64>,
}

impl PairDraw {
    pub fn swapped(&self) -> Self {
        Self {
            t: self.t,
            eps_winner: self.eps_loser.clone(),
            eps_loser: self.eps_winner.clone(),
        }
    }
}

/// Per pair: `t ~ U(1, T)`, then ε⁺, then ε⁻. Repeated `n_draws` times over the batch.
pub fn draw_pair_noise<P: NoisePredictor, R: Rng + ?Sized>(model: &P, pairs: &[PreferencePair], n_draws: usize, rng: &mut R) -> Vec<PairDraw> {
    let mut out = Vec::with_capacity(pairs.len() * n_draws);
    for _ in 0..n_draws {
        for p in pairs {
            let t = model.schedule().sample_t(rng);
            let n = p.winner.k() * p.winner.action_dim();
            let eps_winner = standard_normals(rng, n);
            let eps_loser = standard_normals(rng, n);
            out.push(PairDraw { t, eps_winner, eps_loser });
        }
    }
    out
}

/// One (t, ε) per regularization segment.
pub fn draw_segment_noise<P: NoisePredictor, R: Rng + ?Sized>(model: &P, segs: &SegmentBatch, rng: &mut R) -> Vec<(usize, Vec<f64>)> {
    segs.segments().iter().map(|s| draw_noise(model, s, rng)).collect()
}

fn check_pairs(pairs: &[PreferencePair], draws: &[PairDraw]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    if draws.is_empty() || draws.len() % pairs.len() != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} draws for {} pairs",
            draws.len(),
            pairs.len()
        )));
    }
    Ok(())
}

fn stack_pairs(model: &impl NoisePredictor, pairs: &[PreferencePair], draws: &[PairDraw]) -> Result<(StackedDraw, StackedDraw)> {
    check_pairs(pairs, draws)?;
    let reps = draws.len() / pairs.len();
    let mut winners = Vec::with_capacity(draws.len());
    let mut losers = Vec::with_capacity(draws.len());
    for _ in 0..reps {
        for p in pairs {
            winners.push(&p.winner);
            losers.push(&p.loser);
        }
    }
    let wd: Vec<_> = draws.iter().map(|d| (d.t, d.eps_winner.clone())).collect();
    let ld: Vec<_> = draws.iter().map(|d| (d.t, d.eps_loser.clone())).collect();
    Ok((stack_with(&winners, &wd, model)?, stack_with(&losers, &ld, model)?))
}

/// Regularization source for an alignment graph.
pub enum Regularizer<'a> {
    None,
    /// Forward KL: average D-MSE of θ on samples from D.
    Forward {
        batch: &'a SegmentBatch,
        draws: &'a [(usize, Vec<f64>)],
        mu: f64,
        b: f64,
    },
    /// Reverse KL: frozen reference residuals on the pair draws.
    Reverse { reference: &'a NoiseModel },
}

struct AlignmentGraph {
    tape: GradientTape,
    total: Var,
    pref: Var,
    reg: Option<Var>,
    report: LossReport,
}

fn build_graph(model: &NoiseModel, pairs: &[PreferencePair], draws: &[PairDraw], reg: &Regularizer<'_>, rho: f64) -> Result<AlignmentGraph> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument("rho must be > 0".into()));
    }
    let (wd, ld) = stack_pairs(model, pairs, draws)?;
    let mut tape = GradientTape::new();
    let dw = stacked_dmse_on_tape(model, &mut tape, &wd)?;
    let dl = stacked_dmse_on_tape(model, &mut tape, &ld)?;
    let pref = tape.sub(dw, dl)?;
    let n = draws.len();

    let mut dataset_dmse = None;
    let (arg, reg_var, reg_values) = match reg {
        Regularizer::None => (pref, None, vec![0.0; n]),
        Regularizer::Forward { batch, draws: rd, mu, b } => {
            if rd.len() != batch.len() {
                return Err(Error::InvalidArgument("one draw per regularization segment".into()));
            }
            let segs: Vec<&Segment> = batch.segments().iter().collect();
            let stacked = stack_with(&segs, rd, model)?;
            let per_seg = stacked_dmse_on_tape(model, &mut tape, &stacked)?;
            let avg = tape.mean(per_seg)?;
            dataset_dmse = Some(tape.scalar(avg));
            let scaled = tape.scale(avg, *mu);
            let term = tape.offset(scaled, -b);
            let value = tape.scalar(term);
            (tape.add_broadcast(pref, term)?, Some(term), vec![value; n])
        }
        Regularizer::Reverse { reference } => {
            if reference.spec() != model.spec() || reference.schedule_spec() != model.schedule_spec() {
                return Err(Error::Shape("reference model layout differs from the policy".into()));
            }
            let rw = stacked_dmse(*reference, &wd)?;
            let rl = stacked_dmse(*reference, &ld)?;
            let values: Vec<f64> = rw.iter().zip(&rl).map(|(a, b)| -(a - b)).collect();
            let c = tape.constant(n, 1, values.clone())?;
            (tape.add(pref, c)?, Some(c), values)
        }
    };

    let scaled = tape.scale(arg, -rho);
    let s = tape.sigmoid(scaled);
    let m = tape.mean(s)?;
    let total = tape.scale(m, -1.0);

    let pref_values = tape.value(pref).to_vec();
    let arguments = tape.value(arg).to_vec();
    if let Some(i) = arguments.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("sigmoid argument {i} = {}", arguments[i])));
    }
    let report = LossReport {
        total: tape.scalar(total),
        implicit_accuracy: pref_values.iter().filter(|&&d| d < 0.0).count() as f64 / n as f64,
        e_winning: kernels::mean(tape.value(dw)),
        e_losing: kernels::mean(tape.value(dl)),
        preference: pref_values,
        regularization: reg_values,
        arguments,
        dataset_dmse,
    };
    Ok(AlignmentGraph {
        tape,
        total,
        pref,
        reg: reg_var,
        report,
    })
}

/// Alignment loss on explicit draws; the building block of the three variants.
pub fn alignment_loss_on(model: &NoiseModel, pairs: &[PreferencePair], draws: &[PairDraw], reg: &Regularizer<'_>, rho: f64) -> Result<LossOutput> {
    let g = build_graph(model, pairs, draws, reg, rho)?;
    let grads = g.tape.gradient(g.total, model.n_params())?;
    Ok(LossOutput { report: g.report, grads })
}

/// Gradients of the mean preference term and of the mean regularization term
/// with respect to θ, separately.
pub fn term_gradients(model: &NoiseModel, pairs: &[PreferencePair], draws: &[PairDraw], reg: &Regularizer<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = build_graph(model, pairs, draws, reg, 1.0)?;
    let mp = g.tape.mean(g.pref)?;
    let pref_grad = g.tape.gradient(mp, model.n_params())?;
    let reg_grad = match g.reg {
        Some(r) => {
            let mr = g.tape.mean(r)?;
            g.tape.gradient(mr, model.n_params())?
        }
        None => vec![0.0; model.n_params()],
    };
    Ok((pref_grad, reg_grad))
}

/// FKPD: preference term plus forward-KL regularization on a fresh minibatch from D.
///
/// Draw order: all pair draws first, then one draw per regularization segment.
pub fn fkpd_loss<R: Rng + ?Sized>(model: &NoiseModel, pairs: &[PreferencePair], reg_batch: &SegmentBatch, cfg: &AlignConfig, rng: &mut R) -> Result<LossOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    let draws = draw_pair_noise(model, pairs, cfg.n_noise_draws, rng);
    let rd = draw_segment_noise(model, reg_batch, rng);
    let reg = Regularizer::Forward {
        batch: reg_batch,
        draws: &rd,
        mu: cfg.mu,
        b: cfg.b,
    };
    alignment_loss_on(model, pairs, &draws, &reg, cfg.rho)
}

/// RKPD: the regularization uses only the frozen reference network.
pub fn rkpd_loss<R: Rng + ?Sized>(model: &NoiseModel, reference: Option<&NoiseModel>, pairs: &[PreferencePair], cfg: &AlignConfig, rng: &mut R) -> Result<LossOutput> {
    cfg.validate()?;
    let reference = reference.ok_or_else(|| Error::InvalidArgument("RKPD needs a frozen reference model".into()))?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    let draws = draw_pair_noise(model, pairs, cfg.n_noise_draws, rng);
    alignment_loss_on(model, pairs, &draws, &Regularizer::Reverse { reference }, cfg.rho)
}

/// NRPD: preference term only.
pub fn nrpd_loss<R: Rng + ?Sized>(model: &NoiseModel, pairs: &[PreferencePair], cfg: &AlignConfig, rng: &mut R) -> Result<LossOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    let draws = draw_pair_noise(model, pairs, cfg.n_noise_draws, rng);
    alignment_loss_on(model, pairs, &draws, &Regularizer::None, cfg.rho)
}

/// Fraction of pairs whose winner has the lower D-MSE on the given draws.
pub fn implicit_accuracy_on<P: NoisePredictor>(model: &P, pairs: &[PreferencePair], draws: &[PairDraw]) -> Result<f64> {
    let (wd, ld) = stack_pairs(model, pairs, draws)?;
    let dw = stacked_dmse(model, &wd)?;
    let dl = stacked_dmse(model, &ld)?;
    let hits = dw.iter().zip(&dl).filter(|(w, l)| *w - *l < 0.0).count();
    Ok(hits as f64 / dw.len() as f64)
}

/// Implicit accuracy with one fresh (t, ε⁺, ε⁻) per pair.
pub fn implicit_accuracy<P: NoisePredictor, R: Rng + ?Sized>(model: &P, pairs: &[PreferencePair], rng: &mut R) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    let draws = draw_pair_noise(model, pairs, 1, rng);
    implicit_accuracy_on(model, pairs, &draws)
}

/// Mean D-MSE of winners and losers plus implicit accuracy over `n_draws` rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDiagnostics {
    pub e_winning: f64,
    pub e_losing: f64,
    pub implicit_accuracy: f64,
}

pub fn pair_diagnostics<P: NoisePredictor, R: Rng + ?Sized>(model: &P, pairs: &[PreferencePair], n_draws: usize, rng: &mut R) -> Result<PairDiagnostics> {
    if pairs.is_empty() || n_draws == 0 {
        return Err(Error::InvalidArgument("diagnostics need pairs and draws".into()));
    }
    let draws = draw_pair_noise(model, pairs, n_draws, rng);
    pair_diagnostics_on(model, pairs, &draws)
}

/// [`pair_diagnostics`] on explicit draws.
pub fn pair_diagnostics_on<P: NoisePredictor>(model: &P, pairs: &[PreferencePair], draws: &[PairDraw]) -> Result<PairDiagnostics> {
    let (wd, ld) = stack_pairs(model, pairs, draws)?;
    let dw = stacked_dmse(model, &wd)?;
    let dl = stacked_dmse(model, &ld)?;
    let hits = dw.iter().zip(&dl).filter(|(w, l)| *w - *l < 0.0).count();
    Ok(PairDiagnostics {
        e_winning: kernels::mean(&dw),
        e_losing: kernels::mean(&dl),
        implicit_accuracy: hits as f64 / dw.len() as f64,
    })
}

/// One Monte-Carlo draw of the behavior-cloning objective.
#[derive(Debug, Clone, PartialEq)]
pub struct BcDraw {
    pub ts: Vec<usize>,
    pub eps: DenseArray,
    pub noisy: DenseArray,
    pub states: DenseArray,
}

/// Per row: `t ~ U(1, T)` then ε.
pub fn draw_bc<P: NoisePredictor, R: Rng + ?Sized>(model: &P, states: &DenseArray, actions: &DenseArray, rng: &mut R) -> Result<BcDraw> {
    let n = actions.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty behavior-cloning batch".into()));
    }
    if states.rows() != n || states.cols() != model.state_dim() || actions.cols() != model.action_dim() {
        return Err(Error::Shape(format!(
            "states {:?} / actions {:?} vs model (state {}, action {})",
            states.shape(),
            actions.shape(),
            model.state_dim(),
            model.action_dim()
        )));
    }
    let ad = model.action_dim();
    let mut ts = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * ad);
    for _ in 0..n {
        ts.push(model.schedule().sample_t(rng));
        eps.extend(standard_normals(rng, ad));
    }
    let noisy = noise_rows(actions.data(), &eps, ad, &ts, model.schedule());
    Ok(BcDraw {
        ts,
        eps: DenseArray::from_parts(n, ad, eps),
        noisy: DenseArray::from_parts(n, ad, noisy),
        states: states.clone(),
    })
}

/// Per-entry mean of ‖ε − prediction‖² on a fixed draw.
pub fn bc_loss_value<P: NoisePredictor>(predictor: &P, draw: &BcDraw) -> Result<f64> {
    let pred = predictor.predict(&draw.noisy, &draw.states, &draw.ts)?;
    if pred.shape() != draw.eps.shape() {
        return Err(Error::Shape("prediction shape differs from noise".into()));
    }
    let sq: Vec<f64> = draw
        .eps
        .data()
        .iter()
        .zip(pred.data())
        .map(|(e, p)| {
            let r = e - p;
            r * r
        })
        .collect();
    Ok(kernels::mean(&sq))
}

pub fn bc_loss_on(model: &NoiseModel, draw: &BcDraw) -> Result<(f64, Vec<f64>)> {
    let mut tape = GradientTape::new();
    let pred = model.predict_on_tape(&mut tape, draw.noisy.data(), draw.states.data(), &draw.ts)?;
    let (r, c) = tape.shape(pred);
    let eps = tape.constant(r, c, draw.eps.data().to_vec())?;
    let resid = tape.sub(eps, pred)?;
    let sq = tape.square(resid);
    let loss = tape.mean(sq)?;
    let value = tape.scalar(loss);
    Ok((value, tape.gradient(loss, model.n_params())?))
}

/// Simplified noise-prediction objective and its gradient.
pub fn bc_loss<R: Rng + ?Sized>(model: &NoiseModel, states: &DenseArray, actions: &DenseArray, rng: &mut R) -> Result<(f64, Vec<f64>)> {
    let draw = draw_bc(model, states, actions, rng)?;
    bc_loss_on(model, &draw)
}

/// P(σ⁺ ≻ σ⁻) under the Bradley-Terry model with scores scaled by ρ.
pub fn bt_probability(r_plus: f64, r_minus: f64, rho: f64) -> Result<f64> {
    if !(r_plus.is_finite() && r_minus.is_finite() && rho.is_finite()) {
        return Err(Error::NonFinite("Bradley-Terry inputs".into()));
    }
    Ok(sigmoid(rho * (r_plus - r_minus)))
}

/// `(u1 − u0) / u0`.
pub fn improvement_factor(u0: f64, u1: f64) -> Result<f64> {
    if u0 == 0.0 {
        return Err(Error::InvalidArgument("improvement factor undefined for U0 = 0".into()));
    }
    if !(u0.is_finite() && u1.is_finite()) {
        return Err(Error::NonFinite("improvement factor inputs".into()));
    }
    Ok((u1 - u0) / u0)
}

pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Maximizer of `E_π[r − ρ log π]` over the simplex: `softmax(r / ρ)`.
pub fn max_entropy_policy(rewards: &[f64], rho: f64) -> Vec<f64> {
    let scaled: Vec<f64> = rewards.iter().map(|r| r / rho).collect();
    let top = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scaled.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / z).collect()
}

/// `Σ π_i (r_i − ρ log π_i)`.
pub fn entropy_objective(pi: &[f64], rewards: &[f64], rho: f64) -> f64 {
    pi.iter()
        .zip(rewards)
        .map(|(&p, &r)| if p > 0.0 { p * (r - rho * p.ln()) } else { 0.0 })
        .sum()
}

/// Jensen bound on one pair: returns `(L₁, L₂)` with
/// `L₁ = −logσ(−ρ·E[D⁺ − D⁻])` and `L₂ = E[−logσ(−ρ(D⁺ − D⁻))]`, the expectation
/// taken exhaustively over every step `t` and every (ε⁺, ε⁻) in `noise_set²`.
pub fn jensen_bound_pair<P: NoisePredictor>(model: &P, pair: &PreferencePair, noise_set: &[Vec<f64>], rho: f64) -> Result<(f64, f64)> {
    if noise_set.is_empty() {
        return Err(Error::InvalidArgument("empty noise set".into()));
    }
    let mut draws = Vec::new();
    for t in 1..=model.schedule().steps() {
        for ew in noise_set {
            for el in noise_set {
                draws.push(PairDraw {
                    t,
                    eps_winner: ew.clone(),
                    eps_loser: el.clone(),
                });
            }
        }
    }
    let pairs = vec![pair.clone(); draws.len()];
    let (wd, ld) = stack_pairs(model, &pairs, &draws)?;
    let diffs: Vec<f64> = stacked_dmse(model, &wd)?
        .iter()
        .zip(stacked_dmse(model, &ld)?)
        .map(|(w, l)| w - l)
        .collect();
    let l1 = -log_sigmoid(-rho * kernels::mean(&diffs));
    let per: Vec<f64> = diffs.iter().map(|d| -log_sigmoid(-rho * d)).collect();
    Ok((l1, kernels::mean(&per)))
}
