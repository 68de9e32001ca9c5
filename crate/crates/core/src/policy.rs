//! Segments and the denoising mean-square error (D-MSE) that stands in for
//! their negative log-likelihood under the diffusion policy.
//!
//! A segment's likelihood factorizes over its steps, so its D-MSE is the mean
//! squared noise-prediction error over all `k × action_dim` entries, with one
//! diffusion step shared by the whole segment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{noise_rows, standard_normals, NoiseModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::{DenseArray, GradientTape, Var};

/// Where a segment was cut from: episode index and first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub episode: usize,
    pub start: usize,
}

/// A length-`k` window of (state, action) steps.
///
/// The reward sum is teacher-side data. Nothing in the loss code reads it and
/// labeling erases it.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    states: DenseArray,
    actions: DenseArray,
    reward_sum: Option<f64>,
    origin: Option<SegmentOrigin>,
}

impl Segment {
    pub fn new(states: DenseArray, actions: DenseArray) -> Result<Self> {
        if states.rows() != actions.rows() {
            return Err(Error::Shape(format!(
                "segment has {} states but {} actions",
                states.rows(),
                actions.rows()
            )));
        }
        if actions.rows() == 0 || actions.cols() == 0 {
            return Err(Error::Shape("segment needs k >= 1 and action_dim >= 1".into()));
        }
        Ok(Self {
            states,
            actions,
            reward_sum: None,
            origin: None,
        })
    }

    /// Single unconditional sample as a `k = 1` segment with an empty state.
    pub fn from_action(action: &[f64]) -> Result<Self> {
        Self::new(
            DenseArray::zeros(1, 0),
            DenseArray::matrix(1, action.len(), action.to_vec())?,
        )
    }

    pub fn with_reward_sum(mut self, r: f64) -> Self {
        self.reward_sum = Some(r);
        self
    }

    pub fn with_origin(mut self, origin: SegmentOrigin) -> Self {
        self.origin = Some(origin);
        self
    }

    /// Drops the teacher-side reward.
    pub fn erased(mut self) -> Self {
        self.reward_sum = None;
        self
    }

    pub(crate) fn reward_sum(&self) -> Option<f64> {
        self.reward_sum
    }

    pub fn has_reward(&self) -> bool {
        self.reward_sum.is_some()
    }

    pub fn origin(&self) -> Option<SegmentOrigin> {
        self.origin
    }

    pub fn k(&self) -> usize {
        self.actions.rows()
    }

    pub fn states(&self) -> &DenseArray {
        &self.states
    }

    pub fn actions(&self) -> &DenseArray {
        &self.actions
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }

    fn same_layout(&self, other: &Segment) -> bool {
        self.k() == other.k() && self.state_dim() == other.state_dim() && self.action_dim() == other.action_dim()
    }
}

/// Non-empty list of equally shaped segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    segments: Vec<Segment>,
}

impl SegmentBatch {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty segment batch".into()))?;
        if segments.iter().any(|s| !s.same_layout(first)) {
            return Err(Error::Shape("segment batch is not homogeneous".into()));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn k(&self) -> usize {
        self.segments[0].k()
    }
}

/// One (t, ε) draw per segment, already stacked row-wise.
#[derive(Debug, Clone)]
pub(crate) struct StackedDraw {
    pub states: Vec<f64>,
    pub noisy: Vec<f64>,
    pub eps: Vec<f64>,
    pub ts: Vec<usize>,
    /// Entries per segment, `k × action_dim`.
    pub block: usize,
}

fn check_model<P: NoisePredictor>(model: &P, seg: &Segment) -> Result<()> {
    if seg.state_dim() != model.state_dim() || seg.action_dim() != model.action_dim() {
        return Err(Error::Shape(format!(
            "segment dims (state {}, action {}) vs model (state {}, action {})",
            seg.state_dim(),
            seg.action_dim(),
            model.state_dim(),
            model.action_dim()
        )));
    }
    Ok(())
}

/// Stacks segments with pre-chosen draws.
pub(crate) fn stack_with(
    segs: &[&Segment],
    draws: &[(usize, Vec<f64>)],
    model: &impl NoisePredictor,
) -> Result<StackedDraw> {
    let first = segs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no segments to stack".into()))?;
    let (k, ad) = (first.k(), first.action_dim());
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut eps = Vec::new();
    let mut ts = Vec::new();
    for (seg, (t, e)) in segs.iter().zip(draws) {
        check_model(model, seg)?;
        if !seg.same_layout(first) {
            return Err(Error::Shape("segments differ in shape".into()));
        }
        if e.len() != k * ad {
            return Err(Error::Shape(format!("noise has {} entries, segment {}", e.len(), k * ad)));
        }
        if *t == 0 || *t > model.schedule().steps() {
            return Err(Error::InvalidArgument(format!("diffusion step {t} out of range")));
        }
        states.extend_from_slice(seg.states().data());
        actions.extend_from_slice(seg.actions().data());
        eps.extend_from_slice(e);
        ts.extend(std::iter::repeat(*t).take(k));
    }
    let noisy = noise_rows(&actions, &eps, ad, &ts, model.schedule());
    Ok(StackedDraw {
        states,
        noisy,
        eps,
        ts,
        block: k * ad,
    })
}

/// Draws `t ~ U(1, T)` then `ε ~ N(0, I)` for one segment.
pub(crate) fn draw_noise<R: Rng + ?Sized>(model: &impl NoisePredictor, seg: &Segment, rng: &mut R) -> (usize, Vec<f64>) {
    let t = model.schedule().sample_t(rng);
    let eps = standard_normals(rng, seg.k() * seg.action_dim());
    (t, eps)
}

/// Per-segment D-MSE for a stacked draw, without gradients.
pub(crate) fn stacked_dmse<P: NoisePredictor>(model: &P, draw: &StackedDraw) -> Result<Vec<f64>> {
    let rows = draw.ts.len();
    let noisy = DenseArray::matrix(rows, model.action_dim(), draw.noisy.clone())?;
    let states = DenseArray::matrix(rows, model.state_dim(), draw.states.clone())?;
    let pred = model.predict(&noisy, &states, &draw.ts)?;
    let sq: Vec<f64> = draw
        .eps
        .iter()
        .zip(pred.data())
        .map(|(e, p)| {
            let r = e - p;
            r * r
        })
        .collect();
    Ok(kernels::block_mean(&sq, draw.block))
}

/// Per-segment D-MSE recorded on the tape; returns a column with one entry per segment.
pub(crate) fn stacked_dmse_on_tape(model: &NoiseModel, tape: &mut GradientTape, draw: &StackedDraw) -> Result<Var> {
    let pred = model.predict_on_tape(tape, &draw.noisy, &draw.states, &draw.ts)?;
    let (rows, cols) = tape.shape(pred);
    let eps = tape.constant(rows, cols, draw.eps.clone())?;
    let resid = tape.sub(eps, pred)?;
    let sq = tape.square(resid);
    tape.block_mean(sq, draw.block)
}

/// ‖ε − ε_θ(√ᾱ_t σ + √(1−ᾱ_t) ε, s, t)‖² averaged over the segment's entries.
pub fn segment_dmse<P: NoisePredictor>(model: &P, seg: &Segment, t: usize, eps: &DenseArray) -> Result<f64> {
    if eps.rows() != seg.k() || eps.cols() != seg.action_dim() {
        return Err(Error::Shape(format!(
            "noise is {}x{}, segment actions {}x{}",
            eps.rows(),
            eps.cols(),
            seg.k(),
            seg.action_dim()
        )));
    }
    let draw = stack_with(&[seg], &[(t, eps.data().to_vec())], model)?;
    Ok(stacked_dmse(model, &draw)?[0])
}

/// Monte-Carlo D-MSE estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmseEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Average D-MSE over the batch with `n_draws` fresh (t, ε) per segment.
pub fn avg_dmse_estimate<P: NoisePredictor, R: Rng + ?Sized>(model: &P, batch: &SegmentBatch, rng: &mut R, n_draws: usize) -> Result<DmseEstimate> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    let segs: Vec<&Segment> = batch.segments().iter().collect();
    let mut values = Vec::with_capacity(segs.len() * n_draws);
    for _ in 0..n_draws {
        let draws: Vec<_> = segs.iter().map(|s| draw_noise(model, s, rng)).collect();
        let stacked = stack_with(&segs, &draws, model)?;
        values.extend(stacked_dmse(model, &stacked)?);
    }
    let n = values.len() as f64;
    let mean = kernels::mean(&values);
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(DmseEstimate {
        mean,
        std_err: (var / n).sqrt(),
        samples: values.len(),
    })
}

pub fn avg_dmse<P: NoisePredictor, R: Rng + ?Sized>(model: &P, batch: &SegmentBatch, rng: &mut R, n_draws: usize) -> Result<f64> {
    Ok(avg_dmse_estimate(model, batch, rng, n_draws)?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, NoiseModelSpec, ScheduleSpec};
    use crate::numeric::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(sd: usize) -> NoiseModelSpec {
        NoiseModelSpec {
            state_dim: sd,
            action_dim: 2,
            time_embed_dim: 4,
            hidden: 8,
            depth: 2,
            activation: Activation::Silu,
        }
    }

    fn segment(k: usize, sd: usize, seed: u64) -> Segment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = standard_normals(&mut rng, k * sd);
        let a = standard_normals(&mut rng, k * 2);
        Segment::new(
            DenseArray::matrix(k, sd, s).unwrap(),
            DenseArray::matrix(k, 2, a).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_mean_of_squares() {
        let model = NoiseModel::zeros(&spec(0), ScheduleSpec::default()).unwrap();
        let seg = Segment::from_action(&[0.3, -0.2]).unwrap();
        let eps = DenseArray::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        assert_eq!(segment_dmse(&model, &seg, 5, &eps).unwrap(), 1.0);
        let zero = DenseArray::zeros(1, 2);
        assert_eq!(segment_dmse(&model, &seg, 5, &zero).unwrap(), 0.0);
    }

    #[test]
    fn compositional_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = NoiseModel::init(&spec(3), ScheduleSpec::default(), &mut rng).unwrap();
        let seg = segment(4, 3, 8);
        let eps = DenseArray::matrix(4, 2, standard_normals(&mut rng, 8)).unwrap();
        let t = 17;
        let got = segment_dmse(&model, &seg, t, &eps).unwrap();

        // forward_noise + mlp_forward on each step separately, then mean of squares
        let noisy = forward_noise(seg.actions(), t, &eps, model.schedule()).unwrap();
        let mut total = 0.0;
        for i in 0..4 {
            let mut input = noisy.row(i).to_vec();
            input.extend_from_slice(seg.states().row(i));
            input.extend(crate::diffusion::time_embedding(t, 4));
            let out = model.net().forward(&DenseArray::vector(input).unwrap()).unwrap();
            for j in 0..2 {
                total += (eps.get(i, j) - out.data()[j]).powi(2);
            }
        }
        let expect = total / 8.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = NoiseModel::zeros(&spec(0), ScheduleSpec::default()).unwrap();
        let seg = Segment::from_action(&[0.3, -0.2]).unwrap();
        let eps = DenseArray::zeros(2, 2);
        assert!(segment_dmse(&model, &seg, 1, &eps).is_err());
        let wrong_state = segment(1, 3, 1);
        assert!(segment_dmse(&model, &wrong_state, 1, &DenseArray::zeros(1, 2)).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(SegmentBatch::new(vec![]).is_err());
        assert!(SegmentBatch::new(vec![segment(2, 1, 0), segment(3, 1, 0)]).is_err());
    }

    #[test]
    fn single_segment_single_draw_equals_direct_call() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = NoiseModel::init(&spec(1), ScheduleSpec::default(), &mut rng).unwrap();
        let seg = segment(3, 1, 5);
        let batch = SegmentBatch::new(vec![seg.clone()]).unwrap();
        let avg = avg_dmse(&model, &batch, &mut ChaCha8Rng::seed_from_u64(77), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (t, e) = draw_noise(&model, &seg, &mut rng);
        let direct = segment_dmse(&model, &seg, t, &DenseArray::matrix(3, 2, e).unwrap()).unwrap();
        assert_eq!(avg, direct);
    }

    #[test]
    fn zero_model_average_is_one() {
        let model = NoiseModel::zeros(&spec(1), ScheduleSpec::default()).unwrap();
        let batch = SegmentBatch::new((0..50).map(|i| segment(4, 1, i)).collect()).unwrap();
        let est = avg_dmse_estimate(&model, &batch, &mut ChaCha8Rng::seed_from_u64(1), 200).unwrap();
        assert!((est.mean - 1.0).abs() < 3.0 * est.std_err, "{est:?}");
    }
}
