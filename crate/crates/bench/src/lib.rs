//! Seeded fixtures shared by the kernel benchmarks.

use fkpd_core::data::{LabelMeta, PreferencePair};
use fkpd_core::diffusion::{standard_normals, NoiseModel, NoiseModelSpec, ScheduleSpec};
use fkpd_core::numeric::{Activation, DenseArray};
use fkpd_core::policy::{Segment, SegmentBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Point-mass sized noise model: 4-d state, 2-d action.
pub fn model(hidden: usize, depth: usize) -> NoiseModel {
    let spec = NoiseModelSpec {
        state_dim: 4,
        action_dim: 2,
        time_embed_dim: 16,
        hidden,
        depth,
        activation: Activation::Silu,
    };
    NoiseModel::init(&spec, ScheduleSpec::default(), &mut rng(0)).expect("valid spec")
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> DenseArray {
    DenseArray::matrix(rows, cols, standard_normals(&mut rng(seed), rows * cols)).expect("shape matches")
}

fn segment(k: usize, r: &mut ChaCha8Rng) -> Segment {
    let states = DenseArray::matrix(k, 4, standard_normals(r, 4 * k)).expect("shape matches");
    let actions = DenseArray::matrix(k, 2, standard_normals(r, 2 * k)).expect("shape matches");
    Segment::new(states, actions).expect("same length")
}

pub fn pairs(n: usize, k: usize, seed: u64) -> Vec<PreferencePair> {
    let mut r = rng(seed);
    let meta = LabelMeta { noise_temp: 0.0, tie: false };
    (0..n)
        .map(|_| PreferencePair::new(segment(k, &mut r), segment(k, &mut r), meta).expect("matching pair"))
        .collect()
}

pub fn segments(n: usize, k: usize, seed: u64) -> SegmentBatch {
    let mut r = rng(seed);
    SegmentBatch::new((0..n).map(|_| segment(k, &mut r)).collect()).expect("nonempty batch")
}
