use fkpd_core::data::{LabelMeta, PreferencePair};
use fkpd_core::diffusion::{standard_normals, DiffusionSchedule, NoiseModel, NoiseModelSpec, NoisePredictor, ScheduleSpec};
use fkpd_core::losses::*;
use fkpd_core::numeric::{sigmoid, Activation, DenseArray};
use fkpd_core::policy::{segment_dmse, Segment, SegmentBatch};
use fkpd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::simplex_maximizer;

const META: LabelMeta = LabelMeta {
    noise_temp: 0.0,
    tie: false,
};

fn spec(sd: usize) -> NoiseModelSpec {
    NoiseModelSpec {
        state_dim: sd,
        action_dim: 2,
        time_embed_dim: 6,
        hidden: 16,
        depth: 2,
        activation: Activation::Silu,
    }
}

fn schedule() -> ScheduleSpec {
    ScheduleSpec {
        steps: 20,
        ..ScheduleSpec::default()
    }
}

fn seeded_model(seed: u64) -> NoiseModel {
    NoiseModel::init(&spec(1), schedule(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn segment(k: usize, rng: &mut ChaCha8Rng) -> Segment {
    Segment::new(
        DenseArray::matrix(k, 1, standard_normals(rng, k)).unwrap(),
        DenseArray::matrix(k, 2, standard_normals(rng, 2 * k)).unwrap(),
    )
    .unwrap()
}

fn pairs(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| PreferencePair::new(segment(k, rng), segment(k, rng), META).unwrap())
        .collect()
}

fn action_pair(w: [f64; 2], l: [f64; 2]) -> PreferencePair {
    PreferencePair::new(Segment::from_action(&w).unwrap(), Segment::from_action(&l).unwrap(), META).unwrap()
}

fn zero_toy_model() -> NoiseModel {
    NoiseModel::zeros(&spec(0), schedule()).unwrap()
}

#[test]
fn hand_computed_fkpd_value() {
    let model = zero_toy_model();
    let pair = action_pair([0.3, -0.2], [1.1, 0.4]);
    let draws = vec![PairDraw {
        t: 7,
        eps_winner: vec![1.0, 0.0],
        eps_loser: vec![1.0, 1.0],
    }];
    let batch = SegmentBatch::new(vec![Segment::from_action(&[0.0, 0.0]).unwrap()]).unwrap();
    let rd = vec![(3, vec![0.5, 0.5])];
    let reg = Regularizer::Forward {
        batch: &batch,
        draws: &rd,
        mu: 0.0,
        b: 0.0,
    };
    let out = alignment_loss_on(&model, &[pair], &draws, &reg, 1.0).unwrap();
    assert_eq!(out.report.preference, vec![-0.5]);
    assert!((out.report.total + 0.622_459_331_201_854_6).abs() < 1e-15);
    assert!((out.report.total + sigmoid(0.5)).abs() < 1e-15);
}

#[test]
fn identical_pair_gives_minus_half() {
    let model = seeded_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seg = segment(3, &mut rng);
    let pair = PreferencePair::new(seg.clone(), seg, META).unwrap();
    let eps = standard_normals(&mut rng, 6);
    let draws = vec![PairDraw {
        t: 11,
        eps_winner: eps.clone(),
        eps_loser: eps,
    }];
    for reg in [Regularizer::None, Regularizer::Reverse { reference: &model }] {
        let out = alignment_loss_on(&model, std::slice::from_ref(&pair), &draws, &reg, 3.0).unwrap();
        assert_eq!(out.report.total, -0.5);
    }
}

#[test]
fn fkpd_without_regularization_is_nrpd_bitwise() {
    let model = seeded_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = pairs(8, 4, &mut rng);
    let reg_batch = SegmentBatch::new((0..5).map(|_| segment(4, &mut rng)).collect()).unwrap();
    let cfg = AlignConfig {
        mu: 0.0,
        b: 0.0,
        rho: 2.0,
        n_noise_draws: 2,
        ..AlignConfig::default()
    };
    let f = fkpd_loss(&model, &p, &reg_batch, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let n = nrpd_loss(&model, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(f.report.total.to_bits(), n.report.total.to_bits());
    assert_eq!(f.report.arguments, n.report.arguments);
    let fb: Vec<u64> = f.grads.iter().map(|g| g.to_bits()).collect();
    let nb: Vec<u64> = n.grads.iter().map(|g| g.to_bits()).collect();
    assert_eq!(fb, nb);
}

#[test]
fn rkpd_argument_vanishes_at_reference() {
    let model = seeded_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = pairs(16, 2, &mut rng);
    let cfg = AlignConfig {
        rho: 4.0,
        mu: 7.0,
        b: 3.0,
        ..AlignConfig::default()
    };
    let out = rkpd_loss(&model, Some(&model.clone()), &p, &cfg, &mut rng).unwrap();
    assert!(out.report.arguments.iter().all(|&a| a == 0.0));
    assert_eq!(out.report.total, -0.5);
}

#[test]
fn rkpd_gradient_skips_the_reference() {
    // With ε_ref tied to θ the argument would be identically zero and so would
    // the gradient; a frozen reference leaves ρ σ'(0) ∇ mean(pref).
    let model = seeded_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = pairs(6, 3, &mut rng);
    let draws = draw_pair_noise(&model, &p, 1, &mut rng);
    let reg = Regularizer::Reverse { reference: &model };
    let rho = 2.5;
    let g = alignment_loss_on(&model, &p, &draws, &reg, rho).unwrap().grads;
    let (pref_grad, reg_grad) = term_gradients(&model, &p, &draws, &reg).unwrap();
    assert!(reg_grad.iter().all(|&x| x == 0.0));
    let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 1e-6);
    for (a, b) in g.iter().zip(&pref_grad) {
        assert!((a - rho * 0.25 * b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn rkpd_matches_termwise_recomputation() {
    let model = seeded_model(8);
    let reference = seeded_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = pairs(5, 3, &mut rng);
    let draws = draw_pair_noise(&model, &p, 1, &mut rng);
    let rho = 1.7;
    let out = alignment_loss_on(&model, &p, &draws, &Regularizer::Reverse { reference: &reference }, rho).unwrap();
    let mut expect = 0.0;
    for (pair, d) in p.iter().zip(&draws) {
        let e = |v: &Vec<f64>| DenseArray::matrix(3, 2, v.clone()).unwrap();
        let dw = segment_dmse(&model, &pair.winner, d.t, &e(&d.eps_winner)).unwrap();
        let dl = segment_dmse(&model, &pair.loser, d.t, &e(&d.eps_loser)).unwrap();
        let rw = segment_dmse(&reference, &pair.winner, d.t, &e(&d.eps_winner)).unwrap();
        let rl = segment_dmse(&reference, &pair.loser, d.t, &e(&d.eps_loser)).unwrap();
        expect += -sigmoid(-rho * ((dw - dl) - (rw - rl)));
    }
    expect /= p.len() as f64;
    assert!((out.report.total - expect).abs() < 1e-12, "{} vs {expect}", out.report.total);
}

#[test]
fn pair_swap_negates_preference_exactly() {
    let model = seeded_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = pairs(7, 2, &mut rng);
    let swapped: Vec<_> = p.iter().map(PreferencePair::swapped).collect();
    let draws = draw_pair_noise(&model, &p, 2, &mut rng);
    let sdraws: Vec<_> = draws.iter().map(PairDraw::swapped).collect();
    let a = alignment_loss_on(&model, &p, &draws, &Regularizer::None, 1.0).unwrap();
    let b = alignment_loss_on(&model, &swapped, &sdraws, &Regularizer::None, 1.0).unwrap();
    for (x, y) in a.report.preference.iter().zip(&b.report.preference) {
        assert_eq!(*x, -*y);
    }
    // σ(x) + σ(−x) = 1 per pair, so the two losses sum to −1
    assert!((a.report.total + b.report.total + 1.0).abs() < 1e-12);
}

#[test]
fn losses_stay_in_open_interval() {
    let model = seeded_model(13);
    let reference = seeded_model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for rho in [0.1, 1.0, 5.0, 50.0] {
        let p = pairs(10, 2, &mut rng);
        let batch = SegmentBatch::new((0..4).map(|_| segment(2, &mut rng)).collect()).unwrap();
        let cfg = AlignConfig {
            rho,
            b: 0.2,
            ..AlignConfig::default()
        };
        let values = [
            fkpd_loss(&model, &p, &batch, &cfg, &mut rng).unwrap().report.total,
            rkpd_loss(&model, Some(&reference), &p, &cfg, &mut rng).unwrap().report.total,
            nrpd_loss(&model, &p, &cfg, &mut rng).unwrap().report.total,
        ];
        for v in values {
            assert!(v > -1.0 && v < 0.0, "rho {rho}: {v}");
        }
    }
}

#[test]
fn report_decomposition_recomposes_argument() {
    let model = seeded_model(16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = pairs(6, 2, &mut rng);
    let batch = SegmentBatch::new((0..3).map(|_| segment(2, &mut rng)).collect()).unwrap();
    let cfg = AlignConfig {
        mu: 1.3,
        b: 0.4,
        ..AlignConfig::default()
    };
    let out = fkpd_loss(&model, &p, &batch, &cfg, &mut rng).unwrap();
    let r = &out.report;
    let dmse = r.dataset_dmse.unwrap();
    for i in 0..r.arguments.len() {
        assert_eq!(r.regularization[i], 1.3 * dmse - 0.4);
        assert_eq!(r.arguments[i], r.preference[i] + r.regularization[i]);
    }
}

#[test]
fn rkpd_requires_reference() {
    let model = seeded_model(18);
    let p = pairs(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(rkpd_loss(&model, None, &p, &AlignConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn empty_batches_rejected() {
    let model = seeded_model(19);
    let cfg = AlignConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(nrpd_loss(&model, &[], &cfg, &mut rng).is_err());
    assert!(implicit_accuracy(&model, &[], &mut rng).is_err());
}

struct Echo<'a> {
    eps: &'a DenseArray,
    schedule: DiffusionSchedule,
}

impl NoisePredictor for Echo<'_> {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn predict(&self, _: &DenseArray, _: &DenseArray, _: &[usize]) -> Result<DenseArray> {
        Ok(self.eps.clone())
    }
}

#[test]
fn bc_loss_of_zero_and_echo_predictors() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let n = 20_000;
    let states = DenseArray::matrix(n, 1, standard_normals(&mut rng, n)).unwrap();
    let actions = DenseArray::matrix(n, 2, standard_normals(&mut rng, 2 * n)).unwrap();
    let zero = NoiseModel::zeros(&spec(1), schedule()).unwrap();
    let draw = draw_bc(&zero, &states, &actions, &mut rng).unwrap();
    let v = bc_loss_value(&zero, &draw).unwrap();
    // per-entry squares of N(0, 1) have variance 2
    let se = (2.0 / (2 * n) as f64).sqrt();
    assert!((v - 1.0).abs() < 3.0 * se, "{v}");
    let echo = Echo {
        eps: &draw.eps,
        schedule: schedule().build().unwrap(),
    };
    assert_eq!(bc_loss_value(&echo, &draw).unwrap(), 0.0);
}

#[test]
fn implicit_accuracy_cases() {
    let model = zero_toy_model();
    let p = vec![action_pair([0.0, 0.0], [1.0, 1.0]); 3];
    let draws: Vec<_> = (0..3)
        .map(|i| PairDraw {
            t: 1 + i,
            eps_winner: vec![0.0, 0.0],
            eps_loser: vec![0.3, -1.0],
        })
        .collect();
    assert_eq!(implicit_accuracy_on(&model, &p, &draws).unwrap(), 1.0);

    // each pair next to its swap
    let seeded = seeded_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let base = pairs(50, 2, &mut rng);
    let bdraws = draw_pair_noise(&seeded, &base, 1, &mut rng);
    let mut all = base.clone();
    all.extend(base.iter().map(PreferencePair::swapped));
    let mut adraws = bdraws.clone();
    adraws.extend(bdraws.iter().map(PairDraw::swapped));
    assert_eq!(implicit_accuracy_on(&seeded, &all, &adraws).unwrap(), 0.5);
}

#[test]
fn untrained_model_is_at_chance() {
    let model = seeded_model(23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let n = 4000;
    let p = pairs(n, 2, &mut rng);
    let acc = implicit_accuracy(&model, &p, &mut rng).unwrap();
    let se = (0.25 / n as f64).sqrt();
    assert!((acc - 0.5).abs() < 3.0 * se, "{acc}");
}

#[test]
fn fd_gradients_on_small_nets() {
    for c in fkpd_core::harness::run_gradcheck(42).unwrap() {
        assert!(c.n_params <= 200);
        assert!(c.passed(1e-4), "{}: {}", c.loss, c.rel_error);
    }
}

#[test]
fn softmax_maximizes_entropy_regularized_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let m = rng.gen_range(2..=5);
        let rho = rng.gen_range(0.3..3.0);
        let r: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let closed = max_entropy_policy(&r, rho);
        let numeric = simplex_maximizer(&r, rho);
        for (a, b) in closed.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-6, "{closed:?} vs {numeric:?}");
        }
        assert!(entropy_objective(&closed, &r, rho) >= entropy_objective(&numeric, &r, rho) - 1e-12);
    }
}

#[test]
fn jensen_bound_holds_exhaustively() {
    let model = seeded_model(26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let noise: Vec<Vec<f64>> = (0..4).map(|_| standard_normals(&mut rng, 4)).collect();
    for rho in [0.5, 2.0, 8.0] {
        for pair in pairs(5, 2, &mut rng) {
            let (l1, l2) = jensen_bound_pair(&model, &pair, &noise, rho).unwrap();
            assert!(l2 >= l1 - 1e-12, "{l2} < {l1}");
        }
    }
}
