use fkpd_core::envs::*;
use fkpd_core::numeric::DenseArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn single_component_sample_mean() {
    let spec = MixtureSpec::new(vec![[2.0, 3.0]], 0.4, vec![1.0]).unwrap();
    let n = 100_000;
    let x = sample_mixture(&spec, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let se = 0.4 / (n as f64).sqrt();
    for (j, target) in [2.0, 3.0].iter().enumerate() {
        let m = (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64;
        assert!((m - target).abs() < 4.0 * se, "{m}");
    }
}

#[test]
fn component_frequencies_follow_weights() {
    let spec = MixtureSpec::new(vec![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]], 0.1, vec![0.5, 0.3, 0.2]).unwrap();
    let n = 50_000;
    let (_, labels) = sample_mixture_labeled(&spec, n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for (c, &w) in spec.weights.iter().enumerate() {
        let f = labels.iter().filter(|&&l| l == c).count() as f64 / n as f64;
        let se = (w * (1.0 - w) / n as f64).sqrt();
        assert!((f - w).abs() < 3.0 * se, "component {c}: {f}");
    }
}

#[test]
fn ood_fraction_of_true_mixture_matches_gaussian_tail() {
    let spec = MixtureSpec::default_ring();
    let n = 200_000;
    let x = sample_mixture(&spec, n, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let f = ood_fraction(&x, &spec, 3.0).unwrap();
    // P(‖z‖ > 3) for a standard 2D Gaussian
    let tail = (-4.5f64).exp();
    let se = (tail * (1.0 - tail) / n as f64).sqrt();
    assert!((f - tail).abs() < 4.0 * se, "{f} vs {tail}");
}

#[test]
fn ood_fraction_is_monotone_in_radius() {
    let spec = MixtureSpec::default_ring();
    let x = sample_mixture(&spec, 5000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut prev = 1.0;
    for r in [0.5, 1.0, 2.0, 3.0, 4.0] {
        let f = ood_fraction(&x, &spec, r).unwrap();
        assert!(f <= prev);
        prev = f;
    }
    assert!(ood_fraction(&DenseArray::zeros(0, 2), &spec, 3.0).is_err());
}

#[test]
fn scripted_behavior_baseline() {
    let env = PointMassEnv::default();
    let policy = ScriptedPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2000;
    let starts: Vec<_> = (0..n).map(|_| env.sample_start(&mut rng)).collect();
    let mut act_rng = ChaCha8Rng::seed_from_u64(6);
    let rollouts = rollout_batch(&env, &starts, |s| {
        let mut out = Vec::with_capacity(s.len());
        for i in 0..s.rows() {
            out.extend(policy.act(&env, s.row(i), &mut act_rng));
        }
        DenseArray::matrix(s.rows(), 2, out)
    })
    .unwrap();
    let rate = rollouts.iter().filter(|r| r.success).count() as f64 / n as f64;
    // seeded regression value
    assert_eq!(rate, 0.737);
}

#[test]
fn rollouts_stay_in_the_arena() {
    let env = PointMassEnv::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let policy = ScriptedPolicy {
        noise_std: 3.0,
        random_prob: 1.0,
    };
    for _ in 0..20 {
        let start = env.sample_start(&mut rng);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let ro = rollout(&env, start, |s| Ok(policy.act(&env, s, &mut r2).to_vec())).unwrap();
        assert_eq!(ro.states.len(), env.horizon);
        assert!(ro.states.iter().flatten().all(|c| c.abs() <= env.arena));
        let total: f64 = ro.rewards.iter().sum();
        assert!((total - ro.ret).abs() < 1e-12);
    }
}
