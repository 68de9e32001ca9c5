//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fkpd_core::checkpoint::Checkpoint;
use fkpd_core::data::{build_pref_dataset, script_teacher_label, LabelMeta, OfflineDataset, PreferenceDataset, PreferencePair, TeacherConfig};
use fkpd_core::diffusion::{forward_noise, standard_normals, NoiseModel, NoiseModelSpec, ScheduleSpec};
use fkpd_core::harness::{
    generate_dataset, label_dataset, run_gradcheck, run_pipeline, toy_demo, ExperimentConfig, PipelineOutcome, RunSummary,
};
use fkpd_core::losses::*;
use fkpd_core::numeric::{sigmoid, Activation, DenseArray};
use fkpd_core::policy::{Segment, SegmentBatch};
use fkpd_core::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for seed in 0..5 {
        for c in run_gradcheck(seed).map_err(|e| e.to_string())? {
            ensure(c.n_params <= 200, format!("{} has {} params", c.loss, c.n_params))?;
            ensure(c.passed(1e-4), format!("{} seed {seed}: rel err {:.2e}", c.loss, c.rel_error))?;
            worst = worst.max(c.rel_error);
            n += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!("{n} checks over bc/fkpd/rkpd/nrpd, worst rel err {worst:.2e}, {:.2}s", took.as_secs_f64()))
}

fn c2_noising_moments() -> Check {
    let schedule = ScheduleSpec::default().build().map_err(|e| e.to_string())?;
    let x0 = DenseArray::vector(vec![0.8, -1.3]).unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_var: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for t in [1, schedule.steps() / 2, schedule.steps()] {
        let ab = schedule.alpha_bar(t);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = DenseArray::vector(standard_normals(&mut rng, 2)).unwrap();
            let x = forward_noise(&x0, t, &eps, &schedule).map_err(|e| e.to_string())?;
            for j in 0..2 {
                sum[j] += x.data()[j];
                sq[j] += x.data()[j].powi(2);
            }
        }
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let z = (mean - ab.sqrt() * x0.data()[j]).abs() / ((1.0 - ab) / n as f64).sqrt();
            let rel = (var / (1.0 - ab) - 1.0).abs();
            ensure(z < 4.0, format!("t={t} mean off by {z:.2} s.e."))?;
            ensure(rel < 0.02, format!("t={t} variance off by {:.2}%", 100.0 * rel))?;
            worst_z = worst_z.max(z);
            worst_var = worst_var.max(rel);
        }
    }
    Ok(format!("t in {{1, T/2, T}}: worst mean deviation {worst_z:.2} s.e., worst variance error {:.2}%", 100.0 * worst_var))
}

fn small_model(seed: u64) -> NoiseModel {
    let spec = NoiseModelSpec {
        state_dim: 1,
        action_dim: 2,
        time_embed_dim: 6,
        hidden: 16,
        depth: 2,
        activation: Activation::Silu,
    };
    NoiseModel::init(&spec, ScheduleSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_pairs(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<PreferencePair> {
    let meta = LabelMeta {
        noise_temp: 0.0,
        tie: false,
    };
    let seg = |rng: &mut ChaCha8Rng| {
        Segment::new(
            DenseArray::matrix(k, 1, standard_normals(rng, k)).unwrap(),
            DenseArray::matrix(k, 2, standard_normals(rng, 2 * k)).unwrap(),
        )
        .unwrap()
    };
    (0..n).map(|_| PreferencePair::new(seg(rng), seg(rng), meta).unwrap()).collect()
}

fn c3_loss_identities() -> Check {
    let e = |x: fkpd_core::Error| x.to_string();
    let mut checked = 0;
    for seed in 0..5u64 {
        let model = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pairs = random_pairs(12, 3, &mut rng);
        let batch = SegmentBatch::new(random_pairs(6, 3, &mut rng).into_iter().map(|p| p.winner).collect()).map_err(e)?;
        let cfg = AlignConfig {
            mu: 0.0,
            b: 0.0,
            rho: 0.5 + seed as f64,
            n_noise_draws: 2,
            ..AlignConfig::default()
        };
        let f = fkpd_loss(&model, &pairs, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(e)?;
        let n = nrpd_loss(&model, &pairs, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(e)?;
        ensure(f.report.total.to_bits() == n.report.total.to_bits(), "FKPD(0,0) loss differs from NRPD")?;
        ensure(
            f.grads.iter().zip(&n.grads).all(|(a, b)| a.to_bits() == b.to_bits()),
            "FKPD(0,0) gradient differs from NRPD",
        )?;

        let r = rkpd_loss(&model, Some(&model.clone()), &pairs, &AlignConfig::default(), &mut rng).map_err(e)?;
        ensure(r.report.arguments.iter().all(|&a| a == 0.0), "RKPD argument nonzero at the reference")?;

        let draws = draw_pair_noise(&model, &pairs, 1, &mut rng);
        let swapped: Vec<_> = pairs.iter().map(PreferencePair::swapped).collect();
        let sdraws: Vec<_> = draws.iter().map(PairDraw::swapped).collect();
        let a = alignment_loss_on(&model, &pairs, &draws, &Regularizer::None, 2.0).map_err(e)?;
        let b = alignment_loss_on(&model, &swapped, &sdraws, &Regularizer::None, 2.0).map_err(e)?;
        ensure(
            a.report.preference.iter().zip(&b.report.preference).all(|(x, y)| *x == -*y),
            "pair swap does not negate the preference term",
        )?;

        let reference = small_model(seed + 50);
        let full = AlignConfig {
            rho: 5.0,
            mu: 1.0,
            b: 0.3,
            ..AlignConfig::default()
        };
        for v in [
            fkpd_loss(&model, &pairs, &batch, &full, &mut rng).map_err(e)?.report.total,
            rkpd_loss(&model, Some(&reference), &pairs, &full, &mut rng).map_err(e)?.report.total,
            nrpd_loss(&model, &pairs, &full, &mut rng).map_err(e)?.report.total,
            a.report.total,
            b.report.total,
        ] {
            ensure(v > -1.0 && v < 0.0, format!("loss {v} outside (-1, 0)"))?;
        }
        checked += 1;
    }
    Ok(format!("{checked} seeded cases: FKPD(0,0) == NRPD bitwise, RKPD argument 0 at ref, exact antisymmetry, losses in (-1, 0)"))
}

fn c4_closed_form() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.gen_range(2..=5);
        let rho = rng.gen_range(0.2..4.0);
        let r: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let closed = max_entropy_policy(&r, rho);
        let numeric = common::simplex_maximizer(&r, rho);
        let gap = closed.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(gap < 1e-6, format!("m={m}: softmax differs from maximizer by {gap:.2e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("20 instances, m <= 5, worst gap {worst:.2e}"))
}

fn toy_summary() -> &'static (RunSummary, Duration) {
    static CELL: OnceLock<(RunSummary, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().expect("temp dir");
        let start = Instant::now();
        let s = toy_demo(&ExperimentConfig::toy(), 1, Some(dir.path())).expect("toy demo runs");
        (s, start.elapsed())
    })
}

fn c5_toy() -> Check {
    let (s, took) = toy_summary();
    ensure(*took < Duration::from_secs(15 * 60), format!("toy-demo took {took:?}"))?;
    let bc = s.bc_toy.as_ref().ok_or("missing BC metrics")?;
    let get = |v| s.variant(v).and_then(|x| x.toy.clone()).ok_or(format!("missing {v} metrics"));
    let (f, r, n) = (get(Variant::Fkpd)?, get(Variant::Rkpd)?, get(Variant::Nrpd)?);
    ensure(bc.ood_fraction <= 0.10, format!("BC ood {:.3}", bc.ood_fraction))?;
    ensure(bc.modes_covered >= 4, format!("BC covers {} modes", bc.modes_covered))?;
    let gain = (f.mean_reward - bc.mean_reward) / bc.mean_reward;
    ensure(gain >= 0.20, format!("FKPD reward gain {:.1}%", 100.0 * gain))?;
    ensure(f.ood_fraction <= 0.10, format!("FKPD ood {:.3}", f.ood_fraction))?;
    ensure(r.ood_fraction > f.ood_fraction, format!("RKPD ood {:.3} <= FKPD ood {:.3}", r.ood_fraction, f.ood_fraction))?;
    ensure(n.ood_fraction > 0.30, format!("NRPD ood {:.3}", n.ood_fraction))?;
    Ok(format!(
        "BC ood {:.3} ({} modes); FKPD reward {:+.0}% ood {:.3}; RKPD ood {:.3}; NRPD ood {:.3}; {:.0}s",
        bc.ood_fraction,
        bc.modes_covered,
        100.0 * gain,
        f.ood_fraction,
        r.ood_fraction,
        n.ood_fraction,
        took.as_secs_f64()
    ))
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn point_mass_runs() -> &'static (Vec<PipelineOutcome>, Duration) {
    static CELL: OnceLock<(Vec<PipelineOutcome>, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::point_mass();
        let runs = SEEDS
            .iter()
            .map(|&s| run_pipeline(&cfg, s, &Variant::ALL).expect("point-mass pipeline runs"))
            .collect();
        (runs, start.elapsed())
    })
}

fn c6_traces() -> Check {
    let (runs, _) = point_mass_runs();
    let mut lines = Vec::new();
    for out in runs {
        let nrpd = &out.run(Variant::Nrpd).ok_or("missing NRPD run")?.trace;
        let fkpd = &out.run(Variant::Fkpd).ok_or("missing FKPD run")?.trace;
        let reference = nrpd.reference_dmse;
        let last = nrpd.last().ok_or("empty NRPD trace")?;
        ensure(
            last.e_winning > 2.0 * reference && last.e_losing > 2.0 * reference,
            format!("seed {}: NRPD end D-MSE {:.3}/{:.3} vs ref {reference:.3}", out.seed, last.e_winning, last.e_losing),
        )?;
        ensure(last.i_acc > 0.9, format!("seed {}: NRPD I_acc {:.3}", out.seed, last.i_acc))?;
        let first = fkpd.first().ok_or("empty FKPD trace")?;
        let end = fkpd.last().ok_or("empty FKPD trace")?;
        let peak = fkpd.records.iter().map(|r| r.e_winning.max(r.e_losing)).fold(0.0, f64::max);
        ensure(end.heldout_i_acc > 0.6, format!("seed {}: FKPD held-out I_acc {:.3}", out.seed, end.heldout_i_acc))?;
        ensure(
            end.heldout_i_acc > first.heldout_i_acc,
            format!("seed {}: FKPD held-out I_acc fell {:.3} -> {:.3}", out.seed, first.heldout_i_acc, end.heldout_i_acc),
        )?;
        ensure(peak <= 1.5 * reference, format!("seed {}: FKPD D-MSE peaked at {:.2}x ref", out.seed, peak / reference))?;
        lines.push(format!(
            "s{}: NRPD E {:.1}x/{:.1}x I_acc {:.2}, FKPD held-out {:.2}->{:.2} peak {:.2}x",
            out.seed,
            last.e_winning / reference,
            last.e_losing / reference,
            last.i_acc,
            first.heldout_i_acc,
            end.heldout_i_acc,
            peak / reference
        ));
    }
    Ok(lines.join("; "))
}

fn c7_improvement() -> Check {
    let (runs, took) = point_mass_runs();
    ensure(*took < Duration::from_secs(30 * 60), format!("took {took:?}"))?;
    let f_im = |out: &PipelineOutcome, v: Variant| -> Result<f64, String> {
        out.run(v).and_then(|r| r.f_im).ok_or(format!("seed {}: F_im undefined for {v}", out.seed))
    };
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for out in runs {
        let (f, r, n) = (f_im(out, Variant::Fkpd)?, f_im(out, Variant::Rkpd)?, f_im(out, Variant::Nrpd)?);
        ensure(f > 0.0, format!("seed {}: F_im(FKPD) = {f:.3}", out.seed))?;
        ensure(n < 0.0, format!("seed {}: F_im(NRPD) = {n:.3}", out.seed))?;
        sums[0] += f;
        sums[1] += r;
        sums[2] += n;
        per_seed.push(format!("s{} U0 {:.2}", out.seed, out.bc_eval.u));
    }
    let k = runs.len() as f64;
    let (mf, mr, mn) = (sums[0] / k, sums[1] / k, sums[2] / k);
    ensure(mf >= mr, format!("mean F_im FKPD {mf:.3} < RKPD {mr:.3}"))?;
    Ok(format!(
        "mean F_im FKPD {:+.1}%, RKPD {:+.1}%, NRPD {:+.1}% ({}); {:.0}s",
        100.0 * mf,
        100.0 * mr,
        100.0 * mn,
        per_seed.join(", "),
        took.as_secs_f64()
    ))
}

fn c8_teacher() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for dr in [0.5, 1.0, 2.0] {
        let a = Segment::from_action(&[1.0, 0.0]).unwrap().with_reward_sum(dr);
        let b = Segment::from_action(&[0.0, 1.0]).unwrap().with_reward_sum(0.0);
        let mut wins = 0usize;
        for _ in 0..n {
            let p = script_teacher_label(a.clone(), b.clone(), 1.0, &mut rng).map_err(|e| e.to_string())?;
            wins += (p.winner.actions() == a.actions()) as usize;
        }
        let p = sigmoid(dr);
        let z = (wins as f64 / n as f64 - p).abs() / (p * (1.0 - p) / n as f64).sqrt();
        ensure(z < 3.0, format!("delta r {dr}: frequency off by {z:.2} s.e."))?;
        worst = worst.max(z);
    }

    let cfg = ExperimentConfig::point_mass();
    let mut small = cfg.clone();
    small.data.n_episodes = 200;
    let ds = generate_dataset(&small, 8).map_err(|e| e.to_string())?;
    let prefs = build_pref_dataset(&ds, 16, 1000, &TeacherConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).map_err(|e| e.to_string())?;
    let mut audited = 0;
    for p in prefs.pairs.iter().filter(|p| !p.meta.tie) {
        let (w, l) = (p.winner.origin().ok_or("no origin")?, p.loser.origin().ok_or("no origin")?);
        let sw = ds.segment(w.episode, w.start, 16).map_err(|e| e.to_string())?;
        let sl = ds.segment(l.episode, l.start, 16).map_err(|e| e.to_string())?;
        let again = script_teacher_label(sl, sw, 0.0, &mut rng).map_err(|e| e.to_string())?;
        ensure(again.winner.actions() == p.winner.actions(), "deterministic label changed on replay")?;
        audited += 1;
    }
    Ok(format!("worst frequency deviation {worst:.2} s.e. over 3x1e5 labels; {audited} deterministic labels replayed"))
}

fn c9_determinism() -> Check {
    let e = |x: fkpd_core::Error| x.to_string();
    let mut cfg = ExperimentConfig::point_mass();
    cfg.data.n_episodes = 60;
    cfg.data.n_pairs = 100;
    cfg.data.heldout_pairs = 20;
    cfg.bc.steps = 200;
    cfg.bc.reference_segments = 64;
    cfg.align.steps = 30;
    cfg.align.eval_every = 10;
    cfg.align.diag_pairs = 32;
    cfg.eval.episodes = 20;
    let a = run_pipeline(&cfg, 11, &Variant::ALL).map_err(e)?;
    let b = run_pipeline(&cfg, 11, &Variant::ALL).map_err(e)?;
    let bits = |m: &NoiseModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.bc.checkpoint.model) == bits(&b.bc.checkpoint.model), "BC checkpoints differ")?;
    for (x, y) in a.runs.iter().zip(&b.runs) {
        ensure(bits(&x.checkpoint.model) == bits(&y.checkpoint.model), format!("{} checkpoints differ", x.variant))?;
        ensure(x.trace == y.trace, format!("{} traces differ", x.variant))?;
        ensure(x.eval == y.eval, format!("{} evaluations differ", x.variant))?;
    }

    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let ckpt = dir.path().join("m.ckpt");
    a.runs[0].checkpoint.save(&ckpt).map_err(e)?;
    let back = Checkpoint::load(&ckpt).map_err(e)?;
    ensure(bits(&back.model) == bits(&a.runs[0].checkpoint.model), "checkpoint round trip not bit-exact")?;
    ensure(back == a.runs[0].checkpoint, "checkpoint metadata changed")?;

    let ds = generate_dataset(&cfg, 11).map_err(e)?;
    let dpath = dir.path().join("d.fkd");
    ds.write(&dpath).map_err(e)?;
    ensure(OfflineDataset::read(&dpath).map_err(e)? == ds, "dataset round trip differs")?;
    let (prefs, _) = label_dataset(&cfg, &ds, 11).map_err(e)?;
    let ppath = dir.path().join("p.fkp");
    prefs.write(&ppath).map_err(e)?;
    ensure(PreferenceDataset::read(&ppath).map_err(e)? == prefs, "preference round trip differs")?;
    let jpath = dir.path().join("p.jsonl");
    prefs.write_jsonl(&jpath).map_err(e)?;
    ensure(PreferenceDataset::read_jsonl(&jpath).map_err(e)? == prefs, "JSONL round trip differs")?;
    Ok("repeat runs bit-identical (checkpoints, traces, evals); checkpoint, dataset, preference round trips exact".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient suite", c1_gradients),
        ("noising moments", c2_noising_moments),
        ("loss identities", c3_loss_identities),
        ("closed-form softmax", c4_closed_form),
        ("toy reproduction", c5_toy),
        ("diagnostic traces", c6_traces),
        ("point-mass improvement factors", c7_improvement),
        ("teacher statistics", c8_teacher),
        ("determinism and persistence", c9_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {} [PASS] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} [FAIL] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
