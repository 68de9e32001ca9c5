//! Central finite-difference checks of every training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMeta, PreferencePair};
use crate::diffusion::{standard_normals, NoiseModel, NoiseModelSpec, ScheduleSpec};
use crate::error::Result;
use crate::losses::{alignment_loss_on, bc_loss_on, draw_bc, draw_pair_noise, draw_segment_noise, Regularizer};
use crate::numeric::{Activation, DenseArray};
use crate::policy::{Segment, SegmentBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub loss: String,
    pub n_params: usize,
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Network used by the checks: 154 parameters.
pub fn small_spec() -> NoiseModelSpec {
    NoiseModelSpec {
        state_dim: 1,
        action_dim: 2,
        time_embed_dim: 4,
        hidden: 8,
        depth: 2,
        activation: Activation::Silu,
    }
}

fn compare(name: &str, model: &NoiseModel, analytic: &[f64], f: impl Fn(&NoiseModel) -> Result<f64>, h: f64) -> Result<GradCheck> {
    let base = model.params();
    let mut probe = model.clone();
    let mut fd = vec![0.0; base.len()];
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + h;
        probe.set_params(&p)?;
        let up = f(&probe)?;
        p[i] = base[i] - h;
        probe.set_params(&p)?;
        let down = f(&probe)?;
        p[i] = base[i];
        fd[i] = (up - down) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(&fd)).max(1e-300);
    Ok(GradCheck {
        loss: name.into(),
        n_params: base.len(),
        rel_error: norm(&diff) / scale,
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
    })
}

fn random_segment(k: usize, rng: &mut ChaCha8Rng) -> Segment {
    let s = standard_normals(rng, k);
    let a = standard_normals(rng, 2 * k);
    Segment::new(DenseArray::from_parts(k, 1, s), DenseArray::from_parts(k, 2, a)).expect("valid segment")
}

/// Runs the four checks (bc, fkpd, rkpd, nrpd) on seeded small networks.
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = ScheduleSpec {
        steps: 10,
        ..ScheduleSpec::default()
    };
    let model = NoiseModel::init(&small_spec(), schedule, &mut rng)?;
    let mut reference = model.clone();
    let shifted: Vec<f64> = reference.params().iter().map(|p| p + 0.05 * standard_normals(&mut rng, 1)[0]).collect();
    reference.set_params(&shifted)?;
    let h = 1e-5;
    let mut out = Vec::new();

    let states = DenseArray::from_parts(6, 1, standard_normals(&mut rng, 6));
    let actions = DenseArray::from_parts(6, 2, standard_normals(&mut rng, 12));
    let bc_draw = draw_bc(&model, &states, &actions, &mut rng)?;
    let (_, g) = bc_loss_on(&model, &bc_draw)?;
    out.push(compare("bc_loss", &model, &g, |m| Ok(bc_loss_on(m, &bc_draw)?.0), h)?);

    let meta = LabelMeta {
        noise_temp: 0.0,
        tie: false,
    };
    let pairs: Vec<PreferencePair> = (0..3)
        .map(|_| PreferencePair::new(random_segment(2, &mut rng), random_segment(2, &mut rng), meta))
        .collect::<Result<_>>()?;
    let batch = SegmentBatch::new((0..3).map(|_| random_segment(2, &mut rng)).collect())?;
    let draws = draw_pair_noise(&model, &pairs, 2, &mut rng);
    let rd = draw_segment_noise(&model, &batch, &mut rng);
    // ρ keeps the sigmoid away from saturation at this scale
    let rho = 0.7;
    let regs = [
        (
            "fkpd_loss",
            Regularizer::Forward {
                batch: &batch,
                draws: &rd,
                mu: 0.8,
                b: 0.3,
            },
        ),
        ("rkpd_loss", Regularizer::Reverse { reference: &reference }),
        ("nrpd_loss", Regularizer::None),
    ];
    for (name, reg) in &regs {
        let g = alignment_loss_on(&model, &pairs, &draws, reg, rho)?.grads;
        out.push(compare(name, &model, &g, |m| Ok(alignment_loss_on(m, &pairs, &draws, reg, rho)?.report.total), h)?);
    }
    Ok(out)
}
