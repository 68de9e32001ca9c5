use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use fkpd_core::data::{build_pref_dataset, OfflineDataset, PreferenceDataset, TeacherConfig};
use fkpd_core::harness::{
    evaluate, generate_dataset, report, run_gradcheck, run_pipeline, write_outputs, stream_rng, toy_demo, train_align, train_bc, ExperimentConfig, Stream,
    TrainTrace,
};
use fkpd_core::{Checkpoint, Error, Result, Variant};

#[derive(Parser)]
#[command(name = "fkpd", version, about = "Preference alignment for diffusion policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent: `point-mass` or `toy`.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self, fallback: &str) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => ExperimentConfig::preset(fallback),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample an offline dataset from the configured environment.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.n_episodes`.
        #[arg(long)]
        n_episodes: Option<usize>,
    },
    /// Label segment pairs with the script teacher.
    Label {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_temp: f64,
        #[arg(long)]
        drop_ties: bool,
        #[arg(long)]
        seed: u64,
        /// Also write a JSONL copy.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Behavior cloning on an offline dataset.
    TrainBc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Preference alignment from a BC checkpoint.
    Align {
        #[arg(long)]
        variant: Variant,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long)]
        bc: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Take the environment from this dataset's header.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: u64,
    },
    /// CSV and SVG output for alignment traces.
    Report {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline from one seed: data, BC, labels, alignment, evaluation.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Variants to align; all three when omitted.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
    },
    /// Toy mixture: BC, then all three alignment variants, with plots.
    ToyDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn with_dataset_env(mut cfg: ExperimentConfig, ds: &OfflineDataset) -> ExperimentConfig {
    if let Some(env) = &ds.env {
        cfg.env = env.clone();
    }
    cfg
}

fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::GenData { cfg, seed, out, n_episodes } => {
            let mut cfg = cfg.load("point-mass")?;
            if let Some(n) = n_episodes {
                cfg.data.n_episodes = n;
            }
            cfg.validate()?;
            let ds = generate_dataset(&cfg, seed)?;
            ds.write(&out)?;
            Ok(json!({ "out": out, "episodes": ds.episodes.len(), "steps": ds.n_steps() }))
        }
        Command::Label { input, out, k, n_pairs, noise_temp, drop_ties, seed, jsonl } => {
            let ds = OfflineDataset::read(&input)?;
            let teacher = TeacherConfig { noise_temp, drop_ties };
            let mut rng = stream_rng(seed, Stream::Labels);
            let mut prefs = build_pref_dataset(&ds, k, n_pairs, &teacher, &mut rng)?;
            prefs.seed = Some(seed);
            prefs.write(&out)?;
            if let Some(p) = &jsonl {
                prefs.write_jsonl(p)?;
            }
            let ties = prefs.pairs.iter().filter(|p| p.meta.tie).count();
            Ok(json!({ "out": out, "pairs": prefs.pairs.len(), "ties": ties }))
        }
        Command::TrainBc { cfg, data, seed, out, trace } => {
            let ds = OfflineDataset::read(&data)?;
            let cfg = with_dataset_env(cfg.load("point-mass")?, &ds);
            let res = train_bc(&cfg, &ds, seed)?;
            res.checkpoint.save(&out)?;
            if let Some(p) = &trace {
                std::fs::write(p, serde_json::to_vec(&res.trace)?)?;
            }
            Ok(json!({
                "out": out,
                "final_loss": res.trace.losses.last(),
                "reference_dmse": res.trace.reference_dmse,
            }))
        }
        Command::Align { variant, cfg, data, prefs, bc, seed, out, trace } => {
            let ds = OfflineDataset::read(&data)?;
            let cfg = with_dataset_env(cfg.load("point-mass")?, &ds);
            let prefs = PreferenceDataset::read(&prefs)?;
            if prefs.k != cfg.data.k {
                return Err(Error::InvalidArgument(format!("preference file has k = {}, config k = {}", prefs.k, cfg.data.k)));
            }
            let (train, held) = prefs.split_tail(cfg.data.heldout_pairs);
            let bc = Checkpoint::load(&bc)?;
            let res = train_align(&cfg, &bc, &ds, &train.pairs, &held.pairs, variant, seed, None)?;
            res.checkpoint.save(&out)?;
            if let Some(p) = &trace {
                res.trace.save_json(p)?;
            }
            let last = res.trace.last().expect("final record");
            Ok(json!({
                "out": out,
                "variant": variant,
                "e_winning": last.e_winning,
                "e_losing": last.e_losing,
                "i_acc": last.i_acc,
                "heldout_i_acc": last.heldout_i_acc,
                "reference_digests": res.reference_digests,
            }))
        }
        Command::Eval { ckpt, cfg, data, episodes, seed } => {
            let mut cfg = cfg.load("point-mass")?;
            if let Some(p) = &data {
                cfg = with_dataset_env(cfg, &OfflineDataset::read(p)?);
            }
            let model = Checkpoint::load(&ckpt)?.model;
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let res = evaluate(&model, &cfg.env, n, &cfg.eval, &mut stream_rng(seed, Stream::Eval))?;
            Ok(json!({ "u": res.u, "n": n, "toy": res.toy }))
        }
        Command::Report { traces, out } => {
            let traces = traces.iter().map(TrainTrace::load_json).collect::<Result<Vec<_>>>()?;
            let files = report(&traces, &out)?;
            Ok(json!({ "files": files }))
        }
        Command::Run { cfg, seed, out, variants } => {
            let cfg = cfg.load("point-mass")?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let res = run_pipeline(&cfg, seed, &variants)?;
            Ok(serde_json::to_value(write_outputs(&cfg, &res, &out)?)?)
        }
        Command::ToyDemo { cfg, seed, out } => {
            let cfg = cfg.load("toy")?;
            let summary = toy_demo(&cfg, seed, Some(&out))?;
            Ok(serde_json::to_value(summary)?)
        }
        Command::Gradcheck { seed, tol } => {
            let checks = run_gradcheck(seed)?;
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed(tol)).map(|c| c.loss.clone()).collect();
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("gradient mismatch in {}", failed.join(", "))));
            }
            Ok(json!({ "tolerance": tol, "checks": checks }))
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}

