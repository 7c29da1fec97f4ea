use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lsrobust::attacks::{self, AttackKind};
use lsrobust::experiment::{self, AttackGrid, DatasetSpec, DefenseReport, ExperimentConfig, GaussianStudyConfig};
use lsrobust::nn::DenseNetwork;
use lsrobust::training;

#[derive(Parser)]
#[command(name = "lsrobust", version, about = "Label-smoothing defenses against l-inf attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every defense of a config, evaluate the attack grid and write
    /// results, tables, models and a manifest.
    Train(TrainArgs),
    /// Evaluate a saved model on the test split of a config.
    Eval(EvalArgs),
    /// Attack a saved model and write per-example outcomes as CSV.
    Attack(AttackArgs),
    /// Accuracy curves and weights for the fading-Gaussian problem.
    Gaussian(GaussianArgs),
    /// Rebuild per-attack tables from one or more report.json files.
    Report(ReportArgs),
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let (Some(data_dir), DatasetSpec::Mnist { dir, .. }) = (&self.data_dir, &mut cfg.dataset) {
            *dir = Some(data_dir.clone());
        }
        if let Some(epochs) = self.epochs {
            cfg.training.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            cfg.training.lr = lr;
        }
        if let Some(batch_size) = self.batch_size {
            cfg.training.batch_size = batch_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model JSON written by `train`.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    kind: AttackKind,
    #[arg(long)]
    epsilon: f64,
    /// Iterations for BIM/PGD, step cap for DeepFool.
    #[arg(long)]
    steps: Option<usize>,
    /// BIM/PGD step size as a fraction of epsilon.
    #[arg(long, default_value_t = 0.25)]
    step_fraction: f64,
    /// Per-example CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GaussianArgs {
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.1,0.4")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    eps_max: f64,
    #[arg(long, default_value_t = 0.01)]
    eps_step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/gaussian")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files; their rows are concatenated in order.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Directory for table-<attack>.csv; tables go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<DenseNetwork> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let reports = experiment::run_experiment(&cfg)?;
    for r in &reports {
        eprintln!(
            "{}: standard accuracy {:.4}, final loss {:.4}",
            r.defense.slug(),
            r.eval.standard_accuracy,
            r.final_train_loss
        );
    }
    println!("{}", cfg.output_dir.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let net = load_model(&args.model)?;
    let (_, test) = cfg.dataset.load(cfg.seed)?;
    let report = training::evaluate(&net, &test, &cfg.attack_configs()?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn attack(args: &AttackArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let net = load_model(&args.model)?;
    let (_, test) = cfg.dataset.load(cfg.seed)?;
    let grid = AttackGrid {
        kind: args.kind,
        epsilons: vec![args.epsilon],
        steps: args.steps,
        step_fraction: args.step_fraction,
    };
    let attack = grid.expand(cfg.dataset.clip_box(), cfg.seed)?.remove(0);
    let adv = attacks::perturb_batch(&net, test.inputs(), test.labels(), &attack, 0)?;
    let clean = net.predict(test.inputs())?;
    let attacked = net.predict(adv.view())?;

    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["index", "label", "clean_prediction", "attacked_prediction", "linf"])?;
    let mut robust = 0;
    for i in 0..test.len() {
        let y = test.labels()[i];
        if clean[i] == y && attacked[i] == y {
            robust += 1;
        }
        let linf = attacks::linf_distance(adv.row(i), test.inputs().row(i));
        w.write_record([
            i.to_string(),
            y.to_string(),
            clean[i].to_string(),
            attacked[i].to_string(),
            linf.to_string(),
        ])?;
    }
    w.flush()?;
    eprintln!(
        "{} eps={}: adversarial accuracy {:.4} over {} examples",
        args.kind,
        args.epsilon,
        robust as f64 / test.len() as f64,
        test.len()
    );
    Ok(())
}

fn gaussian(args: &GaussianArgs) -> Result<()> {
    if !(args.eps_step > 0.0 && args.eps_max >= 0.0) {
        bail!("need eps-step > 0 and eps-max >= 0");
    }
    let points = (args.eps_max / args.eps_step + 1e-9).floor() as usize;
    let eps_grid = (0..=points).map(|i| i as f64 * args.eps_step).collect();
    let cfg = GaussianStudyConfig::new(args.d, args.alphas.clone(), eps_grid, args.seed);
    let study = experiment::run_gaussian_study(&cfg, &args.out)?;
    for a in &study.als {
        eprintln!("ALS alpha={}: standard accuracy {:.4}", a.alpha, a.curve[0].1);
    }
    println!("{}", args.out.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut reports: Vec<DefenseReport> = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut part: Vec<DefenseReport> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.append(&mut part);
    }
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for path in experiment::write_tables(dir, &reports)? {
                println!("{}", path.display());
            }
        }
        None => {
            for t in experiment::make_table(&reports)? {
                println!("# {}\n{}", t.attack, t.csv);
            }
        }
    }
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<lsrobust::Error>())
        .map(lsrobust::Error::kind)
        .unwrap_or("cli")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Attack(args) => attack(args),
        Command::Gaussian(args) => gaussian(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": error_kind(&err), "message": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
