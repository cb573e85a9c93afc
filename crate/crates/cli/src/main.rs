//! `gatecade` command-line interface.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gatecade::cascade::{
    decision_log, evaluate, gate_scores, roc_curve, split_scores, Cascade, GatingThreshold,
    PartitionedModel,
};
use gatecade::data::{generate_dataset, Splits};
use gatecade::harness::{
    evaluate_target, measured_power_params, repeat_seed, run_sweep_on, train_partitioned,
    write_aggregate_csv, write_records, write_sweep_csv, ExperimentConfig, Manifest,
    SimulationMode,
};
use gatecade::island::{
    simulate_analytic, simulate_analytic_traced, simulate_empirical, Deployment,
};
use gatecade::power::{report, sweep, SystemConfig};
use gatecade::tensor::{read_checkpoint, write_checkpoint};
use gatecade::Error;

#[derive(Parser)]
#[command(name = "gatecade", version, about = "Gated compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one partitioned model at the first `mu` and `alpha` of the config.
    Train(Args),
    /// Calibrate gating thresholds on the validation split.
    Calibrate(Args),
    /// Run the cascade on the test split at the calibrated thresholds.
    Evaluate(Args),
    /// Evaluate the power model over a grid of compute shares.
    PowerSweep(Args),
    /// Run the two-island energy simulator.
    Simulate(Args),
    /// Train and evaluate the full `mu` x `alpha` x target grid.
    Sweep(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Exit codes by failure category.
mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const DIVERGENCE: u8 = 6;
    pub const NUMERIC: u8 = 7;
    pub const PARTIAL: u8 = 8;
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
    /// The sweep finished but some grid points failed.
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => exit::USAGE,
            Failure::Partial(_) => exit::PARTIAL,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::OutOfRange { .. } => exit::CONFIG,
                Error::Io(_) | Error::Csv(_) => exit::IO,
                Error::Checkpoint(_) => exit::CHECKPOINT,
                Error::Divergence { .. } => exit::DIVERGENCE,
                Error::Shape { .. } | Error::NonScalarLoss(_) | Error::Empty(_) => exit::NUMERIC,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Partial(n) => write!(f, "{n} sweep rows failed; see the `error` column"),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Calibrated thresholds persisted by `calibrate` and read by `evaluate`.
#[derive(Debug, Serialize, Deserialize)]
struct CalibrationRow {
    target: f64,
    tau: f64,
    calibrated_incorrect_rate: f64,
    positives: usize,
    undersized: bool,
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn open(name: &str, args: Args) -> Outcome<Run> {
        let cfg = ExperimentConfig::load(&args.config)?;
        let out = args.out;
        std::fs::create_dir_all(&out).map_err(Error::from)?;
        let manifest = Manifest::new(name, &cfg);
        Ok(Run { cfg, out, manifest })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        self.manifest.outputs.push(file.into());
        self.out.join(file)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn splits(&self) -> Outcome<Splits> {
        Ok(generate_dataset(&self.cfg.dataset)?)
    }

    fn load_model(&mut self) -> Outcome<PartitionedModel> {
        let path = self.checkpoint_path();
        let file = File::open(&path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let model = PartitionedModel::from_checkpoint(&read_checkpoint(BufReader::new(file))?)?;
        self.manifest.detail("checkpoint", path.display());
        Ok(model)
    }

    fn finish(mut self) -> Outcome {
        let path = self.out.join("manifest.toml");
        self.manifest.outputs.sort();
        self.manifest.write(&path)?;
        Ok(())
    }
}

fn train(args: Args) -> Outcome {
    let mut run = Run::open("train", args)?;
    let splits = run.splits()?;
    let (mu, alpha) = (run.cfg.mu[0], run.cfg.alpha[0]);
    let seed = repeat_seed(run.cfg.seed, 0);
    log::info!("training mu={mu} alpha={alpha} seed={seed}");
    let (model, log) = train_partitioned(&run.cfg, &splits.train, mu, alpha, seed)?;
    let ckpt = run.checkpoint_path();
    write_checkpoint(
        &model.to_checkpoint(),
        BufWriter::new(File::create(&ckpt).map_err(Error::from)?),
    )?;
    run.manifest.outputs.push(ckpt.display().to_string());
    write_records(&run.path("train_log.csv"), &log)?;
    run.manifest.detail("model_seed", seed);
    run.manifest.detail("mu", model.mu());
    run.manifest.detail("alpha", alpha);
    if let Some(last) = log.last() {
        run.manifest.detail("final_loss", last.total);
    }
    run.finish()
}

fn calibrate(args: Args) -> Outcome {
    let mut run = Run::open("calibrate", args)?;
    let model = run.load_model()?;
    let splits = run.splits()?;
    let scores = gate_scores(&model, &splits.val)?;
    let (pos, neg) = split_scores(&scores, &splits.val);
    let rows = run
        .cfg
        .targets
        .iter()
        .map(|&t| {
            let c = gatecade::cascade::calibrate(&pos, t)?;
            Ok(CalibrationRow {
                target: t,
                tau: c.threshold.tau,
                calibrated_incorrect_rate: c.calibrated_incorrect_rate,
                positives: c.positives,
                undersized: c.undersized,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_records(&run.path("calibration.csv"), &rows)?;
    write_records(&run.path("roc_val.csv"), &roc_curve(&pos, &neg)?)?;
    run.finish()
}

fn read_calibration(path: &Path) -> Outcome<Vec<CalibrationRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        Failure::Usage(format!(
            "cannot read {}: {e}; run `calibrate` first",
            path.display()
        ))
    })?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<CalibrationRow>, _>>()
        .map_err(Error::from)?;
    Ok(rows)
}

fn evaluate_cmd(args: Args) -> Outcome {
    let mut run = Run::open("evaluate", args)?;
    let model = run.load_model()?;
    let thresholds = read_calibration(&run.out.join("calibration.csv"))?;
    let splits = run.splits()?;
    let mut stats = Vec::new();
    let mut power = Vec::new();
    for (i, c) in thresholds.iter().enumerate() {
        let threshold = GatingThreshold::new(c.tau, c.target)?;
        let eval = evaluate(&model, threshold, &splits.test)?;
        let file = format!("decisions_{i}.csv");
        write_records(
            &run.path(&file),
            &decision_log(&eval.decisions, &splits.test.classes),
        )?;
        run.manifest.detail(&file, format!("target {}", c.target));
        stats.push(StatsRow {
            target: c.target,
            tau: c.tau,
            correct_gating_rate: eval.stats.correct_gating_rate,
            incorrect_gating_rate: eval.stats.incorrect_gating_rate,
            sparsity: eval.stats.sparsity,
            precision: eval.stats.precision,
            recall: eval.stats.recall,
        });
        let params = measured_power_params(&eval.counts, model.mu());
        for &a in &run.cfg.regimes {
            let r = report(&params, &SystemConfig::from_compute_share(a)?)?;
            power.push((c.target, params, r));
        }
    }
    write_records(&run.path("stats.csv"), &stats)?;
    let rows: Vec<_> = power
        .into_iter()
        .map(|(target, p, r)| MeasuredPowerRow {
            target,
            rho: p.rho,
            mu: p.mu,
            nu: p.nu,
            gamma: p.gamma,
            a: r.a,
            b: r.b,
            baseline_cost: r.baseline_cost,
            gc_cost: r.gc_cost,
            reduction_factor: r.reduction_factor,
        })
        .collect();
    write_records(&run.path("power.csv"), &rows)?;
    let scores = gate_scores(&model, &splits.test)?;
    let (pos, neg) = split_scores(&scores, &splits.test);
    write_records(&run.path("roc_test.csv"), &roc_curve(&pos, &neg)?)?;
    run.finish()
}

#[derive(Serialize)]
struct StatsRow {
    target: f64,
    tau: f64,
    correct_gating_rate: Option<f64>,
    incorrect_gating_rate: Option<f64>,
    sparsity: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
}

#[derive(Serialize)]
struct MeasuredPowerRow {
    target: f64,
    rho: f64,
    mu: f64,
    nu: f64,
    gamma: f64,
    a: f64,
    b: f64,
    baseline_cost: f64,
    gc_cost: f64,
    reduction_factor: f64,
}

fn power_sweep(args: Args) -> Outcome {
    let mut run = Run::open("power-sweep", args)?;
    let p = run
        .cfg
        .power
        .clone()
        .ok_or_else(|| Error::Config("`power` section is required for power-sweep".into()))?;
    let reports = sweep(&p.params(), &p.grid)?;
    write_records(&run.path("power_sweep.csv"), &reports)?;
    run.finish()
}

fn simulate(args: Args) -> Outcome {
    let mut run = Run::open("simulate", args)?;
    let s = run
        .cfg
        .simulate
        .clone()
        .ok_or_else(|| Error::Config("`simulate` section is required for simulate".into()))?;
    let dep = Deployment::from_config(&SystemConfig::from_compute_share(s.a)?)?;
    let (energy, trace, mu) = match s.mode {
        SimulationMode::Analytic => {
            let params = run
                .cfg
                .power
                .as_ref()
                .ok_or_else(|| {
                    Error::Config("analytic simulation reads rates from the `power` section".into())
                })?
                .params();
            if s.trace {
                let (e, t) = simulate_analytic_traced(&dep, &params, s.samples, s.seed)?;
                (e, Some(t), params.mu)
            } else {
                (
                    simulate_analytic(&dep, &params, s.samples, s.seed)?,
                    None,
                    params.mu,
                )
            }
        }
        SimulationMode::Empirical => {
            let model = run.load_model()?;
            let splits = run.splits()?;
            let (pos, _) = split_scores(&gate_scores(&model, &splits.val)?, &splits.val);
            let point = evaluate_target(&model, &pos, &splits.test, s.target)?;
            run.manifest.detail("tau", point.calibration.threshold.tau);
            let cascade = Cascade::new(&model, point.calibration.threshold);
            let (e, t) = simulate_empirical(&dep, &cascade, &splits.test)?;
            (e, s.trace.then_some(t), model.mu())
        }
    };
    let measured = energy.measured_params(mu);
    let expected = dep.expected_energy(&measured);
    run.manifest.detail("mean_energy", energy.mean_energy());
    run.manifest
        .detail("closed_form_at_measured_rates", expected);
    write_records(
        &run.path("energy.csv"),
        &[EnergyRow::new(&energy, &measured, expected)],
    )?;
    if let Some(t) = trace {
        write_records(&run.path("trace.csv"), &t)?;
    }
    run.finish()
}

#[derive(Serialize)]
struct EnergyRow {
    samples: usize,
    positives: usize,
    negatives: usize,
    negatives_stopped: usize,
    positives_stopped: usize,
    wake_ups: usize,
    prefix_energy: f64,
    link_energy: f64,
    suffix_energy: f64,
    mean_energy: f64,
    rho: f64,
    mu: f64,
    nu: f64,
    gamma: f64,
    closed_form_energy: f64,
}

impl EnergyRow {
    fn new(
        e: &gatecade::island::EnergyReport,
        p: &gatecade::power::GcPowerParams,
        closed_form: f64,
    ) -> Self {
        EnergyRow {
            samples: e.samples,
            positives: e.positives,
            negatives: e.negatives,
            negatives_stopped: e.negatives_stopped,
            positives_stopped: e.positives_stopped,
            wake_ups: e.wake_ups,
            prefix_energy: e.prefix_energy,
            link_energy: e.link_energy,
            suffix_energy: e.suffix_energy,
            mean_energy: e.mean_energy(),
            rho: p.rho,
            mu: p.mu,
            nu: p.nu,
            gamma: p.gamma,
            closed_form_energy: closed_form,
        }
    }
}

fn sweep_cmd(args: Args) -> Outcome {
    let mut run = Run::open("sweep", args)?;
    let splits = run.splits()?;
    let result = run_sweep_on(&run.cfg, &splits);
    write_sweep_csv(&run.path("sweep.csv"), &result)?;
    write_aggregate_csv(&run.path("aggregate.csv"), &result)?;
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    run.manifest.detail("rows", result.rows.len());
    run.manifest.detail("failed_rows", failed);
    run.finish()?;
    if failed > 0 {
        return Err(Failure::Partial(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::PowerSweep(a) => power_sweep(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
