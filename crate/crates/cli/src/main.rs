mod config;

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use warmup_core::harness::data::write_synthetic_cifar;
use warmup_core::harness::{
    pcw_run, read_phase_csv, select_init_for_run, sweep, train_run, write_trajectory_csv, LrGrid,
    PcwRunConfig, PhaseCell, PhaseWriter, RunConfig, SweepConfig,
};
use warmup_core::instability::SearchConfig;
use warmup_core::{LossKind, OptimizerKind, Parameterization, ScheduleSpec};

#[derive(Parser)]
#[command(
    name = "warmup-lab",
    version,
    about = "Learning-rate warmup experiments on small MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write its trajectory CSV.
    Train(TrainArgs),
    /// Run a (warmup duration × target learning rate) phase sweep.
    Sweep(SweepArgs),
    /// Estimate the critical learning rate at initialization.
    Lrc(LrcArgs),
    /// Full-batch training under persistent catapult warmup.
    Pcw(PcwArgs),
    /// Write synthetic data in the CIFAR-10 binary layout.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Sgdm,
    Adam,
    GiAdam,
    RiAdam,
}

impl From<Opt> for OptimizerKind {
    fn from(o: Opt) -> Self {
        match o {
            Opt::Sgd => Self::Sgd,
            Opt::Sgdm => Self::Sgdm,
            Opt::Adam => Self::Adam,
            Opt::GiAdam => Self::GiAdam,
            Opt::RiAdam => Self::RiAdam,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Sp,
    Mup,
    SimpleMup,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Mse,
    Xent,
}

/// Flags shared by every run-shaped command. Each one overrides the
/// matching config field.
#[derive(Args, Default)]
struct RunFlags {
    /// TOML or JSON config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.optimizer.beta2=0.99`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_enum)]
    optimizer: Option<Opt>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum)]
    parameterization: Option<Param>,
    #[arg(long, value_enum)]
    loss: Option<Loss>,
    /// Minibatch size; 0 trains full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Directory with CIFAR-10 binary batches (switches the dataset to CIFAR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl RunFlags {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        if let Some(steps) = self.steps {
            run.train.steps = steps;
        }
        if let Some(kind) = self.optimizer {
            run.train.optimizer.kind = kind.into();
        }
        if let Some(depth) = self.depth {
            run.network.depth = depth;
        }
        if let Some(width) = self.width {
            run.network.width = width;
        }
        if let Some(p) = self.parameterization {
            run.network.parameterization = match p {
                Param::Sp => Parameterization::Sp,
                Param::Mup => Parameterization::Mup,
                Param::SimpleMup => Parameterization::SimpleMup,
            };
        }
        if let Some(loss) = self.loss {
            run.loss = match loss {
                Loss::Mse => LossKind::Mse,
                Loss::Xent => LossKind::Xent,
            };
        }
        if let Some(b) = self.batch_size {
            run.train.batch_size = (b > 0).then_some(b);
        }
        if let Some(n) = self.n_train {
            run.dataset.n_train = n;
        }
        if let Some(dir) = &self.data_dir {
            run.dataset.kind = warmup_core::harness::DatasetKind::Cifar10Bin;
            run.dataset.path = Some(dir.clone());
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Target learning rate (replaces the configured schedule).
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup duration used with `--lr`.
    #[arg(long, default_value_t = 1)]
    warmup_steps: u64,
    /// Probe cadence for sharpness; 0 disables probes.
    #[arg(long)]
    probe_every: Option<u64>,
    /// Trajectory CSV path (`-` for stdout).
    #[arg(short, long, default_value = "trajectory.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated warmup durations.
    #[arg(long, value_delimiter = ',')]
    warmups: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Geometric grid `base·2^x` instead of the sharpness-anchored one.
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    max_columns: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Phase CSV; existing cells in it are kept and not rerun.
    #[arg(short, long, default_value = "phase.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct LrcArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    target_lr: f64,
    #[arg(long)]
    warmup_steps: u64,
    /// Relative loss increase that counts as unstable.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    initial_lr: Option<f64>,
}

#[derive(Args)]
struct PcwArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    target_lr: Option<f64>,
    #[arg(long)]
    max_wait: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Per-step CSV (step, lr, loss).
    #[arg(short, long, default_value = "pcw.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Lrc(args) => cmd_lrc(args),
        Command::Pcw(args) => cmd_pcw(args),
        Command::GenData(args) => cmd_gen_data(args),
    }
}

fn run_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut run: RunConfig = config::load(flags.config.as_deref())?;
    flags.apply(&mut run);
    config::apply_overrides(run, &flags.set)
}

fn output(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdout().lock()));
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(file)))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = run_config(&args.run)?;
    if let Some(lr) = args.lr {
        run.train.schedule = ScheduleSpec::linear_warmup(lr, args.warmup_steps);
    }
    if let Some(p) = args.probe_every {
        run.train.probe_every = p;
    }
    let result = train_run(&run)?;
    write_trajectory_csv(output(&args.out)?, &result.rows)?;
    if args.out != Path::new("-") {
        print_json(&result.summary)?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg: SweepConfig = config::load(args.run.config.as_deref())?;
    args.run.apply(&mut cfg.base);
    let mut cfg = config::apply_overrides(cfg, &args.run.set)?;
    if let Some(w) = args.warmups {
        cfg.warmup_steps = w;
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(base) = args.base_lr {
        cfg.grid = LrGrid::geometric(base);
    }
    if let Some(m) = args.max_columns {
        cfg.max_columns = m;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }

    let existing: Vec<PhaseCell> = match File::open(&args.out) {
        Ok(f) => read_phase_csv(f).with_context(|| format!("reading {}", args.out.display()))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e).with_context(|| format!("opening {}", args.out.display())),
    };
    let needs_header = std::fs::metadata(&args.out).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&args.out)?;
    let mut sink = PhaseWriter::new(file, needs_header)?;
    let outcome = sweep(&cfg, &existing, |cell| sink.append(cell))?;
    for (seed, lambda) in &outcome.initial_sharpness {
        eprintln!("seed {seed}: initial sharpness {lambda:.6}");
    }
    eprintln!(
        "{} cells over {} columns ({} reused)",
        outcome.cells.len(),
        outcome.columns,
        existing.len()
    );
    Ok(())
}

fn cmd_lrc(args: LrcArgs) -> Result<()> {
    let run = run_config(&args.run)?;
    let mut search = SearchConfig::for_optimizer(&run.train.optimizer);
    if let Some(t) = args.tolerance {
        search.tolerance = t;
    }
    if let Some(lr) = args.initial_lr {
        search.initial_lr = lr;
    }
    let report = select_init_for_run(&run, &search, args.target_lr, args.warmup_steps)?;
    let sel = &report.selection;
    let est = &sel.estimate;
    println!(
        "bracket        [{}, {}] ({:?})",
        est.lower, est.upper, est.kind
    );
    println!("critical lr    {}", est.critical_lr);
    println!(
        "init lr        {}{}",
        sel.init_lr,
        if sel.fallback {
            " (fallback: no instability found)"
        } else {
            ""
        }
    );
    println!("forward passes {}", est.forward_passes);
    println!("reach steps    {}", sel.reach_steps);
    println!("saved steps    {}", sel.saved_steps);
    println!("lower,upper,critical_lr,t_fp,t_reach,t_save");
    println!(
        "{},{},{},{},{},{}",
        est.lower, est.upper, est.critical_lr, est.forward_passes, sel.reach_steps, sel.saved_steps
    );
    Ok(())
}

fn cmd_pcw(args: PcwArgs) -> Result<()> {
    let mut cfg: PcwRunConfig = config::load(args.run.config.as_deref())?;
    args.run.apply(&mut cfg.run);
    let mut cfg = config::apply_overrides(cfg, &args.run.set)?;
    if let Some(t) = args.target_lr {
        cfg.target_lr = t;
    }
    if let Some(w) = args.max_wait {
        cfg.pcw.max_wait = w;
    }
    if let Some(t) = args.tolerance {
        cfg.pcw.search.tolerance = t;
    }
    let out = pcw_run(&cfg)?;
    let mut w = output(&args.out)?;
    writeln!(w, "step,lr,loss")?;
    for (i, (lr, loss)) in out.lrs.iter().zip(&out.losses).enumerate() {
        writeln!(w, "{},{},{}", i + 1, lr, loss)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Report<'a> {
        phase: warmup_core::instability::PcwPhase,
        reached_at: Option<u64>,
        diverged: bool,
        forward_passes: usize,
        lr_non_decreasing: bool,
        catapults: &'a [warmup_core::harness::CatapultRecord],
    }
    let report = Report {
        phase: out.phase,
        reached_at: out.reached_at,
        diverged: out.diverged,
        forward_passes: out.forward_passes,
        lr_non_decreasing: out.lr_non_decreasing(),
        catapults: &out.catapults,
    };
    if args.out == Path::new("-") {
        eprintln!("{}", serde_json::to_string_pretty(&report)?);
        Ok(())
    } else {
        print_json(&report)
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    write_synthetic_cifar(&args.out, args.n_train, args.n_test, args.seed)?;
    eprintln!(
        "wrote {} train / {} test records to {}",
        args.n_train,
        args.n_test,
        args.out.display()
    );
    Ok(())
}
