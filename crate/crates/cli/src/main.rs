mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use idp_core::bench::{bench_csv, run_scaling_benchmark, BenchCase};
use idp_core::envs::{generate_dataset, read_dataset, write_dataset, Dataset, PlanningSample, TaskKind};
use idp_core::gradients::{grad_check, tight_spec, GradCheckTolerances};
use idp_core::planners::{init_params, Differentiation, PlannerKind, PlannerSpec};
use idp_core::training::{curve_csv, evaluate_success, Checkpoint, EpochRecord, Trainer};

use config::{parse_train_config, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "idp", version, about = "Implicitly differentiated value-iteration planners")]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    Maze,
    Cspace,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BenchMode {
    Implicit,
    Explicit,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Planner {
    Vin,
    Convgppn,
}

impl From<Planner> for PlannerKind {
    fn from(p: Planner) -> Self {
        match p {
            Planner::Vin => PlannerKind::Vin,
            Planner::Convgppn => PlannerKind::ConvGppn,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test datasets.
    Gen {
        #[arg(long, value_enum)]
        task: Task,
        /// Maze side length.
        #[arg(long)]
        size: Option<usize>,
        /// Angle bins per joint for C-space maps (18 or 36).
        #[arg(long)]
        bins: Option<usize>,
        /// Obstacle probability for mazes.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train a planner from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Success rate of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare implicit, unrolled and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "vin")]
        planner: Planner,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward/backward passes across sizes and iteration counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "15,27")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "30,50,80")]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value = "both")]
        mode: BenchMode,
        #[arg(long, value_enum, default_value = "vin")]
        planner: Planner,
        #[arg(long, default_value_t = 15)]
        k_bwd: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Mazes timed per repetition.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<idp_core::Error> for Failure {
    fn from(e: idp_core::Error) -> Self {
        Self::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type CmdResult = Result<String, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    task: Task,
    size: Option<usize>,
    bins: Option<usize>,
    density: Option<f64>,
    counts: [usize; 3],
    seed: u64,
    out: &Path,
) -> CmdResult {
    let (kind, m, density) = match task {
        Task::Maze => {
            if bins.is_some() {
                return Err(usage("--bins applies to --task cspace only"));
            }
            let m = size.ok_or_else(|| usage("--task maze requires --size"))?;
            (TaskKind::Maze, m, density.unwrap_or(0.3))
        }
        Task::Cspace => {
            if density.is_some() {
                return Err(usage("--density applies to --task maze only"));
            }
            let b = bins.unwrap_or(18);
            if b != 18 && b != 36 {
                return Err(usage(format!("--bins must be 18 or 36, got {b}")));
            }
            if size.is_some_and(|s| s != b) {
                return Err(usage("--size must equal --bins for C-space maps"));
            }
            (TaskKind::CSpace, b, 0.0)
        }
    };
    if kind == TaskKind::Maze && (m < 3 || !(0.0..1.0).contains(&density)) {
        return Err(usage("--size must be at least 3 and --density in [0, 1)"));
    }
    create_dir(out)?;
    let mut summary = format!("task={} m={m}", kind.name());
    for (split, (name, count)) in ["train", "val", "test"].into_iter().zip(counts).enumerate() {
        let ds = generate_dataset(kind, m, density, count, seed, split as u64)?;
        let path = out.join(format!("{name}.idpd"));
        write_dataset(&path, &ds)?;
        write!(summary, " {name}={count}").expect("string write");
    }
    write!(summary, " out={}", out.display()).expect("string write");
    Ok(summary)
}

fn load_samples(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path)
        .with_context(|| format!("reading dataset {}", path.display()))
        .map_err(Failure::Runtime)
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading config {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mut job = parse_train_config(&text, base).map_err(|e| match e {
        ConfigError::Line { .. } | ConfigError::Missing(_) => usage(format!("{}: {e}", config.display())),
    })?;
    let train = load_samples(&job.train_data)?;
    let val = load_samples(&job.val_data)?;
    let m = job.map_size.unwrap_or(train.map_size);
    job.train.planner.map_size = m;
    let out = out.or(job.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;

    let mut trainer = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            // only the epoch budget may change between sessions
            let mut stored = ck.config;
            stored.epochs = job.train.epochs;
            if stored != job.train {
                return Err(usage("checkpoint was trained with a different configuration"));
            }
            let mut t = Trainer::from_checkpoint(&ck)?;
            t.config.epochs = job.train.epochs;
            t
        }
        None => Trainer::new(job.train).map_err(|e| usage(e.to_string()))?,
    };
    let curve_path = out.join("curve.csv");
    let mut curve: Vec<EpochRecord> = Vec::new();
    if resume.is_some() && curve_path.exists() {
        curve = read_curve(&curve_path, trainer.epoch)?;
    }
    let best_path = out.join("best.idpc");
    trainer.run(&train.samples, &val.samples, |t, rec| {
        curve.push(rec.clone());
        std::fs::write(&curve_path, curve_csv(&curve))?;
        if let Some(best) = t.best.as_ref().filter(|b| b.epoch == rec.epoch) {
            best.save(&best_path)?;
        }
        Ok(())
    })?;
    let last = trainer.checkpoint();
    last.save(&out.join("last.idpc"))?;
    if !best_path.exists() {
        last.save(&best_path)?;
    }

    let mut summary = format!(
        "epochs={} best_epoch={} best_val_success={}",
        trainer.epoch, trainer.best_epoch, trainer.best_val
    );
    if let Some(test_path) = &job.test_data {
        let test = load_samples(test_path)?;
        let best = Checkpoint::load(&best_path)?;
        let s = evaluate_success(&best.config.planner, &best.params, &test.samples, &best.config.eval)?;
        write!(summary, " test_success={s}").expect("string write");
    }
    write!(summary, " out={}", out.display()).expect("string write");
    Ok(summary)
}

/// Rows of an existing curve file up to `epochs`, for resumed runs.
fn read_curve(path: &Path, epochs: usize) -> Result<Vec<EpochRecord>, Failure> {
    let text = std::fs::read_to_string(path)?;
    let bad = || Failure::Runtime(anyhow!("{}: malformed curve file", path.display()));
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let rec = EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: num(1)?,
            val_success: num(2)?,
            diverged_batches: f[3].parse().map_err(|_| bad())?,
            fwd_iters_mean: num(4)?,
            bwd_iters_mean: num(5)?,
            fwd_time_s: num(6)?,
            bwd_time_s: num(7)?,
        };
        if rec.epoch <= epochs {
            out.push(rec);
        }
    }
    Ok(out)
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_samples(data)?;
    if ds.map_size != ck.config.planner.map_size {
        return Err(usage(format!(
            "checkpoint expects {0}×{0} maps, dataset has {1}×{1}",
            ck.config.planner.map_size, ds.map_size
        )));
    }
    let s = evaluate_success(&ck.config.planner, &ck.params, &ds.samples, &ck.config.eval)?;
    Ok(format!("success={s} samples={} epoch={}", ds.samples.len(), ck.epoch))
}

fn cmd_gradcheck(
    size: usize,
    seed: u64,
    planner: Planner,
    samples: usize,
    out: Option<PathBuf>,
) -> Result<(bool, String), Failure> {
    if size < 3 || samples == 0 {
        return Err(usage("--size must be at least 3 and --samples positive"));
    }
    let tol = GradCheckTolerances::default();
    let spec = tight_spec(&PlannerSpec::new(planner.into(), Differentiation::Implicit, size), &tol);
    let params = init_params(&spec, seed)?;
    let data = generate_dataset(TaskKind::Maze, size, 0.3, samples, seed, 0)?;
    let mut csv = String::from("sample,tensor,implicit_vs_explicit,implicit_vs_fd,explicit_vs_fd,tied_cells\n");
    let (mut worst_ie, mut worst_fd, mut excluded, mut ok) = (0.0f64, 0.0f64, 0, true);
    for (i, s) in data.samples.iter().enumerate() {
        let report = grad_check(&spec, &params, s, &tol)?;
        for e in &report.entries {
            writeln!(
                csv,
                "{i},{},{:e},{:e},{:e},{}",
                e.name, e.implicit_vs_explicit, e.implicit_vs_fd, e.explicit_vs_fd, report.tied_cells
            )
            .expect("string write");
        }
        if report.excluded() {
            excluded += 1;
            continue;
        }
        worst_ie = worst_ie.max(report.max_implicit_vs_explicit());
        worst_fd = worst_fd.max(report.max_vs_fd());
        ok &= report.passed();
    }
    if let Some(dir) = &out {
        create_dir(dir)?;
        std::fs::write(dir.join("gradcheck.csv"), &csv)?;
    } else {
        eprint!("{csv}");
    }
    Ok((
        ok,
        format!(
            "passed={ok} max_implicit_vs_explicit={worst_ie:e} max_vs_fd={worst_fd:e} excluded={excluded} \
             threshold_implicit_explicit={:e} threshold_fd={:e}",
            tol.implicit_explicit, tol.finite_diff
        ),
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    sizes: &[usize],
    ks: &[usize],
    mode: BenchMode,
    planner: Planner,
    k_bwd: usize,
    reps: usize,
    samples: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> CmdResult {
    if sizes.is_empty() || ks.is_empty() || samples == 0 || k_bwd == 0 || ks.contains(&0) {
        return Err(usage(
            "--sizes, --ks, --samples and --k-bwd must be non-empty and positive",
        ));
    }
    if sizes.iter().any(|&m| m < 3) {
        return Err(usage("map sizes must be at least 3"));
    }
    let modes: &[Differentiation] = match mode {
        BenchMode::Implicit => &[Differentiation::Implicit],
        BenchMode::Explicit => &[Differentiation::Explicit],
        BenchMode::Both => &[Differentiation::Implicit, Differentiation::Explicit],
    };
    let mut cases = Vec::new();
    for &m in sizes {
        for &mode in modes {
            for &k in ks {
                cases.push(BenchCase {
                    kind: planner.into(),
                    mode,
                    m,
                    k,
                    k_bwd,
                    tol: 0.0,
                });
            }
        }
    }
    let data = |m: usize| -> Vec<PlanningSample> {
        generate_dataset(TaskKind::Maze, m, 0.3, samples, seed, 0)
            .expect("maze generation with validated sizes")
            .samples
    };
    // timings are meant to be single-threaded regardless of --threads
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| anyhow!(e))?;
    let records = pool.install(|| run_scaling_benchmark(&cases, data, reps, seed))?;
    let csv = bench_csv(&records);
    match &out {
        Some(dir) => {
            create_dir(dir)?;
            std::fs::write(dir.join("bench.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    let diverged = records.iter().filter(|r| r.diverged).count();
    Ok(format!("rows={} diverged={diverged}", records.len()))
}

fn run(cli: Cli) -> Result<(bool, String), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!(e))?;
    }
    let ok = |s: String| Ok((true, s));
    match cli.command {
        Command::Gen {
            task,
            size,
            bins,
            density,
            train,
            val,
            test,
            seed,
            out,
        } => ok(cmd_gen(task, size, bins, density, [train, val, test], seed, &out)?),
        Command::Train { config, out, resume } => ok(cmd_train(&config, out, resume)?),
        Command::Eval { checkpoint, data } => ok(cmd_eval(&checkpoint, &data)?),
        Command::Gradcheck {
            size,
            seed,
            planner,
            samples,
            out,
        } => cmd_gradcheck(size, seed, planner, samples, out),
        Command::Bench {
            sizes,
            ks,
            mode,
            planner,
            k_bwd,
            reps,
            samples,
            seed,
            out,
        } => ok(cmd_bench(&sizes, &ks, mode, planner, k_bwd, reps, samples, seed, out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok((true, summary)) => {
            println!("status=ok {summary}");
            ExitCode::SUCCESS
        }
        Ok((false, summary)) => {
            println!("status=fail {summary}");
            ExitCode::from(2)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            println!("status=error kind=usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            println!("status=error kind=runtime");
            ExitCode::from(2)
        }
    }
}
