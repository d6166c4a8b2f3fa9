use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use geomano::bench::{bench_scan, BenchSize, Variant, CSV_HEADER};
use geomano::config::{parse_pairs, RunConfig};
use geomano::darcy::{gen_dataset, CoefficientMap, DarcySet, GenOptions};
use geomano::train::{evaluate, mean_field_baseline, model_from_checkpoint, train_loop, RunOutput};
use geomano::verify::scan_check;
use geomano::Error;

use crate::alloc::HeapProbe;
use crate::BUILD_ID;

#[derive(Parser, Debug)]
#[command(name = "geomano", version, about = "GeoMaNO neural operator: data, training and scan tools")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Debug logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate Darcy-flow train/test containers.
    GenData(GenDataArgs),
    /// Train a model and write metrics and the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a trained run on its test split.
    Eval(EvalArgs),
    /// Compare the parallel and tiled scans against their naive oracles.
    ScanCheck(ScanCheckArgs),
    /// Time the scan variants.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    /// Nodes per side.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
    /// Solve on a `2·size − 1` grid and keep every other node.
    #[arg(long)]
    pub fine: bool,
    /// `threshold` (values 12 and 3) or `lognormal`.
    #[arg(long, default_value = "threshold")]
    pub coefficient: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Dataset directory, overriding the one recorded in the run.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScanCheckArgs {
    #[arg(long, default_value_t = 32)]
    pub max_size: usize,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest deviation that still passes.
    #[arg(long, default_value_t = 1e-12)]
    pub tolerance: f64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated `HxWxNxED` problems.
    #[arg(long, default_value = "64x64x8x16,256x256x8x16")]
    pub sizes: String,
    /// Tile size of the `tiled` variant.
    #[arg(long, default_value_t = 16)]
    pub tile: usize,
    /// Comma-separated variants: naive, parallel, tiled, tiledT.
    #[arg(long, default_value = "naive,parallel,tiled")]
    pub variants: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) | Error::Solver { .. } | Error::Metric(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    info!("geomano {} (build {BUILD_ID}), {} threads", env!("CARGO_PKG_VERSION"), rayon::current_num_threads());
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::ScanCheck(args) => check(args),
        Command::Bench(args) => bench(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let map = match args.coefficient.as_str() {
        "threshold" => CoefficientMap::default(),
        "lognormal" => CoefficientMap::LogNormal,
        other => return Err(Error::Config(format!("unknown coefficient map `{other}`"))),
    };
    let opts = GenOptions {
        n_train: args.n_train,
        n_test: args.n_test,
        size: args.size,
        seed: args.seed,
        map,
        fine: args.fine,
        ..GenOptions::default()
    };
    info!("gen-data {opts:?}");
    let g = gen_dataset(&opts)?;
    fs::create_dir_all(&args.out_dir)?;
    g.train.save(args.out_dir.join("train.gmno"))?;
    g.test.save(args.out_dir.join("test.gmno"))?;
    let worst = g.reports.iter().map(|r| r.relative_residual).fold(0.0, f64::max);
    let iters = g.reports.iter().map(|r| r.iterations).max().unwrap_or(0);
    let s = g.train.stats;
    let mut f = fs::File::create(args.out_dir.join("stats.txt"))?;
    writeln!(f, "a_mean = {:?}\na_std = {:?}\nu_mean = {:?}\nu_std = {:?}", s.a_mean, s.a_std, s.u_mean, s.u_std)?;
    writeln!(f, "max_relative_residual = {worst:e}\nmax_cg_iterations = {iters}")?;
    writeln!(f, "seed = {}\nsize = {}\nn_train = {}\nn_test = {}", args.seed, args.size, args.n_train, args.n_test)?;
    info!("wrote {} and {} samples to {}; worst residual {worst:.2e}", args.n_train, args.n_test, args.out_dir.display());
    Ok(())
}

fn load_splits(dir: &Path) -> Result<(DarcySet, DarcySet), Error> {
    let load = |name: &str| {
        let path = dir.join(name);
        DarcySet::load(&path).map_err(|e| match e {
            Error::Io(_) => Error::Config(format!("cannot read {} (run gen-data first?): {e}", path.display())),
            other => other,
        })
    };
    Ok((load("train.gmno")?, load("test.gmno")?))
}

fn train(args: TrainArgs) -> Result<(), Error> {
    let mut pairs = match &args.config {
        Some(path) => parse_pairs(&fs::read_to_string(path)?)?,
        None => Default::default(),
    };
    for raw in &args.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{raw}`")))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    let flag_pairs = [
        ("data_dir", args.data_dir.map(|p| p.display().to_string())),
        ("out_dir", args.out_dir.map(|p| p.display().to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flag_pairs {
        if let Some(v) = v {
            pairs.insert(k.into(), v);
        }
    }
    let mut cfg = RunConfig::from_pairs(&pairs)?;
    let (train_set, test_set) = load_splits(&cfg.data_dir)?;
    if cfg.model.grid != train_set.size() {
        info!("model grid {:?} set from the dataset {:?}", cfg.model.grid, train_set.size());
        cfg.model.grid = train_set.size();
        cfg.model.validate()?;
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.cfg"), cfg.to_text())?;
    info!("train config:\n{}", cfg.to_text().trim_end());
    let baseline = mean_field_baseline(&train_set, &test_set)?;
    info!("train-mean baseline test rel_l2 {baseline:.5}");
    let output = RunOutput { dir: Some(cfg.out_dir.clone()), verbose: true };
    let outcome = train_loop(&cfg.model, &cfg.train, &train_set, &test_set, &output)?;
    let last = outcome.history.last().expect("at least one epoch");
    let mut f = fs::File::create(cfg.out_dir.join("result.txt"))?;
    writeln!(f, "best_test_rel_l2 = {:?}", outcome.best_test_rel_l2)?;
    writeln!(f, "final_test_rel_l2 = {:?}", last.test_rel_l2)?;
    writeln!(f, "baseline_rel_l2 = {baseline:?}")?;
    writeln!(f, "seconds = {:.1}", last.seconds)?;
    writeln!(f, "build = {BUILD_ID}")?;
    info!(
        "best test rel_l2 {:.5} ({:.1}x below baseline) in {:.0}s; artifacts in {}",
        outcome.best_test_rel_l2,
        baseline / outcome.best_test_rel_l2,
        last.seconds,
        cfg.out_dir.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::load(args.run_dir.join("config.cfg"))?;
    if let Some(dir) = args.data_dir {
        cfg.data_dir = dir;
    }
    let (_, test_set) = load_splits(&cfg.data_dir)?;
    let (model, ckpt) = model_from_checkpoint(cfg.model.clone(), RunOutput::checkpoint_path(&args.run_dir))?;
    let value = evaluate(&model, &test_set, cfg.train.batch_size)?;
    let diff = (value - ckpt.test_rel_l2).abs();
    println!("test_rel_l2 = {value:?}");
    println!("recorded_test_rel_l2 = {:?}", ckpt.test_rel_l2);
    println!("difference = {diff:e}");
    fs::write(
        args.run_dir.join("eval.txt"),
        format!("test_rel_l2 = {value:?}\nrecorded_test_rel_l2 = {:?}\ndifference = {diff:e}\n", ckpt.test_rel_l2),
    )?;
    Ok(())
}

fn check(args: ScanCheckArgs) -> Result<(), Error> {
    info!("scan-check max_size {} trials {} seed {}", args.max_size, args.trials, args.seed);
    let r = scan_check(args.max_size, args.trials, args.seed)?;
    let report = format!(
        "trials = {}\nparallel_vs_naive = {:e}\ntiled_vs_naive = {:e}\nscan2d_vs_manhattan = {:e}\nmax_deviation = {:e}\n",
        r.trials,
        r.parallel_vs_naive,
        r.tiled_vs_naive,
        r.scan2d_vs_manhattan,
        r.max_deviation()
    );
    print!("{report}");
    if let Some(path) = &args.out {
        fs::write(path, &report)?;
    }
    if r.max_deviation() > args.tolerance {
        return Err(Error::Numeric(format!("deviation {:e} exceeds {:e}", r.max_deviation(), args.tolerance)));
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Error> {
    let sizes: Vec<BenchSize> = args.sizes.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|v| match v.trim() {
            "tiled" => Ok(Variant::Tiled(args.tile)),
            other => other.parse(),
        })
        .collect::<Result<_, _>>()?;
    if args.tile == 0 {
        return Err(Error::Config("--tile must be at least 1".into()));
    }
    info!("bench sizes {sizes:?} variants {variants:?} seed {}", args.seed);
    let rows = bench_scan(&sizes, &variants, args.seed, &HeapProbe::new())?;
    let mut f = fs::File::create(&args.out)?;
    writeln!(f, "{CSV_HEADER}")?;
    println!("{CSV_HEADER}");
    for row in &rows {
        writeln!(f, "{}", row.csv_line())?;
        println!("{}", row.csv_line());
    }
    Ok(())
}
