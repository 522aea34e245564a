//! `ctf`: generate synthetic codebooks, calibrate thresholds, search,
//! evaluate and benchmark.
//!
//! Exit codes: 0 ok, 1 usage, 2 data or format error, 3 invariant violation.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctf_core::bench::{self, BenchmarkRecord, SyntheticSetup, DEFAULT_MAX_GALLERY_BYTES};
use ctf_core::dto::{DEFAULT_MAX_PAIRS, DEFAULT_SEED};
use ctf_core::{
    calibrate, evaluate, load_codebook, save_codebook, search_parallel, timed_search,
    ClassWeighting, CodeLengthSchedule, Error, EvalReport, FBetaConfig, FormulaMode, Rankings,
    SearchMode, SynthSpec, ThresholdSet,
};

#[derive(Parser)]
#[command(name = "ctf", version, about = "Coarse-to-fine binary code retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic gallery codebook and its query codebook.
    Gen(GenArgs),
    /// Fit distance thresholds on a validation codebook.
    Calibrate(CalibrateArgs),
    /// Rank a gallery for every query, by cascade or at a single level.
    Search(SearchArgs),
    /// Score rankings written by `search`.
    Eval(EvalArgs),
    /// Run a benchmark experiment and write CSV records.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Gallery codebook to write.
    #[arg(long)]
    out: PathBuf,
    /// Query codebook to write.
    #[arg(long)]
    queries_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    ids: usize,
    #[arg(long, default_value_t = bench::ITEMS_PER_ID)]
    items_per_id: usize,
    #[arg(long, default_value_t = 1)]
    queries_per_id: usize,
    #[arg(long, default_value_t = 6)]
    cams: usize,
    /// Code lengths, shortest first.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Bit flip probability per level, shortest first.
    #[arg(long, value_delimiter = ',')]
    flip: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_GALLERY_BYTES)]
    max_gallery_bytes: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Formula {
    Derived,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weighting {
    PairCounts,
    Equal,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Validation codebook.
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = Formula::Derived)]
    formula: Formula,
    #[arg(long, value_enum, default_value_t = Weighting::PairCounts)]
    class_weighting: Weighting,
    /// Cap on sampled pairs per class.
    #[arg(long, default_value_t = DEFAULT_MAX_PAIRS)]
    max_pairs: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Threshold file to write; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Gallery codebook.
    #[arg(long)]
    codebook: PathBuf,
    /// Query codebook.
    #[arg(long)]
    queries: PathBuf,
    /// Threshold file; runs the cascade.
    #[arg(long, conflicts_with = "level", required_unless_present = "level")]
    thresholds: Option<PathBuf>,
    /// Rank the whole gallery at this level (1-based) instead.
    #[arg(long)]
    level: Option<usize>,
    /// Spread queries over worker threads. Timings then include contention.
    #[arg(long)]
    parallel: bool,
    /// Rankings file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Gallery codebook.
    #[arg(long)]
    codebook: PathBuf,
    /// Query codebook.
    #[arg(long)]
    queries: PathBuf,
    /// Rankings written by `search`.
    #[arg(long)]
    rankings: PathBuf,
    /// CMC ranks kept in the report.
    #[arg(long, default_value_t = 100)]
    cmc_depth: usize,
    /// Report file to write; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    SortScaling,
    DistanceKernels,
    GalleryScaling,
    BetaSweep,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    kind: BenchKind,
    /// Gallery sizes. Defaults: 10^4,10^5,10^6 (sort and gallery scaling), 10^5 (beta sweep).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Code lengths for the distance kernels.
    #[arg(long, value_delimiter = ',', default_value = "32,128,512,2048")]
    lengths: Vec<usize>,
    /// Code length whose distances are sorted.
    #[arg(long, default_value_t = 2048)]
    sort_length: usize,
    /// Gallery items for the distance kernels.
    #[arg(long, default_value_t = 10_000)]
    kernel_items: usize,
    /// Timing repetitions.
    #[arg(long, default_value_t = 9)]
    reps: usize,
    /// Queries per synthetic gallery.
    #[arg(long, default_value_t = 200)]
    n_queries: usize,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    beta: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,2,10", value_parser = positive)]
    betas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_GALLERY_BYTES)]
    max_gallery_bytes: u64,
    /// CSV file to write; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} is not a positive number")),
        Err(e) => Err(e.to_string()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::Json(_)
        | Error::Csv(_) => 2,
        _ => 3,
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<(), Error> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn gen(a: GenArgs) -> Result<(), Error> {
    let mut spec = SynthSpec::standard(a.ids, a.items_per_id, a.seed);
    spec.queries_per_id = a.queries_per_id;
    spec.cams = a.cams;
    if let Some(l) = a.lengths {
        spec.schedule = CodeLengthSchedule::new(l)?;
    }
    if let Some(f) = a.flip {
        spec.flip_prob_per_level = f;
    } else if spec.schedule.levels() != spec.flip_prob_per_level.len() {
        return Err(Error::InvalidInput(
            "--flip is required when --lengths does not have four levels".into(),
        ));
    }
    bench::check_gallery_bytes(&spec, a.max_gallery_bytes)?;
    let (gallery, queries) = ctf_core::generate(&spec)?;
    save_codebook(&gallery, &a.out)?;
    if let Some(q) = a.queries_out {
        save_codebook(&queries, q)?;
    }
    log::info!(
        "{} gallery items, {} queries, lengths {:?}",
        gallery.n_items(),
        queries.n_items(),
        gallery.schedule.lengths()
    );
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<(), Error> {
    let validation = load_codebook(&a.codebook)?;
    let cfg = FBetaConfig {
        beta: a.beta,
        formula_mode: match a.formula {
            Formula::Derived => FormulaMode::Derived,
            Formula::Paper => FormulaMode::PaperVerbatim,
        },
        class_weighting: match a.class_weighting {
            Weighting::PairCounts => ClassWeighting::PairCounts,
            Weighting::Equal => ClassWeighting::Equal,
        },
    };
    let t = calibrate(&validation, &cfg, a.max_pairs, a.seed)?;
    log::info!("thresholds {:?} for lengths {:?}", t.thresholds, t.lengths);
    match a.out {
        Some(p) => t.save_json(p),
        None => write_json(&t, None),
    }
}

fn search(a: SearchArgs) -> Result<(), Error> {
    let gallery = load_codebook(&a.codebook)?;
    let queries = load_codebook(&a.queries)?;
    let mode = match (a.thresholds, a.level) {
        (Some(p), _) => SearchMode::Cascade(ThresholdSet::load_json(p)?),
        (None, Some(level)) => SearchMode::Full { level },
        (None, None) => unreachable!("clap requires one of them"),
    };
    let results = if a.parallel {
        search_parallel(&queries, &gallery, &mode)?
    } else {
        timed_search(&queries, &gallery, &mode)?
    };
    Rankings {
        mode,
        gallery_size: gallery.n_items(),
        lengths: gallery.schedule.lengths().to_vec(),
        parallel: a.parallel,
        results,
    }
    .save_json(&a.out)
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let gallery = load_codebook(&a.codebook)?;
    let queries = load_codebook(&a.queries)?;
    let rankings = Rankings::load_json(&a.rankings)?;
    rankings.check(&queries, &gallery)?;
    if rankings.parallel {
        log::warn!("rankings were produced in parallel; timings include contention");
    }
    let outcome = evaluate(
        &rankings.results,
        &gallery,
        &queries.person_ids,
        &queries.camera_ids,
    )?;
    let thresholds = match &rankings.mode {
        SearchMode::Cascade(t) => Some(t),
        SearchMode::Full { .. } => None,
    };
    let report = EvalReport::new(&outcome, &gallery, thresholds, a.cmc_depth);
    write_json(&report, a.out.as_deref())
}

fn bench_cmd(a: BenchArgs) -> Result<(), Error> {
    let records: Vec<BenchmarkRecord> = match a.kind {
        BenchKind::SortScaling => {
            let sizes = a.sizes.unwrap_or_else(|| vec![10_000, 100_000, 1_000_000]);
            bench::sort_scaling(&sizes, a.sort_length, a.reps, a.seed).records
        }
        BenchKind::DistanceKernels => {
            bench::distance_kernels(&a.lengths, a.kernel_items, a.reps, a.seed)?.1
        }
        BenchKind::GalleryScaling => {
            let sizes = a.sizes.unwrap_or_else(|| vec![10_000, 100_000, 1_000_000]);
            bench::gallery_scaling(&sizes, a.n_queries, a.beta, a.seed, a.max_gallery_bytes)?.1
        }
        BenchKind::BetaSweep => {
            let mut records = Vec::new();
            for size in a.sizes.unwrap_or_else(|| vec![100_000]) {
                let setup = SyntheticSetup::new(size, a.n_queries, a.seed, a.max_gallery_bytes)?;
                records.extend(bench::beta_sweep(&setup, &a.betas)?.1);
            }
            records
        }
    };
    bench::write_csv(&records, output(a.out.as_deref())?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
