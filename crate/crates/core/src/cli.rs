//! Command-line front end: signature generation, training, sweeps and the
//! operation-count audit.
//!
//! Every subcommand accepts `--config FILE` with `key = value` lines; keys
//! are long flag names (`batch-size` or `batch_size`). Flags given on the
//! command line take precedence over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::{error, info};

use crate::channel::Noise;
use crate::detect_bp::BpConfig;
use crate::detect_pg::{DetectorParams, INITIAL_ALPHA, INITIAL_GAMMA};
use crate::error::{Error, Result};
use crate::harness::{audit_csv, audit_op_counts, format_audit, run_sweep, Budget, DetectorKind, SweepSpec};
use crate::rng::sub_seed;
use crate::signature::{gallager_mask, random_pm1_weights, SignatureMatrix};
use crate::train::{incremental_train, joint_parameter_count, joint_train, AdamConfig, NormGrad, TrainConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SCDMA_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "scdma", version, about = "Sparse CDMA multiuser detection experiments")]
struct Cli {
    /// Read `key = value` defaults from this file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads; 1 gives byte-identical reruns.
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    threads: usize,

    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a random sparse signature matrix with ±1 weights.
    GenSignature(GenSignatureArgs),
    /// Train the STPG step sizes and softness at one or more SNRs.
    Train(TrainArgs),
    /// Jointly learn the signature weights and the STPG parameters.
    JointTrain(JointTrainArgs),
    /// Monte-Carlo BER sweep over SNR points.
    Sweep(SweepArgs),
    /// Closed-form and instrumented operation counts per iteration.
    AuditOps(AuditArgs),
}

#[derive(Debug, Clone, Args)]
struct SystemArgs {
    /// Number of users.
    #[arg(long, default_value_t = 120)]
    n: usize,
    /// Signature length (chips).
    #[arg(long, default_value_t = 120)]
    m: usize,
    /// Nonzeros per chip row.
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Load the signature matrix from a file instead of generating one.
    #[arg(long, value_name = "FILE")]
    signature: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct OptimArgs {
    /// Unrolled detector depth T.
    #[arg(long, default_value_t = 10)]
    depth: usize,
    /// Mini-batches per generation.
    #[arg(long, default_value_t = 100)]
    batches: usize,
    /// Samples per mini-batch.
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    /// Refuse runs with more than this many depth*batches*batch_size samples.
    #[arg(long, default_value_t = 1_000_000_000)]
    sample_budget: u64,
}

#[derive(Debug, Args)]
struct GenSignatureArgs {
    #[arg(long, default_value_t = 120)]
    n: usize,
    #[arg(long, default_value_t = 120)]
    m: usize,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Weights of the nonzero entries.
    #[arg(long, value_enum, default_value_t = WeightKind::Pm1)]
    weights: WeightKind,
    /// Output file [default: <out-dir>/signature.txt].
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightKind {
    Pm1,
    Ones,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Training SNR points in dB; one checkpoint per point.
    #[arg(long, value_delimiter = ',', default_values_t = [8.0, 9.0, 10.0, 11.0, 12.0])]
    snr_db: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory receiving `stpg_<snr>dB.txt` checkpoints and the manifest.
    #[arg(long, env = OUT_DIR_ENV, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct JointTrainArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 8.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Hold y fixed when differentiating the signature weights.
    #[arg(long)]
    no_channel_gradient: bool,
    /// Treatment of the Frobenius rescaling in the weight gradient.
    #[arg(long, value_enum, default_value_t = NormGradArg::Projected)]
    norm_grad: NormGradArg,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormGradArg {
    Projected,
    Differentiated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectorArg {
    Pg,
    Stpg,
    Bp,
    Ml,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [8.0, 9.0, 10.0, 11.0, 12.0])]
    snr_db: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [DetectorArg::Pg, DetectorArg::Bp])]
    detectors: Vec<DetectorArg>,
    /// Directory holding `stpg_<snr>dB.txt` checkpoints (needed for stpg).
    #[arg(long, value_name = "DIR")]
    checkpoints: Option<PathBuf>,
    /// Constant PG step size.
    #[arg(long, default_value_t = INITIAL_GAMMA)]
    pg_gamma: f64,
    /// Constant PG softness.
    #[arg(long, default_value_t = INITIAL_ALPHA)]
    pg_alpha: f64,
    /// PG iterations.
    #[arg(long, default_value_t = 10)]
    pg_depth: usize,
    #[arg(long, default_value_t = 30)]
    bp_iterations: usize,
    #[arg(long, default_value_t = 50.0)]
    llr_clip: f64,
    #[arg(long, default_value_t = 100_000)]
    min_bits: u64,
    #[arg(long, default_value_t = 100)]
    min_errors: u64,
    #[arg(long, default_value_t = 10_000_000)]
    max_bits: u64,
    /// Samples per channel batch.
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Drop the channel noise.
    #[arg(long)]
    noiseless: bool,
    /// Record wall-clock seconds in the CSV (not reproducible).
    #[arg(long)]
    time: bool,
    /// Output CSV [default: <out-dir>/sweep.csv].
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long, default_value_t = 1200)]
    n: usize,
    #[arg(long, default_value_t = 1200)]
    m: usize,
    /// One or more row weights.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 6])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the audit as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(&args) {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    init_logging(cli.verbose);

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}{}", flag_hint(&e));
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn flag_hint(e: &Error) -> &'static str {
    match e {
        Error::NonIntegerColumnWeight { .. } => " (adjust --k, --m or --n)",
        Error::InvalidSnr(_) => " (check --snr-db)",
        _ => "",
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
}

fn parse(args: &[OsString]) -> std::result::Result<Cli, i32> {
    let first = Cli::try_parse_from(args).map_err(report_clap)?;
    let Some(path) = first.config.clone() else {
        return Ok(first);
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read config file {}: {e}", path.display());
            return Err(2);
        }
    };
    let entries = match parse_config(&text) {
        Ok(entries) => entries,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return Err(2);
        }
    };
    let merged = inject_config(args, &entries);
    Cli::try_parse_from(&merged).map_err(report_clap)
}

fn report_clap(e: clap::Error) -> i32 {
    let _ = e.print();
    e.exit_code()
}

/// Parses `key = value` lines; `#` starts a comment.
fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(Error::parse(i + 1, format!("invalid key `{}`", key)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Inserts config entries right after the subcommand, skipping keys already
/// present on the command line. `true`/`false` values toggle switches.
fn inject_config(args: &[OsString], entries: &[(String, String)]) -> Vec<OsString> {
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let position = args
        .iter()
        .skip(1)
        .position(|a| names.iter().any(|n| a.to_str() == Some(n)))
        .map(|p| p + 2)
        .unwrap_or(args.len());
    let explicit = |key: &str| {
        let flag = format!("--{key}");
        args.iter().any(|a| {
            a.to_str()
                .is_some_and(|s| s == flag || s.starts_with(&format!("{flag}=")))
        })
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        if explicit(key) {
            continue;
        }
        match value.as_str() {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => injected.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let mut merged = args[..position].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&args[position..]);
    merged
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenSignature(args) => gen_signature(args),
        Command::Train(args) => train(args),
        Command::JointTrain(args) => joint(args),
        Command::Sweep(args) => sweep(args),
        Command::AuditOps(args) => audit(args),
    }
}

/// Signature generated from `seed`: the mask uses `seed`, the ±1 weights a
/// derived stream.
pub fn generate_signature(m: usize, n: usize, k: usize, seed: u64) -> Result<SignatureMatrix> {
    let mask = Arc::new(gallager_mask(m, n, k, seed)?);
    Ok(random_pm1_weights(mask, sub_seed(seed, 1)))
}

/// Checkpoint file name for an SNR point.
pub fn checkpoint_name(snr_db: f64) -> String {
    format!("stpg_{snr_db}dB.txt")
}

fn load_or_generate(system: &SystemArgs, seed: u64) -> Result<(SignatureMatrix, bool)> {
    match &system.signature {
        Some(path) => {
            let a = SignatureMatrix::from_text(&read(path)?)?;
            if (a.n(), a.m(), a.k()) != (system.n, system.m, system.k) {
                info!(
                    "signature file {} overrides --n/--m/--k with {}x{} k={}",
                    path.display(),
                    a.m(),
                    a.n(),
                    a.k()
                );
            }
            Ok((a, false))
        }
        None => Ok((generate_signature(system.m, system.n, system.k, seed)?, true)),
    }
}

fn train_config(optim: &OptimArgs, snr_db: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        depth: optim.depth,
        batches: optim.batches,
        batch_size: optim.batch_size,
        adam: AdamConfig {
            lr: optim.lr,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
        },
        snr_db,
        joint: false,
        seed,
        sample_budget: optim.sample_budget,
        ..TrainConfig::default()
    }
}

fn optim_manifest(out: &mut String, cfg: &TrainConfig) {
    let _ = writeln!(out, "depth = {}", cfg.depth);
    let _ = writeln!(out, "batches = {}", cfg.batches);
    let _ = writeln!(out, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(out, "lr = {:?}", cfg.adam.lr);
    let _ = writeln!(out, "beta1 = {:?}", cfg.adam.beta1);
    let _ = writeln!(out, "beta2 = {:?}", cfg.adam.beta2);
    let _ = writeln!(out, "eps = {:?}", cfg.adam.eps);
    let _ = writeln!(out, "seed = {}", cfg.seed);
}

fn gen_signature(args: GenSignatureArgs) -> Result<()> {
    let a = match args.weights {
        WeightKind::Pm1 => generate_signature(args.m, args.n, args.k, args.seed)?,
        WeightKind::Ones => SignatureMatrix::ones(Arc::new(gallager_mask(args.m, args.n, args.k, args.seed)?)),
    };
    let out = args.out.unwrap_or_else(|| args.out_dir.join("signature.txt"));
    write_atomic(&out, &a.to_text())?;
    info!("wrote {}x{} signature to {}", a.m(), a.n(), out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (a, generated) = load_or_generate(&args.system, args.seed)?;
    if args.snr_db.is_empty() {
        return Err(Error::Config("--snr-db needs at least one value".into()));
    }
    let dir = &args.out_dir;
    if generated {
        write_atomic(&dir.join("signature.txt"), &a.to_text())?;
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "command = train");
    let _ = writeln!(manifest, "n = {}", a.n());
    let _ = writeln!(manifest, "m = {}", a.m());
    let _ = writeln!(manifest, "k = {}", a.k());
    let _ = writeln!(
        manifest,
        "signature = {}",
        args.system
            .signature
            .as_ref()
            .map_or_else(|| "signature.txt".to_string(), |p| p.display().to_string())
    );
    optim_manifest(&mut manifest, &train_config(&args.optim, 0.0, args.seed));
    for &snr in &args.snr_db {
        let cfg = train_config(&args.optim, snr, args.seed);
        let report = incremental_train(&a, &cfg)?;
        let name = checkpoint_name(snr);
        write_atomic(&dir.join(&name), &report.params.to_text())?;
        let _ = writeln!(
            manifest,
            "checkpoint[{snr}] = {name}; final_loss {:?}",
            report.losses.last().copied().unwrap_or(f64::NAN)
        );
        info!("trained at {snr} dB -> {name}");
    }
    write_atomic(&dir.join("train_manifest.txt"), &manifest)
}

fn joint(args: JointTrainArgs) -> Result<()> {
    let (seed_sig, _) = load_or_generate(&args.system, args.seed)?;
    let mask = seed_sig.shared_mask();
    let cfg = TrainConfig {
        joint: true,
        channel_gradient: !args.no_channel_gradient,
        norm_grad: match args.norm_grad {
            NormGradArg::Projected => NormGrad::Projected,
            NormGradArg::Differentiated => NormGrad::Differentiated,
        },
        ..train_config(&args.optim, args.snr_db, args.seed)
    };
    let report = joint_train(Arc::clone(&mask), &cfg)?;
    let dir = &args.out_dir;
    let snr = args.snr_db;
    let sig_name = format!("joint_signature_{snr}dB.txt");
    write_atomic(&dir.join(&sig_name), &report.signature.to_text())?;
    write_atomic(&dir.join(checkpoint_name(snr)), &report.params.to_text())?;

    let mut losses = String::from("generation,batch,loss\n");
    for (i, loss) in report.losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{},{loss:?}", i / cfg.batches + 1, i % cfg.batches);
    }
    write_atomic(&dir.join(format!("joint_losses_{snr}dB.csv")), &losses)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "command = joint-train");
    let _ = writeln!(manifest, "n = {}", mask.n());
    let _ = writeln!(manifest, "m = {}", mask.m());
    let _ = writeln!(manifest, "k = {}", mask.k());
    let _ = writeln!(manifest, "snr_db = {snr}");
    optim_manifest(&mut manifest, &cfg);
    let _ = writeln!(manifest, "channel_gradient = {}", cfg.channel_gradient);
    let _ = writeln!(manifest, "norm_grad = {:?}", cfg.norm_grad);
    let _ = writeln!(
        manifest,
        "trainable_parameters = {}",
        joint_parameter_count(&mask, cfg.depth)
    );
    let _ = writeln!(manifest, "signature = {sig_name}");
    let _ = writeln!(manifest, "checkpoint = {}", checkpoint_name(snr));
    let _ = writeln!(
        manifest,
        "final_loss = {:?}",
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    write_atomic(&dir.join(format!("joint_manifest_{snr}dB.txt")), &manifest)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (a, _) = load_or_generate(&args.system, args.seed)?;
    let mut detectors = Vec::new();
    for d in &args.detectors {
        let kind = match d {
            DetectorArg::Pg => DetectorKind::Pg {
                gamma: args.pg_gamma,
                alpha: args.pg_alpha,
                depth: args.pg_depth,
            },
            DetectorArg::Stpg => DetectorKind::Stpg,
            DetectorArg::Bp => DetectorKind::Bp(BpConfig {
                iterations: args.bp_iterations,
                llr_clip: args.llr_clip,
            }),
            DetectorArg::Ml => DetectorKind::Ml,
        };
        if !detectors.contains(&kind) {
            detectors.push(kind);
        }
    }
    let mut spec = SweepSpec::new(a.n(), a.m(), a.k(), args.snr_db.clone(), detectors);
    spec.budget = Budget {
        min_bits: args.min_bits,
        min_errors: args.min_errors,
        max_bits: args.max_bits,
    };
    spec.batch_size = args.batch_size;
    spec.seed = args.seed;
    spec.noise = if args.noiseless { Noise::Noiseless } else { Noise::Awgn };
    spec.record_time = args.time;
    if spec.detectors.contains(&DetectorKind::Stpg) {
        spec.stpg_params = load_checkpoints(args.checkpoints.as_deref(), &args.snr_db)?;
    }
    spec.validate()?;

    let result = run_sweep(&a, &spec)?;
    let out = args.out.unwrap_or_else(|| args.out_dir.join("sweep.csv"));
    write_atomic(&out, &result.to_csv())?;
    let mut manifest = String::from("command = sweep\n");
    if let Some(path) = &args.system.signature {
        let _ = writeln!(manifest, "signature = {}", path.display());
    }
    manifest.push_str(&spec.manifest());
    write_atomic(&out.with_extension("manifest.txt"), &manifest)?;
    let exhausted = result.rows.iter().filter(|r| r.exhausted).count();
    if exhausted > 0 {
        info!("{exhausted} sweep points stopped at the bit cap before reaching the error target");
    }
    Ok(())
}

fn load_checkpoints(dir: Option<&Path>, snrs: &[f64]) -> Result<BTreeMap<i64, DetectorParams>> {
    let mut out = BTreeMap::new();
    for &snr in snrs {
        let Some(dir) = dir else {
            return Err(Error::MissingCheckpoint { snr_db: snr });
        };
        let path = dir.join(checkpoint_name(snr));
        if !path.exists() {
            return Err(Error::MissingCheckpoint { snr_db: snr });
        }
        out.insert(crate::harness::snr_key(snr), DetectorParams::from_text(&read(&path)?)?);
    }
    Ok(out)
}

fn audit(args: AuditArgs) -> Result<()> {
    let audits = args
        .k
        .iter()
        .map(|&k| audit_op_counts(args.n, args.m, k, args.seed))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", format_audit(&audits));
    if let Some(path) = &args.csv {
        write_atomic(path, &audit_csv(&audits))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
