//! Command-line surface of the toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 pipeline
//! or training failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use dsee_core::accounting::{delta_histogram, Histogram};
use dsee_core::archive::{
    merged_model, model_from_archive, model_to_archive, write_atomic, Tensor, TensorArchive,
};
use dsee_core::decompose::{
    extract_support, select_support, solve_slr, SupportMethod, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use dsee_core::linalg::{DenseMatrix, Rng};
use dsee_core::pipeline::{plan_budget, pretrain_dense, run_dsee, PipelineConfig};

/// Environment variable that replaces the seed of any command.
pub const SEED_ENV: &str = "DSEE_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dsee_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use dsee_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Pipeline(_) | E::Training(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(dsee_core::Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    )))
}

#[derive(Debug, Parser)]
#[command(
    name = "dsee",
    version,
    about = "Sparse plus low-rank fine-tuning with pruned hosts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Decompose,
    Magnitude,
    Random,
}

impl From<MethodArg> for SupportMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Decompose => SupportMethod::Decompose,
            MethodArg::Magnitude => SupportMethod::Magnitude,
            MethodArg::Random => SupportMethod::Random,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split every matching matrix into low-rank plus sparse parts and record the sparse support.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        card: usize,
        #[arg(long, value_enum, default_value = "decompose")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Only process tensors whose name contains this string.
        #[arg(long = "match")]
        pattern: Option<String>,
    },
    /// Write the parameter and FLOPs budget of a configuration without training.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dense host on the source task.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three fine-tuning stages on a pretrained host.
    Dsee {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Histogram of weight changes between two archives.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        /// Histogram range as `LO,HI`; values outside fall into the edge bins.
        #[arg(long, value_parser = parse_range)]
        range: Option<(f64, f64)>,
        /// Also write gnuplot-ready `center count` columns here.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
        /// Only compare tensors whose name contains this string.
        #[arg(long = "match")]
        pattern: Option<String>,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(format!("invalid range {lo},{hi}"));
    }
    Ok((lo, hi))
}

/// Parses `args` (including the program name) and runs the command.
/// Diagnostics go to standard error; the return value is the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, std::env::var(SEED_ENV).ok().as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn seed_override(env: Option<&str>) -> Result<Option<u64>, CliError> {
    env.map(|s| {
        s.trim().parse().map_err(|_| {
            CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))
        })
    })
    .transpose()
}

/// Runs one command; `seed_env` is the value of [`SEED_ENV`], if set.
pub fn run(command: Command, seed_env: Option<&str>) -> Result<(), CliError> {
    let seed = seed_override(seed_env)?;
    match command {
        Command::Decompose {
            input,
            rank,
            card,
            method,
            seed: s,
            out,
            pattern,
        } => decompose(
            &input,
            rank,
            card,
            method.into(),
            seed.unwrap_or(s),
            &out,
            pattern.as_deref(),
        ),
        Command::Plan { config, out } => {
            let cfg = load_config(&config, seed)?;
            write_json(&out, &plan_budget(&cfg)?)
        }
        Command::Pretrain { config, out } => {
            let cfg = load_config(&config, seed)?;
            let (model, _) = pretrain_dense(&cfg)?;
            model_to_archive(&model)?.write(&out)?;
            Ok(())
        }
        Command::Dsee {
            config,
            pretrained,
            out_dir,
        } => dsee(&config, &pretrained, &out_dir, seed),
        Command::Report {
            before,
            after,
            bins,
            out,
            range,
            gnuplot,
            pattern,
        } => report(
            &before,
            &after,
            bins,
            range,
            &out,
            gnuplot.as_deref(),
            pattern.as_deref(),
        ),
    }
}

/// Reads a pipeline configuration, applying the seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| dsee_core::Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(dsee_core::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn matrix(name: &str, t: &Tensor) -> Option<Result<DenseMatrix, CliError>> {
    match t.shape() {
        &[r, c] if t.dtype() == dsee_core::archive::Dtype::F32 => Some(
            t.to_f32()
                .and_then(|v| DenseMatrix::new(r, c, v))
                .map_err(|e| CliError::Core(dsee_core::Error::Format(format!("{name}: {e}")))),
        ),
        _ => None,
    }
}

fn support_tensor(indices: &[(usize, usize)]) -> Result<Tensor, CliError> {
    let flat: Vec<i64> = indices
        .iter()
        .flat_map(|&(i, j)| [i as i64, j as i64])
        .collect();
    Ok(Tensor::from_i64(vec![indices.len(), 2], &flat)?)
}

fn decompose(
    input: &Path,
    rank: usize,
    card: usize,
    method: SupportMethod,
    seed: u64,
    out: &Path,
    pattern: Option<&str>,
) -> Result<(), CliError> {
    let src = TensorArchive::read(input)?;
    let mut dst = TensorArchive::new();
    dst.meta.insert("kind".into(), "dsee-decomposition".into());
    dst.meta.insert("method".into(), method.to_string());
    dst.meta.insert("rank".into(), rank.to_string());
    dst.meta.insert("card".into(), card.to_string());
    dst.meta.insert("seed".into(), seed.to_string());
    let root = Rng::new(seed);
    let mut processed = 0;
    for (name, t) in src.tensors() {
        if pattern.is_some_and(|p| !name.contains(p)) {
            continue;
        }
        let Some(w) = matrix(name, t) else { continue };
        let w = w?;
        let mut rng = root.fork(name);
        let support = match method {
            SupportMethod::Decompose => {
                let res = solve_slr(&w, rank, card, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut rng)?;
                dst.meta.insert(
                    format!("{name}.relative_residual"),
                    res.relative_residual(&w).to_string(),
                );
                dst.meta.insert(
                    format!("{name}.iterations"),
                    res.residual_history.len().to_string(),
                );
                dst.insert(
                    format!("{name}.u"),
                    Tensor::from_f32(vec![res.u.rows(), res.u.cols()], res.u.as_slice())?,
                )?;
                dst.insert(
                    format!("{name}.v"),
                    Tensor::from_f32(vec![res.v.rows(), res.v.cols()], res.v.as_slice())?,
                )?;
                dst.insert(
                    format!("{name}.s"),
                    Tensor::from_f32(vec![res.s.rows(), res.s.cols()], res.s.as_slice())?,
                )?;
                extract_support(&res.s, card)?
            }
            other => select_support(&w, other, card, rank, &mut rng)?,
        };
        dst.insert(
            format!("{name}.support"),
            support_tensor(support.indices())?,
        )?;
        processed += 1;
    }
    if processed == 0 {
        return Err(dsee_core::Error::Input(format!(
            "no f32 matrix in {} matches",
            input.display()
        ))
        .into());
    }
    dst.write(out)?;
    Ok(())
}

/// Tensors describing the pruning state and supports of a model.
fn mask_archive(full: &TensorArchive) -> Result<TensorArchive, CliError> {
    let mut a = TensorArchive::new();
    a.meta = full.meta.clone();
    a.meta.insert("kind".into(), "dsee-masks".into());
    for (name, t) in full.tensors() {
        let keep = [".mask", ".support", ".kept_heads", ".kept_units"];
        if keep.iter().any(|s| name.ends_with(s)) {
            a.insert(name, t.clone())?;
        }
    }
    Ok(a)
}

fn dsee(
    config: &Path,
    pretrained: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let host = model_from_archive(&TensorArchive::read(pretrained)?)?;
    let outcome = run_dsee(&cfg, &host)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let final_archive = model_to_archive(&outcome.model)?;
    write_json(&out_dir.join("config.json"), &cfg)?;
    write_json(&out_dir.join("stage_reports.json"), &outcome.reports)?;
    write_json(&out_dir.join("budget.json"), &outcome.budget)?;
    mask_archive(&final_archive)?.write(&out_dir.join("masks.dsee"))?;
    final_archive.write(&out_dir.join("final.dsee"))?;
    model_to_archive(&merged_model(&outcome.model)?)?.write(&out_dir.join("merged.dsee"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct HistogramReport {
    #[serde(flatten)]
    histogram: Histogram,
    total: u64,
    tensors: Vec<String>,
    skipped: Vec<String>,
}

fn report(
    before: &Path,
    after: &Path,
    bins: usize,
    range: Option<(f64, f64)>,
    out: &Path,
    gnuplot: Option<&Path>,
    pattern: Option<&str>,
) -> Result<(), CliError> {
    let a = TensorArchive::read(before)?;
    let b = TensorArchive::read(after)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut tensors, mut skipped) = (Vec::new(), Vec::new());
    for (name, t) in a.tensors() {
        if pattern.is_some_and(|p| !name.contains(p)) || t.dtype() != dsee_core::archive::Dtype::F32
        {
            continue;
        }
        match b.get(name) {
            Some(u) if u.dtype() == t.dtype() && u.shape() == t.shape() => {
                xs.extend(t.to_f32()?);
                ys.extend(u.to_f32()?);
                tensors.push(name.to_string());
            }
            _ => skipped.push(name.to_string()),
        }
    }
    if xs.is_empty() {
        return Err(dsee_core::Error::Input(
            "the archives share no f32 tensor of equal shape".into(),
        )
        .into());
    }
    let n = xs.len();
    let hist = delta_histogram(
        &DenseMatrix::new(1, n, xs)?,
        &DenseMatrix::new(1, n, ys)?,
        bins,
        range,
    )?;
    if let Some(path) = gnuplot {
        write_atomic(path, hist.to_columns().as_bytes())?;
    }
    write_json(
        out,
        &HistogramReport {
            total: hist.total(),
            histogram: hist,
            tensors,
            skipped,
        },
    )
}
