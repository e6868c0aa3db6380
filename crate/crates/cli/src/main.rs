mod output;
mod settings;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use llsa::bench::{kv_backward_sweep, scaling_sweep, LevelChoice, Phase, SweepSpec};
use llsa::oracle::{finite_diff_check, FdOptions, FD_STEP};
use llsa::reorder::build_reorder;
use llsa::tensorio::{gen_random, read_tensor, Distribution};
use llsa::{FeatureMatrix, Llsa, ValidatedConfig};
use serde::Serialize;

use output::Format;
use settings::{parse_grid, ConfigArgs, Defaults, Settings};

#[derive(Parser)]
#[command(
    name = "llsa",
    version,
    about = "Log-linear sparse attention: verification and benchmarks"
)]
struct Cli {
    /// Worker threads (default: all hardware threads)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check forward, index transposition and backward against the oracles
    Verify(VerifyArgs),
    /// Compare the analytic backward with central finite differences
    Gradcheck(GradcheckArgs),
    /// Time select / forward / backward across sequence lengths
    Scaling(ScalingArgs),
    /// Per-token key/value backward time, transposed indices vs dense mask
    KvBackward(KvArgs),
    /// Print the 2D to 1D token order for an image grid
    ReorderDemo(ReorderArgs),
}

#[derive(Args)]
struct TensorArgs {
    /// FMAT file with queries (N x d); requires --k and --v
    #[arg(long, value_name = "FILE", requires_all = ["k", "v"])]
    q: Option<PathBuf>,
    /// FMAT file with keys
    #[arg(long, value_name = "FILE", requires = "q")]
    k: Option<PathBuf>,
    /// FMAT file with values
    #[arg(long, value_name = "FILE", requires = "q")]
    v: Option<PathBuf>,
    /// FMAT file with the output cotangent; generated from --seed if absent
    #[arg(long, value_name = "FILE", requires = "q")]
    d_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    tensors: TensorArgs,
    /// Number of seeded instances (seed, seed+1, ...) when no tensors are given
    #[arg(long, default_value_t = 3)]
    instances: u64,
    /// Write the Top-K tables of the first instance to this file
    #[arg(long, value_name = "FILE")]
    dump_selection: Option<PathBuf>,
    /// Print results as JSON
    #[arg(long)]
    json: bool,
    /// Test hook: corrupt one transposed index before checking
    #[arg(long, hide = true)]
    corrupt_index: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    tensors: TensorArgs,
    /// Central-difference step
    #[arg(long, default_value_t = FD_STEP as f64)]
    step: f64,
    /// Check every coordinate up to this many, otherwise sample this many
    #[arg(long, default_value_t = 4096)]
    max_coords: usize,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Print the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Top-K size (same as --top-k)
    #[arg(long = "k", value_name = "K")]
    k_alias: Option<usize>,
    /// Comma-separated sequence lengths
    #[arg(long)]
    n_grid: Option<String>,
    /// Timed repetitions per point (median reported)
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Untimed repetitions before timing
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Record format
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    out: Format,
    /// Write records here instead of stdout
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Sequence lengths for the dense-oracle timing (each at most 2048); empty to skip
    #[arg(long, default_value = "256,512,1024,2048")]
    dense_grid: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Mask,
    None,
}

#[derive(Args)]
struct KvArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Also time the dense-mask backward
    #[arg(long, value_enum, default_value_t = Baseline::Mask)]
    baseline: Baseline,
}

#[derive(Args)]
struct ReorderArgs {
    /// Image height in tokens
    #[arg(long, default_value_t = 4)]
    height: usize,
    /// Image width in tokens
    #[arg(long, default_value_t = 4)]
    width: usize,
    /// Block size; must be a perfect square
    #[arg(long, default_value_t = 4)]
    b: usize,
    /// Print the permutation as JSON
    #[arg(long)]
    json: bool,
}

const DEFAULT_GRID: &str = "8192,16384,32768,65536";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    set_threads(cli.threads)?;
    match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Scaling(a) => cmd_scaling(a),
        Command::KvBackward(a) => cmd_kv_backward(a),
        Command::ReorderDemo(a) => cmd_reorder(a),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(threads: Option<usize>) -> Result<()> {
    if threads.is_some_and(|t| t > 1) {
        eprintln!("warning: built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

/// Seeded instances, or the single instance given by files.
fn instances(
    settings: &mut Settings,
    tensors: &TensorArgs,
    count: u64,
    config_args: &ConfigArgs,
) -> Result<Vec<verify::Instance>> {
    if let (Some(q), Some(k), Some(v)) = (&tensors.q, &tensors.k, &tensors.v) {
        let (q, k, v) = (load(q)?, load(k)?, load(v)?);
        let (n, d) = (q.rows(), q.cols());
        if config_args.n.is_some_and(|x| x != n) || config_args.d.is_some_and(|x| x != d) {
            bail!("--n/--d disagree with the {n} x {d} query tensor");
        }
        settings.n = n;
        settings.d = d;
        let d_out = match &tensors.d_out {
            Some(p) => load(p)?,
            None => gen_random(n, d, settings.seed.wrapping_add(1 << 32), Distribution::StdNormal),
        };
        return Ok(vec![verify::Instance {
            label: "files".into(),
            q,
            k,
            v,
            d_out,
        }]);
    }
    let (n, d) = (settings.n, settings.d);
    Ok((0..count.max(1))
        .map(|i| {
            let seed = settings.seed.wrapping_add(i);
            let g = |j: u64| gen_random(n, d, seed.wrapping_mul(4).wrapping_add(j), Distribution::StdNormal);
            verify::Instance {
                label: format!("seed {seed}"),
                q: g(0),
                k: g(1),
                v: g(2),
                d_out: g(3),
            }
        })
        .collect())
}

fn load(path: &Path) -> Result<FeatureMatrix> {
    read_tensor(path).with_context(|| format!("loading {}", path.display()))
}

fn validated(settings: &Settings) -> Result<ValidatedConfig> {
    Ok(settings.config(settings.n, settings.d)?.validate()?)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let defaults = Defaults {
        n: 256,
        d: 16,
        b: 4,
        top_k: 2,
        levels: LevelChoice::Fixed(2),
    };
    let mut settings = a.config.resolve(defaults, &[])?;
    let insts = instances(&mut settings, &a.tensors, a.instances, &a.config)?;
    let cfg = validated(&settings)?;
    if let Some(path) = &a.dump_selection {
        let first = &insts[0];
        let llsa = Llsa::prepare(&first.q, &first.k, &first.v, &cfg)?;
        std::fs::write(path, llsa.selection.dump())?;
    }
    let results = verify::run(&cfg, &insts, a.corrupt_index)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if a.json {
        #[derive(Serialize)]
        struct Out<'a> {
            instances: Vec<&'a str>,
            checks: &'a [verify::CheckResult],
            passed: bool,
        }
        let out = Out {
            instances: insts.iter().map(|i| i.label.as_str()).collect(),
            checks: &results,
            passed: failed.is_empty(),
        };
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        let raw = cfg.raw();
        println!(
            "config: n={} d={} b={} k={} levels={} enrich={} mode={} ({} instance(s))",
            raw.n,
            raw.d,
            raw.block_size,
            raw.top_k,
            raw.levels,
            raw.enrich_levels,
            raw.reweight_mode.as_str(),
            insts.len()
        );
        for r in &results {
            println!(
                "{:<20} max error {:.3e}  tolerance {:.1e}  {}",
                r.name,
                r.max_error,
                r.tolerance,
                if r.passed { "ok" } else { "FAILED" }
            );
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verify failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let defaults = Defaults {
        n: 128,
        d: 8,
        b: 4,
        top_k: 2,
        levels: LevelChoice::Fixed(2),
    };
    let mut settings = a.config.resolve(defaults, &[])?;
    let inst = instances(&mut settings, &a.tensors, 1, &a.config)?.remove(0);
    let cfg = validated(&settings)?;
    let opts = FdOptions {
        step: a.step as llsa::Real,
        max_coordinates: a.max_coords,
        seed: settings.seed,
    };
    let report = finite_diff_check(&inst.q, &inst.k, &inst.v, &inst.d_out, &cfg, opts)?;
    let passed = report.max_rel_error <= a.tolerance;
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "max_rel_error": report.max_rel_error,
                "max_abs_error": report.max_abs_error,
                "worst_coordinate": {
                    "matrix": format!("{:?}", report.worst_coordinate.0),
                    "row": report.worst_coordinate.1,
                    "col": report.worst_coordinate.2,
                },
                "step": report.step,
                "coordinates_checked": report.coordinates_checked,
                "tolerance": a.tolerance,
                "passed": passed,
            })
        );
    } else {
        let (m, r, c) = report.worst_coordinate;
        println!(
            "checked {} coordinates with step {:e}: max relative error {:.3e} at {m:?}[{r}, {c}], max absolute error {:.3e}  {}",
            report.coordinates_checked,
            report.step,
            report.max_rel_error,
            report.max_abs_error,
            if passed { "ok" } else { "FAILED" }
        );
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Settings echoed into JSON reports.
#[derive(Serialize)]
struct SweepEcho<'a> {
    n_grid: &'a [usize],
    d: usize,
    b: usize,
    k: usize,
    levels: LevelChoice,
    enrich: Option<usize>,
    mode: llsa::ReweightMode,
    seed: u64,
    runs: usize,
    warmup: usize,
    threads: usize,
}

fn sweep_spec(a: &SweepArgs) -> Result<SweepSpec> {
    let defaults = Defaults {
        n: 0,
        d: 16,
        b: 16,
        top_k: 8,
        levels: LevelChoice::Auto,
    };
    let mut settings = a.config.resolve(defaults, &["n_grid"])?;
    if let Some(k) = a.k_alias {
        settings.top_k = k;
    }
    let grid = match (&a.n_grid, settings.extra.get("n_grid")) {
        (Some(g), _) | (None, Some(g)) => parse_grid(g)?,
        (None, None) if a.config.n.is_some() => vec![settings.n],
        (None, None) => parse_grid(DEFAULT_GRID)?,
    };
    let mut spec = SweepSpec::new(grid, settings.d, settings.b, settings.top_k);
    spec.levels = settings.levels;
    spec.enrich = settings.enrich;
    spec.mode = settings.mode;
    spec.seed = settings.seed;
    spec.runs = a.runs;
    spec.warmup = a.warmup;
    Ok(spec)
}

fn emit(a: &SweepArgs, spec: &SweepSpec, sweep: &llsa::bench::SweepOutput) -> Result<()> {
    for (n, reason) in &sweep.skipped {
        eprintln!("warning: skipping n={n}: {reason}");
    }
    let sink = output::sink(a.output.as_deref())?;
    match a.out {
        Format::Csv => output::write_csv(sink, &sweep.records)?,
        Format::Json => {
            let echo = SweepEcho {
                n_grid: &spec.n_grid,
                d: spec.d,
                b: spec.b,
                k: spec.k,
                levels: spec.levels,
                enrich: spec.enrich,
                mode: spec.mode,
                seed: spec.seed,
                runs: spec.runs,
                warmup: spec.warmup,
                threads: llsa::par::worker_count(),
            };
            output::write_json(sink, echo, sweep)?;
            println!();
        }
    }
    eprint!("{}", output::slope_summary(sweep));
    Ok(())
}

fn cmd_scaling(a: ScalingArgs) -> Result<ExitCode> {
    let spec = sweep_spec(&a.sweep)?;
    let dense = if a.dense_grid.trim().is_empty() {
        Vec::new()
    } else {
        parse_grid(&a.dense_grid)?
    };
    if let Some(&n) = dense.iter().find(|&&n| n > llsa::oracle::ORACLE_CAP) {
        bail!(
            "dense grid entry {n} exceeds the oracle cap {}",
            llsa::oracle::ORACLE_CAP
        );
    }
    let sweep = scaling_sweep(&spec, &dense)?;
    emit(&a.sweep, &spec, &sweep)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_kv_backward(a: KvArgs) -> Result<ExitCode> {
    let spec = sweep_spec(&a.sweep)?;
    let sweep = kv_backward_sweep(&spec, a.baseline == Baseline::Mask)?;
    emit(&a.sweep, &spec, &sweep)?;
    for phase in [Phase::BackwardKv, Phase::BackwardKvMask] {
        let per_token = sweep.per_token(phase);
        if per_token.is_empty() {
            continue;
        }
        let values: Vec<f64> = per_token.iter().map(|p| p.1).collect();
        let spread = values.iter().cloned().fold(f64::MIN, f64::max) / values.iter().cloned().fold(f64::MAX, f64::min);
        let cells: Vec<String> = per_token.iter().map(|(n, t)| format!("{n}:{t:.0}")).collect();
        eprintln!(
            "{:<17} ns/token {}  (max/min {spread:.2})",
            phase.as_str(),
            cells.join(" ")
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_reorder(a: ReorderArgs) -> Result<ExitCode> {
    let p = build_reorder(a.height, a.width, a.b)?;
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "height": a.height,
                "width": a.width,
                "block_size": a.b,
                "side": p.side(),
                "depth": p.depth(),
                "forward": p.forward(),
                "inverse": p.inverse(),
            })
        );
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "sequence position of each pixel (H={}, W={}, B={}, patch side {}, {} nested level(s)):",
        a.height,
        a.width,
        a.b,
        p.side(),
        p.depth()
    );
    let width = (a.height * a.width).saturating_sub(1).to_string().len();
    for r in 0..a.height {
        let row: Vec<String> = (0..a.width)
            .map(|c| format!("{:>width$}", p.inverse()[r * a.width + c]))
            .collect();
        println!("{}", row.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}
