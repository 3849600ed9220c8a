use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lrshare::analysis::{
    measure_similarity, published_references, similarity_csv, verify_cosine_bound, BoundReport,
    PerturbationMode, SimilarityReport,
};
use lrshare::attention::{fuzz_kernel, FuzzReport};
use lrshare::engine::{Model, ModelConfig};
use lrshare::traces::{
    csv_row, generate_trace, markdown_tables, run_trace, token_id, ReportCell, RunMode, RunOptions,
    CSV_HEADER,
};
use lrshare::{Dtype, Scalar};

mod config;

use config::{resolve, resolve_schemes, CommonArgs, Format, ModelSource, Resolved};

/// Largest closed-form deviation accepted for the `zero_delta` and
/// `equal_energy` bound modes.
const CLOSED_FORM_TOL: f64 = 1e-12;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files. Exit 2.
    Usage(String),
    /// A check ran and failed. Exit 1.
    Verification(String),
}

impl From<lrshare::Error> for CliError {
    fn from(e: lrshare::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "lrshare",
    version,
    about = "Multi-LoRA KV-cache sharing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the blocked low-rank attention kernel against the reference
    /// on random shapes.
    KernelFuzz {
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the agent trace under each scheme and context length.
    RunTrace {
        /// Schemes, comma separated (NonShared, FullShared, SelectiveRecompute,
        /// BaseShared, BaseLRShared).
        #[arg(long, value_delimiter = ',')]
        scheme: Vec<String>,
        /// Context lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        lctx: Vec<usize>,
        /// Layers recomputed by SelectiveRecompute, comma separated.
        #[arg(long, value_delimiter = ',')]
        recompute_layers: Vec<usize>,
        /// `execute` runs the model; `account` replays the plans with
        /// closed-form counts (same counters, no activations).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cosine bound check and cache similarity measurement.
    Analyze {
        #[arg(value_enum, default_value = "all")]
        what: AnalyzeWhat,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, value_enum)]
        perturbation: Option<PerturbationArg>,
        /// Number of token samples for the similarity measurement.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        sample_tokens: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a generated model to a file usable with `--model`.
    InitModel {
        /// Destination file.
        path: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Execute,
    Account,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalyzeWhat {
    Bound,
    Similarity,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PerturbationArg {
    Random,
    ZeroDelta,
    EqualEnergy,
}

impl From<PerturbationArg> for PerturbationMode {
    fn from(p: PerturbationArg) -> Self {
        match p {
            PerturbationArg::Random => PerturbationMode::Random,
            PerturbationArg::ZeroDelta => PerturbationMode::ZeroDelta,
            PerturbationArg::EqualEnergy => PerturbationMode::EqualEnergy,
        }
    }
}

/// Common report header; everything needed to rerun the command.
#[derive(Serialize)]
struct Header<'a, E: Serialize> {
    command: &'static str,
    version: &'static str,
    #[serde(flatten)]
    settings: &'a Resolved,
    #[serde(flatten)]
    extra: E,
}

#[derive(Serialize)]
struct Document<'a, E: Serialize, B: Serialize> {
    header: Header<'a, E>,
    #[serde(flatten)]
    body: B,
}

fn header<'a, E: Serialize>(
    command: &'static str,
    settings: &'a Resolved,
    extra: E,
) -> Header<'a, E> {
    Header {
        command,
        version: env!("CARGO_PKG_VERSION"),
        settings,
        extra,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn load_model<T: Scalar>(settings: &Resolved) -> Result<Model<T>, CliError> {
    match &settings.model {
        ModelSource::Generated(cfg) => Ok(Model::<f64>::build(cfg)?.cast()?),
        ModelSource::File(path) => {
            let open = || -> Result<BufReader<fs::File>, CliError> {
                let f = fs::File::open(path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                Ok(BufReader::new(f))
            };
            // Files store either precision; convert to the requested one.
            match Model::<f64>::load(open()?) {
                Ok(m) => Ok(m.cast()?),
                Err(_) => Ok(Model::<f32>::load(open()?)?.cast()?),
            }
        }
    }
}

fn kernel_fuzz(iterations: Option<usize>, common: &CommonArgs) -> Result<(), CliError> {
    let (settings, file) = resolve(common)?;
    let iterations = iterations.or(file.iterations).unwrap_or(10_000);
    let report: FuzzReport = match settings.dtype {
        Dtype::F64 => fuzz_kernel::<f64>(iterations, settings.seed)?,
        Dtype::F32 => fuzz_kernel::<f32>(iterations, settings.seed)?,
    };
    println!(
        "kernel-fuzz: {} cases, dtype {}, seed {}, max relative error {:.3e} (tolerance {:e}), {} failures",
        report.iterations, report.dtype, report.seed, report.max_relative_error, report.tolerance, report.failures
    );
    if common.out.is_some() || file.out.is_some() {
        fs::create_dir_all(&settings.out)?;
        let doc = Document {
            header: header("kernel-fuzz", &settings, ()),
            body: &report,
        };
        write_file(&settings.out.join("kernel-fuzz.json"), &to_json(&doc)?)?;
    }
    if report.failures > 0 {
        return Err(CliError::Verification(format!(
            "{} of {} cases exceeded {:e}",
            report.failures, report.iterations, report.tolerance
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CellExtra {
    l_ctx: usize,
}

#[derive(Serialize)]
struct TraceBody<'a> {
    report: &'a lrshare::traces::CostReport,
}

fn run_trace_cmd(
    schemes: &[String],
    lctx: &[usize],
    recompute_layers: &[usize],
    mode: Option<ModeArg>,
    common: &CommonArgs,
) -> Result<(), CliError> {
    let (settings, file) = resolve(common)?;
    let l_ctx: Vec<usize> = if lctx.is_empty() {
        file.l_ctx.clone().unwrap_or_else(|| vec![256])
    } else {
        lctx.to_vec()
    };
    if l_ctx.is_empty() {
        return Err(CliError::Usage("at least one l_ctx is required".into()));
    }
    let names: Vec<String> = if schemes.is_empty() {
        file.schemes.clone().unwrap_or_else(|| {
            lrshare::kvcache::SchemeKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect()
        })
    } else {
        schemes.to_vec()
    };
    let mode = match mode {
        Some(ModeArg::Execute) => RunMode::Execute,
        Some(ModeArg::Account) => RunMode::Account,
        None => file.mode.unwrap_or(RunMode::Execute),
    };
    let layers = if recompute_layers.is_empty() {
        file.recompute_layers.clone()
    } else {
        Some(recompute_layers.to_vec())
    };
    match settings.dtype {
        Dtype::F64 => run_cells(
            &load_model::<f64>(&settings)?,
            &settings,
            &names,
            layers.as_deref(),
            &l_ctx,
            mode,
        ),
        Dtype::F32 => run_cells(
            &load_model::<f32>(&settings)?,
            &settings,
            &names,
            layers.as_deref(),
            &l_ctx,
            mode,
        ),
    }
}

fn run_cells<T: Scalar>(
    model: &Model<T>,
    settings: &Resolved,
    names: &[String],
    recompute_layers: Option<&[usize]>,
    l_ctx: &[usize],
    mode: RunMode,
) -> Result<(), CliError> {
    let schemes = resolve_schemes(
        names,
        recompute_layers,
        model.config().n_layers,
        settings.seed,
    )?;
    let opts = RunOptions {
        mode,
        block: settings.block,
        seed: settings.seed,
    };
    fs::create_dir_all(&settings.out)?;
    let mut cells = Vec::new();
    for &l in l_ctx {
        let trace = generate_trace(l);
        for scheme in &schemes {
            let started = Instant::now();
            let report = run_trace(model, scheme, &trace, &opts)?;
            eprintln!(
                "{} l_ctx={l}: {:.2}s",
                report.scheme,
                started.elapsed().as_secs_f64()
            );
            let cell = ReportCell { l_ctx: l, report };
            if settings.formats.contains(&Format::Json) {
                let doc = Document {
                    header: header("run-trace", settings, CellExtra { l_ctx: l }),
                    body: TraceBody {
                        report: &cell.report,
                    },
                };
                let name = format!("{}_lctx{l}.json", cell.report.scheme);
                write_file(&settings.out.join(name), &to_json(&doc)?)?;
            }
            cells.push(cell);
        }
    }
    let tables = markdown_tables(&cells);
    if settings.formats.contains(&Format::Md) {
        let mut md = String::from("# Trace cost report\n\n");
        let _ = writeln!(
            md,
            "seed {} | dtype {} | mode {} | blocks {}x{} | model {}\n",
            settings.seed,
            settings.dtype,
            match mode {
                RunMode::Execute => "execute",
                RunMode::Account => "account",
            },
            settings.block.b_r,
            settings.block.b_c,
            model_label(model.config()),
        );
        md.push_str(&tables);
        write_file(&settings.out.join("summary.md"), &md)?;
    }
    if settings.formats.contains(&Format::Csv) {
        let mut csv = format!("{CSV_HEADER}\n");
        for c in &cells {
            csv.push_str(&csv_row(c));
            csv.push('\n');
        }
        write_file(&settings.out.join("summary.csv"), &csv)?;
    }
    print!("{tables}");
    Ok(())
}

fn model_label(cfg: &ModelConfig) -> String {
    format!(
        "{} layers, d_model {}, {}q/{}kv heads x {}, rank {}, {} agents",
        cfg.n_layers,
        cfg.d_model,
        cfg.n_q_heads,
        cfg.n_kv_heads,
        cfg.d_head,
        cfg.rank,
        cfg.n_agents
    )
}

#[derive(Serialize)]
struct BoundBody<'a> {
    bound: &'a BoundReport,
}

#[derive(Serialize)]
struct SimilarityBody<'a> {
    similarity: &'a SimilarityReport,
}

struct AnalyzeArgs {
    what: AnalyzeWhat,
    trials: Option<usize>,
    dim: Option<usize>,
    perturbation: Option<PerturbationArg>,
    samples: Option<usize>,
    sample_tokens: Option<usize>,
}

fn analyze(a: AnalyzeArgs, common: &CommonArgs) -> Result<(), CliError> {
    let (settings, file) = resolve(common)?;
    fs::create_dir_all(&settings.out)?;
    let mut md = format!(
        "# Analysis report\n\nseed {} | dtype {}\n\n",
        settings.seed, settings.dtype
    );
    let mut failure = None;

    if a.what != AnalyzeWhat::Similarity {
        let trials = a.trials.or(file.trials).unwrap_or(1000);
        let dim = a.dim.or(file.dim).unwrap_or(256);
        let mode = a
            .perturbation
            .map(Into::into)
            .or(file.perturbation)
            .unwrap_or_default();
        let bound = verify_cosine_bound(dim, trials, settings.seed, mode)?;
        let closed_form_ok = bound
            .max_closed_form_error
            .is_none_or(|e| e <= CLOSED_FORM_TOL);
        let line = format!(
            "bound: {} trials, dim {}, mode {}, {} violations, min margin {:.3e}, closed-form error {}",
            bound.trials,
            bound.dim,
            serde_json::to_value(bound.mode)?.as_str().unwrap_or_default(),
            bound.violations,
            bound.min_margin,
            bound.max_closed_form_error.map_or("n/a".to_string(), |e| format!("{e:.3e}")),
        );
        println!("{line}");
        let _ = writeln!(md, "## Cosine bound\n\n{line}\n");
        if settings.formats.contains(&Format::Json) {
            let doc = Document {
                header: header("analyze", &settings, ()),
                body: BoundBody { bound: &bound },
            };
            write_file(&settings.out.join("bound.json"), &to_json(&doc)?)?;
        }
        if bound.violations > 0 {
            failure = Some(format!("{} bound violations", bound.violations));
        } else if !closed_form_ok {
            failure = Some(format!(
                "closed-form deviation {:?}",
                bound.max_closed_form_error
            ));
        }
    }

    if a.what != AnalyzeWhat::Bound {
        let n = a.samples.or(file.samples).unwrap_or(4);
        let len = a.sample_tokens.or(file.sample_tokens).unwrap_or(128);
        if n == 0 || len == 0 {
            return Err(CliError::Usage(
                "samples and sample_tokens must be positive".into(),
            ));
        }
        let report = match settings.dtype {
            Dtype::F64 => similarity::<f64>(&settings, n, len)?,
            Dtype::F32 => similarity::<f32>(&settings, n, len)?,
        };
        let s = &report.summary;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            md,
            "## Cache similarity\n\n{} samples of {} tokens; {}\n",
            n, len, report.method
        );
        let _ = writeln!(
            md,
            "| Source | cos(full) | cos(base) | cos(adapter) | L1 base/adapter |"
        );
        let _ = writeln!(md, "|---|---:|---:|---:|---:|");
        let _ = writeln!(
            md,
            "| this run | {:.4} | {:.4} | {} | {} |",
            s.cos_full,
            s.cos_base,
            opt(s.cos_adapter),
            opt(s.l1_base_over_adapter)
        );
        for r in published_references() {
            let _ = writeln!(
                md,
                "| {} ({}) | {:.4} | {:.4} | {:.4} | {} |",
                r.model, r.label, r.cos_full, r.cos_base, r.cos_adapter, r.l1_base_over_adapter
            );
        }
        md.push('\n');
        println!(
            "similarity: cos_full {:.4}, cos_base {:.4}, cos_adapter {}, cos_key {:.4}, cos_lr {}",
            s.cos_full,
            s.cos_base,
            opt(s.cos_adapter),
            s.cos_key,
            opt(s.cos_lr)
        );
        if settings.formats.contains(&Format::Json) {
            let doc = Document {
                header: header("analyze", &settings, ()),
                body: SimilarityBody {
                    similarity: &report,
                },
            };
            write_file(&settings.out.join("similarity.json"), &to_json(&doc)?)?;
        }
        if settings.formats.contains(&Format::Csv) {
            write_file(
                &settings.out.join("similarity.csv"),
                &similarity_csv(&report),
            )?;
        }
    }

    if settings.formats.contains(&Format::Md) {
        write_file(&settings.out.join("analysis.md"), &md)?;
    }
    match failure {
        Some(msg) => Err(CliError::Verification(msg)),
        None => Ok(()),
    }
}

fn similarity<T: Scalar>(
    settings: &Resolved,
    n: usize,
    len: usize,
) -> Result<SimilarityReport, CliError> {
    let model = load_model::<T>(settings)?;
    let vocab = model.config().vocab;
    let samples: Vec<Vec<u32>> = (0..n)
        .map(|s| {
            (0..len)
                .map(|p| token_id(settings.seed, s, p, vocab))
                .collect()
        })
        .collect();
    Ok(measure_similarity(&model, &samples, settings.block)?)
}

fn init_model(path: &Path, common: &CommonArgs) -> Result<(), CliError> {
    let (settings, _) = resolve(common)?;
    let out =
        fs::File::create(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let w = std::io::BufWriter::new(out);
    match settings.dtype {
        Dtype::F64 => load_model::<f64>(&settings)?.save(w)?,
        Dtype::F32 => load_model::<f32>(&settings)?.save(w)?,
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let result = match cli.command {
        Command::KernelFuzz { iterations, common } => kernel_fuzz(iterations, &common),
        Command::RunTrace {
            scheme,
            lctx,
            recompute_layers,
            mode,
            common,
        } => run_trace_cmd(&scheme, &lctx, &recompute_layers, mode, &common),
        Command::Analyze {
            what,
            trials,
            dim,
            perturbation,
            samples,
            sample_tokens,
            common,
        } => analyze(
            AnalyzeArgs {
                what,
                trials,
                dim,
                perturbation,
                samples,
                sample_tokens,
            },
            &common,
        ),
        Command::InitModel { path, common } => init_model(&path, &common),
    };
    eprintln!("elapsed {:.2}s", started.elapsed().as_secs_f64());
    result
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
