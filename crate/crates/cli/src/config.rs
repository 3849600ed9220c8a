//! Config file plus flag overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lrshare::analysis::PerturbationMode;
use lrshare::attention::BlockConfig;
use lrshare::engine::ModelConfig;
use lrshare::kvcache::{CacheScheme, SchemeKind};
use lrshare::traces::RunMode;
use lrshare::Dtype;

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LRSHARE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "lrshare-out";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Md,
    Csv,
}

/// Everything a config file may set. All fields are optional; flags win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub model_path: Option<PathBuf>,
    pub schemes: Option<Vec<String>>,
    pub recompute_layers: Option<Vec<usize>>,
    pub l_ctx: Option<Vec<usize>>,
    pub dtype: Option<Dtype>,
    pub block_r: Option<usize>,
    pub block_c: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub formats: Option<Vec<Format>>,
    pub mode: Option<RunMode>,
    pub iterations: Option<usize>,
    pub trials: Option<usize>,
    pub dim: Option<usize>,
    pub perturbation: Option<PerturbationMode>,
    pub samples: Option<usize>,
    pub sample_tokens: Option<usize>,
}

impl FileConfig {
    /// `.toml` files are read as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
    }
}

/// Flags shared by every command. `None` means "not given".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// JSON or TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for model weights, token ids and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
    /// Output directory (default: $LRSHARE_OUT_DIR, else ./lrshare-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report formats, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Vec<Format>,
    #[arg(long)]
    pub block_r: Option<usize>,
    #[arg(long)]
    pub block_c: Option<usize>,
    /// Model file written by `init-model`; otherwise the model is generated
    /// from the config and seed.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    s.parse()
}

/// Where the model comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Generated(ModelConfig),
    File(PathBuf),
}

/// Settings common to every command after merging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub dtype: Dtype,
    pub block: BlockConfig,
    #[serde(skip)]
    pub out: PathBuf,
    pub formats: Vec<Format>,
    pub model: ModelSource,
}

/// Merges flags over the file over defaults.
pub fn resolve(args: &CommonArgs) -> Result<(Resolved, FileConfig), CliError> {
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let dtype = args.dtype.or(file.dtype).unwrap_or(Dtype::F64);
    let default_block = BlockConfig::default();
    let block = BlockConfig::new(
        args.block_r.or(file.block_r).unwrap_or(default_block.b_r),
        args.block_c.or(file.block_c).unwrap_or(default_block.b_c),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let out = args
        .out
        .clone()
        .or_else(|| file.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let mut formats: Vec<Format> = if args.format.is_empty() {
        file.formats
            .clone()
            .unwrap_or_else(|| vec![Format::Json, Format::Md, Format::Csv])
    } else {
        args.format.clone()
    };
    formats.sort_unstable();
    formats.dedup();
    let model = match args.model.clone().or_else(|| file.model_path.clone()) {
        Some(p) => ModelSource::File(p),
        None => {
            // The root seed always drives generated weights.
            let cfg = ModelConfig {
                seed,
                ..file.model.clone().unwrap_or_default()
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            ModelSource::Generated(cfg)
        }
    };
    Ok((
        Resolved {
            seed,
            dtype,
            block,
            out,
            formats,
            model,
        },
        file,
    ))
}

/// Scheme names to concrete schemes; explicit recompute layers replace the
/// seeded default selection.
pub fn resolve_schemes(
    names: &[String],
    recompute_layers: Option<&[usize]>,
    n_layers: usize,
    seed: u64,
) -> Result<Vec<CacheScheme>, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("at least one scheme is required".into()));
    }
    let mut out: Vec<CacheScheme> = Vec::with_capacity(names.len());
    for name in names {
        let kind: SchemeKind = name.parse().map_err(CliError::Usage)?;
        let scheme = match (kind, recompute_layers) {
            (SchemeKind::SelectiveRecompute, Some(layers)) => CacheScheme::SelectiveRecompute {
                recompute_layers: layers.iter().copied().collect::<BTreeSet<_>>(),
            },
            _ => kind.resolve(n_layers, seed),
        };
        scheme
            .validate(n_layers)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if !out.contains(&scheme) {
            out.push(scheme);
        }
    }
    Ok(out)
}
