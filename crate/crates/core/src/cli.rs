//! Command-line front end: `detect`, `evaluate`, `stats` and `cache`.
//!
//! Settings resolve as flags, then environment variables, then the TOML
//! file named by `--config`, then built-in defaults. API keys are read from
//! the environment only.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 some pairs failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::bench::{self, BenchmarkFile};
use crate::cache::CacheStore;
use crate::executor::{self, Executor, RunInfo};
use crate::gateway::{Gateway, LiveModelBackend, LiveModelConfig, MockBackend, ModelService};
use crate::metrics;
use crate::model::{ImageTextPair, Verdict};
use crate::prompt::TemplateStore;
use crate::stages::{Demonstration, DetectionMethod, StageContext};
use crate::tools::{
    HttpObjectDetector, HttpSceneTextReader, HttpToolConfig, MockTools, ModelAttributeAnswerer, NullTool,
    SerperSearch, ToolBackendSet, DEFAULT_BOX_THRESHOLD, DEFAULT_TOP_K, SERPER_ENDPOINT,
};

pub const MODEL_API_KEY_ENV: &str = "UNIHD_MODEL_API_KEY";
pub const SEARCH_API_KEY_ENV: &str = "SERPER_API_KEY";
pub const TOOL_API_KEY_ENV: &str = "UNIHD_TOOL_API_KEY";

#[derive(Debug, Parser)]
#[command(name = "unihd", version, about = "Claim-level hallucination detection for image-text pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run detection over a benchmark or a single pair and write a run directory.
    Detect(DetectArgs),
    /// Score a run directory against benchmark gold labels.
    Evaluate(EvaluateArgs),
    /// Print corpus statistics for a benchmark file.
    Stats(StatsArgs),
    /// Inspect or clear the result cache.
    Cache(CacheArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["bench", "pair"])))]
pub struct DetectArgs {
    /// Benchmark file (mhalubench.v1).
    #[arg(long)]
    pub bench: Option<PathBuf>,
    /// Single pair JSON file; claims may be omitted and are then extracted.
    #[arg(long)]
    pub pair: Option<PathBuf>,
    /// TOML settings file.
    #[arg(long, env = "UNIHD_CONFIG")]
    pub config: Option<PathBuf>,
    /// unihd, selfcheck0 or selfcheck2 [default: unihd]
    #[arg(long, env = "UNIHD_METHOD")]
    pub method: Option<DetectionMethod>,
    /// Model and tool backends [default: mock]
    #[arg(long, env = "UNIHD_BACKEND")]
    pub backend: Option<BackendKind>,
    /// Mock fixture directory with model/, detector/, ocr/ and search/.
    #[arg(long, env = "UNIHD_FIXTURES")]
    pub fixtures: Option<PathBuf>,
    /// Demonstrations for selfcheck2 (JSON list of {pair, verdicts}).
    #[arg(long, env = "UNIHD_DEMOS")]
    pub demos: Option<PathBuf>,
    /// Parent directory for run directories [default: results]
    #[arg(long, env = "UNIHD_OUT")]
    pub out: Option<PathBuf>,
    /// Run directory name [default: UTC timestamp]
    #[arg(long)]
    pub run_id: Option<String>,
    /// Pairs processed concurrently [default: 4]
    #[arg(long, env = "UNIHD_WIDTH")]
    pub width: Option<usize>,
    /// Cache directory [default: .unihd-cache]
    #[arg(long, env = "UNIHD_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Disable the result cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Search snippets kept per fact question [default: 3]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Live detector confidence threshold [default: 0.35]
    #[arg(long)]
    pub box_threshold: Option<f64>,
    /// Model requests per minute for the live backend.
    #[arg(long)]
    pub rpm: Option<u32>,
    /// OpenAI-compatible chat completions URL (live).
    #[arg(long, env = "UNIHD_MODEL_ENDPOINT")]
    pub model_endpoint: Option<String>,
    /// Model name sent to the endpoint (live).
    #[arg(long, env = "UNIHD_MODEL")]
    pub model: Option<String>,
    /// Object detection service URL (live); detection is off when unset.
    #[arg(long, env = "UNIHD_DETECTOR_ENDPOINT")]
    pub detector_endpoint: Option<String>,
    /// Scene-text recognition service URL (live); OCR is off when unset.
    #[arg(long, env = "UNIHD_OCR_ENDPOINT")]
    pub ocr_endpoint: Option<String>,
    /// Search API URL (live).
    #[arg(long, env = "UNIHD_SEARCH_ENDPOINT")]
    pub search_endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub bench: PathBuf,
    /// Run directory from `detect`, or a JSON object mapping pair id to verdicts.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: StatsFormat,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[command(subcommand)]
    pub action: CacheAction,
    /// Cache directory [default: .unihd-cache]
    #[arg(long, env = "UNIHD_CACHE_DIR", global = true)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CacheAction {
    /// Entry count, size and hit counters.
    Stat,
    /// Remove every entry.
    Clear,
}

/// Keys accepted in the `--config` file. Secrets are not among them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<String>,
    pub backend: Option<BackendKind>,
    pub fixtures: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub width: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub cache: Option<bool>,
    pub top_k: Option<usize>,
    pub box_threshold: Option<f64>,
    pub rpm: Option<u32>,
    pub model_endpoint: Option<String>,
    pub model: Option<String>,
    pub detector_endpoint: Option<String>,
    pub ocr_endpoint: Option<String>,
    pub search_endpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LiveSettings {
    pub model_endpoint: String,
    pub model: String,
    pub model_api_key: String,
    pub detector_endpoint: Option<String>,
    pub ocr_endpoint: Option<String>,
    pub search_endpoint: String,
    pub search_api_key: String,
    pub tool_api_key: Option<String>,
}

/// Fully resolved detection settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: DetectionMethod,
    pub backend: BackendKind,
    pub fixtures: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub out: PathBuf,
    pub width: usize,
    pub cache_dir: Option<PathBuf>,
    pub top_k: usize,
    pub box_threshold: f64,
    pub rpm: Option<u32>,
    pub live: Option<LiveSettings>,
}

/// A failure reported to the operator.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    fn new(kind: impl Into<String>, message: impl ToString) -> Self {
        CliError {
            kind: kind.into(),
            message: message.to_string(),
        }
    }

    fn config(message: impl ToString) -> Self {
        CliError::new("ConfigInvalid", message)
    }
}

impl From<bench::BenchError> for CliError {
    fn from(e: bench::BenchError) -> Self {
        CliError::new(e.kind(), e)
    }
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Merges flags (clap has already applied environment fallbacks) with
    /// the config file and defaults, then validates.
    pub fn resolve(args: &DetectArgs, env: impl Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let file = read_file_config(args.config.as_deref())?;
        let method = match (args.method, &file.method) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse().map_err(CliError::config)?,
            (None, None) => DetectionMethod::UniHD,
        };
        let backend = args.backend.or(file.backend).unwrap_or(BackendKind::Mock);
        let width = args.width.or(file.width).unwrap_or(4);
        if width == 0 {
            return Err(CliError::config("width must be at least 1"));
        }
        let top_k = args.top_k.or(file.top_k).unwrap_or(DEFAULT_TOP_K);
        if top_k == 0 {
            return Err(CliError::config("top_k must be at least 1"));
        }
        let box_threshold = args.box_threshold.or(file.box_threshold).unwrap_or(DEFAULT_BOX_THRESHOLD);
        if !(0.0..=1.0).contains(&box_threshold) {
            return Err(CliError::config("box_threshold must lie in [0, 1]"));
        }
        let cache_on = !args.no_cache && file.cache.unwrap_or(true);
        let cache_dir = cache_on.then(|| {
            args.cache_dir
                .clone()
                .or(file.cache_dir.clone())
                .unwrap_or_else(|| PathBuf::from(".unihd-cache"))
        });
        let fixtures = args.fixtures.clone().or(file.fixtures.clone());
        let live = match backend {
            BackendKind::Mock => {
                match &fixtures {
                    Some(dir) if dir.is_dir() => {}
                    Some(dir) => return Err(CliError::config(format!("fixture directory {} not found", dir.display()))),
                    None => return Err(CliError::config("mock backend needs --fixtures")),
                }
                None
            }
            BackendKind::Live => {
                let need = |v: Option<String>, what: &str| v.ok_or_else(|| CliError::config(format!("live backend needs {what}")));
                Some(LiveSettings {
                    model_endpoint: need(args.model_endpoint.clone().or(file.model_endpoint.clone()), "--model-endpoint")?,
                    model: need(args.model.clone().or(file.model.clone()), "--model")?,
                    model_api_key: need(env(MODEL_API_KEY_ENV), MODEL_API_KEY_ENV)?,
                    detector_endpoint: args.detector_endpoint.clone().or(file.detector_endpoint.clone()),
                    ocr_endpoint: args.ocr_endpoint.clone().or(file.ocr_endpoint.clone()),
                    search_endpoint: args
                        .search_endpoint
                        .clone()
                        .or(file.search_endpoint.clone())
                        .unwrap_or_else(|| SERPER_ENDPOINT.to_string()),
                    search_api_key: need(env(SEARCH_API_KEY_ENV), SEARCH_API_KEY_ENV)?,
                    tool_api_key: env(TOOL_API_KEY_ENV),
                })
            }
        };
        Ok(RunConfig {
            method,
            backend,
            fixtures,
            demos: args.demos.clone().or(file.demos.clone()),
            out: args.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("results")),
            width,
            cache_dir,
            top_k,
            box_threshold,
            rpm: args.rpm.or(file.rpm),
            live,
        })
    }
}

/// Reads demonstrations; relative image paths resolve against the file's
/// folder.
pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut demos: Vec<Demonstration> =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut demos {
        if let Some(p) = d.pair.image.local_path(Some(base)) {
            d.pair.image.location = p.to_string_lossy().into_owned();
        }
    }
    Ok(demos)
}

/// Builds the executor for a resolved configuration. `image_root` resolves
/// relative image locations.
pub fn build_executor(cfg: &RunConfig, image_root: &Path) -> Result<(Executor, BTreeMap<String, String>), CliError> {
    let templates = Arc::new(TemplateStore::builtin().map_err(|e| CliError::new("PromptError", e))?);
    let ctx = StageContext::new(templates.clone());
    let (svc, tools): (Arc<dyn ModelService>, ToolBackendSet) = match (&cfg.live, &cfg.fixtures) {
        (None, Some(fixtures)) => {
            let mock = MockBackend::from_dir(&fixtures.join("model"))
                .map_err(|e| CliError::config(format!("{}: {e}", fixtures.join("model").display())))?;
            let tools = MockTools::new(fixtures).with_image_root(image_root);
            (Arc::new(Gateway::new(Arc::new(mock))), ToolBackendSet::mock(tools, templates))
        }
        (Some(live), _) => {
            let backend = LiveModelBackend::new(LiveModelConfig {
                endpoint: live.model_endpoint.clone(),
                model: live.model.clone(),
                api_key: live.model_api_key.clone(),
                image_root: Some(image_root.to_path_buf()),
                timeout: Duration::from_secs(120),
            })
            .map_err(|e| CliError::config(e))?;
            let mut gateway = Gateway::new(Arc::new(backend));
            if let Some(rpm) = cfg.rpm {
                gateway = gateway.with_rate_limit(rpm);
            }
            let http = |endpoint: &str, key: Option<String>| HttpToolConfig {
                api_key: key,
                image_root: Some(image_root.to_path_buf()),
                ..HttpToolConfig::new(endpoint)
            };
            let tool_err = |e: crate::tools::ToolError| CliError::config(e);
            let tools = ToolBackendSet {
                object_detector: match &live.detector_endpoint {
                    Some(url) => Arc::new(
                        HttpObjectDetector::new(http(url, live.tool_api_key.clone()), cfg.box_threshold).map_err(tool_err)?,
                    ),
                    None => Arc::new(NullTool),
                },
                attribute_answerer: Arc::new(ModelAttributeAnswerer::new(templates)),
                scene_text_reader: match &live.ocr_endpoint {
                    Some(url) => Arc::new(HttpSceneTextReader::new(http(url, live.tool_api_key.clone())).map_err(tool_err)?),
                    None => Arc::new(NullTool),
                },
                fact_searcher: Arc::new(
                    SerperSearch::new(http(&live.search_endpoint, Some(live.search_api_key.clone()))).map_err(tool_err)?,
                ),
            };
            (Arc::new(gateway), tools)
        }
        (None, None) => return Err(CliError::config("mock backend needs --fixtures")),
    };
    let mut ids = BTreeMap::new();
    ids.insert("model".to_string(), svc.backend_id().to_string());
    let [o, a, s, f] = tools.ids();
    for (k, v) in [("object", o), ("attribute", a), ("scene_text", s), ("fact", f)] {
        ids.insert(k.to_string(), v.to_string());
    }
    let mut ex = Executor::new(svc, tools, ctx).with_top_k(cfg.top_k);
    if let Some(dir) = &cfg.cache_dir {
        let cache = CacheStore::open(dir).map_err(|e| CliError::config(e))?;
        ex = ex.with_cache(Arc::new(cache));
    }
    if let Some(path) = &cfg.demos {
        ex = ex.with_demonstrations(load_demonstrations(path)?);
    }
    Ok((ex, ids))
}

fn read_pairs(args: &DetectArgs) -> Result<(Vec<ImageTextPair>, PathBuf), CliError> {
    if let Some(path) = &args.bench {
        let b = bench::load(path)?;
        return Ok((b.pairs, path.parent().unwrap_or(Path::new(".")).to_path_buf()));
    }
    let path = args.pair.as_ref().expect("clap requires an input");
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let pair: ImageTextPair = serde_json::from_str(&text).map_err(|e| CliError::new("SchemaViolation", format!("{}: {e}", path.display())))?;
    Ok((vec![pair], path.parent().unwrap_or(Path::new(".")).to_path_buf()))
}

/// Output of a command: text for stdout and the exit code.
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

async fn cmd_detect(args: &DetectArgs) -> Result<Outcome, CliError> {
    let cfg = RunConfig::resolve(args, |k| std::env::var(k).ok())?;
    let (pairs, image_root) = read_pairs(args)?;
    let (ex, backends) = build_executor(&cfg, &image_root)?;
    if cfg.method == DetectionMethod::SelfCheck2Shot {
        let have = match &cfg.demos {
            Some(p) => load_demonstrations(p)?.len(),
            None => 0,
        };
        if have < 2 {
            return Err(CliError::new(
                "MissingDemonstrations",
                format!("selfcheck2 needs two demonstrations (--demos), {have} configured"),
            ));
        }
    }
    let results = ex
        .run_batch(pairs, cfg.method, cfg.width)
        .await
        .map_err(|e| CliError::config(e))?;
    let run_id = args.run_id.clone().unwrap_or_else(executor::default_run_id);
    let info = RunInfo {
        method: cfg.method,
        width: cfg.width,
        backends,
        cache_enabled: cfg.cache_dir.is_some(),
        settings: json!({
            "top_k": cfg.top_k,
            "box_threshold": cfg.box_threshold,
            "rpm": cfg.rpm,
            "templates": TemplateStore::builtin().map(|t| t.digests()).unwrap_or_default(),
        }),
    };
    let (dir, manifest) = executor::write_run(&cfg.out, &run_id, &results, info)
        .map_err(|e| CliError::config(format!("writing run {run_id}: {e}")))?;
    flush_executor_cache(&ex);
    for r in results.iter().filter_map(|r| r.as_ref().err()) {
        eprintln!("pair {} failed at {}: {}", r.pair_id, r.stage, r.message);
        eprintln!("{}", json!({"error": r.kind, "pair_id": r.pair_id, "stage": r.stage, "message": r.message}));
    }
    Ok(Outcome {
        stdout: format!(
            "run {run_id}: {} ok, {} failed, {} backend calls, {} cache hits -> {}\n",
            manifest.succeeded,
            manifest.failed,
            manifest.backend_invocations,
            manifest.cache_hits,
            dir.display()
        ),
        code: if manifest.failed == 0 { 0 } else { 2 },
    })
}

fn flush_executor_cache(ex: &Executor) {
    if let Some(cache) = ex.cache() {
        let _ = cache.flush_counters();
    }
}

/// Reads predictions from a run directory or a `{pair_id: [verdict, ...]}` file.
pub fn read_predictions(path: &Path, bench: &BenchmarkFile) -> Result<BTreeMap<String, Vec<Verdict>>, CliError> {
    if path.is_dir() {
        let mut out = BTreeMap::new();
        for p in &bench.pairs {
            let r = executor::read_pair_result(path, &p.id)
                .map_err(|e| CliError::new("SchemaViolation", format!("{}: {e}", path.display())))?
                .ok_or_else(|| CliError::new("MissingPrediction", format!("no prediction for pair {}", p.id)))?;
            out.insert(p.id.clone(), r.verdicts);
        }
        return Ok(out);
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("SchemaViolation", format!("{}: {e}", path.display())))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<Outcome, CliError> {
    let b = bench::load(&args.bench)?;
    let preds = read_predictions(&args.predictions, &b)?;
    let eval = bench::evaluate(&b, &preds)?;
    let stdout = match args.format {
        ReportFormat::Table => {
            let mut s = metrics::to_table(&eval.reports);
            if let Some(cats) = &eval.categories {
                s.push_str("category recall");
                for (c, r) in cats {
                    s.push_str(&format!("  {} {} ({}/{})", c.code(), metrics::percent_str(r.recall), r.detected, r.total));
                }
                s.push('\n');
            }
            let unverified: u64 = eval.reports.first().map_or(0, |r| r.unverified);
            if unverified > 0 {
                s.push_str(&format!("unverified claims {unverified}\n"));
            }
            s
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&metrics::to_json(&eval.reports, eval.categories.as_ref()))
                .expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => metrics::to_csv(&eval.reports),
    };
    Ok(Outcome { stdout, code: 0 })
}

fn cmd_stats(args: &StatsArgs) -> Result<Outcome, CliError> {
    let b = bench::load(&args.bench)?;
    let s = bench::stats(&b);
    let stdout = match args.format {
        StatsFormat::Text => bench::stats_text(&s),
        StatsFormat::Json => format!("{}\n", serde_json::to_string_pretty(&s).expect("stats serialize")),
    };
    Ok(Outcome { stdout, code: 0 })
}

fn cmd_cache(args: &CacheArgs) -> Result<Outcome, CliError> {
    let dir = args.cache_dir.clone().unwrap_or_else(|| PathBuf::from(".unihd-cache"));
    let cache = CacheStore::open(&dir).map_err(|e| CliError::new("CacheError", e))?;
    let stdout = match args.action {
        CacheAction::Stat => {
            let s = cache.stats().map_err(|e| CliError::new("CacheError", e))?;
            let kinds = cache.entries_by_kind().map_err(|e| CliError::new("CacheError", e))?;
            let mut out = format!(
                "entries {}\nbytes {}\nhits {}\nmisses {}\n",
                s.entries, s.bytes, s.hits, s.misses
            );
            for (k, n) in kinds {
                out.push_str(&format!("  {k} {n}\n"));
            }
            out
        }
        CacheAction::Clear => {
            let n = cache.clear().map_err(|e| CliError::new("CacheError", e))?;
            format!("removed {n} entries\n")
        }
    };
    Ok(Outcome { stdout, code: 0 })
}

/// Parses arguments and runs one command. Errors are printed to stderr as a
/// message line followed by a JSON line.
pub fn run<I, T>(args: I) -> i32
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
    let result = match &cli.command {
        Command::Detect(a) => match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt.block_on(cmd_detect(a)),
            Err(e) => Err(CliError::config(e)),
        },
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Cache(a) => cmd_cache(a),
    };
    match result {
        Ok(o) => {
            print!("{}", o.stdout);
            o.code
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_well_formed() {
        Cli::command().debug_assert();
    }

    fn detect(extra: &[&str]) -> DetectArgs {
        let mut argv = vec!["unihd", "detect", "--bench", "b.json"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Detect(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("unihd.toml");
        std::fs::write(&cfg_path, "width = 8\ntop_k = 5\nmethod = \"selfcheck0\"\n").unwrap();
        let fixtures = dir.path().to_str().unwrap();
        let cfg_arg = cfg_path.to_str().unwrap();
        let args = detect(&["--config", cfg_arg, "--fixtures", fixtures, "--width", "2"]);
        let cfg = RunConfig::resolve(&args, |_| None).unwrap();
        assert_eq!(cfg.width, 2);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.method, DetectionMethod::SelfCheck0Shot);
        assert_eq!(cfg.box_threshold, DEFAULT_BOX_THRESHOLD);
        assert_eq!(cfg.cache_dir, Some(PathBuf::from(".unihd-cache")));
    }

    #[test]
    fn secrets_are_not_accepted_in_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("unihd.toml");
        std::fs::write(&cfg_path, "api_key = \"sk-123\"\n").unwrap();
        let args = detect(&["--config", cfg_path.to_str().unwrap()]);
        let err = RunConfig::resolve(&args, |_| None).unwrap_err();
        assert_eq!(err.kind, "ConfigInvalid");
    }

    #[test]
    fn live_needs_credentials() {
        let args = detect(&["--backend", "live", "--model-endpoint", "http://x", "--model", "m"]);
        let err = RunConfig::resolve(&args, |_| None).unwrap_err();
        assert!(err.message.contains(MODEL_API_KEY_ENV));
        let ok = RunConfig::resolve(&args, |k| Some(format!("{k}-value"))).unwrap();
        assert_eq!(ok.live.unwrap().search_endpoint, SERPER_ENDPOINT);
    }

    #[test]
    fn zero_width_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let args = detect(&["--fixtures", dir.path().to_str().unwrap(), "--width", "0"]);
        assert_eq!(RunConfig::resolve(&args, |_| None).unwrap_err().kind, "ConfigInvalid");
    }

    #[test]
    fn no_cache_disables_cache() {
        let dir = tempfile::tempdir().unwrap();
        let args = detect(&["--fixtures", dir.path().to_str().unwrap(), "--no-cache"]);
        assert_eq!(RunConfig::resolve(&args, |_| None).unwrap().cache_dir, None);
    }
}
