use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use cir_core::metrics::{build_report, parse_metric_specs};
use cir_core::pipeline::{embed_gallery, CachedCalls, RunConfig, DEFAULT_PARALLELISM};
use cir_core::session::SessionStore;
use cir_core::storage::{atomic_write, read_results, traces_to_eval_records, write_embeddings, write_results, ImageKeying};
use cir_core::{QueryMode, TaskKind};

use crate::setup::{self, PipelineInputs};
use crate::{server, AppError, Outcome};

pub const DEFAULT_METRICS: &str = "recall@1,5,10,50 map@5,10,25,50";

#[derive(Debug, Parser)]
#[command(name = "cir", version, about = "Caption, rewrite and retrieve: compositional image search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed every gallery image and write an embeddings file.
    Index(IndexArgs),
    /// Run a dataset's queries and write one trace per query.
    Run(RunArgs),
    /// Score a results file.
    Eval(EvalArgs),
    /// Serve the HTTP API (and optionally a static UI).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Keying {
    Auto,
    Uri,
}

impl From<Keying> for ImageKeying {
    fn from(k: Keying) -> Self {
        match k {
            Keying::Auto => ImageKeying::Auto,
            Keying::Uri => ImageKeying::Uri,
        }
    }
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Canonical dataset JSON, or a source file when --mapping is given.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Adapter mapping for benchmark-native layouts.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Clients config; only its embedder is used.
    #[arg(long, alias = "clients")]
    pub embedder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    pub image_keying: Keying,
    #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
    pub parallelism: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "cirevl")]
    pub mode: QueryMode,
    /// Applies one task to every query instead of each query's own.
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Prompt template id.
    #[arg(long)]
    pub template: Option<String>,
    /// Directory with manifest.json and prompt files, replacing the built-in set.
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    #[arg(long)]
    pub clients: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, action = ArgAction::Set)]
    pub exclude_reference: Option<bool>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    pub image_keying: Keying,
    #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
    pub parallelism: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, default_value = DEFAULT_METRICS)]
    pub metrics: String,
    /// Report JSON path; defaults to the results path with a `.metrics.json` suffix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub clients: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Static files served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Write sessions here as JSONL on shutdown.
    #[arg(long)]
    pub persist: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    pub image_keying: Keying,
}

pub fn execute(cli: Cli) -> Result<Outcome, AppError> {
    match cli.command {
        Command::Index(a) => index(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn index(args: IndexArgs) -> Result<Outcome, AppError> {
    let dataset = setup::dataset(&args.dataset.dataset, args.dataset.mapping.as_deref())?;
    let clients = setup::clients(&args.embedder)?;
    let cache = setup::cache(args.cache.as_deref())?;
    let gallery = dataset.gallery();
    let calls = CachedCalls {
        clients: &clients.set,
        cache: cache.as_deref(),
        gallery: &gallery,
        keying: args.image_keying.into(),
    };
    let items = embed_gallery(&calls, args.parallelism.max(1))
        .map_err(|e| AppError::from_core("embedding gallery", e))?;
    write_embeddings(&args.out, &items).map_err(|e| AppError::from_core(args.out.display(), e))?;
    let dim = items.first().map_or(0, |(_, v)| v.dim());
    println!(
        "indexed {} images, dim {}, embedder calls {} -> {}",
        items.len(),
        dim,
        clients.set.calls().embedder,
        args.out.display()
    );
    Ok(Outcome::Complete)
}

fn run(args: RunArgs) -> Result<Outcome, AppError> {
    let inputs = PipelineInputs {
        dataset: args.dataset.dataset.clone(),
        mapping: args.dataset.mapping.clone(),
        embeddings: args.embeddings.clone(),
        clients: args.clients.clone(),
        cache: args.cache.clone(),
        templates_dir: args.templates_dir.clone(),
        image_keying: args.image_keying.into(),
    };
    let (dataset, pipeline) = setup::pipeline(&inputs)?;
    let config = RunConfig {
        mode: args.mode,
        task: args.task,
        k: args.k,
        exclude_reference: args.exclude_reference,
        template_id: args.template.clone(),
        cache_enabled: true,
        parallelism: args.parallelism,
    };
    let run = pipeline
        .run_dataset(&dataset.queries, &config)
        .map_err(|e| AppError::from_core("run", e))?;
    write_results(&args.out, &run.traces).map_err(|e| AppError::from_core(args.out.display(), e))?;
    let summary = serde_json::to_string(&run.summary).expect("summary serializes");
    let mut stderr = std::io::stderr().lock();
    let _ = writeln!(stderr, "{summary}");
    for t in run.traces.iter().filter(|t| !t.is_ok()) {
        if let Some(err) = &t.error {
            let _ = writeln!(stderr, "query {} failed at {}: {}", t.query_id, err.stage, err.message);
        }
    }
    Ok(if run.summary.failed > 0 {
        Outcome::Partial
    } else {
        Outcome::Complete
    })
}

fn default_report_path(results: &Path) -> PathBuf {
    let mut name = results
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_else(|| "results".into());
    name.push(".metrics.json");
    results.with_file_name(name)
}

fn eval(args: EvalArgs) -> Result<Outcome, AppError> {
    let specs = parse_metric_specs(&args.metrics).map_err(|e| AppError::from_core("--metrics", e))?;
    if !args.results.exists() {
        return Err(AppError::Usage(format!("results not found: {}", args.results.display())));
    }
    let traces = read_results(&args.results).map_err(|e| AppError::from_core(args.results.display(), e))?;
    let records = traces_to_eval_records(&traces);
    let report = build_report(&records, &specs).map_err(|e| AppError::from_core("eval", e))?;
    print!("{}", report.to_table());
    let out = args.out.unwrap_or_else(|| default_report_path(&args.results));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    atomic_write(&out, format!("{json}\n").as_bytes()).map_err(|e| AppError::from_core(out.display(), e))?;
    Ok(Outcome::Complete)
}

fn serve(args: ServeArgs) -> Result<Outcome, AppError> {
    let inputs = PipelineInputs {
        dataset: args.dataset.dataset.clone(),
        mapping: args.dataset.mapping.clone(),
        embeddings: args.embeddings.clone(),
        clients: args.clients.clone(),
        cache: args.cache.clone(),
        templates_dir: args.templates_dir.clone(),
        image_keying: args.image_keying.into(),
    };
    let (dataset, mut pipeline) = setup::pipeline(&inputs)?;
    if pipeline.cache().is_none() {
        pipeline = pipeline.with_cache(Arc::new(cir_core::storage::ModelCache::in_memory()));
    }
    let store = Arc::new(SessionStore::new(Arc::new(pipeline)).with_known_queries(dataset.queries));
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| AppError::Usage(format!("bad listen address: {e}")))?;
    if let Some(dir) = &args.static_dir {
        if !dir.is_dir() {
            return Err(AppError::Usage(format!("static directory not found: {}", dir.display())));
        }
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Failed(e.to_string()))?;
    runtime.block_on(server::serve(addr, store.clone(), args.static_dir.clone()))?;
    if let Some(path) = &args.persist {
        let n = store.persist(path).map_err(|e| AppError::from_core(path.display(), e))?;
        eprintln!("saved {n} queries to {}", path.display());
    }
    Ok(Outcome::Complete)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_flags() {
        let cli = Cli::try_parse_from([
            "cir", "run", "--dataset", "d.json", "--embeddings", "e.jsonl", "--mode", "image-plus-text",
            "--task", "genecis-change-object", "--k", "5", "--clients", "c.json", "--out", "r.jsonl",
            "--exclude-reference", "false",
        ])
        .unwrap();
        let Command::Run(args) = cli.command else { panic!("not run") };
        assert_eq!(args.mode, QueryMode::ImagePlusText);
        assert_eq!(args.task, Some(TaskKind::GenecisChangeObject));
        assert_eq!(args.exclude_reference, Some(false));
    }

    #[test]
    fn bad_mode_is_a_usage_error() {
        let err = Cli::try_parse_from(["cir", "run", "--mode", "nope"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn report_path_sits_beside_results() {
        assert_eq!(default_report_path(Path::new("out/r.jsonl")), Path::new("out/r.metrics.json"));
    }
}
