//! Command-line surface: describe / embed / export-batch / make-fixtures /
//! visualize. A thin single-threaded driver over the engine.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoembed_core::model::{Capability, InputPrep};
use geoembed_core::spec::{
    OutputMode, OutputSpec, Pooling, SensorSpec, SpatialSpec, TemporalSpec,
};
use serde_json::json;

use crate::engine::{BatchRequest, Engine, EngineError, SystemClock};
use crate::export::{item_dir_name, serialize_embedding, Summary};
use crate::fixtures::{
    make_precomputed_store, make_raster_store, PrecomputedStoreSpec, RasterStoreSpec,
};
use crate::provider::{ImageryProvider, LocalRasterProvider, MockProvider};
use crate::registry::ModelRegistry;
use crate::viz::visualize_file;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USER: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Parser)]
#[command(
    name = "geoembed",
    version,
    about = "Batch geospatial embedding engine",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Print model capabilities (one model or --all).
    Describe(DescribeArgs),
    /// Compute a single embedding and write it to disk.
    Embed(EmbedArgs),
    /// Run the batch pipeline over a points file.
    ExportBatch(Box<ExportBatchArgs>),
    /// Generate on-disk fixture data (raster scenes or embedding tiles).
    MakeFixtures(MakeFixturesArgs),
    /// Render a grid embedding as a pseudo-RGB PPM (PCA projection).
    Visualize(VisualizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pooled,
    Grid,
}

impl From<ModeArg> for OutputMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pooled => OutputMode::Pooled,
            ModeArg::Grid => OutputMode::Grid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrepArg {
    Resize,
    Tile,
}

impl From<PrepArg> for InputPrep {
    fn from(p: PrepArg) -> Self {
        match p {
            PrepArg::Resize => InputPrep::Resize,
            PrepArg::Tile => InputPrep::Tile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    /// Synthetic in-process catalog.
    Mock,
    /// Raster scene store on local disk (requires --raster-root).
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    #[value(name = "raster_store")]
    RasterStore,
    #[value(name = "precomputed_store")]
    PrecomputedStore,
}

#[derive(Args)]
pub struct DescribeArgs {
    /// Model id to describe.
    pub model: Option<String>,
    /// List every registered model.
    #[arg(long)]
    pub all: bool,
    /// Emit machine-readable JSON.
    #[arg(long)]
    pub json: bool,
    /// Register a precomputed store (repeatable).
    #[arg(long = "store-root")]
    pub store_roots: Vec<PathBuf>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub lon: Option<f64>,
    #[arg(long)]
    pub lat: Option<f64>,
    #[arg(long = "buffer-m")]
    pub buffer_m: Option<f64>,
    /// minlon,minlat,maxlon,maxlat
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, action = clap::ArgAction::Set)]
    pub bbox: Option<Vec<f64>>,
    /// Calendar year (exclusive with --start/--end).
    #[arg(long)]
    pub year: Option<i32>,
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long)]
    pub end: Option<String>,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    /// Output grid resolution (resolution-aligned models only).
    #[arg(long = "scale-m")]
    pub scale_m: Option<f64>,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    #[arg(long = "raster-root")]
    pub raster_root: Option<PathBuf>,
    #[arg(long = "store-root")]
    pub store_roots: Vec<PathBuf>,
    /// Sensor override as inline JSON.
    #[arg(long = "sensor-json")]
    pub sensor_json: Option<String>,
    #[arg(long = "input-prep", value_enum, default_value = "resize")]
    pub input_prep: PrepArg,
    #[arg(long, env = "RS_EMBED_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Recorded in metadata only; inference is device-free.
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct ExportBatchArgs {
    /// CSV (`lon,lat,buffer_m` header) or JSON list of spatial specs.
    #[arg(long = "points-file")]
    pub points_file: Option<PathBuf>,
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub year: Option<i32>,
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long)]
    pub end: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long = "scale-m")]
    pub scale_m: Option<f64>,
    /// Pooling for pooled mode (mean).
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long = "chunk-size")]
    pub chunk_size: Option<usize>,
    #[arg(long = "num-workers")]
    pub num_workers: Option<usize>,
    #[arg(long = "writer-workers")]
    pub writer_workers: Option<usize>,
    #[arg(long = "async-write", num_args = 0..=1, default_missing_value = "true")]
    pub async_write: Option<bool>,
    #[arg(long = "max-retries")]
    pub max_retries: Option<u32>,
    #[arg(long = "retry-backoff-s")]
    pub retry_backoff_s: Option<f64>,
    #[arg(long = "continue-on-error", num_args = 0..=1, default_missing_value = "true")]
    pub continue_on_error: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resume: Option<bool>,
    #[arg(long = "save-inputs", num_args = 0..=1, default_missing_value = "true")]
    pub save_inputs: Option<bool>,
    #[arg(long = "cross-chunk-cache", num_args = 0..=1, default_missing_value = "true")]
    pub cross_chunk_cache: Option<bool>,
    /// Output directory layout (only per_item is defined).
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long = "input-prep", value_enum)]
    pub input_prep: Option<PrepArg>,
    /// Global sensor override as inline JSON.
    #[arg(long = "sensor-json")]
    pub sensor_json: Option<String>,
    /// Per-model sensor override, `model=<json>` (repeatable).
    #[arg(long = "model-sensor-json")]
    pub model_sensor_json: Vec<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long = "raster-root")]
    pub raster_root: Option<PathBuf>,
    #[arg(long = "store-root")]
    pub store_roots: Vec<PathBuf>,
    #[arg(long, env = "RS_EMBED_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub device: Option<String>,
    /// JSON config file with the same keys; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct MakeFixturesArgs {
    #[arg(long, value_enum)]
    pub kind: FixtureKind,
    #[arg(long, env = "RS_EMBED_OUT", default_value = "fixtures")]
    pub out: PathBuf,
    #[arg(long, default_value = "mock-a")]
    pub collection: String,
    #[arg(long, default_value_t = 121.5, allow_hyphen_values = true)]
    pub lon: f64,
    #[arg(long, default_value_t = 31.2, allow_hyphen_values = true)]
    pub lat: f64,
    #[arg(long = "buffer-m", default_value_t = 640.0)]
    pub buffer_m: f64,
    /// Ground resolution; defaults to the collection's native scale.
    #[arg(long = "scale-m")]
    pub scale_m: Option<f64>,
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long)]
    pub end: Option<String>,
    #[arg(long)]
    pub year: Option<i32>,
    /// Extra pixels of slack per side (raster_store).
    #[arg(long = "margin-px", default_value_t = 8)]
    pub margin_px: u32,
    /// Store model id (precomputed_store).
    #[arg(long = "model-id", default_value = "pre-fixture-d8")]
    pub model_id: String,
    #[arg(long = "embed-dim", default_value_t = 8)]
    pub embed_dim: usize,
    #[arg(long = "tile-px", default_value_t = 32)]
    pub tile_px: usize,
    /// Comma-separated store years (precomputed_store).
    #[arg(long, value_delimiter = ',')]
    pub years: Option<Vec<i32>>,
    /// Extra rings of tiles around the covering set (precomputed_store).
    #[arg(long = "pad-tiles", default_value_t = 1)]
    pub pad_tiles: i64,
}

#[derive(Args)]
pub struct VisualizeArgs {
    /// Directory with data.f32 + meta.json (a grid embedding).
    pub embedding_dir: PathBuf,
    /// Output image path (default: <embedding_dir>/viz.ppm).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------

/// Non-zero exit plus the message to print on stderr.
#[derive(Debug)]
struct CliFail {
    code: i32,
    message: String,
}

fn user(message: impl Into<String>) -> CliFail {
    CliFail {
        code: EXIT_USER,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> CliFail {
    CliFail {
        code: EXIT_RUNTIME,
        message: message.into(),
    }
}

fn engine_fail(err: EngineError) -> CliFail {
    CliFail {
        code: if err.is_user_error() {
            EXIT_USER
        } else {
            EXIT_RUNTIME
        },
        message: err.to_string(),
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Describe(args) => cmd_describe(&args),
        Command::Embed(args) => cmd_embed(&args),
        Command::ExportBatch(args) => cmd_export_batch(&args),
        Command::MakeFixtures(args) => cmd_make_fixtures(&args),
        Command::Visualize(args) => cmd_visualize(&args),
    };
    match result {
        Ok(code) => code,
        Err(fail) => {
            eprintln!("error: {}", fail.message);
            fail.code
        }
    }
}

fn build_registry(store_roots: &[PathBuf]) -> Result<ModelRegistry, CliFail> {
    let mut registry = ModelRegistry::with_reference_models();
    for root in store_roots {
        registry
            .register_precomputed(root)
            .map_err(|e| user(e.to_string()))?;
    }
    Ok(registry)
}

fn build_provider(
    backend: BackendArg,
    raster_root: Option<&PathBuf>,
) -> Result<Box<dyn ImageryProvider>, CliFail> {
    match backend {
        BackendArg::Mock => Ok(Box::new(MockProvider::new())),
        BackendArg::Local => {
            let root = raster_root
                .ok_or_else(|| user("backend local requires --raster-root"))?;
            if !root.is_dir() {
                return Err(user(format!(
                    "raster root {} is not a directory",
                    root.display()
                )));
            }
            Ok(Box::new(LocalRasterProvider::new(root)))
        }
    }
}

fn parse_temporal(
    year: Option<i32>,
    start: Option<&str>,
    end: Option<&str>,
) -> Result<TemporalSpec, CliFail> {
    match (year, start, end) {
        (Some(y), None, None) => TemporalSpec::year(y).map_err(|e| user(e.to_string())),
        (None, Some(s), Some(e)) => TemporalSpec::range(s, e).map_err(|e| user(e.to_string())),
        (None, None, None) => Err(user("temporal window required: --year or --start/--end")),
        _ => Err(user("give either --year or both --start and --end")),
    }
}

fn parse_sensor(json: &str) -> Result<SensorSpec, CliFail> {
    let sensor: SensorSpec =
        serde_json::from_str(json).map_err(|e| user(format!("bad sensor JSON: {e}")))?;
    sensor.validate().map_err(|e| user(e.to_string()))?;
    Ok(sensor)
}

fn capability_json(cap: &Capability) -> serde_json::Value {
    json!({
        "model_id": cap.model_id,
        "backend": cap.backend.as_str(),
        "output_modes": cap.output_modes.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "temporal_semantics": cap.temporal_semantics.as_str(),
        "embed_dim": cap.embed_dim,
        "input_size": cap.input_size,
        "patch_size": cap.patch_size,
        "resolution_aligned": cap.resolution_aligned,
        "supports_batch": cap.supports_batch,
        "checkpoint": cap.checkpoint,
        "default_sensor": cap.default_sensor.as_ref().map(|s| serde_json::to_value(s).unwrap()),
        "band_stats": cap.band_stats.iter().map(|b| json!({"mean": b.mean, "std": b.std})).collect::<Vec<_>>(),
    })
}

fn capability_line(cap: &Capability) -> String {
    let modes: Vec<&str> = cap.output_modes.iter().map(|m| m.as_str()).collect();
    format!(
        "{:<16} backend={:<11} modes={:<14} temporal={:<6} dim={:<4} input={:<5} patch={:<4} batch={}",
        cap.model_id,
        cap.backend.as_str(),
        modes.join(","),
        cap.temporal_semantics.as_str(),
        cap.embed_dim,
        cap.input_size.map_or("-".to_string(), |v| v.to_string()),
        cap.patch_size.map_or("-".to_string(), |v| v.to_string()),
        cap.supports_batch,
    )
}

fn cmd_describe(args: &DescribeArgs) -> Result<i32, CliFail> {
    let registry = build_registry(&args.store_roots)?;
    let ids: Vec<String> = match (&args.model, args.all) {
        (Some(id), false) => vec![id.clone()],
        (None, true) => registry.model_ids(),
        (None, false) => return Err(user("give a model id or --all")),
        (Some(_), true) => return Err(user("--all conflicts with a model id")),
    };
    let mut caps = Vec::with_capacity(ids.len());
    for id in &ids {
        caps.push(registry.describe(id).map_err(|e| user(e.to_string()))?);
    }
    if args.json {
        let value = if args.all {
            serde_json::Value::Array(caps.iter().map(capability_json).collect())
        } else {
            capability_json(&caps[0])
        };
        println!("{}", serde_json::to_string_pretty(&value).unwrap());
    } else {
        for cap in &caps {
            println!("{}", capability_line(cap));
        }
    }
    Ok(EXIT_OK)
}

fn embed_spatial(args: &EmbedArgs) -> Result<SpatialSpec, CliFail> {
    match (&args.bbox, args.lon, args.lat, args.buffer_m) {
        (Some(b), None, None, None) => {
            if b.len() != 4 {
                return Err(user("--bbox wants four comma-separated numbers: minlon,minlat,maxlon,maxlat"));
            }
            Ok(SpatialSpec::bbox(b[0], b[1], b[2], b[3]))
        }
        (None, Some(lon), Some(lat), Some(buf)) => {
            Ok(SpatialSpec::point_buffer(lon, lat, buf))
        }
        _ => Err(user(
            "give either --bbox or all of --lon --lat --buffer-m",
        )),
    }
}

fn cmd_embed(args: &EmbedArgs) -> Result<i32, CliFail> {
    let spatial = embed_spatial(args)?;
    let temporal = parse_temporal(args.year, args.start.as_deref(), args.end.as_deref())?;
    let output = OutputSpec {
        mode: args.mode.into(),
        scale_m: args.scale_m,
        pooling: Pooling::Mean,
    };
    let sensor = args
        .sensor_json
        .as_deref()
        .map(parse_sensor)
        .transpose()?;
    let registry = build_registry(&args.store_roots)?;
    let provider = build_provider(args.backend, args.raster_root.as_ref())?;
    let clock = SystemClock::new();
    let engine = Engine::new(provider.as_ref(), &registry, &clock);
    let emb = engine
        .get_embedding(
            &args.model,
            &spatial,
            &temporal,
            &output,
            sensor.as_ref(),
            args.input_prep.into(),
        )
        .map_err(engine_fail)?;
    let dir = args.out.join(item_dir_name(0)).join(&args.model);
    serialize_embedding(&emb, &dir).map_err(|e| runtime(e.to_string()))?;
    let shape: Vec<String> = emb.data.shape().iter().map(|d| d.to_string()).collect();
    println!("wrote {}", dir.display());
    println!("shape [{}] mode {}", shape.join(", "), emb.data.mode().as_str());
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// export-batch

/// Config-file counterpart of ExportBatchArgs (same keys, snake_case).
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportBatchConfig {
    points_file: Option<PathBuf>,
    /// Inline spatial specs, alternative to points_file.
    points: Option<Vec<SpatialSpec>>,
    models: Option<Vec<String>>,
    year: Option<i32>,
    start: Option<String>,
    end: Option<String>,
    mode: Option<String>,
    scale_m: Option<f64>,
    pooling: Option<String>,
    chunk_size: Option<usize>,
    num_workers: Option<usize>,
    writer_workers: Option<usize>,
    async_write: Option<bool>,
    max_retries: Option<u32>,
    retry_backoff_s: Option<f64>,
    continue_on_error: Option<bool>,
    resume: Option<bool>,
    save_inputs: Option<bool>,
    cross_chunk_cache: Option<bool>,
    layout: Option<String>,
    input_prep: Option<String>,
    sensor: Option<SensorSpec>,
    model_sensors: Option<BTreeMap<String, SensorSpec>>,
    backend: Option<String>,
    raster_root: Option<PathBuf>,
    store_roots: Option<Vec<PathBuf>>,
    out: Option<PathBuf>,
    device: Option<String>,
}

fn read_points_csv(path: &Path, text: &str) -> Result<Vec<SpatialSpec>, CliFail> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(user(format!("{}: empty points file", path.display()))),
        }
    };
    let normalized: String = header.split(',').map(|c| c.trim()).collect::<Vec<_>>().join(",");
    if normalized != "lon,lat,buffer_m" {
        return Err(user(format!(
            "{}: header must be lon,lat,buffer_m (got {header:?})",
            path.display()
        )));
    }
    let mut points = Vec::new();
    let mut bad_lines = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        let parsed: Option<Vec<f64>> = if fields.len() == 3 {
            fields.iter().map(|f| f.parse::<f64>().ok()).collect()
        } else {
            None
        };
        match parsed {
            Some(v) => points.push(SpatialSpec::point_buffer(v[0], v[1], v[2])),
            None => bad_lines.push(idx + 1),
        }
    }
    if !bad_lines.is_empty() {
        return Err(user(format!(
            "{}: malformed rows at lines {bad_lines:?} (want lon,lat,buffer_m)",
            path.display()
        )));
    }
    if points.is_empty() {
        return Err(user(format!("{}: no points", path.display())));
    }
    Ok(points)
}

fn read_points_file(path: &Path) -> Result<Vec<SpatialSpec>, CliFail> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| user(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<Vec<SpatialSpec>>(&text)
            .map_err(|e| user(format!("{}: bad JSON points: {e}", path.display())))
    } else {
        read_points_csv(path, &text)
    }
}

fn cmd_export_batch(args: &ExportBatchArgs) -> Result<i32, CliFail> {
    let config: ExportBatchConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| user(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| user(format!("bad config {}: {e}", path.display())))?
        }
        None => ExportBatchConfig::default(),
    };

    // Flags win over config; defaults apply last.
    let points_file = args.points_file.clone().or(config.points_file);
    let spatials = match (&points_file, &config.points) {
        (Some(path), _) => read_points_file(path)?,
        (None, Some(points)) if !points.is_empty() => points.clone(),
        _ => return Err(user("no input points: give --points-file or config points")),
    };
    let models = args
        .models
        .clone()
        .or(config.models)
        .ok_or_else(|| user("no models: give --models"))?;
    let year = args.year.or(config.year);
    let start = args.start.clone().or(config.start);
    let end = args.end.clone().or(config.end);
    let temporal = parse_temporal(year, start.as_deref(), end.as_deref())?;
    let mode: OutputMode = match (args.mode, config.mode.as_deref()) {
        (Some(m), _) => m.into(),
        (None, Some(s)) => OutputMode::parse(s).map_err(|e| user(e.to_string()))?,
        (None, None) => OutputMode::Pooled,
    };
    let pooling = match args.pooling.as_deref().or(config.pooling.as_deref()) {
        Some(s) => Pooling::parse(s).map_err(|e| user(e.to_string()))?,
        None => Pooling::Mean,
    };
    let layout = args
        .layout
        .clone()
        .or(config.layout)
        .unwrap_or_else(|| "per_item".to_string());
    if layout != "per_item" {
        return Err(user(format!(
            "unknown layout {layout:?}; only per_item is defined"
        )));
    }
    let input_prep: InputPrep = match (args.input_prep, config.input_prep.as_deref()) {
        (Some(p), _) => p.into(),
        (None, Some("resize")) => InputPrep::Resize,
        (None, Some("tile")) => InputPrep::Tile,
        (None, Some(other)) => {
            return Err(user(format!("unknown input_prep {other:?}")));
        }
        (None, None) => InputPrep::Resize,
    };
    let sensor = match (&args.sensor_json, config.sensor) {
        (Some(json), _) => Some(parse_sensor(json)?),
        (None, Some(s)) => {
            s.validate().map_err(|e| user(e.to_string()))?;
            Some(s)
        }
        (None, None) => None,
    };
    let mut model_sensors = config.model_sensors.unwrap_or_default();
    for pair in &args.model_sensor_json {
        let (model, json) = pair.split_once('=').ok_or_else(|| {
            user(format!("--model-sensor-json wants model=<json>, got {pair:?}"))
        })?;
        model_sensors.insert(model.to_string(), parse_sensor(json)?);
    }
    let backend = match (args.backend, config.backend.as_deref()) {
        (Some(b), _) => b,
        (None, Some("mock")) => BackendArg::Mock,
        (None, Some("local")) => BackendArg::Local,
        (None, Some(other)) => return Err(user(format!("unknown backend {other:?}"))),
        (None, None) => BackendArg::Mock,
    };
    let raster_root = args.raster_root.clone().or(config.raster_root);
    let mut store_roots = args.store_roots.clone();
    if let Some(extra) = config.store_roots {
        store_roots.extend(extra);
    }
    let out = args
        .out
        .clone()
        .or(config.out)
        .ok_or_else(|| user("no output dir: give --out or set RS_EMBED_OUT"))?;

    let mut req = BatchRequest::new(spatials, models, temporal, out);
    req.output = OutputSpec {
        mode,
        scale_m: args.scale_m.or(config.scale_m),
        pooling,
    };
    req.sensor = sensor;
    req.model_sensors = model_sensors;
    req.input_prep = input_prep;
    if let Some(v) = args.chunk_size.or(config.chunk_size) {
        req.chunk_size = v;
    }
    if let Some(v) = args.num_workers.or(config.num_workers) {
        req.num_workers = v;
    }
    if let Some(v) = args.writer_workers.or(config.writer_workers) {
        req.writer_workers = v;
    }
    if let Some(v) = args.async_write.or(config.async_write) {
        req.async_write = v;
    }
    if let Some(v) = args.max_retries.or(config.max_retries) {
        req.max_retries = v;
    }
    if let Some(v) = args.retry_backoff_s.or(config.retry_backoff_s) {
        req.retry_backoff_s = v;
    }
    req.continue_on_error = args
        .continue_on_error
        .or(config.continue_on_error)
        .unwrap_or(false);
    req.resume = args.resume.or(config.resume).unwrap_or(false);
    req.save_inputs = args.save_inputs.or(config.save_inputs).unwrap_or(false);
    req.cross_chunk_cache = args
        .cross_chunk_cache
        .or(config.cross_chunk_cache)
        .unwrap_or(false);
    req.device = args.device.clone().or(config.device);

    let registry = build_registry(&store_roots)?;
    let provider = build_provider(backend, raster_root.as_ref())?;
    let clock = SystemClock::new();
    let engine = Engine::new(provider.as_ref(), &registry, &clock);
    let manifest = engine.export_batch(&req).map_err(engine_fail)?;
    print_summary(&req.out_dir, &manifest.summary);
    Ok(exit_for_summary(&manifest.summary))
}

fn print_summary(out_dir: &Path, summary: &Summary) {
    println!("manifest: {}", out_dir.join("manifest.json").display());
    println!(
        "summary: ok={} partial={} failed={}",
        summary.ok, summary.partial, summary.failed
    );
}

fn exit_for_summary(summary: &Summary) -> i32 {
    if summary.failed > 0 {
        EXIT_RUNTIME
    } else if summary.partial > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}

fn cmd_make_fixtures(args: &MakeFixturesArgs) -> Result<i32, CliFail> {
    match args.kind {
        FixtureKind::RasterStore => {
            let temporal = match (args.year, &args.start, &args.end) {
                (None, None, None) => {
                    TemporalSpec::range("2022-06-01", "2022-09-01").unwrap()
                }
                _ => parse_temporal(args.year, args.start.as_deref(), args.end.as_deref())?,
            };
            let scale_m = args.scale_m.unwrap_or(match args.collection.as_str() {
                "mock-b" => 20.0,
                _ => 10.0,
            });
            let report = make_raster_store(
                &args.out,
                &RasterStoreSpec {
                    collection: args.collection.clone(),
                    lon: args.lon,
                    lat: args.lat,
                    buffer_m: args.buffer_m,
                    scale_m,
                    temporal,
                    margin_px: args.margin_px,
                },
            )
            .map_err(|e| runtime(e.to_string()))?;
            println!(
                "raster store at {}: {} scenes, {}x{} px, bands [{}]",
                args.out.display(),
                report.scenes,
                report.width,
                report.height,
                report.bands.join(",")
            );
        }
        FixtureKind::PrecomputedStore => {
            let years = args.years.clone().unwrap_or_else(|| vec![2022]);
            let report = make_precomputed_store(
                &args.out,
                &PrecomputedStoreSpec {
                    model_id: args.model_id.clone(),
                    embed_dim: args.embed_dim,
                    scale_m: args.scale_m.unwrap_or(10.0),
                    tile_px: args.tile_px,
                    years,
                    lon: args.lon,
                    lat: args.lat,
                    buffer_m: args.buffer_m,
                    pad_tiles: args.pad_tiles,
                },
            )
            .map_err(|e| runtime(e.to_string()))?;
            println!(
                "precomputed store at {}: {} tiles, x {}..={}, y {}..={}",
                args.out.display(),
                report.tiles,
                report.tile_range_x.0,
                report.tile_range_x.1,
                report.tile_range_y.0,
                report.tile_range_y.1
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<i32, CliFail> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.embedding_dir.join("viz.ppm"));
    let img = visualize_file(&args.embedding_dir, &out).map_err(|e| {
        use crate::viz::VizError;
        match &e {
            VizError::NotGrid { .. } => user(e.to_string()),
            VizError::Export(_) => user(e.to_string()),
            VizError::Io { .. } => runtime(e.to_string()),
        }
    })?;
    if img.components < 3 {
        eprintln!(
            "warning: embedding rank {} < 3, channels replicated",
            img.components
        );
    }
    println!("wrote {} ({}x{})", out.display(), img.width, img.height);
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_points_parse() {
        let path = Path::new("points.csv");
        let text = "lon,lat,buffer_m\n121.5,31.2,640\n-70.6,-33.4,320\n";
        let points = read_points_csv(path, text).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(
            points[1],
            SpatialSpec::point_buffer(-70.6, -33.4, 320.0)
        );
    }

    #[test]
    fn csv_reports_malformed_line_numbers() {
        let path = Path::new("points.csv");
        let text = "lon,lat,buffer_m\n121.5,31.2,640\noops\n1,2\n3,4,xyz\n";
        let err = read_points_csv(path, text).unwrap_err();
        assert_eq!(err.code, EXIT_USER);
        assert!(err.message.contains("[3, 4, 5]"), "{}", err.message);
    }

    #[test]
    fn csv_requires_exact_header() {
        let path = Path::new("points.csv");
        let err = read_points_csv(path, "x,y,r\n1,2,3\n").unwrap_err();
        assert_eq!(err.code, EXIT_USER);
        assert!(err.message.contains("lon,lat,buffer_m"));
    }

    #[test]
    fn temporal_flag_combinations() {
        assert!(parse_temporal(Some(2022), None, None).is_ok());
        assert!(parse_temporal(None, Some("2022-06-01"), Some("2022-09-01")).is_ok());
        assert_eq!(
            parse_temporal(None, None, None).unwrap_err().code,
            EXIT_USER
        );
        assert_eq!(
            parse_temporal(Some(2022), Some("2022-06-01"), None)
                .unwrap_err()
                .code,
            EXIT_USER
        );
        // Reversed range is a user error at parse time.
        assert_eq!(
            parse_temporal(None, Some("2022-09-01"), Some("2022-06-01"))
                .unwrap_err()
                .code,
            EXIT_USER
        );
    }

    #[test]
    fn cli_parses_every_batch_flag() {
        let cli = Cli::try_parse_from([
            "geoembed",
            "export-batch",
            "--points-file", "pts.csv",
            "--models", "ref-d32,ref-d64",
            "--start", "2022-06-01",
            "--end", "2022-09-01",
            "--mode", "grid",
            "--pooling", "mean",
            "--chunk-size", "8",
            "--num-workers", "4",
            "--writer-workers", "2",
            "--async-write", "false",
            "--max-retries", "3",
            "--retry-backoff-s", "0.2",
            "--continue-on-error",
            "--resume",
            "--save-inputs",
            "--cross-chunk-cache",
            "--layout", "per_item",
            "--input-prep", "tile",
            "--backend", "mock",
            "--out", "outdir",
            "--device", "auto",
        ])
        .unwrap();
        let Command::ExportBatch(args) = cli.command else {
            panic!("wrong subcommand");
        };
        assert_eq!(args.models.as_deref().unwrap(), ["ref-d32", "ref-d64"]);
        assert_eq!(args.async_write, Some(false));
        assert_eq!(args.continue_on_error, Some(true));
        assert_eq!(args.chunk_size, Some(8));
        assert_eq!(args.input_prep, Some(PrepArg::Tile));
    }

    #[test]
    fn fixture_kind_names_are_snake_case() {
        let cli = Cli::try_parse_from([
            "geoembed",
            "make-fixtures",
            "--kind",
            "raster_store",
            "--out",
            "fx",
        ])
        .unwrap();
        let Command::MakeFixtures(args) = cli.command else {
            panic!("wrong subcommand");
        };
        assert_eq!(args.kind, FixtureKind::RasterStore);
        assert!(Cli::try_parse_from([
            "geoembed",
            "make-fixtures",
            "--kind",
            "precomputed_store"
        ])
        .is_ok());
        assert!(Cli::try_parse_from(["geoembed", "make-fixtures", "--kind", "nope"]).is_err());
    }

    #[test]
    fn summary_exit_codes() {
        let s = |ok, partial, failed| Summary { ok, partial, failed };
        assert_eq!(exit_for_summary(&s(3, 0, 0)), EXIT_OK);
        assert_eq!(exit_for_summary(&s(2, 1, 0)), EXIT_PARTIAL);
        assert_eq!(exit_for_summary(&s(2, 1, 1)), EXIT_RUNTIME);
    }
}
