//! Batch orchestration: request validation, capability matching, chunked
//! deduplicated prefetch, batch inference with bounded retries, and
//! asynchronous export with per-item failure isolation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use geoembed_core::canonical::{canonical_spatial, spec_hash, ProviderKey};
use geoembed_core::geo::FootprintLimits;
use geoembed_core::model::{Capability, InputPrep, ModelBackend, TemporalSemantics};
use geoembed_core::spec::{
    validate_spatial, OutputSpec, SensorSpec, SpatialSpec, TemporalSpec,
};
use serde_json::Value;

use crate::export::{
    build_input_meta, build_meta, item_dir_name, item_status, persist_input, read_manifest,
    serialize_embedding, summarize, write_manifest, Embedding, EntryStatus, ExportManifest,
    ManifestItem, ManifestModelEntry, MetaContext, RequestSummary, Stage, TemporalSummary,
    Timings, ENGINE_VERSION,
};
use crate::provider::{Gauge, ImageryProvider, Observation};
use crate::registry::{EmbedError, EmbedSource, Embedder, ModelRegistry};

// ---------------------------------------------------------------------------
// Clock

/// Time source for retry delays, stage timings, and metadata timestamps.
/// Injectable so tests can verify schedules without waiting.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep(&self, d: Duration);
    fn utc_rfc3339(&self) -> String;
}

pub struct SystemClock {
    start: Instant,
    fixed_utc: Option<String>,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            fixed_utc: None,
        }
    }

    /// Real sleeps and timings, but a pinned timestamp — for byte-identical
    /// reruns in tests.
    pub fn with_fixed_utc(utc: &str) -> Self {
        Self {
            start: Instant::now(),
            fixed_utc: Some(utc.to_string()),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }

    fn utc_rfc3339(&self) -> String {
        match &self.fixed_utc {
            Some(s) => s.clone(),
            None => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

#[derive(Default)]
struct ManualState {
    now_ms: u64,
    sleeps: Vec<Duration>,
}

/// Virtual clock: `sleep` advances time instantly and records the request.
pub struct ManualClock {
    state: Mutex<ManualState>,
    utc: String,
}

impl ManualClock {
    pub fn new(utc: &str) -> Self {
        Self {
            state: Mutex::new(ManualState::default()),
            utc: utc.to_string(),
        }
    }

    pub fn recorded_sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().sleeps.clone()
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.state.lock().unwrap().now_ms
    }

    fn sleep(&self, d: Duration) {
        let mut st = self.state.lock().unwrap();
        st.now_ms += d.as_millis() as u64;
        st.sleeps.push(d);
    }

    fn utc_rfc3339(&self) -> String {
        self.utc.clone()
    }
}

// ---------------------------------------------------------------------------
// Retry

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_s: f64,
}

impl RetryPolicy {
    pub fn max_attempts(&self) -> u32 {
        self.max_retries + 1
    }

    /// Delay inserted before attempt `k` (1-based): none before the first,
    /// backoff_s * 2^(k-2) before each retry.
    pub fn delay_before(&self, attempt: u32) -> Option<Duration> {
        if attempt <= 1 {
            None
        } else {
            let factor = 2f64.powi(attempt as i32 - 2);
            Some(Duration::from_secs_f64(self.backoff_s * factor))
        }
    }
}

/// Stage error plus whether another attempt could plausibly succeed.
pub struct RetryErr {
    pub message: String,
    pub retryable: bool,
}

/// Run `op` under the retry schedule starting at `first_attempt` (2 when a
/// failed batch call already consumed attempt 1). Returns the final outcome
/// and the number of the last attempt made. No delay after the final failure.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    clock: &dyn Clock,
    first_attempt: u32,
    mut op: impl FnMut(u32) -> Result<T, RetryErr>,
) -> (Result<T, String>, u32) {
    let mut attempt = first_attempt.max(1);
    loop {
        if let Some(d) = policy.delay_before(attempt) {
            clock.sleep(d);
        }
        match op(attempt) {
            Ok(v) => return (Ok(v), attempt),
            Err(e) => {
                if !e.retryable || attempt >= policy.max_attempts() {
                    return (Err(e.message), attempt);
                }
                attempt += 1;
            }
        }
    }
}

fn embed_retry_err(e: EmbedError) -> RetryErr {
    // Deterministic mismatches will fail identically on every attempt.
    let retryable = matches!(e, EmbedError::InjectedBatchFailure | EmbedError::Other(_));
    RetryErr {
        message: e.to_string(),
        retryable,
    }
}

// ---------------------------------------------------------------------------
// Request

#[derive(Debug, Clone)]
pub struct BatchRequest {
    pub spatials: Vec<SpatialSpec>,
    pub models: Vec<String>,
    pub temporal: TemporalSpec,
    pub output: OutputSpec,
    /// Global sensor override for all on-the-fly models.
    pub sensor: Option<SensorSpec>,
    /// Per-model sensor overrides; take precedence over the global one.
    pub model_sensors: BTreeMap<String, SensorSpec>,
    pub input_prep: InputPrep,
    pub chunk_size: usize,
    pub num_workers: usize,
    pub writer_workers: usize,
    pub async_write: bool,
    pub max_retries: u32,
    pub retry_backoff_s: f64,
    pub continue_on_error: bool,
    pub resume: bool,
    pub save_inputs: bool,
    /// Reuse prefetched observations across chunk boundaries.
    pub cross_chunk_cache: bool,
    pub out_dir: PathBuf,
    /// Recorded in metadata only; the reference backend is device-free.
    pub device: Option<String>,
}

impl BatchRequest {
    pub fn new(
        spatials: Vec<SpatialSpec>,
        models: Vec<String>,
        temporal: TemporalSpec,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            spatials,
            models,
            temporal,
            output: OutputSpec::pooled(),
            sensor: None,
            model_sensors: BTreeMap::new(),
            input_prep: InputPrep::Resize,
            chunk_size: 16,
            num_workers: 4,
            writer_workers: 2,
            async_write: true,
            max_retries: 2,
            retry_backoff_s: 0.1,
            continue_on_error: false,
            resume: false,
            save_inputs: false,
            cross_chunk_cache: false,
            out_dir: out_dir.into(),
            device: None,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_s: self.retry_backoff_s,
        }
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid request: {detail}")]
    Validation { detail: String },
    #[error("model {model_id:?} cannot serve this request: requested {requested}; supported: {supported}")]
    CapabilityMismatch {
        model_id: String,
        requested: String,
        supported: String,
    },
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
    #[error("batch aborted at item {index} model {model_id:?} during {stage:?}: {detail}")]
    Aborted {
        index: usize,
        model_id: String,
        stage: Stage,
        detail: String,
    },
    #[error(transparent)]
    Export(#[from] crate::export::ExportError),
    #[error("{0}")]
    Runtime(String),
}

impl EngineError {
    /// Caller mistakes (bad request, unknown model) as opposed to runtime
    /// failures; drives CLI exit codes.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            EngineError::Validation { .. }
                | EngineError::CapabilityMismatch { .. }
                | EngineError::Registry(crate::registry::RegistryError::UnknownModel { .. })
        )
    }
}

// ---------------------------------------------------------------------------
// Validation and capability matching

/// A model matched against the request: its capability, the effective
/// sensor (None for store-backed models), and whether to use the batch API.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub cap: Capability,
    pub sensor: Option<SensorSpec>,
    pub use_batch: bool,
}

fn mismatch(model_id: &str, requested: String, supported: String) -> EngineError {
    EngineError::CapabilityMismatch {
        model_id: model_id.to_string(),
        requested,
        supported,
    }
}

/// Resolve the effective sensor (per-model override > global override >
/// capability default) and confirm the model can serve the request.
pub fn resolve_model(
    registry: &ModelRegistry,
    model_id: &str,
    output: &OutputSpec,
    temporal: &TemporalSpec,
    global_sensor: Option<&SensorSpec>,
    model_sensor: Option<&SensorSpec>,
) -> Result<ResolvedModel, EngineError> {
    let cap = registry.describe(model_id)?;
    if !cap.supports_mode(output.mode) {
        let supported: Vec<&str> = cap.output_modes.iter().map(|m| m.as_str()).collect();
        return Err(mismatch(
            model_id,
            format!("output_mode {}", output.mode.as_str()),
            format!("output_modes {supported:?}"),
        ));
    }
    if cap.temporal_semantics == TemporalSemantics::Annual && temporal.as_year().is_none() {
        return Err(mismatch(
            model_id,
            format!("temporal window [{}, {})", temporal.start, temporal.end),
            "temporal_semantics annual (exact calendar-year window)".to_string(),
        ));
    }
    if output.scale_m.is_some() && !cap.resolution_aligned {
        return Err(mismatch(
            model_id,
            format!("output scale_m {:?}", output.scale_m.unwrap()),
            "fixed output grid (model is not resolution-aligned)".to_string(),
        ));
    }
    match cap.backend {
        ModelBackend::Precomputed => {
            if model_sensor.is_some() {
                return Err(mismatch(
                    model_id,
                    "per-model sensor override".to_string(),
                    "store-backed input (no sensor configuration)".to_string(),
                ));
            }
            // A global override targets on-the-fly models; stores ignore it.
            Ok(ResolvedModel {
                use_batch: cap.supports_batch,
                sensor: None,
                cap,
            })
        }
        ModelBackend::OnTheFly => {
            let sensor = model_sensor
                .or(global_sensor)
                .cloned()
                .or_else(|| cap.default_sensor.clone())
                .ok_or_else(|| {
                    mismatch(
                        model_id,
                        "no sensor given".to_string(),
                        "a sensor override (model has no default)".to_string(),
                    )
                })?;
            sensor.validate().map_err(|e| EngineError::Validation {
                detail: format!("sensor for model {model_id:?}: {e}"),
            })?;
            if !cap.band_stats.is_empty() && sensor.bands.len() != cap.band_stats.len() {
                return Err(mismatch(
                    model_id,
                    format!("{} bands {:?}", sensor.bands.len(), sensor.bands),
                    format!("{} bands (normalization stats)", cap.band_stats.len()),
                ));
            }
            Ok(ResolvedModel {
                use_batch: cap.supports_batch,
                sensor: Some(sensor),
                cap,
            })
        }
    }
}

/// Validate every spec and resolve every model, aborting at the first
/// failure with its index. Makes zero provider calls.
pub fn validate_request(
    req: &BatchRequest,
    registry: &ModelRegistry,
) -> Result<Vec<ResolvedModel>, EngineError> {
    let invalid = |detail: String| Err(EngineError::Validation { detail });
    if req.spatials.is_empty() {
        return invalid("spatials is empty".into());
    }
    if req.models.is_empty() {
        return invalid("models is empty".into());
    }
    for (i, m) in req.models.iter().enumerate() {
        if req.models[..i].contains(m) {
            return invalid(format!("models[{i}]: duplicate model id {m:?}"));
        }
    }
    for key in req.model_sensors.keys() {
        if !req.models.contains(key) {
            return invalid(format!(
                "model_sensors references {key:?}, which is not in models"
            ));
        }
    }
    if req.chunk_size == 0 {
        return invalid("chunk_size must be > 0".into());
    }
    if req.num_workers == 0 {
        return invalid("num_workers must be > 0".into());
    }
    if req.writer_workers == 0 {
        return invalid("writer_workers must be > 0".into());
    }
    if !(req.retry_backoff_s >= 0.0 && req.retry_backoff_s.is_finite()) {
        return invalid(format!(
            "retry_backoff_s must be finite and >= 0, got {}",
            req.retry_backoff_s
        ));
    }
    if let Some(s) = req.output.scale_m {
        if !(s > 0.0 && s.is_finite()) {
            return invalid(format!("output.scale_m must be finite and > 0, got {s}"));
        }
    }
    for (i, spatial) in req.spatials.iter().enumerate() {
        validate_spatial(spatial)
            .map_err(|e| EngineError::Validation {
                detail: format!("spatial[{i}]: {e}"),
            })
            .map(|_| ())?;
    }
    let mut resolved = Vec::with_capacity(req.models.len());
    for model_id in &req.models {
        resolved.push(resolve_model(
            registry,
            model_id,
            &req.output,
            &req.temporal,
            req.sensor.as_ref(),
            req.model_sensors.get(model_id),
        )?);
    }
    Ok(resolved)
}

/// Contiguous index ranges of at most `chunk_size`.
pub fn plan_chunks(n: usize, chunk_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(chunk_size.max(1))
        .map(|s| s..(s + chunk_size.max(1)).min(n))
        .collect()
}

// ---------------------------------------------------------------------------
// Hooks and instrumentation

/// Predicate over (item index, model id, attempt number).
pub type EntryPredicate = dyn Fn(usize, &str, u32) -> bool + Send + Sync;

/// Fault-injection and observability hooks; all default to inert.
pub struct EngineHooks {
    /// Forces an inference failure whenever it returns true.
    pub infer_failure: Option<Arc<EntryPredicate>>,
    /// Forces an export failure whenever it returns true.
    pub write_failure: Option<Arc<EntryPredicate>>,
    /// Injected latency added to every write attempt.
    pub write_latency: Duration,
    /// Concurrent-write occupancy, for bounded-concurrency assertions.
    pub writer_gauge: Arc<Gauge>,
    /// Per-chunk dedup accounting, appended as chunks are planned.
    pub chunk_stats: Arc<Mutex<Vec<ChunkStat>>>,
}

impl Default for EngineHooks {
    fn default() -> Self {
        Self {
            infer_failure: None,
            write_failure: None,
            write_latency: Duration::ZERO,
            writer_gauge: Arc::new(Gauge::default()),
            chunk_stats: Arc::new(Mutex::new(Vec::new())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkStat {
    pub chunk_index: usize,
    pub items: usize,
    /// Keys fetched for this chunk after dedup.
    pub unique_keys: usize,
    /// Keys this chunk needed that were already cached (cross-chunk reuse).
    pub cache_hits: usize,
}

// ---------------------------------------------------------------------------
// Engine

struct FetchRecord {
    result: Result<Arc<Observation>, String>,
    attempts: u32,
    elapsed_ms: u64,
}

struct WriteTask {
    index: usize,
    model_id: String,
    embedding: Embedding,
    obs: Option<Arc<Observation>>,
    input_meta: Option<Value>,
    prefetch_attempts: u32,
    infer_attempts: u32,
    prefetch_ms: u64,
    infer_ms: u64,
    spec_hash: String,
}

struct AbortInfo {
    index: usize,
    model_id: String,
    stage: Stage,
    detail: String,
}

type ResultMap = Mutex<HashMap<(usize, String), ManifestModelEntry>>;

pub struct Engine<'a> {
    pub provider: &'a dyn ImageryProvider,
    pub registry: &'a ModelRegistry,
    pub clock: &'a dyn Clock,
    pub limits: FootprintLimits,
    pub hooks: EngineHooks,
}

impl<'a> Engine<'a> {
    pub fn new(
        provider: &'a dyn ImageryProvider,
        registry: &'a ModelRegistry,
        clock: &'a dyn Clock,
    ) -> Self {
        Self {
            provider,
            registry,
            clock,
            limits: FootprintLimits::default(),
            hooks: EngineHooks::default(),
        }
    }

    fn failed_entry(
        model_id: &str,
        stage: Stage,
        error: String,
        attempts: u32,
        timings: Timings,
        spec_hash: String,
    ) -> ManifestModelEntry {
        ManifestModelEntry {
            model_id: model_id.to_string(),
            status: EntryStatus::Failed,
            fail_stage: Some(stage),
            error: Some(error),
            attempts,
            timings,
            outputs: Vec::new(),
            spec_hash,
        }
    }

    fn settle(
        results: &ResultMap,
        abort: &AtomicBool,
        first_failure: &Mutex<Option<AbortInfo>>,
        continue_on_error: bool,
        index: usize,
        entry: ManifestModelEntry,
    ) {
        if entry.status == EntryStatus::Failed && !continue_on_error {
            let mut ff = first_failure.lock().unwrap();
            if ff.is_none() {
                *ff = Some(AbortInfo {
                    index,
                    model_id: entry.model_id.clone(),
                    stage: entry.fail_stage.unwrap_or(Stage::Inference),
                    detail: entry.error.clone().unwrap_or_default(),
                });
            }
            abort.store(true, Ordering::SeqCst);
        }
        results
            .lock()
            .unwrap()
            .insert((index, entry.model_id.clone()), entry);
    }

    /// Fetch each key once, up to `num_workers` in flight, each with its own
    /// retry schedule. Failures are recorded per key, never aborting peers.
    fn prefetch(
        &self,
        tasks: Vec<(ProviderKey, SpatialSpec, SensorSpec)>,
        temporal: &TemporalSpec,
        num_workers: usize,
        policy: &RetryPolicy,
    ) -> HashMap<ProviderKey, FetchRecord> {
        if tasks.is_empty() {
            return HashMap::new();
        }
        let workers = num_workers.min(tasks.len()).max(1);
        let out = Mutex::new(HashMap::with_capacity(tasks.len()));
        let queue = Mutex::new(tasks.into_iter());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap().next();
                    let Some((key, spatial, sensor)) = next else {
                        break;
                    };
                    let t0 = self.clock.now_ms();
                    let (result, attempts) = with_retry(policy, self.clock, 1, |_| {
                        self.provider
                            .fetch(&spatial, temporal, &sensor, &self.limits)
                            .map(Arc::new)
                            .map_err(|e| RetryErr {
                                retryable: e.is_retryable(),
                                message: e.to_string(),
                            })
                    });
                    let elapsed_ms = self.clock.now_ms().saturating_sub(t0);
                    out.lock().unwrap().insert(
                        key,
                        FetchRecord {
                            result,
                            attempts,
                            elapsed_ms,
                        },
                    );
                });
            }
        });
        out.into_inner().unwrap()
    }

    /// Write one entry's files (with retry, latency, and failure injection),
    /// cleaning up partial output on final failure.
    fn perform_write(&self, task: WriteTask, out_dir: &Path, policy: &RetryPolicy) -> (usize, ManifestModelEntry) {
        let _guard = self.hooks.writer_gauge.enter();
        let rel_dir = format!("{}/{}", item_dir_name(task.index), task.model_id);
        let dir = out_dir.join(item_dir_name(task.index)).join(&task.model_id);
        let t0 = self.clock.now_ms();
        let (result, write_attempts) = with_retry(policy, self.clock, 1, |k| {
            if !self.hooks.write_latency.is_zero() {
                self.clock.sleep(self.hooks.write_latency);
            }
            if let Some(h) = &self.hooks.write_failure {
                if h(task.index, &task.model_id, k) {
                    return Err(RetryErr {
                        message: format!("injected write failure (item {})", task.index),
                        retryable: true,
                    });
                }
            }
            let mut files = serialize_embedding(&task.embedding, &dir).map_err(|e| RetryErr {
                message: e.to_string(),
                retryable: true,
            })?;
            if let (Some(obs), Some(meta)) = (&task.obs, &task.input_meta) {
                files.extend(persist_input(obs, meta, &dir).map_err(|e| RetryErr {
                    message: e.to_string(),
                    retryable: true,
                })?);
            }
            Ok(files)
        });
        let timings = Timings {
            prefetch_ms: task.prefetch_ms,
            infer_ms: task.infer_ms,
            write_ms: self.clock.now_ms().saturating_sub(t0),
        };
        // One attempts figure per entry: the deepest any stage had to go.
        let attempts = task
            .prefetch_attempts
            .max(task.infer_attempts)
            .max(write_attempts);
        let entry = match result {
            Ok(files) => ManifestModelEntry {
                model_id: task.model_id.clone(),
                status: EntryStatus::Ok,
                fail_stage: None,
                error: None,
                attempts,
                timings,
                outputs: files.iter().map(|f| format!("{rel_dir}/{f}")).collect(),
                spec_hash: task.spec_hash.clone(),
            },
            Err(msg) => {
                let _ = std::fs::remove_dir_all(&dir);
                Self::failed_entry(
                    &task.model_id,
                    Stage::Export,
                    msg,
                    attempts,
                    timings,
                    task.spec_hash.clone(),
                )
            }
        };
        (task.index, entry)
    }

    /// Full pipeline. Returns the manifest on success or partial success
    /// (continue_on_error); aborts with a flushed manifest otherwise.
    pub fn export_batch(&self, req: &BatchRequest) -> Result<ExportManifest, EngineError> {
        let resolved = validate_request(req, self.registry)?;
        let policy = req.retry_policy();
        let created_utc = self.clock.utc_rfc3339();
        std::fs::create_dir_all(&req.out_dir)
            .map_err(|e| EngineError::Runtime(format!("cannot create out_dir: {e}")))?;

        let n = req.spatials.len();
        // Audit identity of every (item, model) pair.
        let spec_hashes: Vec<Vec<String>> = req
            .spatials
            .iter()
            .map(|s| {
                resolved
                    .iter()
                    .map(|rm| {
                        spec_hash(
                            &rm.cap.model_id,
                            s,
                            &req.temporal,
                            &req.output,
                            rm.sensor.as_ref(),
                        )
                    })
                    .collect()
            })
            .collect();
        let item_keys: Vec<Vec<Option<ProviderKey>>> = req
            .spatials
            .iter()
            .map(|s| {
                resolved
                    .iter()
                    .map(|rm| {
                        rm.sensor
                            .as_ref()
                            .map(|sensor| ProviderKey::new(s, sensor, &req.temporal))
                    })
                    .collect()
            })
            .collect();

        // Resume: keep prior ok entries whose spec hash still matches and
        // whose files are still present.
        let mut resumed: HashMap<(usize, String), ManifestModelEntry> = HashMap::new();
        if req.resume {
            let manifest_path = req.out_dir.join("manifest.json");
            if let Ok(prior) = read_manifest(&manifest_path) {
                for item in prior.items {
                    if item.index >= n {
                        continue;
                    }
                    for entry in item.models {
                        if entry.status != EntryStatus::Ok {
                            continue;
                        }
                        let Some(mi) = resolved
                            .iter()
                            .position(|rm| rm.cap.model_id == entry.model_id)
                        else {
                            continue;
                        };
                        if entry.spec_hash != spec_hashes[item.index][mi] {
                            continue;
                        }
                        if !entry
                            .outputs
                            .iter()
                            .all(|p| req.out_dir.join(p).exists())
                        {
                            continue;
                        }
                        resumed.insert((item.index, entry.model_id.clone()), entry);
                    }
                }
            }
        }

        // One embedder per model for the whole run, failures settled per entry.
        let instances: Vec<Result<Arc<dyn Embedder>, String>> = resolved
            .iter()
            .map(|rm| {
                self.registry
                    .instance(&rm.cap.model_id)
                    .map_err(|e| e.to_string())
            })
            .collect();

        let results: ResultMap = Mutex::new(HashMap::new());
        let abort = AtomicBool::new(false);
        let first_failure: Mutex<Option<AbortInfo>> = Mutex::new(None);

        std::thread::scope(|scope| {
            let results_ref = &results;
            let abort_ref = &abort;
            let first_failure_ref = &first_failure;
            let sender = if req.async_write {
                let (tx, rx) =
                    crossbeam_channel::bounded::<WriteTask>(req.writer_workers);
                for _ in 0..req.writer_workers {
                    let rx = rx.clone();
                    scope.spawn(move || {
                        while let Ok(task) = rx.recv() {
                            let (index, entry) =
                                self.perform_write(task, &req.out_dir, &policy);
                            Self::settle(
                                results_ref,
                                abort_ref,
                                first_failure_ref,
                                req.continue_on_error,
                                index,
                                entry,
                            );
                        }
                    });
                }
                Some(tx)
            } else {
                None
            };

            let dispatch = |task: WriteTask| match &sender {
                Some(tx) => tx.send(task).expect("writer channel open"),
                None => {
                    let (index, entry) = self.perform_write(task, &req.out_dir, &policy);
                    Self::settle(
                        results_ref,
                        abort_ref,
                        first_failure_ref,
                        req.continue_on_error,
                        index,
                        entry,
                    );
                }
            };

            let mut cache: HashMap<ProviderKey, FetchRecord> = HashMap::new();
            for (ci, chunk) in plan_chunks(n, req.chunk_size).into_iter().enumerate() {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                if !req.cross_chunk_cache {
                    cache.clear();
                }

                // Dedup: one fetch per unique (spatial, sensor, temporal) key.
                let mut new_keys: BTreeMap<ProviderKey, (SpatialSpec, SensorSpec)> =
                    BTreeMap::new();
                let mut hit_keys: BTreeSet<ProviderKey> = BTreeSet::new();
                for i in chunk.clone() {
                    for (mi, rm) in resolved.iter().enumerate() {
                        let Some(key) = item_keys[i][mi] else { continue };
                        if resumed.contains_key(&(i, rm.cap.model_id.clone()))
                            || instances[mi].is_err()
                        {
                            continue;
                        }
                        if cache.contains_key(&key) {
                            hit_keys.insert(key);
                        } else if let Some(sensor) = &rm.sensor {
                            new_keys
                                .entry(key)
                                .or_insert_with(|| (req.spatials[i].clone(), sensor.clone()));
                        }
                    }
                }
                self.hooks.chunk_stats.lock().unwrap().push(ChunkStat {
                    chunk_index: ci,
                    items: chunk.len(),
                    unique_keys: new_keys.len(),
                    cache_hits: hit_keys.len(),
                });
                let fetched = self.prefetch(
                    new_keys
                        .into_iter()
                        .map(|(k, (s, se))| (k, s, se))
                        .collect(),
                    &req.temporal,
                    req.num_workers,
                    &policy,
                );
                cache.extend(fetched);

                for (mi, rm) in resolved.iter().enumerate() {
                    let model_id = rm.cap.model_id.clone();
                    let items: Vec<usize> = chunk
                        .clone()
                        .filter(|i| !resumed.contains_key(&(*i, model_id.clone())))
                        .collect();
                    if items.is_empty() {
                        continue;
                    }
                    let embedder = match &instances[mi] {
                        Ok(e) => Arc::clone(e),
                        Err(msg) => {
                            for i in items {
                                Self::settle(
                                    results_ref,
                                    abort_ref,
                                    first_failure_ref,
                                    req.continue_on_error,
                                    i,
                                    Self::failed_entry(
                                        &model_id,
                                        Stage::ProviderInit,
                                        msg.clone(),
                                        1,
                                        Timings::default(),
                                        spec_hashes[i][mi].clone(),
                                    ),
                                );
                            }
                            continue;
                        }
                    };

                    // Partition: carried-forward fetch failures, input-check
                    // rejects, then live items split by injected failure.
                    let mut pending: Vec<(usize, Option<Arc<Observation>>, u32, u64)> =
                        Vec::new();
                    for &i in &items {
                        match &item_keys[i][mi] {
                            Some(key) => {
                                let rec = cache.get(key).expect("prefetched key");
                                match &rec.result {
                                    Err(msg) => Self::settle(
                                        results_ref,
                                        abort_ref,
                                        first_failure_ref,
                                        req.continue_on_error,
                                        i,
                                        Self::failed_entry(
                                            &model_id,
                                            Stage::ProviderFetch,
                                            msg.clone(),
                                            rec.attempts,
                                            Timings {
                                                prefetch_ms: rec.elapsed_ms,
                                                ..Timings::default()
                                            },
                                            spec_hashes[i][mi].clone(),
                                        ),
                                    ),
                                    Ok(obs) => {
                                        let sensor = rm.sensor.as_ref().expect("on-the-fly");
                                        if sensor.check_input
                                            && !obs.valid_mask.iter().any(|v| *v)
                                        {
                                            Self::settle(
                                                results_ref,
                                                abort_ref,
                                                first_failure_ref,
                                                req.continue_on_error,
                                                i,
                                                Self::failed_entry(
                                                    &model_id,
                                                    Stage::Inference,
                                                    "input check failed: composite has no valid pixels".into(),
                                                    rec.attempts,
                                                    Timings {
                                                        prefetch_ms: rec.elapsed_ms,
                                                        ..Timings::default()
                                                    },
                                                    spec_hashes[i][mi].clone(),
                                                ),
                                            );
                                        } else {
                                            pending.push((
                                                i,
                                                Some(Arc::clone(obs)),
                                                rec.attempts,
                                                rec.elapsed_ms,
                                            ));
                                        }
                                    }
                                }
                            }
                            None => pending.push((i, None, 1, 0)),
                        }
                    }

                    let forced_now = |i: usize| {
                        self.hooks
                            .infer_failure
                            .as_ref()
                            .is_some_and(|h| h(i, &model_id, 1))
                    };
                    let run_item = |i: usize,
                                    obs: Option<&Arc<Observation>>,
                                    first_attempt: u32|
                     -> (Result<geoembed_core::model::EmbeddingData, String>, u32) {
                        with_retry(&policy, self.clock, first_attempt, |k| {
                            if let Some(h) = &self.hooks.infer_failure {
                                if h(i, &model_id, k) {
                                    return Err(RetryErr {
                                        message: format!(
                                            "injected inference failure (item {i})"
                                        ),
                                        retryable: true,
                                    });
                                }
                            }
                            let source = match obs {
                                Some(o) => EmbedSource::Observation(o),
                                None => EmbedSource::Lookup {
                                    spatial: &req.spatials[i],
                                    temporal: &req.temporal,
                                },
                            };
                            embedder
                                .embed(&source, &req.output, req.input_prep)
                                .map_err(embed_retry_err)
                        })
                    };

                    // (index, result, infer_attempts, prefetch_attempts, prefetch_ms, infer_ms)
                    let mut outcomes: Vec<(
                        usize,
                        Result<geoembed_core::model::EmbeddingData, String>,
                        u32,
                        u32,
                        u64,
                        u64,
                    )> = Vec::with_capacity(pending.len());

                    let (normal, forced): (Vec<_>, Vec<_>) =
                        pending.iter().partition(|(i, _, _, _)| !forced_now(*i));

                    if rm.use_batch && rm.sensor.is_some() && !normal.is_empty() {
                        let sources: Vec<EmbedSource<'_>> = normal
                            .iter()
                            .map(|(_, obs, _, _)| {
                                EmbedSource::Observation(obs.as_ref().expect("on-the-fly"))
                            })
                            .collect();
                        let t0 = self.clock.now_ms();
                        let batch = embedder.embed_batch(&sources, &req.output, req.input_prep);
                        let batch_ms = self.clock.now_ms().saturating_sub(t0);
                        match batch {
                            Ok(per) => {
                                for ((i, obs, pa, pm), res) in normal.iter().zip(per) {
                                    match res {
                                        Ok(data) => outcomes
                                            .push((*i, Ok(data), 1, *pa, *pm, batch_ms)),
                                        Err(e) => {
                                            // The batch call was attempt 1 for
                                            // this sample; fall back per-sample.
                                            if policy.max_attempts() >= 2 {
                                                let t1 = self.clock.now_ms();
                                                let (r, a) = run_item(*i, obs.as_ref(), 2);
                                                let ms = self
                                                    .clock
                                                    .now_ms()
                                                    .saturating_sub(t1)
                                                    + batch_ms;
                                                outcomes.push((*i, r, a, *pa, *pm, ms));
                                            } else {
                                                outcomes.push((
                                                    *i,
                                                    Err(e.to_string()),
                                                    1,
                                                    *pa,
                                                    *pm,
                                                    batch_ms,
                                                ));
                                            }
                                        }
                                    }
                                }
                            }
                            Err(batch_err) => {
                                for (i, obs, pa, pm) in &normal {
                                    if policy.max_attempts() >= 2 {
                                        let t1 = self.clock.now_ms();
                                        let (r, a) = run_item(*i, obs.as_ref(), 2);
                                        let ms =
                                            self.clock.now_ms().saturating_sub(t1) + batch_ms;
                                        outcomes.push((*i, r, a, *pa, *pm, ms));
                                    } else {
                                        outcomes.push((
                                            *i,
                                            Err(batch_err.to_string()),
                                            1,
                                            *pa,
                                            *pm,
                                            batch_ms,
                                        ));
                                    }
                                }
                            }
                        }
                    } else {
                        for (i, obs, pa, pm) in &normal {
                            let t1 = self.clock.now_ms();
                            let (r, a) = run_item(*i, obs.as_ref(), 1);
                            let ms = self.clock.now_ms().saturating_sub(t1);
                            outcomes.push((*i, r, a, *pa, *pm, ms));
                        }
                    }
                    for (i, obs, pa, pm) in &forced {
                        let t1 = self.clock.now_ms();
                        let (r, a) = run_item(*i, obs.as_ref(), 1);
                        let ms = self.clock.now_ms().saturating_sub(t1);
                        outcomes.push((*i, r, a, *pa, *pm, ms));
                    }

                    for (i, result, infer_attempts, prefetch_attempts, prefetch_ms, infer_ms) in
                        outcomes
                    {
                        match result {
                            Err(msg) => Self::settle(
                                results_ref,
                                abort_ref,
                                first_failure_ref,
                                req.continue_on_error,
                                i,
                                Self::failed_entry(
                                    &model_id,
                                    Stage::Inference,
                                    msg,
                                    infer_attempts.max(prefetch_attempts),
                                    Timings {
                                        prefetch_ms,
                                        infer_ms,
                                        ..Timings::default()
                                    },
                                    spec_hashes[i][mi].clone(),
                                ),
                            ),
                            Ok(data) => {
                                let backend = match rm.cap.backend {
                                    ModelBackend::OnTheFly => self.provider.backend_id(),
                                    ModelBackend::Precomputed => "store",
                                };
                                let meta = build_meta(
                                    &data,
                                    &MetaContext {
                                        cap: &rm.cap,
                                        backend,
                                        output: &req.output,
                                        sensor: rm.sensor.as_ref(),
                                        temporal: &req.temporal,
                                        spatial: &req.spatials[i],
                                        input_prep: req.input_prep,
                                        device: req.device.as_deref(),
                                        created_utc: created_utc.clone(),
                                        spec_hash: spec_hashes[i][mi].clone(),
                                    },
                                );
                                let obs = pending
                                    .iter()
                                    .find(|(j, _, _, _)| *j == i)
                                    .and_then(|(_, o, _, _)| o.clone());
                                let input_meta = match (&obs, req.save_inputs, &rm.sensor) {
                                    (Some(o), true, Some(sensor)) => Some(build_input_meta(
                                        o,
                                        sensor,
                                        &req.temporal,
                                        &req.spatials[i],
                                    )),
                                    _ => None,
                                };
                                dispatch(WriteTask {
                                    index: i,
                                    model_id: model_id.clone(),
                                    embedding: Embedding { data, meta },
                                    obs: if req.save_inputs { obs } else { None },
                                    input_meta,
                                    prefetch_attempts,
                                    infer_attempts,
                                    prefetch_ms,
                                    infer_ms,
                                    spec_hash: spec_hashes[i][mi].clone(),
                                });
                            }
                        }
                    }
                }
            }
            drop(sender); // closes the channel; writers drain and exit
        });

        // Manifest in input order; under an abort, later chunks never settled
        // and are omitted entirely.
        let results = results.into_inner().unwrap();
        let mut items_out: Vec<ManifestItem> = Vec::new();
        for (i, spatial) in req.spatials.iter().enumerate() {
            let mut entries = Vec::with_capacity(resolved.len());
            let mut complete = true;
            for rm in &resolved {
                let key = (i, rm.cap.model_id.clone());
                if let Some(e) = resumed.get(&key).or_else(|| results.get(&key)) {
                    entries.push(e.clone());
                } else {
                    complete = false;
                    break;
                }
            }
            if complete {
                items_out.push(ManifestItem {
                    item_id: item_dir_name(i),
                    index: i,
                    spatial: canonical_spatial(spatial),
                    status: item_status(&entries),
                    models: entries,
                });
            }
        }
        let manifest = ExportManifest {
            version: 1,
            request: RequestSummary {
                n_items: n,
                models: req.models.clone(),
                temporal: TemporalSummary {
                    start: req.temporal.start.to_string(),
                    end: req.temporal.end.to_string(),
                },
                output_mode: req.output.mode.as_str().to_string(),
                pooling: req.output.pooling.as_str().to_string(),
                scale_m: req.output.scale_m,
                input_prep: req.input_prep.as_str().to_string(),
                backend: self.provider.backend_id().to_string(),
                engine_version: ENGINE_VERSION.to_string(),
                created_utc,
            },
            summary: summarize(&items_out),
            items: items_out,
        };
        write_manifest(&req.out_dir.join("manifest.json"), &manifest)?;
        if let Some(info) = first_failure.into_inner().unwrap() {
            return Err(EngineError::Aborted {
                index: info.index,
                model_id: info.model_id,
                stage: info.stage,
                detail: info.detail,
            });
        }
        Ok(manifest)
    }

    /// Single-request convenience path: one model, one ROI, no retries.
    pub fn get_embedding(
        &self,
        model_id: &str,
        spatial: &SpatialSpec,
        temporal: &TemporalSpec,
        output: &OutputSpec,
        sensor_override: Option<&SensorSpec>,
        prep: InputPrep,
    ) -> Result<Embedding, EngineError> {
        validate_spatial(spatial).map_err(|e| EngineError::Validation {
            detail: format!("spatial: {e}"),
        })?;
        let rm = resolve_model(
            self.registry,
            model_id,
            output,
            temporal,
            sensor_override,
            None,
        )?;
        let embedder = self.registry.instance(model_id)?;
        let data = match &rm.sensor {
            Some(sensor) => {
                let obs = self
                    .provider
                    .fetch(spatial, temporal, sensor, &self.limits)
                    .map_err(|e| EngineError::Runtime(e.to_string()))?;
                if sensor.check_input && !obs.valid_mask.iter().any(|v| *v) {
                    return Err(EngineError::Runtime(
                        "input check failed: composite has no valid pixels".into(),
                    ));
                }
                embedder
                    .embed(&EmbedSource::Observation(&obs), output, prep)
                    .map_err(|e| EngineError::Runtime(e.to_string()))?
            }
            None => embedder
                .embed(&EmbedSource::Lookup { spatial, temporal }, output, prep)
                .map_err(|e| EngineError::Runtime(e.to_string()))?,
        };
        Ok(self.finish_embedding(data, &rm, spatial, temporal, output, prep, None))
    }

    /// Homogeneous batch over one model; per-item failures surface
    /// positionally without failing the call.
    pub fn get_embeddings_batch(
        &self,
        model_id: &str,
        spatials: &[SpatialSpec],
        temporal: &TemporalSpec,
        output: &OutputSpec,
        sensor_override: Option<&SensorSpec>,
        prep: InputPrep,
    ) -> Result<Vec<Result<Embedding, String>>, EngineError> {
        for (i, s) in spatials.iter().enumerate() {
            validate_spatial(s).map_err(|e| EngineError::Validation {
                detail: format!("spatial[{i}]: {e}"),
            })?;
        }
        let rm = resolve_model(
            self.registry,
            model_id,
            output,
            temporal,
            sensor_override,
            None,
        )?;
        let embedder = self.registry.instance(model_id)?;
        let mut out: Vec<Option<Result<Embedding, String>>> = vec![None; spatials.len()];
        match &rm.sensor {
            Some(sensor) => {
                // Deduplicated fetch, then one batch inference call.
                let mut cache: HashMap<ProviderKey, Result<Arc<Observation>, String>> =
                    HashMap::new();
                for s in spatials {
                    let key = ProviderKey::new(s, sensor, temporal);
                    cache.entry(key).or_insert_with(|| {
                        self.provider
                            .fetch(s, temporal, sensor, &self.limits)
                            .map(Arc::new)
                            .map_err(|e| e.to_string())
                    });
                }
                let mut live: Vec<(usize, Arc<Observation>)> = Vec::new();
                for (i, s) in spatials.iter().enumerate() {
                    let key = ProviderKey::new(s, sensor, temporal);
                    match &cache[&key] {
                        Err(msg) => out[i] = Some(Err(msg.clone())),
                        Ok(obs) => {
                            if sensor.check_input && !obs.valid_mask.iter().any(|v| *v) {
                                out[i] = Some(Err(
                                    "input check failed: composite has no valid pixels".into(),
                                ));
                            } else {
                                live.push((i, Arc::clone(obs)));
                            }
                        }
                    }
                }
                let sources: Vec<EmbedSource<'_>> = live
                    .iter()
                    .map(|(_, obs)| EmbedSource::Observation(obs.as_ref()))
                    .collect();
                if !sources.is_empty() {
                    match embedder.embed_batch(&sources, output, prep) {
                        Ok(per) => {
                            for ((i, _), res) in live.iter().zip(per) {
                                out[*i] = Some(match res {
                                    Ok(data) => Ok(self.finish_embedding(
                                        data,
                                        &rm,
                                        &spatials[*i],
                                        temporal,
                                        output,
                                        prep,
                                        None,
                                    )),
                                    Err(e) => Err(e.to_string()),
                                });
                            }
                        }
                        Err(e) => {
                            let msg = e.to_string();
                            for (i, _) in &live {
                                out[*i] = Some(Err(msg.clone()));
                            }
                        }
                    }
                }
            }
            None => {
                for (i, s) in spatials.iter().enumerate() {
                    out[i] = Some(
                        embedder
                            .embed(&EmbedSource::Lookup { spatial: s, temporal }, output, prep)
                            .map(|data| {
                                self.finish_embedding(data, &rm, s, temporal, output, prep, None)
                            })
                            .map_err(|e| e.to_string()),
                    );
                }
            }
        }
        Ok(out.into_iter().map(|r| r.expect("all settled")).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_embedding(
        &self,
        data: geoembed_core::model::EmbeddingData,
        rm: &ResolvedModel,
        spatial: &SpatialSpec,
        temporal: &TemporalSpec,
        output: &OutputSpec,
        prep: InputPrep,
        device: Option<&str>,
    ) -> Embedding {
        let backend = match rm.cap.backend {
            ModelBackend::OnTheFly => self.provider.backend_id(),
            ModelBackend::Precomputed => "store",
        };
        let hash = spec_hash(
            &rm.cap.model_id,
            spatial,
            temporal,
            output,
            rm.sensor.as_ref(),
        );
        let meta = build_meta(
            &data,
            &MetaContext {
                cap: &rm.cap,
                backend,
                output,
                sensor: rm.sensor.as_ref(),
                temporal,
                spatial,
                input_prep: prep,
                device,
                created_utc: self.clock.utc_rfc3339(),
                spec_hash: hash,
            },
        );
        Embedding { data, meta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ModelRegistry;

    fn policy(max_retries: u32, backoff_s: f64) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            backoff_s,
        }
    }

    #[test]
    fn retry_schedule_exact_delays() {
        let clock = ManualClock::new("2026-01-01T00:00:00Z");
        let (result, attempts) = with_retry(&policy(3, 0.1), &clock, 1, |_| {
            Err::<(), _>(RetryErr {
                message: "always".into(),
                retryable: true,
            })
        });
        assert!(result.is_err());
        assert_eq!(attempts, 4);
        let expected: Vec<Duration> = [0.1, 0.2, 0.4]
            .iter()
            .map(|s| Duration::from_secs_f64(*s))
            .collect();
        assert_eq!(clock.recorded_sleeps(), expected);
    }

    #[test]
    fn retry_two_failures_then_success() {
        let clock = ManualClock::new("2026-01-01T00:00:00Z");
        let (result, attempts) = with_retry(&policy(3, 0.1), &clock, 1, |k| {
            if k <= 2 {
                Err(RetryErr {
                    message: "transient".into(),
                    retryable: true,
                })
            } else {
                Ok(k)
            }
        });
        assert_eq!(result.unwrap(), 3);
        assert_eq!(attempts, 3);
        assert_eq!(
            clock.recorded_sleeps(),
            vec![Duration::from_secs_f64(0.1), Duration::from_secs_f64(0.2)]
        );
    }

    #[test]
    fn retry_stops_on_non_retryable() {
        let clock = ManualClock::new("2026-01-01T00:00:00Z");
        let (result, attempts) = with_retry(&policy(5, 0.1), &clock, 1, |_| {
            Err::<(), _>(RetryErr {
                message: "fatal".into(),
                retryable: false,
            })
        });
        assert_eq!(result.unwrap_err(), "fatal");
        assert_eq!(attempts, 1);
        assert!(clock.recorded_sleeps().is_empty());
    }

    #[test]
    fn retry_zero_budget_no_delay_after_final_failure() {
        let clock = ManualClock::new("2026-01-01T00:00:00Z");
        let (result, attempts) = with_retry(&policy(0, 0.5), &clock, 1, |_| {
            Err::<(), _>(RetryErr {
                message: "once".into(),
                retryable: true,
            })
        });
        assert!(result.is_err());
        assert_eq!(attempts, 1);
        assert!(clock.recorded_sleeps().is_empty());
    }

    #[test]
    fn retry_resuming_at_attempt_two_pays_first_backoff() {
        let clock = ManualClock::new("2026-01-01T00:00:00Z");
        let (result, attempts) = with_retry(&policy(2, 0.1), &clock, 2, |k| Ok::<_, RetryErr>(k));
        assert_eq!(result.unwrap(), 2);
        assert_eq!(attempts, 2);
        assert_eq!(clock.recorded_sleeps(), vec![Duration::from_secs_f64(0.1)]);
    }

    #[test]
    fn chunk_plan_examples() {
        let plan = plan_chunks(10, 4);
        assert_eq!(plan, vec![0..4, 4..8, 8..10]);
        assert_eq!(plan_chunks(3, 16), vec![0..3]);
        assert_eq!(plan_chunks(0, 4), Vec::<std::ops::Range<usize>>::new());
    }

    #[test]
    fn manual_clock_advances_on_sleep() {
        let clock = ManualClock::new("2026-01-01T00:00:00Z");
        assert_eq!(clock.now_ms(), 0);
        clock.sleep(Duration::from_millis(250));
        assert_eq!(clock.now_ms(), 250);
        assert_eq!(clock.utc_rfc3339(), "2026-01-01T00:00:00Z");
    }

    fn base_request(out: &Path) -> BatchRequest {
        BatchRequest::new(
            vec![SpatialSpec::point_buffer(121.5, 31.2, 320.0)],
            vec!["ref-d32".into()],
            TemporalSpec::range("2022-06-01", "2022-09-01").unwrap(),
            out,
        )
    }

    #[test]
    fn validation_names_offending_index() {
        let registry = ModelRegistry::with_reference_models();
        let dir = tempfile::tempdir().unwrap();
        let mut req = base_request(dir.path());
        req.spatials = vec![
            SpatialSpec::point_buffer(10.0, 10.0, 100.0),
            SpatialSpec::bbox(30.0, 20.0, 10.0, 40.0), // reversed lon
            SpatialSpec::point_buffer(11.0, 11.0, 100.0),
        ];
        match validate_request(&req, &registry) {
            Err(EngineError::Validation { detail }) => {
                assert!(detail.contains("spatial[1]"), "{detail}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_knobs_and_duplicates() {
        let registry = ModelRegistry::with_reference_models();
        let dir = tempfile::tempdir().unwrap();
        let mut req = base_request(dir.path());
        req.chunk_size = 0;
        assert!(matches!(
            validate_request(&req, &registry),
            Err(EngineError::Validation { .. })
        ));
        let mut req = base_request(dir.path());
        req.models = vec!["ref-d32".into(), "ref-d32".into()];
        assert!(matches!(
            validate_request(&req, &registry),
            Err(EngineError::Validation { .. })
        ));
        let mut req = base_request(dir.path());
        req.spatials.clear();
        assert!(matches!(
            validate_request(&req, &registry),
            Err(EngineError::Validation { .. })
        ));
    }

    #[test]
    fn unknown_model_is_user_error() {
        let registry = ModelRegistry::with_reference_models();
        let dir = tempfile::tempdir().unwrap();
        let mut req = base_request(dir.path());
        req.models = vec!["nope".into()];
        let err = validate_request(&req, &registry).unwrap_err();
        assert!(err.is_user_error());
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn mismatch_grid_on_pooled_only_lists_modes() {
        let registry = ModelRegistry::with_reference_models();
        let temporal = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let err = resolve_model(
            &registry,
            "ref-pooled-only",
            &OutputSpec::grid(),
            &temporal,
            None,
            None,
        )
        .unwrap_err();
        match err {
            EngineError::CapabilityMismatch {
                model_id,
                requested,
                supported,
            } => {
                assert_eq!(model_id, "ref-pooled-only");
                assert!(requested.contains("grid"));
                assert!(supported.contains("pooled"));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn mismatch_annual_model_with_range_window() {
        let registry = ModelRegistry::with_reference_models();
        let temporal = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let err = resolve_model(
            &registry,
            "ref-annual-d8",
            &OutputSpec::pooled(),
            &temporal,
            None,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("annual"), "{err}");

        let year = TemporalSpec::year(2022).unwrap();
        assert!(resolve_model(
            &registry,
            "ref-annual-d8",
            &OutputSpec::pooled(),
            &year,
            None,
            None
        )
        .is_ok());
    }

    #[test]
    fn mismatch_scale_override_on_fixed_grid_model() {
        let registry = ModelRegistry::with_reference_models();
        let temporal = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let err = resolve_model(
            &registry,
            "ref-d32",
            &OutputSpec::grid_at_scale(20.0),
            &temporal,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::CapabilityMismatch { .. }));
    }

    #[test]
    fn sensor_precedence_per_model_over_global_over_default() {
        let registry = ModelRegistry::with_reference_models();
        let temporal = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let output = OutputSpec::pooled();

        let rm = resolve_model(&registry, "ref-d32", &output, &temporal, None, None).unwrap();
        assert_eq!(rm.sensor.as_ref().unwrap().collection, "mock-a");

        let mut global = rm.sensor.clone().unwrap();
        global.cloudy_pct = 70.0;
        let mut per_model = global.clone();
        per_model.cloudy_pct = 10.0;

        let rm =
            resolve_model(&registry, "ref-d32", &output, &temporal, Some(&global), None).unwrap();
        assert_eq!(rm.sensor.as_ref().unwrap().cloudy_pct, 70.0);

        let rm = resolve_model(
            &registry,
            "ref-d32",
            &output,
            &temporal,
            Some(&global),
            Some(&per_model),
        )
        .unwrap();
        assert_eq!(rm.sensor.as_ref().unwrap().cloudy_pct, 10.0);
    }

    #[test]
    fn sensor_band_count_must_match_stats() {
        let registry = ModelRegistry::with_reference_models();
        let temporal = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let rm = resolve_model(
            &registry,
            "ref-d32",
            &OutputSpec::pooled(),
            &temporal,
            None,
            None,
        )
        .unwrap();
        let mut wrong = rm.sensor.unwrap();
        wrong.bands = vec!["b1".into(), "b2".into()];
        let err = resolve_model(
            &registry,
            "ref-d32",
            &OutputSpec::pooled(),
            &temporal,
            Some(&wrong),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::CapabilityMismatch { .. }), "{err}");
    }

    #[test]
    fn retry_policy_from_request() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = base_request(dir.path());
        req.max_retries = 3;
        req.retry_backoff_s = 0.25;
        let p = req.retry_policy();
        assert_eq!(p.max_attempts(), 4);
        assert_eq!(p.delay_before(1), None);
        assert_eq!(p.delay_before(2), Some(Duration::from_secs_f64(0.25)));
        assert_eq!(p.delay_before(4), Some(Duration::from_secs_f64(1.0)));
    }
}
