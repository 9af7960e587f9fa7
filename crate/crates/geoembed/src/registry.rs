//! Model registry: capability lookup, cached embedder construction, and
//! the uniform single/batch embedding interface over on-the-fly and
//! precomputed backends.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use geoembed_core::geo::{footprint, FootprintLimits};
use geoembed_core::model::{
    pool_mean, preprocess, reference_forward, reference_weights, BandStat, Capability,
    EmbeddingData, InputPrep, ModelBackend, ModelError, TemporalSemantics,
};
use geoembed_core::spec::{
    CompositeMethod, OutputMode, OutputSpec, Pooling, SensorSpec, SpatialSpec, TemporalSpec,
};

use crate::provider::Observation;
use crate::store::{PrecomputedStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("unknown model {model_id:?}")]
    UnknownModel { model_id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Spec(#[from] geoembed_core::spec::SpecError),
    #[error("annual model requires an exact calendar-year window, got [{start}, {end})")]
    NotAnnualWindow { start: String, end: String },
    #[error("injected batch failure")]
    InjectedBatchFailure,
    #[error("{0}")]
    Other(String),
}

/// What an embedder consumes: a prefetched observation (on-the-fly) or the
/// specs needed for a store lookup (precomputed).
pub enum EmbedSource<'a> {
    Observation(&'a Observation),
    Lookup {
        spatial: &'a SpatialSpec,
        temporal: &'a TemporalSpec,
    },
}

pub trait Embedder: Send + Sync {
    fn capability(&self) -> &Capability;

    fn embed(
        &self,
        source: &EmbedSource<'_>,
        output: &OutputSpec,
        prep: InputPrep,
    ) -> Result<EmbeddingData, EmbedError>;

    /// Batch path. `Err` means the whole call failed (caller falls back to
    /// per-sample); per-item errors come back positionally.
    fn embed_batch(
        &self,
        sources: &[EmbedSource<'_>],
        output: &OutputSpec,
        prep: InputPrep,
    ) -> Result<Vec<Result<EmbeddingData, EmbedError>>, EmbedError> {
        Ok(sources
            .iter()
            .map(|s| self.embed(s, output, prep))
            .collect())
    }
}

fn finish(grid: EmbeddingData, output: &OutputSpec) -> Result<EmbeddingData, EmbedError> {
    match output.mode {
        OutputMode::Grid => Ok(grid),
        OutputMode::Pooled => match output.pooling {
            Pooling::Mean => Ok(EmbeddingData::Pooled {
                values: pool_mean(&grid)?,
            }),
        },
    }
}

/// Deterministic on-the-fly model: seeded linear map over patch statistics.
pub struct ReferenceEmbedder {
    cap: Capability,
    weights: Vec<f64>,
    /// Remaining forced batch-call failures (test fuse).
    batch_fuse: Arc<AtomicU64>,
}

impl ReferenceEmbedder {
    pub fn new(cap: Capability, batch_fuse: Arc<AtomicU64>) -> Self {
        let in_dim = 2 * cap.band_stats.len();
        let weights = reference_weights(&cap.model_id, cap.embed_dim, in_dim);
        Self {
            cap,
            weights,
            batch_fuse,
        }
    }
}

impl Embedder for ReferenceEmbedder {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn embed(
        &self,
        source: &EmbedSource<'_>,
        output: &OutputSpec,
        prep: InputPrep,
    ) -> Result<EmbeddingData, EmbedError> {
        let EmbedSource::Observation(obs) = source else {
            return Err(EmbedError::Other(format!(
                "model {:?} runs on the fly and needs an observation",
                self.cap.model_id
            )));
        };
        let input = preprocess(&obs.data, &self.cap, prep)?;
        let grid = reference_forward(&input, &self.cap, &self.weights);
        finish(grid, output)
    }

    fn embed_batch(
        &self,
        sources: &[EmbedSource<'_>],
        output: &OutputSpec,
        prep: InputPrep,
    ) -> Result<Vec<Result<EmbeddingData, EmbedError>>, EmbedError> {
        let fuse = self.batch_fuse.load(Ordering::SeqCst);
        if fuse > 0
            && self
                .batch_fuse
                .compare_exchange(fuse, fuse - 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        {
            return Err(EmbedError::InjectedBatchFailure);
        }
        Ok(sources
            .iter()
            .map(|s| self.embed(s, output, prep))
            .collect())
    }
}

/// Annual tile-store lookup model.
pub struct PrecomputedEmbedder {
    cap: Capability,
    store: PrecomputedStore,
}

impl PrecomputedEmbedder {
    pub fn new(cap: Capability, store: PrecomputedStore) -> Self {
        Self { cap, store }
    }

    pub fn store(&self) -> &PrecomputedStore {
        &self.store
    }
}

impl Embedder for PrecomputedEmbedder {
    fn capability(&self) -> &Capability {
        &self.cap
    }

    fn embed(
        &self,
        source: &EmbedSource<'_>,
        output: &OutputSpec,
        prep: InputPrep,
    ) -> Result<EmbeddingData, EmbedError> {
        let _ = prep;
        let EmbedSource::Lookup { spatial, temporal } = source else {
            return Err(EmbedError::Other(format!(
                "model {:?} is precomputed and takes a lookup, not an observation",
                self.cap.model_id
            )));
        };
        let year = temporal.as_year().ok_or_else(|| EmbedError::NotAnnualWindow {
            start: temporal.start.to_string(),
            end: temporal.end.to_string(),
        })?;
        // Resolution-aligned: the output grid is the footprint at store
        // resolution (or the requested override).
        let scale_m = output.scale_m.unwrap_or(self.store.meta.scale_m);
        let fp = footprint(spatial, scale_m, &FootprintLimits::default())?;
        let grid = self.store.lookup_grid(
            year,
            fp.height_px as usize,
            fp.width_px as usize,
            |r, c| fp.pixel_center(r as u32, c as u32),
        )?;
        finish(grid, output)
    }
}

struct RegistryEntry {
    cap: Capability,
    instance: Mutex<Option<Arc<dyn Embedder>>>,
    constructions: AtomicU64,
    batch_fuse: Arc<AtomicU64>,
    store_root: Option<std::path::PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown model {model_id:?}; known models: {known:?}")]
    UnknownModel { model_id: String, known: Vec<String> },
    #[error("model {model_id:?} failed to initialize: {detail}")]
    InitFailure { model_id: String, detail: String },
}

/// Registered models, with instance caching and construction counting.
pub struct ModelRegistry {
    entries: BTreeMap<String, RegistryEntry>,
}

fn sensor_a() -> SensorSpec {
    SensorSpec {
        collection: "mock-a".into(),
        bands: vec!["b1".into(), "b2".into(), "b3".into(), "b4".into()],
        scale_m: 10.0,
        cloudy_pct: 40.0,
        fill_value: 0.0,
        composite: CompositeMethod::Median,
        check_input: false,
    }
}

fn sensor_b() -> SensorSpec {
    SensorSpec {
        collection: "mock-b".into(),
        bands: vec!["b1".into(), "b2".into()],
        scale_m: 20.0,
        cloudy_pct: 40.0,
        fill_value: 0.0,
        composite: CompositeMethod::Mosaic,
        check_input: false,
    }
}

fn stats_for(sensor: &SensorSpec) -> Vec<BandStat> {
    vec![
        BandStat {
            mean: 0.5,
            std: 0.25
        };
        sensor.bands.len()
    ]
}

fn reference_cap(
    model_id: &str,
    embed_dim: usize,
    input_size: usize,
    patch_size: usize,
    modes: Vec<OutputMode>,
    semantics: TemporalSemantics,
    sensor: SensorSpec,
) -> Capability {
    let band_stats = stats_for(&sensor);
    Capability {
        model_id: model_id.to_string(),
        backend: ModelBackend::OnTheFly,
        output_modes: modes,
        temporal_semantics: semantics,
        default_sensor: Some(sensor),
        band_stats,
        embed_dim,
        input_size: Some(input_size),
        patch_size: Some(patch_size),
        resolution_aligned: false,
        supports_batch: true,
        checkpoint: format!("builtin:{model_id}:v1"),
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with the built-in reference models.
    pub fn with_reference_models() -> Self {
        let mut reg = Self::empty();
        let both = || vec![OutputMode::Pooled, OutputMode::Grid];
        reg.register(reference_cap(
            "ref-d64",
            64,
            224,
            16,
            both(),
            TemporalSemantics::Range,
            sensor_a(),
        ));
        reg.register(reference_cap(
            "ref-d32",
            32,
            128,
            16,
            both(),
            TemporalSemantics::Range,
            sensor_a(),
        ));
        reg.register(reference_cap(
            "ref-d16-alt",
            16,
            64,
            8,
            both(),
            TemporalSemantics::Range,
            sensor_b(),
        ));
        reg.register(reference_cap(
            "ref-pooled-only",
            8,
            64,
            8,
            vec![OutputMode::Pooled],
            TemporalSemantics::Range,
            sensor_a(),
        ));
        reg.register(reference_cap(
            "ref-annual-d8",
            8,
            64,
            8,
            both(),
            TemporalSemantics::Annual,
            sensor_a(),
        ));
        reg
    }

    /// Register an on-the-fly capability.
    pub fn register(&mut self, cap: Capability) {
        cap.validate().expect("registered capability is coherent");
        self.entries.insert(
            cap.model_id.clone(),
            RegistryEntry {
                cap,
                instance: Mutex::new(None),
                constructions: AtomicU64::new(0),
                batch_fuse: Arc::new(AtomicU64::new(0)),
                store_root: None,
            },
        );
    }

    /// Register a precomputed store by its root directory; the model id
    /// comes from store.json.
    pub fn register_precomputed(&mut self, root: &std::path::Path) -> Result<String, RegistryError> {
        let store = PrecomputedStore::open(root).map_err(|e| RegistryError::InitFailure {
            model_id: root.display().to_string(),
            detail: e.to_string(),
        })?;
        let model_id = store.meta.model_id.clone();
        let cap = Capability {
            model_id: model_id.clone(),
            backend: ModelBackend::Precomputed,
            output_modes: vec![OutputMode::Pooled, OutputMode::Grid],
            temporal_semantics: TemporalSemantics::Annual,
            default_sensor: None,
            band_stats: vec![],
            embed_dim: store.meta.embed_dim,
            input_size: None,
            patch_size: None,
            resolution_aligned: true,
            supports_batch: false,
            checkpoint: format!("store:{model_id}"),
        };
        self.entries.insert(
            model_id.clone(),
            RegistryEntry {
                cap,
                instance: Mutex::new(None),
                constructions: AtomicU64::new(0),
                batch_fuse: Arc::new(AtomicU64::new(0)),
                store_root: Some(root.to_path_buf()),
            },
        );
        Ok(model_id)
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    fn entry(&self, model_id: &str) -> Result<&RegistryEntry, RegistryError> {
        self.entries
            .get(model_id)
            .ok_or_else(|| RegistryError::UnknownModel {
                model_id: model_id.to_string(),
                known: self.model_ids(),
            })
    }

    /// Pure capability lookup; never constructs an instance.
    pub fn describe(&self, model_id: &str) -> Result<Capability, RegistryError> {
        Ok(self.entry(model_id)?.cap.clone())
    }

    /// Cached instance; the underlying embedder is built at most once.
    pub fn instance(&self, model_id: &str) -> Result<Arc<dyn Embedder>, RegistryError> {
        let entry = self.entry(model_id)?;
        let mut slot = entry.instance.lock().unwrap();
        if let Some(existing) = slot.as_ref() {
            return Ok(existing.clone());
        }
        entry.constructions.fetch_add(1, Ordering::SeqCst);
        let built: Arc<dyn Embedder> = match &entry.store_root {
            None => Arc::new(ReferenceEmbedder::new(
                entry.cap.clone(),
                entry.batch_fuse.clone(),
            )),
            Some(root) => {
                let store =
                    PrecomputedStore::open(root).map_err(|e| RegistryError::InitFailure {
                        model_id: model_id.to_string(),
                        detail: e.to_string(),
                    })?;
                Arc::new(PrecomputedEmbedder::new(entry.cap.clone(), store))
            }
        };
        *slot = Some(built.clone());
        Ok(built)
    }

    pub fn construction_count(&self, model_id: &str) -> u64 {
        self.entries
            .get(model_id)
            .map(|e| e.constructions.load(Ordering::SeqCst))
            .unwrap_or(0)
    }

    /// Make the next `n` embed_batch calls on this model fail wholesale.
    pub fn inject_batch_failures(&self, model_id: &str, n: u64) {
        if let Some(entry) = self.entries.get(model_id) {
            entry.batch_fuse.store(n, Ordering::SeqCst);
        }
    }
}
