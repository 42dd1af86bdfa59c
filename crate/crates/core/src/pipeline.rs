//! Stage wiring: pair processing, stack processing and the end-to-end demo.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{build_pairs, AcquisitionMeta, Catalog, PairSpec};
use crate::displacement::{assemble_series, mean_coherence, select_reference, DisplacementField, DisplacementSeries};
use crate::error::{Error, Result};
use crate::interferometry::{
    estimate_coherence, form_interferogram, goldstein_filter, remove_flat_earth, remove_topographic_phase,
    FilterConfig, SensorGeometry,
};
use crate::profile::{export_profile, extract_profile, ProfileFormat, ProfileLine};
use crate::ps::{amplitude_dispersion, attach_coherence, compare_ps_dinsar, select_ps, PsCandidate};
use crate::raster::{
    load_real, load_slc, save_real, sidecar_path, write_atomic, ComplexRaster, GridMeta, Pixel, RasterKind, RealRaster,
};
use crate::synth::{bridge_scenario_default, generate, write_stack, PixelVertex, ScenarioConfig};
use crate::trend::{alert_scan, fit_trend};
use crate::unwrap::{unwrap, UnwrapMethod, DEFAULT_COHERENCE_MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessingConfig {
    pub filter: FilterConfig,
    pub coherence_mask: f64,
    pub unwrap_method: UnwrapMethod,
    pub max_temporal_days: i64,
    /// Pixels closer than this to the structure polyline are never chosen as
    /// the automatic reference.
    pub reference_exclusion_m: f64,
    pub ps_threshold: f64,
    pub rate_threshold_mm_yr: f64,
    pub rmse_threshold_mm: f64,
}

impl Default for ProcessingConfig {
    fn default() -> Self {
        ProcessingConfig {
            filter: FilterConfig::default(),
            coherence_mask: DEFAULT_COHERENCE_MASK,
            unwrap_method: UnwrapMethod::Mcf,
            max_temporal_days: 24,
            reference_exclusion_m: 50.0,
            ps_threshold: crate::ps::DEFAULT_THRESHOLD,
            rate_threshold_mm_yr: crate::trend::DEFAULT_RATE_THRESHOLD_MM_YR,
            rmse_threshold_mm: crate::trend::DEFAULT_RMSE_THRESHOLD_MM,
        }
    }
}

impl ProcessingConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if !(0.0..=1.0).contains(&self.coherence_mask) {
            return Err(Error::InvalidInput("coherence_mask outside [0, 1]".into()));
        }
        if self.max_temporal_days <= 0 || self.reference_exclusion_m.is_nan() || self.reference_exclusion_m < 0.0 {
            return Err(Error::InvalidInput(
                "max_temporal_days and reference_exclusion_m must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Filtered differential interferogram and coherence of one pair.
#[derive(Debug, Clone)]
pub struct WrappedPair {
    pub pair: PairSpec,
    pub geometry: SensorGeometry,
    pub coherence: RealRaster,
    /// Differential, filtered, wrapped phase.
    pub wrapped: RealRaster,
}

/// Products of one master/slave pair.
#[derive(Debug, Clone)]
pub struct PairProduct {
    pub pair: PairSpec,
    pub geometry: SensorGeometry,
    pub coherence: RealRaster,
    pub wrapped: RealRaster,
    pub unwrapped: RealRaster,
}

/// Interferogram, geometric phase removal, coherence and filtering.
pub fn interferogram_stage(
    master: &ComplexRaster,
    slave: &ComplexRaster,
    pair: &PairSpec,
    geometry: &SensorGeometry,
    dem: Option<&RealRaster>,
    filter: &FilterConfig,
) -> Result<WrappedPair> {
    filter.validate()?;
    let ifg = form_interferogram(master, slave, pair)?;
    let ifg = remove_flat_earth(&ifg, pair, geometry)?;
    let ifg = match dem {
        Some(dem) => remove_topographic_phase(&ifg, dem, pair, geometry)?,
        None => ifg,
    };
    let coherence = estimate_coherence(master, slave, filter.coherence_window)?;
    let ifg = ifg.with_coherence(coherence.clone())?;
    let ifg = if filter.goldstein_alpha > 0.0 {
        goldstein_filter(&ifg, filter)?
    } else {
        ifg
    };
    ifg.check_invariants()?;
    Ok(WrappedPair {
        pair: pair.clone(),
        geometry: *geometry,
        coherence,
        wrapped: ifg.phase,
    })
}

pub fn unwrap_stage(w: WrappedPair, cfg: &ProcessingConfig) -> Result<PairProduct> {
    let unwrapped = unwrap(&w.wrapped, &w.coherence, cfg.unwrap_method, cfg.coherence_mask)?;
    Ok(PairProduct {
        pair: w.pair,
        geometry: w.geometry,
        coherence: w.coherence,
        wrapped: w.wrapped,
        unwrapped,
    })
}

pub fn process_pair(
    master: &ComplexRaster,
    slave: &ComplexRaster,
    pair: &PairSpec,
    geometry: &SensorGeometry,
    dem: Option<&RealRaster>,
    cfg: &ProcessingConfig,
) -> Result<PairProduct> {
    unwrap_stage(
        interferogram_stage(master, slave, pair, geometry, dem, &cfg.filter)?,
        cfg,
    )
}

/// Marks pixels within `buffer_m` of a pixel-coordinate polyline.
pub fn polyline_buffer(meta: &GridMeta, vertices: &[PixelVertex], buffer_m: f64) -> Vec<bool> {
    (0..meta.len())
        .map(|i| {
            let (r, c) = ((i / meta.width) as f64, (i % meta.width) as f64);
            crate::synth::project_onto_polyline(meta, vertices, r, c).0 <= buffer_m
        })
        .collect()
}

/// Exclusion mask for automatic reference selection: the structure buffer
/// plus a border where the coherence window is truncated (and biased high).
pub fn reference_exclusion(
    meta: &GridMeta,
    vertices: Option<&[PixelVertex]>,
    buffer_m: f64,
    window: usize,
) -> Vec<bool> {
    let mut excluded = match vertices {
        Some(v) => polyline_buffer(meta, v, buffer_m),
        None => vec![false; meta.len()],
    };
    let half = window / 2;
    for (i, e) in excluded.iter_mut().enumerate() {
        let (r, c) = (i / meta.width, i % meta.width);
        if r < half || c < half || r + half >= meta.height || c + half >= meta.width {
            *e = true;
        }
    }
    excluded
}

/// How the calibration pixel is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceChoice {
    Fixed(Pixel),
    /// Highest mean coherence outside the given exclusion mask.
    Auto {
        excluded: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
pub struct StackProducts {
    pub pairs: Vec<PairProduct>,
    pub series: DisplacementSeries,
}

/// Processes consecutive pairs and assembles the calibrated cumulative
/// series. `slcs[k]` belongs to `acquisitions[k]`.
pub fn process_stack(
    slcs: &[ComplexRaster],
    acquisitions: &[AcquisitionMeta],
    pairs: &[PairSpec],
    dem: Option<&RealRaster>,
    cfg: &ProcessingConfig,
    reference: &ReferenceChoice,
) -> Result<StackProducts> {
    cfg.validate()?;
    if slcs.len() != acquisitions.len() {
        return Err(Error::InvalidInput(format!(
            "{} images for {} acquisitions",
            slcs.len(),
            acquisitions.len()
        )));
    }
    let find = |id: &str| {
        acquisitions
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("pair references unknown acquisition {id}")))
    };
    let products = pairs
        .par_iter()
        .map(|pair| {
            let (m, s) = (find(&pair.master_id)?, find(&pair.slave_id)?);
            let geometry = SensorGeometry::from(&acquisitions[m]);
            process_pair(&slcs[m], &slcs[s], pair, &geometry, dem, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let series = assemble_products(&products, cfg, reference)?;
    Ok(StackProducts {
        pairs: products,
        series,
    })
}

/// Reference selection, phase to displacement and cumulative assembly.
pub fn assemble_products(
    products: &[PairProduct],
    cfg: &ProcessingConfig,
    reference: &ReferenceChoice,
) -> Result<DisplacementSeries> {
    let reference = match reference {
        ReferenceChoice::Fixed(p) => *p,
        ReferenceChoice::Auto { excluded } => {
            let coherences: Vec<RealRaster> = products.iter().map(|p| p.coherence.clone()).collect();
            select_reference(&coherences, excluded, cfg.coherence_mask)?
        }
    };
    let fields = products
        .iter()
        .map(|p| DisplacementField::from_unwrapped(&p.unwrapped, p.pair.clone(), p.geometry.wavelength_m))
        .collect::<Result<Vec<_>>>()?;
    assemble_series(&fields, reference)
}

// ---------------------------------------------------------------------------
// File layout shared by the demo and the command-line stages.

pub const PAIR_RECORD: &str = "pair.json";
pub const WRAPPED_FILE: &str = "wrapped.r64";
pub const COHERENCE_FILE: &str = "coherence.r64";
pub const UNWRAPPED_FILE: &str = "unwrapped.r64";

/// Contents of `pair.json` inside a pair directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: PairSpec,
    pub geometry: SensorGeometry,
}

pub fn pair_dir_name(index: usize, pair: &PairSpec) -> String {
    format!("pair_{index:02}_{}_{}", pair.master_id, pair.slave_id)
}

/// Writes `pair.json`, the wrapped phase and the coherence into `dir`;
/// returns the written files relative to `dir`.
pub fn save_wrapped_pair(dir: &Path, w: &WrappedPair) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = PairRecord {
        pair: w.pair.clone(),
        geometry: w.geometry,
    };
    write_atomic(
        &dir.join(PAIR_RECORD),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    save_real(dir.join(WRAPPED_FILE), &w.wrapped)?;
    save_real(dir.join(COHERENCE_FILE), &w.coherence)?;
    Ok(with_sidecars(
        &[PathBuf::from(WRAPPED_FILE), PathBuf::from(COHERENCE_FILE)],
        &[PathBuf::from(PAIR_RECORD)],
    ))
}

pub fn load_wrapped_pair(dir: &Path) -> Result<WrappedPair> {
    let path = dir.join(PAIR_RECORD);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: PairRecord = serde_json::from_str(&text)?;
    record.pair.validate()?;
    record.geometry.validate()?;
    let wrapped = load_real(dir.join(WRAPPED_FILE))?;
    let coherence = load_real(dir.join(COHERENCE_FILE))?;
    wrapped.meta.ensure_compatible(&coherence.meta)?;
    if wrapped.kind != RasterKind::Phase || coherence.kind != RasterKind::Coherence {
        return Err(Error::InvalidInput(format!(
            "{} holds rasters of the wrong kind",
            dir.display()
        )));
    }
    Ok(WrappedPair {
        pair: record.pair,
        geometry: record.geometry,
        coherence,
        wrapped,
    })
}

pub fn load_pair_product(dir: &Path) -> Result<PairProduct> {
    let w = load_wrapped_pair(dir)?;
    let unwrapped = load_real(dir.join(UNWRAPPED_FILE))?;
    unwrapped.meta.ensure_compatible(&w.wrapped.meta)?;
    Ok(PairProduct {
        pair: w.pair,
        geometry: w.geometry,
        coherence: w.coherence,
        wrapped: w.wrapped,
        unwrapped,
    })
}

/// Subdirectories of `root` holding a `pair.json`, in name order.
pub fn pair_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(PAIR_RECORD).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no pair directories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

/// All unwrapped pairs below `root`, ordered by master date.
pub fn load_pair_products(root: &Path) -> Result<Vec<PairProduct>> {
    let mut products = pair_dirs(root)?
        .iter()
        .map(|d| load_pair_product(d))
        .collect::<Result<Vec<_>>>()?;
    products.sort_by_key(|p| p.pair.master_date);
    Ok(products)
}

fn with_sidecars(rasters: &[PathBuf], plain: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for r in rasters {
        out.push(r.clone());
        out.push(sidecar_path(r));
    }
    out.extend(plain.iter().cloned());
    out
}

/// Loads every acquisition image of a catalog, checking each sidecar
/// against its catalog entry. Relative paths resolve against `base_dir`.
pub fn load_catalog_slcs(catalog: &Catalog, base_dir: &Path) -> Result<Vec<ComplexRaster>> {
    catalog
        .acquisitions
        .par_iter()
        .map(|a| {
            let path = base_dir.join(&a.slc_path);
            let (slc, info) = load_slc(&path)?;
            if info.acquisition_date != a.date || info.wavelength_m != a.wavelength_m {
                return Err(Error::MalformedSidecar {
                    path: sidecar_path(&path),
                    message: format!("sidecar disagrees with catalog entry {}", a.id),
                });
            }
            Ok(slc)
        })
        .collect()
}

/// Fractional pixel vertices of a geographic line on a grid.
pub fn line_pixel_vertices(line: &ProfileLine, meta: &GridMeta) -> Vec<PixelVertex> {
    line.vertices
        .iter()
        .map(|&(lat, lon)| {
            let (r, c) = meta.latlon_to_pixel(lat, lon);
            [r, c]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stage errors and the run manifest.

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: &str) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError {
            stage: stage.to_string(),
            error,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

/// Record of a run: configuration snapshot and content hashes of every
/// stage input and output. Wall-clock timings go to a separate file so that
/// identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: DemoConfig,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Recorder {
    root: PathBuf,
    manifest: RunManifest,
    timings: Vec<(String, f64)>,
    started: Instant,
}

impl Recorder {
    fn file_records(&self, files: &[PathBuf]) -> Result<Vec<FileRecord>> {
        files
            .iter()
            .map(|f| {
                Ok(FileRecord {
                    path: f
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/"),
                    sha256: sha256_file(&self.root.join(f))?,
                })
            })
            .collect()
    }

    /// Hashes the stage files, rewrites `manifest.json` and restarts the
    /// stage clock.
    fn finish(&mut self, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> std::result::Result<(), StageError> {
        let record = StageRecord {
            stage: stage.to_string(),
            inputs: self.file_records(inputs).stage(stage)?,
            outputs: self.file_records(outputs).stage(stage)?,
        };
        self.manifest.stages.push(record);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(Error::from)
            .stage("manifest")?;
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes()).stage("manifest")?;
        self.timings
            .push((stage.to_string(), self.started.elapsed().as_secs_f64()));
        self.started = Instant::now();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// End-to-end demo.

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub scenario: ScenarioConfig,
    pub processing: ProcessingConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            scenario: bridge_scenario_default(),
            processing: ProcessingConfig::default(),
        }
    }
}

/// Headline numbers of a demo run, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub epochs: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub first_pair: (NaiveDate, NaiveDate),
    pub reference_pixel: Pixel,
    pub profile_samples: usize,
    pub profile_length_m: f64,
    pub peak_pixel: Option<Pixel>,
    pub peak_sample: Option<usize>,
    pub peak_truth_mm: Option<f64>,
    pub peak_recovered_mm: Option<f64>,
    pub peak_rate_mm_yr: Option<f64>,
    pub peak_truth_rate_mm_yr: Option<f64>,
    pub peak_alerted: bool,
    /// Largest |recovered - truth| over every unmasked pixel and epoch.
    pub max_abs_error_mm: f64,
    pub ps_selected: usize,
    pub ps_injected: usize,
    pub ps_recall: Option<f64>,
    pub ps_pooled_rmse_mm: Option<f64>,
    pub ps_median_rmse_mm: Option<f64>,
    pub non_ps_median_rmse_mm: Option<f64>,
    pub alerts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsOutput {
    pub threshold: f64,
    pub candidates: Vec<PsCandidate>,
}

/// Runs the whole chain on a synthetic scenario, writing every product
/// below `out_dir`.
pub fn run_demo(out_dir: &Path, cfg: &DemoConfig) -> std::result::Result<DemoSummary, StageError> {
    let scenario = &cfg.scenario;
    let processing = &cfg.processing;
    processing.validate().stage("config")?;
    scenario.validate().stage("config")?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir, e))
        .stage("setup")?;
    let mut rec = Recorder {
        root: out_dir.to_path_buf(),
        manifest: RunManifest {
            tool: "insar".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            stages: Vec::new(),
        },
        timings: Vec::new(),
        started: Instant::now(),
    };
    let stack_rel = PathBuf::from("stack");

    // synth
    let truth = generate(scenario).stage("synth")?;
    let files = write_stack(
        scenario,
        &truth,
        &out_dir.join(&stack_rel),
        processing.max_temporal_days,
    )
    .stage("synth")?;
    let stack_files: Vec<PathBuf> = files.all().iter().map(|f| stack_rel.join(f)).collect();
    rec.finish("synth", &[], &stack_files)?;

    // catalog
    let catalog_path = stack_rel.join(&files.catalog);
    let catalog = Catalog::load(out_dir.join(&catalog_path)).stage("catalog")?;
    let pairs = build_pairs(&catalog.acquisitions, processing.max_temporal_days).stage("catalog")?;
    if pairs != catalog.pairs {
        return Err(Error::InvalidInput("catalog pairs are stale".into())).stage("catalog");
    }
    rec.finish("catalog", std::slice::from_ref(&catalog_path), &[])?;

    // ifg
    let slcs = load_catalog_slcs(&catalog, &out_dir.join(&stack_rel)).stage("ifg")?;
    let dem = match &files.dem {
        Some(d) => Some(load_real(out_dir.join(&stack_rel).join(d)).stage("ifg")?),
        None => None,
    };
    let runs_rel = PathBuf::from("runs");
    let wrapped = pairs
        .par_iter()
        .map(|pair| {
            let m = catalog
                .acquisitions
                .iter()
                .position(|a| a.id == pair.master_id)
                .expect("validated catalog");
            let s = catalog
                .acquisitions
                .iter()
                .position(|a| a.id == pair.slave_id)
                .expect("validated catalog");
            let geometry = SensorGeometry::from(&catalog.acquisitions[m]);
            interferogram_stage(&slcs[m], &slcs[s], pair, &geometry, dem.as_ref(), &processing.filter)
        })
        .collect::<Result<Vec<_>>>()
        .stage("ifg")?;
    let mut ifg_outputs = Vec::new();
    for (k, w) in wrapped.iter().enumerate() {
        let dir = runs_rel.join(pair_dir_name(k, &w.pair));
        let written = save_wrapped_pair(&out_dir.join(&dir), w).stage("ifg")?;
        ifg_outputs.extend(written.into_iter().map(|f| dir.join(f)));
    }
    let mut ifg_inputs: Vec<PathBuf> = catalog
        .acquisitions
        .iter()
        .map(|a| stack_rel.join(&a.slc_path))
        .collect();
    ifg_inputs.extend(files.dem.iter().map(|d| stack_rel.join(d)));
    rec.finish("ifg", &ifg_inputs, &ifg_outputs)?;

    // unwrap
    let products = wrapped
        .into_par_iter()
        .map(|w| unwrap_stage(w, processing))
        .collect::<Result<Vec<_>>>()
        .stage("unwrap")?;
    let mut unwrap_outputs = Vec::new();
    for (k, p) in products.iter().enumerate() {
        let rel = runs_rel.join(pair_dir_name(k, &p.pair)).join(UNWRAPPED_FILE);
        save_real(out_dir.join(&rel), &p.unwrapped).stage("unwrap")?;
        unwrap_outputs.push(rel.clone());
        unwrap_outputs.push(sidecar_path(&rel));
    }
    rec.finish("unwrap", &ifg_outputs, &unwrap_outputs)?;

    // series
    let line = match &files.line {
        Some(l) => Some(ProfileLine::load_geojson(&out_dir.join(&stack_rel).join(l)).stage("series")?),
        None => None,
    };
    let line_vertices = line.as_ref().map(|l| line_pixel_vertices(l, &scenario.grid));
    let excluded = reference_exclusion(
        &scenario.grid,
        line_vertices.as_deref(),
        processing.reference_exclusion_m,
        processing.filter.coherence_window,
    );
    let series = assemble_products(&products, processing, &ReferenceChoice::Auto { excluded }).stage("series")?;
    let series_rel = PathBuf::from("series");
    let index = series.save(&out_dir.join(&series_rel)).stage("series")?;
    let mut series_outputs: Vec<PathBuf> = index.files.iter().map(|f| series_rel.join(f)).collect();
    series_outputs = with_sidecars(&series_outputs, &[series_rel.join("series.json")]);
    rec.finish("series", &unwrap_outputs, &series_outputs)?;

    let truth_series = truth
        .truth_series(&scenario.epochs)
        .rebased(series.reference_pixel)
        .stage("series")?;
    let max_abs_error_mm = series
        .cumulative_mm
        .iter()
        .zip(&truth_series.cumulative_mm)
        .flat_map(|(a, b)| a.valid().map(move |(i, v)| (v - b.data[i]).abs()))
        .fold(0.0, f64::max);

    // profile
    let line =
        line.unwrap_or_else(|| ProfileLine::from_pixels(&scenario.grid, "diagonal", &default_line(&scenario.grid)));
    let profile = extract_profile(&series, &line).stage("profile")?;
    let truth_profile = extract_profile(&truth_series, &line).stage("profile")?;
    let profile_outputs = vec![
        PathBuf::from("profile.csv"),
        PathBuf::from("profile.json"),
        PathBuf::from("truth_profile.csv"),
    ];
    export_profile(&profile, &out_dir.join(&profile_outputs[0]), ProfileFormat::Csv).stage("profile")?;
    export_profile(&profile, &out_dir.join(&profile_outputs[1]), ProfileFormat::Json).stage("profile")?;
    export_profile(&truth_profile, &out_dir.join(&profile_outputs[2]), ProfileFormat::Csv).stage("profile")?;
    let mut profile_inputs = series_outputs.clone();
    profile_inputs.extend(files.line.iter().map(|l| stack_rel.join(l)));
    rec.finish("profile", &profile_inputs, &profile_outputs)?;

    // ps
    let da = amplitude_dispersion(&slcs).stage("ps")?;
    let mut candidates = select_ps(&da, processing.ps_threshold);
    let coherences: Vec<RealRaster> = products.iter().map(|p| p.coherence.clone()).collect();
    attach_coherence(&mut candidates, &mean_coherence(&coherences).stage("ps")?);
    let comparison = compare_ps_dinsar(&series, &truth_series, &candidates, Some(&profile.pixels)).stage("ps")?;
    let ps_out = PsOutput {
        threshold: processing.ps_threshold,
        candidates,
    };
    write_json(&out_dir.join("ps.json"), &ps_out).stage("ps")?;
    write_json(&out_dir.join("comparison.json"), &comparison).stage("ps")?;
    let injected = &truth.stable_scatterers;
    let recalled = injected
        .iter()
        .filter(|p| ps_out.candidates.iter().any(|c| c.pixel == **p))
        .count();
    let mut ps_inputs: Vec<PathBuf> = catalog
        .acquisitions
        .iter()
        .map(|a| stack_rel.join(&a.slc_path))
        .collect();
    ps_inputs.extend(series_outputs.iter().cloned());
    rec.finish(
        "ps",
        &ps_inputs,
        &[PathBuf::from("ps.json"), PathBuf::from("comparison.json")],
    )?;

    // alert
    let alerts = alert_scan(&profile, processing.rate_threshold_mm_yr, processing.rmse_threshold_mm).stage("alert")?;
    write_json(&out_dir.join("alerts.json"), &alerts).stage("alert")?;
    rec.finish(
        "alert",
        &[PathBuf::from("profile.csv")],
        &[PathBuf::from("alerts.json")],
    )?;

    // report
    let peak_pixel = scenario.deformation_peak();
    let peak_sample = peak_pixel.and_then(|p| profile.pixels.iter().position(|q| *q == p));
    let last = series.cumulative_mm.len() - 1;
    let rate_at = |s: &DisplacementSeries, p: Pixel| {
        fit_trend(&s.dates, &s.at(p))
            .ok()
            .and_then(|t| t.fit().map(|f| f.rate_mm_per_year))
    };
    let summary = DemoSummary {
        epochs: series.dates.len(),
        first_date: series.dates[0],
        last_date: series.dates[last],
        first_pair: (pairs[0].master_date, pairs[0].slave_date),
        reference_pixel: series.reference_pixel,
        profile_samples: profile.pixels.len(),
        profile_length_m: profile.distances_m.last().copied().unwrap_or(0.0),
        peak_pixel,
        peak_sample,
        peak_truth_mm: peak_pixel.and_then(|p| truth_series.cumulative_mm[last].get(p)),
        peak_recovered_mm: peak_pixel.and_then(|p| series.cumulative_mm[last].get(p)),
        peak_rate_mm_yr: peak_pixel.and_then(|p| rate_at(&series, p)),
        peak_truth_rate_mm_yr: peak_pixel.and_then(|p| rate_at(&truth_series, p)),
        peak_alerted: peak_sample.is_some_and(|s| alerts.iter().any(|a| a.sample == s)),
        max_abs_error_mm,
        ps_selected: ps_out.candidates.len(),
        ps_injected: injected.len(),
        ps_recall: (!injected.is_empty()).then(|| recalled as f64 / injected.len() as f64),
        ps_pooled_rmse_mm: comparison.ps_pooled_rmse_mm,
        ps_median_rmse_mm: comparison.ps_median_rmse_mm,
        non_ps_median_rmse_mm: comparison.non_ps_median_rmse_mm,
        alerts: alerts.len(),
    };
    write_json(&out_dir.join("summary.json"), &summary).stage("report")?;
    rec.finish(
        "report",
        &[PathBuf::from("alerts.json"), PathBuf::from("comparison.json")],
        &[PathBuf::from("summary.json")],
    )?;

    let timings: serde_json::Map<String, serde_json::Value> = rec
        .timings
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::Value::from(*v)))
        .collect();
    write_json(&out_dir.join(TIMINGS_FILE), &timings).stage("report")?;
    Ok(summary)
}

/// Main diagonal, used as the profile when a scenario has no structure line.
fn default_line(meta: &GridMeta) -> Vec<PixelVertex> {
    let n = meta.width.min(meta.height) as f64 - 1.0;
    vec![[0.0, 0.0], [n, n]]
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}
