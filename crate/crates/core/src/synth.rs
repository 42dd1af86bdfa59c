//! Synthetic SLC stacks with known deformation, topography and decorrelation.
//!
//! Each epoch is built from a circular-Gaussian clutter model
//! `√γ₀·common + √(1-γ₀)·independent_t`, which gives every pair of epochs
//! an expected coherence of γ₀. Clutter is scaled to unit mean (Rayleigh)
//! amplitude. Stable scatterers add a constant real amplitude on top of the
//! clutter.
//!
//! The path phase of epoch `t` is
//! `ψ_t = -(4π/λ)·d_t + (4π/λ)·B_t·h/(R·sinθ) + (4π/λ)·B_t·x/(R·tanθ)`
//! and the sample stored is `clutter · e^{-iψ_t}`, so that
//! `master · conj(slave)` carries `ψ_slave - ψ_master` with the pair
//! baseline `B_slave - B_master`.
//!
//! Randomness comes from ChaCha8 generators: the common component uses
//! `seed` on stream 1, epoch `t` uses `seed ^ t` on stream 0. Samples are
//! drawn in row-major order, real part first.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{build_pairs, AcquisitionMeta, Catalog};
use crate::displacement::DisplacementSeries;
use crate::error::{Error, Result};
use crate::interferometry::SensorGeometry;
use crate::profile::ProfileLine;
use crate::raster::{
    load_real, save_real, save_slc, write_atomic, ComplexRaster, GridMeta, Pixel, RasterKind, RealRaster, SlcInfo,
};

pub const DAYS_PER_YEAR: f64 = 365.25;

/// Sentinel-1 C-band wavelength.
pub const SENTINEL1_WAVELENGTH_M: f64 = 0.05546576;

/// Polyline vertex in fractional pixel coordinates `[row, col]`.
pub type PixelVertex = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeformationModel {
    /// Gaussian subsidence bowl; the center moves at `peak_rate_mm_yr`.
    GaussianBowl {
        center: PixelVertex,
        sigma_px: f64,
        peak_rate_mm_yr: f64,
    },
    /// Rate growing linearly eastwards from column 0.
    LinearRamp { rate_east_mm_yr_per_km: f64 },
    /// Deformation confined to a deck of half-width `half_width_m` around a
    /// polyline, peaking at `vertices[peak_vertex]` and decaying linearly
    /// with along-line distance to zero at `taper_length_m`.
    BridgeLine {
        vertices: Vec<PixelVertex>,
        peak_vertex: usize,
        peak_rate_mm_yr: f64,
        taper_length_m: f64,
        half_width_m: f64,
    },
}

/// Where the scenario DEM comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemSource {
    /// An existing `.r64` raster on the scenario grid.
    Raster(PathBuf),
    /// A Gaussian hill.
    Hill {
        center: PixelVertex,
        sigma_px: f64,
        peak_m: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: GridMeta,
    pub epochs: Vec<NaiveDate>,
    pub deformation_model: DeformationModel,
    #[serde(default)]
    pub dem: Option<DemSource>,
    pub target_coherence: f64,
    /// Per-epoch perpendicular orbit offsets.
    pub baselines_m: Vec<f64>,
    pub wavelength_m: f64,
    pub incidence_deg: f64,
    pub slant_range_m: f64,
    pub rng_seed: u64,
    /// Point targets with a temporally stable response.
    #[serde(default)]
    pub stable_scatterers: Vec<Pixel>,
    /// Amplitude of the stable scatterers relative to unit-mean clutter.
    #[serde(default = "default_ps_amplitude")]
    pub stable_amplitude: f64,
}

fn default_ps_amplitude() -> f64 {
    10.0
}

impl ScenarioConfig {
    pub fn geometry(&self) -> SensorGeometry {
        SensorGeometry {
            wavelength_m: self.wavelength_m,
            incidence_deg: self.incidence_deg,
            slant_range_m: self.slant_range_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.geometry().validate()?;
        if self.epochs.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                got: self.epochs.len(),
            });
        }
        if self.epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("epochs must be strictly increasing".into()));
        }
        if !(self.target_coherence > 0.0 && self.target_coherence <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "target_coherence {} outside (0, 1]",
                self.target_coherence
            )));
        }
        if self.baselines_m.len() != self.epochs.len() || self.baselines_m.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput("need one finite baseline per epoch".into()));
        }
        if !(self.stable_amplitude.is_finite() && self.stable_amplitude >= 0.0) {
            return Err(Error::InvalidInput("stable_amplitude must be finite and >= 0".into()));
        }
        for p in &self.stable_scatterers {
            self.grid.check_bounds(*p)?;
        }
        match &self.deformation_model {
            DeformationModel::GaussianBowl {
                sigma_px,
                peak_rate_mm_yr,
                ..
            } => {
                if !(peak_rate_mm_yr.is_finite() && *sigma_px > 0.0) {
                    return Err(Error::InvalidInput("bowl needs finite rate and sigma > 0".into()));
                }
            }
            DeformationModel::LinearRamp { rate_east_mm_yr_per_km } => {
                if !rate_east_mm_yr_per_km.is_finite() {
                    return Err(Error::InvalidInput("ramp rate must be finite".into()));
                }
            }
            DeformationModel::BridgeLine {
                vertices,
                peak_vertex,
                peak_rate_mm_yr,
                taper_length_m,
                half_width_m,
            } => {
                if vertices.len() < 2 || *peak_vertex >= vertices.len() {
                    return Err(Error::InvalidInput(
                        "bridge line needs >= 2 vertices and a valid peak vertex".into(),
                    ));
                }
                if !(peak_rate_mm_yr.is_finite() && *taper_length_m > 0.0 && *half_width_m >= 0.0) {
                    return Err(Error::InvalidInput("bridge line parameters out of range".into()));
                }
                for v in vertices {
                    if !(v[0] >= 0.0 && v[1] >= 0.0 && v[0] < self.grid.height as f64 && v[1] < self.grid.width as f64)
                    {
                        return Err(self.grid.out_of_bounds(v[0] as i64, v[1] as i64));
                    }
                }
            }
        }
        Ok(())
    }

    /// Years elapsed since the first epoch.
    pub fn years_since_start(&self, epoch: usize) -> f64 {
        (self.epochs[epoch] - self.epochs[0]).num_days() as f64 / DAYS_PER_YEAR
    }

    /// Peak pixel of the deformation model, if it has one.
    pub fn deformation_peak(&self) -> Option<Pixel> {
        match &self.deformation_model {
            DeformationModel::GaussianBowl { center, .. } => Some(round_vertex(*center)),
            DeformationModel::BridgeLine {
                vertices, peak_vertex, ..
            } => Some(round_vertex(vertices[*peak_vertex])),
            DeformationModel::LinearRamp { .. } => None,
        }
    }

    /// Polyline of a bridge scenario in pixel coordinates.
    pub fn polyline(&self) -> Option<&[PixelVertex]> {
        match &self.deformation_model {
            DeformationModel::BridgeLine { vertices, .. } => Some(vertices),
            _ => None,
        }
    }

    pub fn acquisitions(&self) -> Vec<AcquisitionMeta> {
        self.epochs
            .iter()
            .zip(&self.baselines_m)
            .enumerate()
            .map(|(t, (date, b))| AcquisitionMeta {
                id: epoch_id(t),
                date: *date,
                wavelength_m: self.wavelength_m,
                incidence_deg: self.incidence_deg,
                slant_range_m: self.slant_range_m,
                slc_path: PathBuf::from(format!("slc/{}.slc", epoch_id(t))),
                perp_baseline_m: *b,
            })
            .collect()
    }
}

pub fn epoch_id(t: usize) -> String {
    format!("epoch_{t:02}")
}

fn round_vertex(v: PixelVertex) -> Pixel {
    Pixel::new(v[0].round() as usize, v[1].round() as usize)
}

/// Metric projection of a point onto a polyline: returns
/// `(perpendicular distance, along-line distance)` in meters.
pub fn project_onto_polyline(meta: &GridMeta, vertices: &[PixelVertex], row: f64, col: f64) -> (f64, f64) {
    let to_m = |v: PixelVertex| meta.to_metric(v[0], v[1]);
    let p = meta.to_metric(row, col);
    let mut best = (f64::INFINITY, 0.0);
    let mut start = 0.0;
    for w in vertices.windows(2) {
        let (a, b) = (to_m(w[0]), to_m(w[1]));
        let d = (b.0 - a.0, b.1 - a.1);
        let len = d.0.hypot(d.1);
        let t = if len > 0.0 {
            (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = (a.0 + t * d.0, a.1 + t * d.1);
        let dist = (p.0 - q.0).hypot(p.1 - q.1);
        if dist < best.0 {
            best = (dist, start + t * len);
        }
        start += len;
    }
    best
}

/// Along-line distance of each vertex, meters.
pub fn vertex_chainage(meta: &GridMeta, vertices: &[PixelVertex]) -> Vec<f64> {
    let mut out = Vec::with_capacity(vertices.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in vertices.windows(2) {
        let a = meta.to_metric(w[0][0], w[0][1]);
        let b = meta.to_metric(w[1][0], w[1][1]);
        acc += (b.0 - a.0).hypot(b.1 - a.1);
        out.push(acc);
    }
    out
}

/// Deformation rate field (mm/yr) of a model on a grid.
pub fn rate_field(meta: &GridMeta, model: &DeformationModel) -> Vec<f64> {
    (0..meta.len())
        .map(|i| {
            let (r, c) = ((i / meta.width) as f64, (i % meta.width) as f64);
            match model {
                DeformationModel::GaussianBowl {
                    center,
                    sigma_px,
                    peak_rate_mm_yr,
                } => {
                    let d2 = (r - center[0]).powi(2) + (c - center[1]).powi(2);
                    peak_rate_mm_yr * (-d2 / (2.0 * sigma_px * sigma_px)).exp()
                }
                DeformationModel::LinearRamp { rate_east_mm_yr_per_km } => {
                    rate_east_mm_yr_per_km * c * meta.pixel_spacing_east / 1000.0
                }
                DeformationModel::BridgeLine {
                    vertices,
                    peak_vertex,
                    peak_rate_mm_yr,
                    taper_length_m,
                    half_width_m,
                } => {
                    let (perp, along) = project_onto_polyline(meta, vertices, r, c);
                    if perp > *half_width_m {
                        0.0
                    } else {
                        let peak_at = vertex_chainage(meta, vertices)[*peak_vertex];
                        peak_rate_mm_yr * (1.0 - (along - peak_at).abs() / taper_length_m).max(0.0)
                    }
                }
            }
        })
        .collect()
}

/// Synthetic stack together with its ground truth.
#[derive(Debug, Clone)]
pub struct TruthStack {
    pub slcs: Vec<ComplexRaster>,
    /// Cumulative LOS displacement per epoch; the first is identically zero.
    pub true_displacement_mm: Vec<RealRaster>,
    pub true_coherence: f64,
    pub dem: Option<RealRaster>,
    pub stable_scatterers: Vec<Pixel>,
}

fn resolve_dem(config: &ScenarioConfig, base_dir: Option<&Path>) -> Result<Option<RealRaster>> {
    let meta = config.grid;
    match &config.dem {
        None => Ok(None),
        Some(DemSource::Raster(path)) => {
            let path = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            let dem = load_real(&path)?;
            dem.meta.ensure_compatible(&meta)?;
            Ok(Some(dem))
        }
        Some(DemSource::Hill {
            center,
            sigma_px,
            peak_m,
        }) => {
            let data = (0..meta.len())
                .map(|i| {
                    let d2 =
                        ((i / meta.width) as f64 - center[0]).powi(2) + ((i % meta.width) as f64 - center[1]).powi(2);
                    peak_m * (-d2 / (2.0 * sigma_px * sigma_px)).exp()
                })
                .collect();
            Ok(Some(RealRaster::new(meta, RasterKind::Dem, data)?))
        }
    }
}

fn gaussian_field(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Complex64> {
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect()
}

pub fn generate(config: &ScenarioConfig) -> Result<TruthStack> {
    generate_in(config, None)
}

/// Like [`generate`], resolving a relative DEM path against `base_dir`.
pub fn generate_in(config: &ScenarioConfig, base_dir: Option<&Path>) -> Result<TruthStack> {
    config.validate()?;
    let meta = config.grid;
    let n = meta.len();
    let geometry = config.geometry();
    let dem = resolve_dem(config, base_dir)?;
    let rates = rate_field(&meta, &config.deformation_model);

    // unit-mean Rayleigh amplitude: component std √(2/π)
    let scale = (2.0 / std::f64::consts::PI).sqrt();
    let gamma = config.target_coherence;
    let mut common_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    common_rng.set_stream(1);
    let common = gaussian_field(&mut common_rng, n, scale);
    let mut stable = vec![0.0; n];
    for p in &config.stable_scatterers {
        stable[meta.index(*p)] = config.stable_amplitude;
    }

    let epochs: Vec<(ComplexRaster, RealRaster)> = (0..config.epochs.len())
        .into_par_iter()
        .map(|t| {
            let years = config.years_since_start(t);
            let baseline = config.baselines_m[t];
            let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ t as u64);
            rng.set_stream(0);
            let independent = if gamma < 1.0 {
                gaussian_field(&mut rng, n, scale)
            } else {
                vec![Complex64::new(0.0, 0.0); n]
            };
            let disp: Vec<f64> = rates.iter().map(|r| if t == 0 { 0.0 } else { r * years }).collect();
            let slc = (0..n)
                .map(|i| {
                    let x = (i % meta.width) as f64 * meta.pixel_spacing_east;
                    let h = dem
                        .as_ref()
                        .and_then(|d| (!d.mask[i]).then(|| d.data[i]))
                        .unwrap_or(0.0);
                    let psi = -geometry.phase_per_meter() * disp[i] / 1000.0
                        + geometry.topographic_phase(baseline, h)
                        + geometry.flat_earth_phase(baseline, x);
                    let clutter = common[i] * gamma.sqrt() + independent[i] * (1.0 - gamma).sqrt() + stable[i];
                    let z = clutter * Complex64::from_polar(1.0, -psi);
                    Complex32::new(z.re as f32, z.im as f32)
                })
                .collect();
            let slc = ComplexRaster::new(meta, slc)?;
            let truth = RealRaster::new(meta, RasterKind::DisplacementMm, disp)?;
            Ok((slc, truth))
        })
        .collect::<Result<_>>()?;
    let (slcs, true_displacement_mm) = epochs.into_iter().unzip();
    Ok(TruthStack {
        slcs,
        true_displacement_mm,
        true_coherence: gamma,
        dem,
        stable_scatterers: config.stable_scatterers.clone(),
    })
}

/// Built-in bridge scenario: a 256×256 grid at 5 m, a polyline of about
/// 1102 m, deformation peaking at one interior vertex, and 25 epochs on a
/// 12-day repeat from 2017-08-08.
pub fn bridge_scenario_default() -> ScenarioConfig {
    let grid = GridMeta {
        width: 256,
        height: 256,
        pixel_spacing_east: 5.0,
        pixel_spacing_north: 5.0,
        origin_lat: 44.4310,
        origin_lon: 8.8770,
    };
    let start = NaiveDate::from_ymd_opt(2017, 8, 8).expect("valid date");
    let epochs: Vec<NaiveDate> = (0..25).map(|k| start + Days::new(12 * k)).collect();
    let baselines_m = (0..25)
        .map(|k| (80.0 * (0.9 * k as f64).sin() * 100.0).round() / 100.0)
        .collect();
    let vertices = vec![[160.0, 20.0], [136.0, 52.0], [124.0, 142.0], [112.0, 231.0]];

    // stable scatterers on every pier (vertex) and every 40 m along the deck
    let chainage = vertex_chainage(&grid, &vertices);
    let total = *chainage.last().expect("non-empty");
    let mut stable_scatterers: Vec<Pixel> = vertices.iter().map(|v| round_vertex(*v)).collect();
    let mut s = 20.0;
    while s < total {
        let k = chainage.windows(2).position(|w| s <= w[1]).expect("inside line");
        let t = (s - chainage[k]) / (chainage[k + 1] - chainage[k]);
        let (a, b) = (vertices[k], vertices[k + 1]);
        let p = round_vertex([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        if !stable_scatterers.contains(&p) {
            stable_scatterers.push(p);
        }
        s += 40.0;
    }

    ScenarioConfig {
        grid,
        epochs,
        deformation_model: DeformationModel::BridgeLine {
            vertices,
            peak_vertex: 2,
            peak_rate_mm_yr: -40.0,
            taper_length_m: 150.0,
            half_width_m: 10.0,
        },
        dem: Some(DemSource::Hill {
            center: [60.0, 200.0],
            sigma_px: 40.0,
            peak_m: 80.0,
        }),
        target_coherence: 0.8,
        baselines_m,
        wavelength_m: SENTINEL1_WAVELENGTH_M,
        incidence_deg: 39.0,
        slant_range_m: 850_000.0,
        rng_seed: 7,
        stable_scatterers,
        stable_amplitude: 10.0,
    }
}

impl TruthStack {
    /// Ground truth as a displacement series. The truth is absolute, so the
    /// recorded reference pixel is nominal; rebase before comparing.
    pub fn truth_series(&self, dates: &[NaiveDate]) -> DisplacementSeries {
        DisplacementSeries {
            meta: self.true_displacement_mm[0].meta,
            dates: dates.to_vec(),
            cumulative_mm: self.true_displacement_mm.clone(),
            reference_pixel: Pixel::new(0, 0),
        }
    }
}

/// Output locations of a stack written by [`write_stack`], relative to the
/// output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackFiles {
    pub catalog: PathBuf,
    pub slcs: Vec<PathBuf>,
    /// Truth series directory (`series.json` plus one raster per epoch).
    pub truth_dir: PathBuf,
    pub truth: Vec<PathBuf>,
    pub dem: Option<PathBuf>,
    /// GeoJSON polyline of a bridge scenario.
    pub line: Option<PathBuf>,
    pub scenario: PathBuf,
}

impl StackFiles {
    /// Every written file, sidecars included.
    pub fn all(&self) -> Vec<PathBuf> {
        let mut out = vec![self.scenario.clone(), self.catalog.clone()];
        for p in self.slcs.iter().chain(&self.truth).chain(&self.dem) {
            out.push(p.clone());
            out.push(crate::raster::sidecar_path(p));
        }
        out.push(self.truth_dir.join("series.json"));
        out.extend(self.line.iter().cloned());
        out
    }
}

/// Writes SLCs, truth rasters, the DEM, the scenario snapshot, the
/// structure polyline and a `catalog.json` with consecutive pairs.
pub fn write_stack(
    config: &ScenarioConfig,
    stack: &TruthStack,
    out_dir: &Path,
    max_temporal_days: i64,
) -> Result<StackFiles> {
    let slc_dir = out_dir.join("slc");
    fs::create_dir_all(&slc_dir).map_err(|e| Error::io(&slc_dir, e))?;
    let acquisitions = config.acquisitions();
    let mut slcs = Vec::new();
    for (t, slc) in stack.slcs.iter().enumerate() {
        let info = SlcInfo {
            acquisition_date: config.epochs[t],
            wavelength_m: config.wavelength_m,
            incidence_deg: config.incidence_deg,
            slant_range_m: config.slant_range_m,
        };
        let rel = acquisitions[t].slc_path.clone();
        save_slc(out_dir.join(&rel), slc, &info)?;
        slcs.push(rel);
    }
    let truth_dir = PathBuf::from("truth");
    let index = stack.truth_series(&config.epochs).save(&out_dir.join(&truth_dir))?;
    let truth = index.files.iter().map(|f| truth_dir.join(f)).collect();
    let dem = match &stack.dem {
        Some(d) => {
            let rel = PathBuf::from("dem.r64");
            save_real(out_dir.join(&rel), d)?;
            Some(rel)
        }
        None => None,
    };
    let line = match config.polyline() {
        Some(vertices) => {
            let rel = PathBuf::from("bridge.geojson");
            let geo = ProfileLine::from_pixels(&config.grid, "bridge", vertices).to_geojson();
            write_atomic(&out_dir.join(&rel), serde_json::to_string_pretty(&geo)?.as_bytes())?;
            Some(rel)
        }
        None => None,
    };
    let pairs = build_pairs(&acquisitions, max_temporal_days)?;
    let catalog = Catalog { acquisitions, pairs };
    let catalog_rel = PathBuf::from("catalog.json");
    catalog.save(out_dir.join(&catalog_rel))?;
    let scenario = PathBuf::from("scenario.json");
    write_atomic(
        &out_dir.join(&scenario),
        serde_json::to_string_pretty(config)?.as_bytes(),
    )?;
    Ok(StackFiles {
        catalog: catalog_rel,
        slcs,
        truth_dir,
        truth,
        dem,
        line,
        scenario,
    })
}
