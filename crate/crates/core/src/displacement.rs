//! Unwrapped phase to line-of-sight displacement, reference calibration and
//! cumulative series over chained pairs.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::PairSpec;
use crate::error::{Error, Result};
use crate::raster::{load_real, save_real, write_atomic, GridMeta, Pixel, RasterKind, RealRaster};

/// `d_mm = -1000·λ·φ/(4π)`.
pub fn phase_to_los(unwrapped: &RealRaster, wavelength_m: f64) -> Result<RealRaster> {
    if !(wavelength_m.is_finite() && wavelength_m > 0.0) {
        return Err(Error::InvalidInput(format!(
            "wavelength {wavelength_m} must be positive"
        )));
    }
    let k = -1000.0 * wavelength_m / (4.0 * std::f64::consts::PI);
    Ok(unwrapped.map_valid(RasterKind::DisplacementMm, |phi| k * phi))
}

/// Vertical displacement under a pure-vertical-motion assumption.
pub fn project_vertical(los_mm: &RealRaster, incidence_deg: f64) -> Result<RealRaster> {
    if !(0.0..90.0).contains(&incidence_deg) {
        return Err(Error::InvalidInput(format!(
            "incidence {incidence_deg} deg outside [0, 90)"
        )));
    }
    let c = incidence_deg.to_radians().cos();
    Ok(los_mm.map_valid(RasterKind::DisplacementMm, |v| v / c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub meta: GridMeta,
    /// Master to slave LOS displacement.
    pub los_mm: RealRaster,
    pub pair: PairSpec,
}

impl DisplacementField {
    pub fn from_unwrapped(unwrapped: &RealRaster, pair: PairSpec, wavelength_m: f64) -> Result<Self> {
        Ok(DisplacementField {
            meta: unwrapped.meta,
            los_mm: phase_to_los(unwrapped, wavelength_m)?,
            pair,
        })
    }
}

/// Shifts the field so the reference pixel reads exactly zero.
pub fn calibrate(field: &DisplacementField, reference: Pixel) -> Result<DisplacementField> {
    field.meta.check_bounds(reference)?;
    let offset = field.los_mm.get(reference).ok_or_else(|| Error::MaskedReference {
        epoch: field.pair.slave_date.to_string(),
        row: reference.row,
        col: reference.col,
    })?;
    let mut los_mm = field.los_mm.map_valid(RasterKind::DisplacementMm, |v| v - offset);
    // exact zero even when offset subtraction rounds
    let r = field.meta.index(reference);
    los_mm.data[r] = 0.0;
    Ok(DisplacementField {
        meta: field.meta,
        los_mm,
        pair: field.pair.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSeries {
    pub meta: GridMeta,
    pub dates: Vec<NaiveDate>,
    pub cumulative_mm: Vec<RealRaster>,
    pub reference_pixel: Pixel,
}

impl DisplacementSeries {
    /// Values at one pixel across epochs; `None` where masked.
    pub fn at(&self, p: Pixel) -> Vec<Option<f64>> {
        self.cumulative_mm.iter().map(|r| r.get(p)).collect()
    }

    /// Copy shifted per epoch so that `p` reads zero.
    pub fn rebased(&self, p: Pixel) -> Result<DisplacementSeries> {
        self.meta.check_bounds(p)?;
        let cumulative_mm = self
            .cumulative_mm
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let offset = r.get(p).ok_or_else(|| Error::MaskedReference {
                    epoch: self.dates[k].to_string(),
                    row: p.row,
                    col: p.col,
                })?;
                let mut out = r.map_valid(RasterKind::DisplacementMm, |v| v - offset);
                out.data[self.meta.index(p)] = 0.0;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DisplacementSeries {
            meta: self.meta,
            dates: self.dates.clone(),
            cumulative_mm,
            reference_pixel: p,
        })
    }

    pub fn valid_counts(&self) -> Vec<usize> {
        self.cumulative_mm.iter().map(RealRaster::valid_count).collect()
    }

    /// Writes `epoch_NN.r64` rasters plus `series.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<SeriesIndex> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (k, r) in self.cumulative_mm.iter().enumerate() {
            let name = PathBuf::from(format!("epoch_{k:02}.r64"));
            save_real(dir.join(&name), r)?;
            files.push(name);
        }
        let index = SeriesIndex {
            dates: self.dates.clone(),
            reference_pixel: self.reference_pixel,
            units: "mm, line of sight".to_string(),
            valid_pixels: self.valid_counts(),
            total_pixels: self.meta.len(),
            files,
        };
        write_atomic(
            &dir.join("series.json"),
            serde_json::to_string_pretty(&index)?.as_bytes(),
        )?;
        Ok(index)
    }

    pub fn load(dir: &Path) -> Result<DisplacementSeries> {
        let path = dir.join("series.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: SeriesIndex = serde_json::from_str(&text)?;
        if index.files.len() != index.dates.len() || index.dates.is_empty() {
            return Err(Error::InvalidInput(
                "series.json lists mismatched dates and files".into(),
            ));
        }
        let cumulative_mm = index
            .files
            .iter()
            .map(|f| load_real(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let meta = cumulative_mm[0].meta;
        for r in &cumulative_mm {
            r.meta.ensure_compatible(&meta)?;
        }
        meta.check_bounds(index.reference_pixel)?;
        Ok(DisplacementSeries {
            meta,
            dates: index.dates,
            cumulative_mm,
            reference_pixel: index.reference_pixel,
        })
    }
}

/// Contents of `series.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesIndex {
    pub dates: Vec<NaiveDate>,
    pub reference_pixel: Pixel,
    pub units: String,
    pub valid_pixels: Vec<usize>,
    pub total_pixels: usize,
    pub files: Vec<PathBuf>,
}

/// Calibrates each pair field and accumulates them; a pixel masked in any
/// pair stays masked from that epoch on.
pub fn assemble_series(fields: &[DisplacementField], reference: Pixel) -> Result<DisplacementSeries> {
    let first = fields.first().ok_or(Error::TooFew { needed: 1, got: 0 })?;
    let meta = first.meta;
    for w in fields.windows(2) {
        if w[0].pair.slave_id != w[1].pair.master_id || w[0].pair.slave_date != w[1].pair.master_date {
            return Err(Error::InvalidInput(format!(
                "pairs are not chained: {} -> {} then {} -> {}",
                w[0].pair.master_id, w[0].pair.slave_id, w[1].pair.master_id, w[1].pair.slave_id
            )));
        }
    }
    for f in fields {
        f.meta.ensure_compatible(&meta)?;
        f.los_mm.meta.ensure_compatible(&meta)?;
        f.pair.validate()?;
    }
    let calibrated = fields
        .par_iter()
        .map(|f| calibrate(f, reference))
        .collect::<Result<Vec<_>>>()?;

    let mut dates = vec![first.pair.master_date];
    let mut cumulative_mm = vec![RealRaster::filled(meta, RasterKind::DisplacementMm, 0.0)?];
    let mut acc = vec![0.0; meta.len()];
    let mut mask = vec![false; meta.len()];
    for f in &calibrated {
        for i in 0..meta.len() {
            mask[i] |= f.los_mm.mask[i];
            acc[i] += if mask[i] { 0.0 } else { f.los_mm.data[i] };
        }
        dates.push(f.pair.slave_date);
        cumulative_mm.push(RealRaster::with_mask(
            meta,
            RasterKind::DisplacementMm,
            acc.clone(),
            mask.clone(),
        )?);
    }
    Ok(DisplacementSeries {
        meta,
        dates,
        cumulative_mm,
        reference_pixel: reference,
    })
}

/// Per-pixel mean over coherence rasters; masked anywhere means masked.
pub fn mean_coherence(coherences: &[RealRaster]) -> Result<RealRaster> {
    let first = coherences.first().ok_or(Error::TooFew { needed: 1, got: 0 })?;
    let meta = first.meta;
    let mut sum = vec![0.0; meta.len()];
    let mut mask = vec![false; meta.len()];
    for c in coherences {
        c.meta.ensure_compatible(&meta)?;
        for i in 0..meta.len() {
            mask[i] |= c.mask[i];
            sum[i] += c.data[i];
        }
    }
    let n = coherences.len() as f64;
    RealRaster::with_mask(
        meta,
        RasterKind::Coherence,
        sum.into_iter().map(|s| s / n).collect(),
        mask,
    )
}

/// Highest mean-coherence pixel not excluded and not below `min_coherence`
/// in any pair. Ties go to the lowest row-major index.
pub fn select_reference(coherences: &[RealRaster], excluded: &[bool], min_coherence: f64) -> Result<Pixel> {
    let mean = mean_coherence(coherences)?;
    if excluded.len() != mean.meta.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.meta.len() as u64,
            actual: excluded.len() as u64,
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in mean.valid() {
        if excluded[i] || coherences.iter().any(|c| c.data[i] < min_coherence) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| mean.meta.pixel(i)).ok_or(Error::NoSeed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Days;

    fn meta() -> GridMeta {
        GridMeta::new(4, 3, 5.0, 5.0, 0.0, 0.0).unwrap()
    }

    fn pair(k: u64) -> PairSpec {
        let d0 = NaiveDate::from_ymd_opt(2017, 8, 8).unwrap();
        PairSpec {
            master_id: format!("a{k}"),
            slave_id: format!("a{}", k + 1),
            master_date: d0 + Days::new(12 * k),
            slave_date: d0 + Days::new(12 * (k + 1)),
            perp_baseline_m: 0.0,
            temporal_baseline_days: 12,
            gap: false,
        }
    }

    fn field(k: u64, data: Vec<f64>) -> DisplacementField {
        DisplacementField {
            meta: meta(),
            los_mm: RealRaster::new(meta(), RasterKind::DisplacementMm, data).unwrap(),
            pair: pair(k),
        }
    }

    fn off_ref(v: f64) -> Vec<f64> {
        let mut d = vec![v; 12];
        d[0] = 0.0;
        d
    }

    #[test]
    fn phase_constant() {
        let lambda = 0.05546576;
        let r = |phi: f64| {
            let raster = RealRaster::filled(meta(), RasterKind::Phase, phi).unwrap();
            phase_to_los(&raster, lambda).unwrap().data[0]
        };
        assert!((r(2.0 * std::f64::consts::PI) + 27.73288).abs() < 1e-9);
        assert_eq!(r(0.0), 0.0);
        assert!((r(-std::f64::consts::PI) - 13.86644).abs() < 1e-9);
        assert!(phase_to_los(&RealRaster::filled(meta(), RasterKind::Phase, 1.0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn vertical_projection() {
        let los = RealRaster::filled(meta(), RasterKind::DisplacementMm, -10.0).unwrap();
        assert_eq!(project_vertical(&los, 0.0).unwrap(), los);
        assert!((project_vertical(&los, 60.0).unwrap().data[3] + 20.0).abs() < 1e-12);
        assert!(project_vertical(&los, 90.0).is_err());
    }

    #[test]
    fn calibration() {
        let f = field(0, vec![3.5; 12]);
        let c = calibrate(&f, Pixel::new(1, 1)).unwrap();
        assert!(c.los_mm.data.iter().all(|v| *v == 0.0));
        let g = field(0, (0..12).map(|i| i as f64 * 0.3).collect());
        let once = calibrate(&g, Pixel::new(2, 1)).unwrap();
        assert_eq!(calibrate(&once, Pixel::new(2, 1)).unwrap(), once);
        let mut h = field(0, vec![1.0; 12]);
        h.los_mm.set_masked(4);
        assert!(matches!(
            calibrate(&h, Pixel::new(1, 0)),
            Err(Error::MaskedReference { .. })
        ));
    }

    #[test]
    fn cumulative_sum() {
        let s = assemble_series(&[field(0, off_ref(2.0)), field(1, off_ref(3.0))], Pixel::new(0, 0)).unwrap();
        assert_eq!(s.cumulative_mm.len(), 3);
        assert_eq!(s.at(Pixel::new(2, 3)), vec![Some(0.0), Some(2.0), Some(5.0)]);
        assert_eq!(s.dates[1], pair(0).slave_date);
        let single = assemble_series(&[field(0, off_ref(1.0))], Pixel::new(0, 0)).unwrap();
        assert_eq!(single.cumulative_mm.len(), 2);
    }

    #[test]
    fn masks_are_sticky() {
        let mut f1 = field(1, off_ref(1.0));
        f1.los_mm.set_masked(5);
        let s = assemble_series(&[field(0, off_ref(1.0)), f1, field(2, off_ref(1.0))], Pixel::new(0, 0)).unwrap();
        let p = meta().pixel(5);
        assert_eq!(s.at(p), vec![Some(0.0), Some(1.0), None, None]);
    }

    #[test]
    fn unchained_pairs_rejected() {
        assert!(assemble_series(&[field(1, off_ref(1.0)), field(0, off_ref(1.0))], Pixel::new(0, 0)).is_err());
        assert!(assemble_series(&[], Pixel::new(0, 0)).is_err());
    }

    #[test]
    fn reference_avoids_excluded_pixels() {
        let mut c = RealRaster::filled(meta(), RasterKind::Coherence, 0.5).unwrap();
        c.data[7] = 0.9;
        c.data[2] = 0.8;
        let mut excluded = vec![false; 12];
        assert_eq!(select_reference(&[c.clone()], &excluded, 0.3).unwrap(), meta().pixel(7));
        excluded[7] = true;
        assert_eq!(select_reference(&[c.clone()], &excluded, 0.3).unwrap(), meta().pixel(2));
        assert!(select_reference(&[c], &[true; 12], 0.3).is_err());
    }

    #[test]
    fn series_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = assemble_series(&[field(0, off_ref(2.0)), field(1, off_ref(3.0))], Pixel::new(0, 0)).unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(DisplacementSeries::load(dir.path()).unwrap(), s);
    }

    proptest::proptest! {
        #[test]
        fn linear_in_phase(scale in -5.0f64..5.0, vals in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let make = |s: f64| {
                let fields: Vec<_> = (0..2)
                    .map(|k| {
                        let ph = RealRaster::new(meta(), RasterKind::Phase, vals[k * 12..(k + 1) * 12].iter().map(|v| v * s).collect()).unwrap();
                        DisplacementField::from_unwrapped(&ph, pair(k as u64), 0.05546576).unwrap()
                    })
                    .collect();
                assemble_series(&fields, Pixel::new(1, 2)).unwrap()
            };
            let (a, b) = (make(1.0), make(scale));
            for (ra, rb) in a.cumulative_mm.iter().zip(&b.cumulative_mm) {
                for (x, y) in ra.data.iter().zip(&rb.data) {
                    proptest::prop_assert!((x * scale - y).abs() < 1e-9 * (1.0 + y.abs()));
                }
            }
        }

        #[test]
        fn telescopes_to_pairwise_sum(vals in proptest::collection::vec(-10.0f64..10.0, 36)) {
            let fields: Vec<_> = (0..3).map(|k| field(k as u64, vals[k * 12..(k + 1) * 12].to_vec())).collect();
            let s = assemble_series(&fields, Pixel::new(0, 0)).unwrap();
            for i in 0..12 {
                let direct: f64 = (0..3).map(|k| vals[k * 12 + i] - vals[k * 12]).sum();
                proptest::prop_assert!((s.cumulative_mm[3].data[i] - direct).abs() < 1e-9);
            }
        }
    }
}
