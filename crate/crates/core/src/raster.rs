//! Grid-aligned raster containers and their on-disk formats.
//!
//! Both formats are a raw little-endian, row-major binary file plus a JSON
//! sidecar at `<file>.json`:
//!
//! * SLC (`.slc`): interleaved `(re, im)` 32-bit floats. The sidecar carries
//!   the grid keys plus `acquisition_date`, `wavelength_m`, `incidence_deg`
//!   and `slant_range_m`, all required.
//! * Real (`.r64`): 64-bit floats, NaN marking nodata. The sidecar carries
//!   the grid keys plus `kind`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by the local equirectangular mapping.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Grid geometry shared by every raster of a stack.
///
/// The origin is the geographic position of the center of pixel (0, 0); rows
/// run south and columns run east.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub width: usize,
    pub height: usize,
    #[serde(rename = "pixel_spacing_east_m")]
    pub pixel_spacing_east: f64,
    #[serde(rename = "pixel_spacing_north_m")]
    pub pixel_spacing_north: f64,
    #[serde(rename = "origin_lat_deg")]
    pub origin_lat: f64,
    #[serde(rename = "origin_lon_deg")]
    pub origin_lon: f64,
}

/// Integer pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }
}

impl GridMeta {
    pub fn new(
        width: usize,
        height: usize,
        pixel_spacing_east: f64,
        pixel_spacing_north: f64,
        origin_lat: f64,
        origin_lon: f64,
    ) -> Result<Self> {
        let meta = GridMeta {
            width,
            height,
            pixel_spacing_east,
            pixel_spacing_north,
            origin_lat,
            origin_lon,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        for (name, v) in [
            ("pixel_spacing_east_m", self.pixel_spacing_east),
            ("pixel_spacing_north_m", self.pixel_spacing_north),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !(self.origin_lat.is_finite() && self.origin_lon.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: Pixel) -> usize {
        p.row * self.width + p.col
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> Pixel {
        Pixel::new(index / self.width, index % self.width)
    }

    #[inline]
    pub fn contains(&self, p: Pixel) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn check_bounds(&self, p: Pixel) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(self.out_of_bounds(p.row as i64, p.col as i64))
        }
    }

    pub(crate) fn out_of_bounds(&self, row: i64, col: i64) -> Error {
        Error::OutOfBounds {
            row,
            col,
            width: self.width,
            height: self.height,
        }
    }

    pub fn ensure_compatible(&self, other: &GridMeta) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Fractional `(row, col)` of a geographic position, equirectangular about
    /// the grid origin.
    pub fn latlon_to_pixel(&self, lat: f64, lon: f64) -> (f64, f64) {
        let m_per_deg = EARTH_RADIUS_M.to_radians();
        let north_m = (lat - self.origin_lat) * m_per_deg;
        let east_m = (lon - self.origin_lon) * m_per_deg * self.origin_lat.to_radians().cos();
        (-north_m / self.pixel_spacing_north, east_m / self.pixel_spacing_east)
    }

    /// Inverse of [`GridMeta::latlon_to_pixel`]; returns `(lat, lon)`.
    pub fn pixel_to_latlon(&self, row: f64, col: f64) -> (f64, f64) {
        let m_per_deg = EARTH_RADIUS_M.to_radians();
        let lat = self.origin_lat - row * self.pixel_spacing_north / m_per_deg;
        let lon = self.origin_lon + col * self.pixel_spacing_east / (m_per_deg * self.origin_lat.to_radians().cos());
        (lat, lon)
    }

    /// Metric offset of a fractional pixel position from pixel (0, 0), as
    /// `(north_down_m, east_m)`.
    #[inline]
    pub fn to_metric(&self, row: f64, col: f64) -> (f64, f64) {
        (row * self.pixel_spacing_north, col * self.pixel_spacing_east)
    }

    /// Returns a copy with the given dimensions and spacings scaled by the
    /// look factors.
    pub fn multilooked(&self, looks_x: usize, looks_y: usize) -> GridMeta {
        GridMeta {
            width: self.width / looks_x,
            height: self.height / looks_y,
            pixel_spacing_east: self.pixel_spacing_east * looks_x as f64,
            pixel_spacing_north: self.pixel_spacing_north * looks_y as f64,
            ..*self
        }
    }
}

/// Euclidean ground distance between two in-grid pixels.
pub fn pixel_distance_m(meta: &GridMeta, a: Pixel, b: Pixel) -> Result<f64> {
    meta.check_bounds(a)?;
    meta.check_bounds(b)?;
    let dc = (a.col as f64 - b.col as f64) * meta.pixel_spacing_east;
    let dr = (a.row as f64 - b.row as f64) * meta.pixel_spacing_north;
    Ok(dc.hypot(dr))
}

/// Single-look-complex image.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRaster {
    pub meta: GridMeta,
    pub data: Vec<Complex32>,
}

impl ComplexRaster {
    pub fn new(meta: GridMeta, data: Vec<Complex32>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(Error::DimensionMismatch {
                expected: meta.len() as u64,
                actual: data.len() as u64,
            });
        }
        if let Some(index) = data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(ComplexRaster { meta, data })
    }

    #[inline]
    pub fn at(&self, p: Pixel) -> Complex32 {
        self.data[self.meta.index(p)]
    }
}

/// What a real raster holds; written to the sidecar `kind` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Phase,
    Coherence,
    Dem,
    #[serde(rename = "displacement_mm")]
    DisplacementMm,
    Amplitude,
    AmplitudeDispersion,
}

/// Real-valued raster with an explicit nodata mask (`true` = masked).
///
/// Masked pixels hold NaN in `data`; unmasked pixels are always finite.
#[derive(Debug, Clone)]
pub struct RealRaster {
    pub meta: GridMeta,
    pub kind: RasterKind,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PartialEq for RealRaster {
    /// Bitwise comparison so that NaN sentinels compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.kind == other.kind
            && self.mask == other.mask
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl RealRaster {
    /// Builds a raster; non-finite samples become masked.
    pub fn new(meta: GridMeta, kind: RasterKind, mut data: Vec<f64>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(Error::DimensionMismatch {
                expected: meta.len() as u64,
                actual: data.len() as u64,
            });
        }
        let mask: Vec<bool> = data.iter().map(|v| !v.is_finite()).collect();
        for (v, &m) in data.iter_mut().zip(&mask) {
            if m {
                *v = f64::NAN;
            }
        }
        Ok(RealRaster { meta, kind, data, mask })
    }

    pub fn filled(meta: GridMeta, kind: RasterKind, value: f64) -> Result<Self> {
        Self::new(meta, kind, vec![value; meta.len()])
    }

    /// Builds a raster with an explicit mask; masked samples are replaced by
    /// the sentinel.
    pub fn with_mask(meta: GridMeta, kind: RasterKind, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != data.len() {
            return Err(Error::DimensionMismatch {
                expected: data.len() as u64,
                actual: mask.len() as u64,
            });
        }
        let mut r = Self::new(meta, kind, data)?;
        for (i, m) in mask.into_iter().enumerate() {
            if m {
                r.set_masked(i);
            }
        }
        Ok(r)
    }

    #[inline]
    pub fn get(&self, p: Pixel) -> Option<f64> {
        let i = self.meta.index(p);
        (!self.mask[i]).then_some(self.data[i])
    }

    #[inline]
    pub fn is_masked(&self, p: Pixel) -> bool {
        self.mask[self.meta.index(p)]
    }

    #[inline]
    pub fn set_masked(&mut self, index: usize) {
        self.mask[index] = true;
        self.data[index] = f64::NAN;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Iterator over unmasked `(index, value)` pairs.
    pub fn valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.data
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, m))| !**m)
            .map(|(i, (v, _))| (i, *v))
    }

    /// Applies `f` to every unmasked value, keeping the mask.
    pub fn map_valid(&self, kind: RasterKind, f: impl Fn(f64) -> f64) -> RealRaster {
        let data = self
            .data
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { f64::NAN } else { f(v) })
            .collect();
        RealRaster {
            meta: self.meta,
            kind,
            data,
            mask: self.mask.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SlcSidecar {
    #[serde(flatten)]
    grid: GridMeta,
    acquisition_date: NaiveDate,
    wavelength_m: f64,
    incidence_deg: f64,
    slant_range_m: f64,
}

#[derive(Serialize, Deserialize)]
struct RealSidecar {
    #[serde(flatten)]
    grid: GridMeta,
    kind: RasterKind,
}

/// Acquisition parameters carried in an SLC sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlcInfo {
    pub acquisition_date: NaiveDate,
    pub wavelength_m: f64,
    pub incidence_deg: f64,
    pub slant_range_m: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let text = match fs::read_to_string(&side) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingSidecar(side)),
        Err(e) => return Err(Error::io(side, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::MalformedSidecar {
        path: side,
        message: e.to_string(),
    })
}

fn read_payload(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_slc(path: impl AsRef<Path>) -> Result<(ComplexRaster, SlcInfo)> {
    let path = path.as_ref();
    let side: SlcSidecar = read_sidecar(path)?;
    side.grid.validate().map_err(|e| Error::MalformedSidecar {
        path: sidecar_path(path),
        message: e.to_string(),
    })?;
    let bytes = read_payload(path, side.grid.len() as u64 * 8)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    let raster = ComplexRaster::new(side.grid, data)?;
    let info = SlcInfo {
        acquisition_date: side.acquisition_date,
        wavelength_m: side.wavelength_m,
        incidence_deg: side.incidence_deg,
        slant_range_m: side.slant_range_m,
    };
    Ok((raster, info))
}

pub fn save_slc(path: impl AsRef<Path>, raster: &ComplexRaster, info: &SlcInfo) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(raster.data.len() * 8);
    for z in &raster.data {
        bytes.extend_from_slice(&z.re.to_le_bytes());
        bytes.extend_from_slice(&z.im.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let side = SlcSidecar {
        grid: raster.meta,
        acquisition_date: info.acquisition_date,
        wavelength_m: info.wavelength_m,
        incidence_deg: info.incidence_deg,
        slant_range_m: info.slant_range_m,
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
}

pub fn load_real(path: impl AsRef<Path>) -> Result<RealRaster> {
    let path = path.as_ref();
    let side: RealSidecar = read_sidecar(path)?;
    side.grid.validate().map_err(|e| Error::MalformedSidecar {
        path: sidecar_path(path),
        message: e.to_string(),
    })?;
    let bytes = read_payload(path, side.grid.len() as u64 * 8)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(index) = data.iter().position(|v| v.is_infinite()) {
        return Err(Error::NonFiniteSample { index });
    }
    RealRaster::new(side.grid, side.kind, data)
}

pub fn save_real(path: impl AsRef<Path>, raster: &RealRaster) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(raster.data.len() * 8);
    for (&v, &m) in raster.data.iter().zip(&raster.mask) {
        let v = if m { f64::NAN } else { v };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let side = RealSidecar {
        grid: raster.meta,
        kind: raster.kind,
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize, se: f64, sn: f64) -> GridMeta {
        GridMeta::new(w, h, se, sn, 44.42, 8.88).unwrap()
    }

    fn info() -> SlcInfo {
        SlcInfo {
            acquisition_date: NaiveDate::from_ymd_opt(2017, 8, 8).unwrap(),
            wavelength_m: 0.05546576,
            incidence_deg: 39.0,
            slant_range_m: 850_000.0,
        }
    }

    #[test]
    fn slc_two_by_two_is_32_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.slc");
        let data: Vec<Complex32> = (0..4).map(|i| Complex32::new(i as f32, -(i as f32))).collect();
        let r = ComplexRaster::new(grid(2, 2, 5.0, 5.0), data).unwrap();
        save_slc(&path, &r, &info()).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32);
        let (back, back_info) = load_slc(&path).unwrap();
        assert_eq!(back.data.len(), 4);
        assert_eq!(back, r);
        assert_eq!(back_info, info());
    }

    #[test]
    fn slc_declared_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.slc");
        let r = ComplexRaster::new(grid(2, 2, 5.0, 5.0), vec![Complex32::new(1.0, 0.0); 4]).unwrap();
        save_slc(&path, &r, &info()).unwrap();
        let side = sidecar_path(&path);
        let text = fs::read_to_string(&side)
            .unwrap()
            .replace("\"width\": 2", "\"width\": 3")
            .replace("\"height\": 2", "\"height\": 3");
        fs::write(&side, text).unwrap();
        match load_slc(&path) {
            Err(Error::DimensionMismatch {
                expected: 72,
                actual: 32,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slc_rejects_infinite_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.slc");
        let r = ComplexRaster::new(grid(2, 2, 5.0, 5.0), vec![Complex32::new(1.0, 0.0); 4]).unwrap();
        save_slc(&path, &r, &info()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[12..16].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_slc(&path), Err(Error::NonFiniteSample { index: 1 })));
    }

    #[test]
    fn slc_missing_sidecar_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.slc");
        fs::write(&path, [0u8; 32]).unwrap();
        assert!(matches!(load_slc(&path), Err(Error::MissingSidecar(_))));
        fs::write(
            sidecar_path(&path),
            r#"{"width":2,"height":2,"pixel_spacing_east_m":5,"pixel_spacing_north_m":5,"origin_lat_deg":0,"origin_lon_deg":0,"acquisition_date":"2017-08-08","wavelength_m":0.05,"incidence_deg":39}"#,
        )
        .unwrap();
        assert!(matches!(load_slc(&path), Err(Error::MalformedSidecar { .. })));
    }

    #[test]
    fn real_round_trip_keeps_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.r64");
        let mut data: Vec<f64> = (0..25).map(|i| i as f64 * 0.5 - 3.0).collect();
        for i in [0, 7, 24] {
            data[i] = f64::NAN;
        }
        let r = RealRaster::new(grid(5, 5, 5.0, 5.0), RasterKind::DisplacementMm, data).unwrap();
        assert_eq!(r.valid_count(), 22);
        save_real(&path, &r).unwrap();
        let back = load_real(&path).unwrap();
        assert_eq!(back, r);
        assert!(back.mask[0] && back.mask[7] && back.mask[24]);
    }

    #[test]
    fn real_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.r64");
        let r = RealRaster::filled(grid(4, 4, 5.0, 5.0), RasterKind::Phase, 1.0).unwrap();
        save_real(&path, &r).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_real(&path),
            Err(Error::DimensionMismatch {
                expected: 128,
                actual: 120
            })
        ));
    }

    #[test]
    fn real_sidecar_kind_values() {
        for (kind, text) in [
            (RasterKind::Phase, "phase"),
            (RasterKind::Coherence, "coherence"),
            (RasterKind::Dem, "dem"),
            (RasterKind::DisplacementMm, "displacement_mm"),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{text}\""));
        }
    }

    #[test]
    fn distance_examples() {
        let g = grid(10, 10, 5.0, 5.0);
        assert_eq!(pixel_distance_m(&g, Pixel::new(0, 0), Pixel::new(4, 3)).unwrap(), 25.0);
        assert_eq!(pixel_distance_m(&g, Pixel::new(2, 2), Pixel::new(2, 2)).unwrap(), 0.0);
        let g = grid(10, 10, 5.0, 10.0);
        let d = pixel_distance_m(&g, Pixel::new(0, 0), Pixel::new(1, 2)).unwrap();
        assert!((d - 200f64.sqrt()).abs() < 1e-12);
        assert!((d - 14.142).abs() < 1e-3);
        assert!(matches!(
            pixel_distance_m(&g, Pixel::new(0, 0), Pixel::new(10, 0)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn grid_validation() {
        assert!(GridMeta::new(0, 3, 5.0, 5.0, 0.0, 0.0).is_err());
        assert!(GridMeta::new(3, 3, 0.0, 5.0, 0.0, 0.0).is_err());
        assert!(GridMeta::new(3, 3, 5.0, f64::INFINITY, 0.0, 0.0).is_err());
        let a = grid(3, 3, 5.0, 5.0);
        let b = grid(3, 3, 5.0, 5.5);
        assert!(a.ensure_compatible(&a).is_ok());
        assert!(matches!(a.ensure_compatible(&b), Err(Error::GridMismatch)));
    }

    #[test]
    fn latlon_mapping_inverts() {
        let g = grid(256, 256, 5.0, 5.0);
        let (lat, lon) = g.pixel_to_latlon(100.0, 37.0);
        let (r, c) = g.latlon_to_pixel(lat, lon);
        assert!((r - 100.0).abs() < 1e-9 && (c - 37.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn real_round_trip_is_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 256), masked in proptest::collection::vec(any::<bool>(), 256)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.r64");
            let r = RealRaster::with_mask(grid(16, 16, 5.0, 5.0), RasterKind::Coherence, values, masked).unwrap();
            save_real(&path, &r).unwrap();
            prop_assert_eq!(load_real(&path).unwrap(), r);
        }

        #[test]
        fn distance_is_a_metric(p in proptest::collection::vec((0usize..20, 0usize..30), 3), se in 0.5f64..20.0, sn in 0.5f64..20.0) {
            let g = grid(30, 20, se, sn);
            let [a, b, c] = [0, 1, 2].map(|i| Pixel::new(p[i].0, p[i].1));
            let ab = pixel_distance_m(&g, a, b).unwrap();
            let ba = pixel_distance_m(&g, b, a).unwrap();
            let bc = pixel_distance_m(&g, b, c).unwrap();
            let ac = pixel_distance_m(&g, a, c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
