//! Displacement sampled along a polyline over the structure.
//!
//! Vertices snap to the nearest pixel center. Each segment is traversed with
//! an 8-connected Bresenham walk; a sample's distance is the along-line
//! chainage of its pixel center projected onto the segment. The pixel shared
//! by two segments at a joint is kept once.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::displacement::DisplacementSeries;
use crate::error::{Error, Result};
use crate::raster::{write_atomic, GridMeta, Pixel};

/// JSON schema for exported profiles.
pub const PROFILE_SCHEMA: &str = include_str!("../schemas/profile.schema.json");

/// Significant digits of numbers written to CSV.
pub const CSV_SIGNIFICANT_DIGITS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileLine {
    /// `(lat, lon)` in degrees.
    pub vertices: Vec<(f64, f64)>,
    pub name: String,
}

impl ProfileLine {
    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                got: self.vertices.len(),
            });
        }
        if self.vertices.iter().any(|(a, b)| !(a.is_finite() && b.is_finite())) {
            return Err(Error::InvalidInput("non-finite vertex".into()));
        }
        if self.vertices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("consecutive vertices must differ".into()));
        }
        Ok(())
    }

    /// Line through fractional pixel positions `[row, col]` of a grid.
    pub fn from_pixels(meta: &GridMeta, name: impl Into<String>, vertices: &[[f64; 2]]) -> Self {
        ProfileLine {
            vertices: vertices.iter().map(|v| meta.pixel_to_latlon(v[0], v[1])).collect(),
            name: name.into(),
        }
    }

    /// Reads a GeoJSON LineString (bare geometry or Feature); only
    /// `coordinates` (`[lon, lat]`) and an optional `properties.name` are
    /// read.
    pub fn from_geojson(text: &str, default_name: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let coords = v
            .get("coordinates")
            .or_else(|| v.get("geometry").and_then(|g| g.get("coordinates")))
            .and_then(Value::as_array)
            .ok_or_else(|| Error::InvalidInput("GeoJSON has no LineString coordinates".into()))?;
        let vertices = coords
            .iter()
            .map(|c| match c.as_array().map(|a| a.as_slice()) {
                Some([lon, lat, ..]) => match (lat.as_f64(), lon.as_f64()) {
                    (Some(lat), Some(lon)) => Ok((lat, lon)),
                    _ => Err(Error::InvalidInput("non-numeric coordinate".into())),
                },
                _ => Err(Error::InvalidInput("coordinate must be [lon, lat]".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        let name = v
            .pointer("/properties/name")
            .and_then(Value::as_str)
            .unwrap_or(default_name)
            .to_string();
        let line = ProfileLine { vertices, name };
        line.validate()?;
        Ok(line)
    }

    pub fn load_geojson(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("line");
        Self::from_geojson(&text, stem)
    }

    pub fn to_geojson(&self) -> Value {
        serde_json::json!({
            "type": "Feature",
            "properties": { "name": self.name },
            "geometry": {
                "type": "LineString",
                "coordinates": self.vertices.iter().map(|(lat, lon)| [*lon, *lat]).collect::<Vec<_>>(),
            }
        })
    }
}

fn bresenham(a: Pixel, b: Pixel) -> Vec<Pixel> {
    let (mut r, mut c) = (a.row as i64, a.col as i64);
    let (r1, c1) = (b.row as i64, b.col as i64);
    let (dr, dc) = ((r1 - r).abs(), (c1 - c).abs());
    let (sr, sc) = ((r1 - r).signum(), (c1 - c).signum());
    let mut err = dc - dr;
    let mut out = Vec::with_capacity((dr.max(dc) + 1) as usize);
    loop {
        out.push(Pixel::new(r as usize, c as usize));
        if r == r1 && c == c1 {
            return out;
        }
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c += sc;
        }
        if e2 < dc {
            err += dc;
            r += sr;
        }
    }
}

/// Pixels traversed by the line and their along-line distances in meters.
pub fn rasterize_polyline(line: &ProfileLine, meta: &GridMeta) -> Result<(Vec<Pixel>, Vec<f64>)> {
    line.validate()?;
    meta.validate()?;
    let snapped = line
        .vertices
        .iter()
        .map(|&(lat, lon)| {
            let (r, c) = meta.latlon_to_pixel(lat, lon);
            let (rr, cc) = (r.round(), c.round());
            if rr < 0.0 || cc < 0.0 || rr >= meta.height as f64 || cc >= meta.width as f64 {
                return Err(meta.out_of_bounds(rr as i64, cc as i64));
            }
            Ok(Pixel::new(rr as usize, cc as usize))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pixels: Vec<Pixel> = Vec::new();
    let mut distances: Vec<f64> = Vec::new();
    let mut chainage = 0.0;
    for w in snapped.windows(2) {
        let a = meta.to_metric(w[0].row as f64, w[0].col as f64);
        let b = meta.to_metric(w[1].row as f64, w[1].col as f64);
        let d = (b.0 - a.0, b.1 - a.1);
        let len = d.0.hypot(d.1);
        for p in bresenham(w[0], w[1]) {
            if pixels.last() == Some(&p) {
                continue;
            }
            let q = meta.to_metric(p.row as f64, p.col as f64);
            let along = if len > 0.0 {
                (((q.0 - a.0) * d.0 + (q.1 - a.1) * d.1) / len).clamp(0.0, len)
            } else {
                0.0
            };
            pixels.push(p);
            distances.push(chainage + along);
        }
        chainage += len;
    }
    Ok((pixels, distances))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSeries {
    pub name: String,
    pub dates: Vec<NaiveDate>,
    pub distances_m: Vec<f64>,
    pub pixels: Vec<Pixel>,
    /// `values_mm[epoch][sample]`; `None` marks a gap.
    pub values_mm: Vec<Vec<Option<f64>>>,
}

impl ProfileSeries {
    pub fn validate(&self) -> Result<()> {
        if self.distances_m.len() != self.pixels.len() {
            return Err(Error::InvalidInput("distances and pixels differ in length".into()));
        }
        if self.values_mm.len() != self.dates.len() || self.values_mm.iter().any(|r| r.len() != self.pixels.len()) {
            return Err(Error::InvalidInput(
                "value matrix does not match dates x samples".into(),
            ));
        }
        if self.distances_m.first().is_some_and(|d| *d != 0.0) {
            return Err(Error::InvalidInput("profile distances must start at 0".into()));
        }
        if self
            .distances_m
            .windows(2)
            .any(|w| matches!(w[1].partial_cmp(&w[0]), None | Some(std::cmp::Ordering::Less)))
        {
            return Err(Error::InvalidInput("profile distances must be nondecreasing".into()));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("profile dates must increase".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.pixels.iter().all(|p| seen.insert(*p)) {
            return Err(Error::InvalidInput("profile pixels must be unique".into()));
        }
        Ok(())
    }

    /// Values of one sample across epochs.
    pub fn column(&self, sample: usize) -> Vec<Option<f64>> {
        self.values_mm.iter().map(|row| row[sample]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["units"] = Value::from("mm, line of sight");
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("units");
        }
        let p: ProfileSeries = serde_json::from_value(v)?;
        p.validate()?;
        Ok(p)
    }

    /// Long-form CSV: one row per (epoch, sample); gaps are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("CSV: {e}"));
        w.write_record(["date", "distance_m", "row", "col", "displacement_mm"])
            .map_err(csv_err)?;
        for (date, row) in self.dates.iter().zip(&self.values_mm) {
            for (s, v) in row.iter().enumerate() {
                w.write_record([
                    date.to_string(),
                    format_significant(self.distances_m[s], CSV_SIGNIFICANT_DIGITS),
                    self.pixels[s].row.to_string(),
                    self.pixels[s].col.to_string(),
                    v.map(|v| format_significant(v, CSV_SIGNIFICANT_DIGITS))
                        .unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("CSV: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
    }

    /// Parses [`ProfileSeries::to_csv`] output. Sample order is taken from
    /// the first epoch block.
    pub fn from_csv(text: &str, name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            date: NaiveDate,
            distance_m: f64,
            row: usize,
            col: usize,
            displacement_mm: Option<f64>,
        }
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut out = ProfileSeries {
            name: name.to_string(),
            dates: Vec::new(),
            distances_m: Vec::new(),
            pixels: Vec::new(),
            values_mm: Vec::new(),
        };
        for rec in reader.deserialize::<Row>() {
            let rec = rec.map_err(|e| Error::InvalidInput(format!("CSV: {e}")))?;
            if out.dates.last() != Some(&rec.date) {
                out.dates.push(rec.date);
                out.values_mm.push(Vec::new());
            }
            let block = out.values_mm.len() - 1;
            let s = out.values_mm[block].len();
            let pixel = Pixel::new(rec.row, rec.col);
            if block == 0 {
                out.pixels.push(pixel);
                out.distances_m.push(rec.distance_m);
            } else if out.pixels.get(s) != Some(&pixel) {
                return Err(Error::InvalidInput(format!(
                    "CSV sample {s} of {} does not match the first epoch",
                    rec.date
                )));
            }
            out.values_mm[block].push(rec.displacement_mm);
        }
        out.validate()?;
        Ok(out)
    }
}

/// Shortest decimal rendering of `v` rounded to `digits` significant digits.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), v)
        .parse()
        .expect("valid float");
    rounded.to_string()
}

pub fn extract_profile(series: &DisplacementSeries, line: &ProfileLine) -> Result<ProfileSeries> {
    let (pixels, distances_m) = rasterize_polyline(line, &series.meta)?;
    let values_mm = series
        .cumulative_mm
        .iter()
        .map(|r| pixels.iter().map(|p| r.get(*p)).collect())
        .collect();
    let p = ProfileSeries {
        name: line.name.clone(),
        dates: series.dates.clone(),
        distances_m,
        pixels,
        values_mm,
    };
    p.validate()?;
    Ok(p)
}

pub enum ProfileFormat {
    Csv,
    Json,
}

impl ProfileFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ProfileFormat::Json,
            _ => ProfileFormat::Csv,
        }
    }
}

pub fn export_profile(profile: &ProfileSeries, path: &Path, format: ProfileFormat) -> Result<()> {
    let text = match format {
        ProfileFormat::Csv => profile.to_csv()?,
        ProfileFormat::Json => profile.to_json()?,
    };
    write_atomic(path, text.as_bytes())
}

pub fn import_profile(path: &Path) -> Result<ProfileSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match ProfileFormat::from_path(path) {
        ProfileFormat::Json => ProfileSeries::from_json(&text),
        ProfileFormat::Csv => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("profile");
            ProfileSeries::from_csv(&text, stem)
        }
    }
}
