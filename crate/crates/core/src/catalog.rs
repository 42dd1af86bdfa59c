//! Acquisition inventory, consecutive master/slave pairing and offline
//! construction of archive search URLs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{write_atomic, SlcInfo};

/// Default monitoring window of the bundled example configuration.
pub const DEFAULT_WINDOW: (&str, &str) = ("2017-08-01", "2018-08-14");

const ASF_SEARCH_ENDPOINT: &str = "https://api.daac.asf.alaska.edu/services/search/param";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionMeta {
    pub id: String,
    pub date: NaiveDate,
    pub wavelength_m: f64,
    pub incidence_deg: f64,
    pub slant_range_m: f64,
    pub slc_path: PathBuf,
    /// Perpendicular orbit offset against a common stack reference. Pair
    /// baselines are differences of this value.
    #[serde(default)]
    pub perp_baseline_m: f64,
}

impl AcquisitionMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_m.is_finite() && self.wavelength_m > 0.0) {
            return Err(Error::InvalidInput(format!("{}: wavelength_m must be > 0", self.id)));
        }
        if !(self.incidence_deg > 0.0 && self.incidence_deg < 90.0) {
            return Err(Error::InvalidInput(format!(
                "{}: incidence_deg must be in (0, 90)",
                self.id
            )));
        }
        if !(self.slant_range_m.is_finite() && self.slant_range_m > 0.0) {
            return Err(Error::InvalidInput(format!("{}: slant_range_m must be > 0", self.id)));
        }
        if !self.perp_baseline_m.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{}: perp_baseline_m must be finite",
                self.id
            )));
        }
        Ok(())
    }

    pub fn from_slc_info(
        id: impl Into<String>,
        slc_path: impl Into<PathBuf>,
        info: &SlcInfo,
        perp_baseline_m: f64,
    ) -> Self {
        AcquisitionMeta {
            id: id.into(),
            date: info.acquisition_date,
            wavelength_m: info.wavelength_m,
            incidence_deg: info.incidence_deg,
            slant_range_m: info.slant_range_m,
            slc_path: slc_path.into(),
            perp_baseline_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub master_id: String,
    pub slave_id: String,
    pub master_date: NaiveDate,
    pub slave_date: NaiveDate,
    /// Slave minus master perpendicular baseline.
    pub perp_baseline_m: f64,
    pub temporal_baseline_days: i64,
    /// Set when the temporal baseline exceeds the requested maximum.
    #[serde(default)]
    pub gap: bool,
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.master_date >= self.slave_date {
            return Err(Error::InvalidInput(format!(
                "pair {}->{}: master date must precede slave date",
                self.master_id, self.slave_id
            )));
        }
        if self.temporal_baseline_days != (self.slave_date - self.master_date).num_days() {
            return Err(Error::InvalidInput(format!(
                "pair {}->{}: temporal baseline disagrees with dates",
                self.master_id, self.slave_id
            )));
        }
        Ok(())
    }
}

/// Sorts acquisitions by date and chains consecutive pairs.
///
/// Pairs longer than `max_temporal_days` are still emitted, flagged with
/// `gap = true`, so the series keeps a record of the hole.
pub fn build_pairs(acquisitions: &[AcquisitionMeta], max_temporal_days: i64) -> Result<Vec<PairSpec>> {
    if acquisitions.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: acquisitions.len(),
        });
    }
    let mut sorted: Vec<&AcquisitionMeta> = acquisitions.iter().collect();
    sorted.sort_by_key(|a| a.date);
    for w in sorted.windows(2) {
        if w[0].date == w[1].date {
            return Err(Error::DuplicateDate(w[0].date.to_string()));
        }
    }
    Ok(sorted
        .windows(2)
        .map(|w| {
            let days = (w[1].date - w[0].date).num_days();
            PairSpec {
                master_id: w[0].id.clone(),
                slave_id: w[1].id.clone(),
                master_date: w[0].date,
                slave_date: w[1].date,
                perp_baseline_m: w[1].perp_baseline_m - w[0].perp_baseline_m,
                temporal_baseline_days: days,
                gap: days > max_temporal_days,
            }
        })
        .collect())
}

/// `catalog.json` contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub acquisitions: Vec<AcquisitionMeta>,
    #[serde(default)]
    pub pairs: Vec<PairSpec>,
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for a in &self.acquisitions {
            a.validate()?;
            if !ids.insert(a.id.as_str()) {
                return Err(Error::DuplicateId(a.id.clone()));
            }
        }
        for p in &self.pairs {
            p.validate()?;
            for id in [&p.master_id, &p.slave_id] {
                if !ids.contains(id.as_str()) {
                    return Err(Error::InvalidInput(format!("pair references unknown acquisition {id}")));
                }
            }
        }
        Ok(())
    }

    pub fn acquisition(&self, id: &str) -> Option<&AcquisitionMeta> {
        self.acquisitions.iter().find(|a| a.id == id)
    }

    pub fn add(&mut self, acq: AcquisitionMeta) -> Result<()> {
        acq.validate()?;
        if self.acquisition(&acq.id).is_some() {
            return Err(Error::DuplicateId(acq.id));
        }
        self.acquisitions.push(acq);
        Ok(())
    }

    /// Rebuilds `pairs` from the current acquisitions.
    pub fn rebuild_pairs(&mut self, max_temporal_days: i64) -> Result<()> {
        self.pairs = build_pairs(&self.acquisitions, max_temporal_days)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Catalog> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cat: Catalog = serde_json::from_str(&text)?;
        cat.validate()?;
        Ok(cat)
    }

    /// Validates, then replaces the file atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    /// `(min_lon, min_lat, max_lon, max_lat)` in degrees.
    pub bbox: (f64, f64, f64, f64),
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub platform: String,
    pub processing_level: String,
}

impl SearchQuery {
    pub fn validate(&self) -> Result<()> {
        let (min_lon, min_lat, max_lon, max_lat) = self.bbox;
        if ![min_lon, min_lat, max_lon, max_lat].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("bbox must be finite".into()));
        }
        if min_lon >= max_lon || min_lat >= max_lat {
            return Err(Error::InvalidInput(format!(
                "bbox min must be below max on both axes: {:?}",
                self.bbox
            )));
        }
        if self.start > self.end {
            return Err(Error::InvalidInput(format!(
                "start {} after end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Renders a number with at most six decimals and no trailing zeros.
fn format_coord(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Builds the ASF Vertex search URL for a query. Network access is left to
/// the caller.
pub fn asf_query_url(q: &SearchQuery) -> Result<String> {
    q.validate()?;
    let (a, b, c, d) = q.bbox;
    Ok(format!(
        "{ASF_SEARCH_ENDPOINT}?platform={}&processingLevel={}&bbox={},{},{},{}&start={}&end={}&output=json",
        q.platform,
        q.processing_level,
        format_coord(a),
        format_coord(b),
        format_coord(c),
        format_coord(d),
        q.start.format("%Y-%m-%d"),
        q.end.format("%Y-%m-%d"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn acq(id: &str, d: &str) -> AcquisitionMeta {
        AcquisitionMeta {
            id: id.into(),
            date: date(d),
            wavelength_m: 0.05546576,
            incidence_deg: 39.0,
            slant_range_m: 850_000.0,
            slc_path: format!("{id}.slc").into(),
            perp_baseline_m: 0.0,
        }
    }

    #[test]
    fn fig4_pair_is_twelve_days() {
        let pairs = build_pairs(&[acq("a", "2017-08-08"), acq("b", "2017-08-20")], 12).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].temporal_baseline_days, 12);
        assert!(!pairs[0].gap);
    }

    #[test]
    fn consecutive_chaining_sorted() {
        let acqs = [acq("c", "2017-09-01"), acq("a", "2017-08-08"), acq("b", "2017-08-20")];
        let pairs = build_pairs(&acqs, 12).unwrap();
        let ids: Vec<_> = pairs
            .iter()
            .map(|p| (p.master_id.as_str(), p.slave_id.as_str()))
            .collect();
        assert_eq!(ids, [("a", "b"), ("b", "c")]);
    }

    #[test]
    fn long_pair_is_flagged_not_dropped() {
        let pairs = build_pairs(&[acq("a", "2017-08-08"), acq("b", "2017-09-13")], 12).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].temporal_baseline_days, 36);
        assert!(pairs[0].gap);
    }

    #[test]
    fn pairing_errors() {
        assert!(matches!(
            build_pairs(&[acq("a", "2017-08-08")], 12),
            Err(Error::TooFew { .. })
        ));
        assert!(matches!(
            build_pairs(&[acq("a", "2017-08-08"), acq("b", "2017-08-08")], 12),
            Err(Error::DuplicateDate(_))
        ));
    }

    #[test]
    fn baseline_is_slave_minus_master() {
        let mut a = acq("a", "2017-08-08");
        let mut b = acq("b", "2017-08-20");
        a.perp_baseline_m = 30.0;
        b.perp_baseline_m = -45.0;
        assert_eq!(build_pairs(&[a, b], 12).unwrap()[0].perp_baseline_m, -75.0);
    }

    #[test]
    fn chain_property_over_many_epochs() {
        let start = date("2017-08-08");
        let acqs: Vec<_> = (0..25)
            .map(|i| acq(&format!("e{i:02}"), &(start + chrono::Days::new(12 * i)).to_string()))
            .collect();
        let pairs = build_pairs(&acqs, 12).unwrap();
        assert_eq!(pairs.len(), 24);
        for w in pairs.windows(2) {
            assert_eq!(w[0].slave_id, w[1].master_id);
        }
    }

    fn fixture_query() -> SearchQuery {
        SearchQuery {
            bbox: (8.88, 44.42, 8.92, 44.44),
            start: date("2017-08-01"),
            end: date("2018-08-14"),
            platform: "Sentinel-1".into(),
            processing_level: "SLC".into(),
        }
    }

    #[test]
    fn query_url_matches_assembled_string() {
        let expected = [
            "https://api.daac.asf.alaska.edu/services/search/param",
            "?platform=Sentinel-1",
            "&processingLevel=SLC",
            "&bbox=8.88,44.42,8.92,44.44",
            "&start=2017-08-01",
            "&end=2018-08-14",
            "&output=json",
        ]
        .concat();
        let url = asf_query_url(&fixture_query()).unwrap();
        assert_eq!(url, expected);
        assert_eq!(url, asf_query_url(&fixture_query()).unwrap());
    }

    #[test]
    fn query_url_boundaries() {
        let mut q = fixture_query();
        q.end = q.start;
        assert!(asf_query_url(&q).unwrap().contains("&start=2017-08-01&end=2017-08-01&"));
        let mut q = fixture_query();
        q.bbox = (8.92, 44.42, 8.88, 44.44);
        assert!(asf_query_url(&q).is_err());
        let mut q = fixture_query();
        q.start = date("2019-01-01");
        assert!(asf_query_url(&q).is_err());
    }

    #[test]
    fn coordinates_trimmed() {
        assert_eq!(format_coord(8.0), "8");
        assert_eq!(format_coord(-0.0000001), "0");
        assert_eq!(format_coord(1.23456789), "1.234568");
        assert_eq!(format_coord(-12.5), "-12.5");
    }

    #[test]
    fn catalog_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        let mut cat = Catalog::default();
        for (i, d) in ["2017-08-08", "2017-08-20", "2017-09-01"].iter().enumerate() {
            cat.add(acq(&format!("a{i}"), d)).unwrap();
        }
        cat.rebuild_pairs(12).unwrap();
        cat.save(&path).unwrap();
        assert_eq!(Catalog::load(&path).unwrap(), cat);

        let empty = Catalog::default();
        empty.save(&path).unwrap();
        assert_eq!(Catalog::load(&path).unwrap(), empty);

        let text = serde_json::to_string(&Catalog {
            acquisitions: vec![acq("x", "2017-08-08"), acq("x", "2017-08-20")],
            pairs: vec![],
        })
        .unwrap();
        fs::write(&path, text).unwrap();
        assert!(matches!(Catalog::load(&path), Err(Error::DuplicateId(_))));
        assert!(cat.clone().add(acq("a0", "2018-01-01")).is_err());
    }
}
