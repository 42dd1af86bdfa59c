//! Linear displacement trends and threshold alerts along a profile.

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::ProfileSeries;
use crate::raster::Pixel;
use crate::synth::DAYS_PER_YEAR;

pub const MIN_POINTS: usize = 3;
/// Demonstration thresholds, not engineering guidance.
pub const DEFAULT_RATE_THRESHOLD_MM_YR: f64 = 10.0;
pub const DEFAULT_RMSE_THRESHOLD_MM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub rate_mm_per_year: f64,
    /// Value of the line at the first date.
    pub intercept_mm: f64,
    /// Population RMS of the residuals.
    pub residual_rmse_mm: f64,
    pub n_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Trend {
    Fit(TrendFit),
    NoFit { n_points: usize },
}

impl Trend {
    pub fn fit(&self) -> Option<&TrendFit> {
        match self {
            Trend::Fit(f) => Some(f),
            Trend::NoFit { .. } => None,
        }
    }
}

/// Ordinary least squares of `y` on `t`, skipping `None`; slope is per unit
/// of `t`.
pub fn fit_line(t: &[f64], y: &[Option<f64>]) -> Trend {
    let pts: Vec<(f64, f64)> = t.iter().zip(y).filter_map(|(t, y)| y.map(|y| (*t, y))).collect();
    let n = pts.len();
    if n < MIN_POINTS {
        return Trend::NoFit { n_points: n };
    }
    let nf = n as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    if stt == 0.0 {
        return Trend::NoFit { n_points: n };
    }
    let slope = sty / stt;
    let intercept = ym - slope * tm;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Trend::Fit(TrendFit {
        rate_mm_per_year: slope,
        intercept_mm: intercept,
        residual_rmse_mm: (sse / nf).sqrt(),
        n_epochs: n,
    })
}

/// Years since the first date with a 365.25-day year.
pub fn years_since_first(dates: &[NaiveDate]) -> Vec<f64> {
    dates
        .first()
        .map(|d0| {
            dates
                .iter()
                .map(|d| (*d - *d0).num_days() as f64 / DAYS_PER_YEAR)
                .collect()
        })
        .unwrap_or_default()
}

pub fn fit_trend(dates: &[NaiveDate], values_mm: &[Option<f64>]) -> Result<Trend> {
    if dates.len() != values_mm.len() {
        return Err(Error::InvalidInput(format!(
            "{} dates but {} values",
            dates.len(),
            values_mm.len()
        )));
    }
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("dates must increase".into()));
    }
    Ok(fit_line(&years_since_first(dates), values_mm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Trigger {
    Rate,
    Rmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub sample: usize,
    pub distance_m: f64,
    pub pixel: Pixel,
    pub rate_mm_per_year: f64,
    pub rmse_mm: f64,
    pub triggers: Vec<Trigger>,
}

/// One alert per profile sample whose fitted `|rate|` exceeds
/// `rate_threshold_mm_yr` or whose residual RMSE exceeds `rmse_threshold_mm`.
/// Samples without a fit are skipped.
pub fn alert_scan(profile: &ProfileSeries, rate_threshold_mm_yr: f64, rmse_threshold_mm: f64) -> Result<Vec<Alert>> {
    profile.validate()?;
    let years = years_since_first(&profile.dates);
    Ok((0..profile.pixels.len())
        .into_par_iter()
        .filter_map(|s| {
            let fit = fit_line(&years, &profile.column(s));
            let fit = fit.fit()?;
            let mut triggers = Vec::new();
            if fit.rate_mm_per_year.abs() > rate_threshold_mm_yr {
                triggers.push(Trigger::Rate);
            }
            if fit.residual_rmse_mm > rmse_threshold_mm {
                triggers.push(Trigger::Rmse);
            }
            (!triggers.is_empty()).then(|| Alert {
                sample: s,
                distance_m: profile.distances_m[s],
                pixel: profile.pixels[s],
                rate_mm_per_year: fit.rate_mm_per_year,
                rmse_mm: fit.residual_rmse_mm,
                triggers,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Days;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let d0 = NaiveDate::from_ymd_opt(2017, 8, 8).unwrap();
        (0..n).map(|k| d0 + Days::new(12 * k as u64)).collect()
    }

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    fn fitted(v: &[f64]) -> TrendFit {
        fit_trend(&dates(v.len()), &some(v)).unwrap().fit().unwrap().clone()
    }

    #[test]
    fn exact_line() {
        let f = fitted(&[0.0, 1.0, 2.0, 3.0]);
        assert!((f.rate_mm_per_year - 365.25 / 12.0).abs() < 1e-9);
        assert!((f.rate_mm_per_year - 30.438).abs() < 1e-3);
        assert!(f.residual_rmse_mm < 1e-12);
        assert_eq!(f.n_epochs, 4);
    }

    #[test]
    fn constant_series() {
        let f = fitted(&[2.5; 6]);
        assert_eq!(f.rate_mm_per_year, 0.0);
        assert_eq!(f.residual_rmse_mm, 0.0);
        assert_eq!(f.intercept_mm, 2.5);
    }

    #[test]
    fn too_few_points() {
        let v = vec![Some(1.0), None, Some(2.0), None];
        assert_eq!(fit_trend(&dates(4), &v).unwrap(), Trend::NoFit { n_points: 2 });
        assert!(fit_trend(&dates(3), &v).is_err());
    }

    #[test]
    fn offset_and_scale() {
        let base = [0.3, -1.2, 2.2, 4.0, 3.1, 5.5];
        let f = fitted(&base);
        let shifted = fitted(&base.map(|v| v + 7.0));
        let scaled = fitted(&base.map(|v| v * -3.0));
        assert!((f.rate_mm_per_year - shifted.rate_mm_per_year).abs() < 1e-9);
        assert!((f.rate_mm_per_year * -3.0 - scaled.rate_mm_per_year).abs() < 1e-9);
    }

    #[test]
    fn time_unit_invariance() {
        let v = some(&[0.3, -1.2, 2.2, 4.0, 3.1, 5.5]);
        let years = years_since_first(&dates(6));
        let days: Vec<f64> = years.iter().map(|y| y * DAYS_PER_YEAR).collect();
        let (a, b) = (fit_line(&years, &v), fit_line(&days, &v));
        let (a, b) = (a.fit().unwrap(), b.fit().unwrap());
        assert!((a.rate_mm_per_year - b.rate_mm_per_year * DAYS_PER_YEAR).abs() < 1e-9);
        assert!((a.residual_rmse_mm - b.residual_rmse_mm).abs() < 1e-12);
    }

    fn profile(columns: Vec<Vec<f64>>) -> ProfileSeries {
        let n = columns[0].len();
        ProfileSeries {
            name: "p".into(),
            dates: dates(n),
            distances_m: (0..columns.len()).map(|s| 5.0 * s as f64).collect(),
            pixels: (0..columns.len()).map(|s| Pixel::new(0, s)).collect(),
            values_mm: (0..n).map(|e| columns.iter().map(|c| Some(c[e])).collect()).collect(),
        }
    }

    #[test]
    fn quiet_profile_has_no_alerts() {
        let p = profile(vec![vec![0.0; 10]; 4]);
        assert!(alert_scan(&p, 10.0, 5.0).unwrap().is_empty());
    }

    #[test]
    fn single_rate_alert() {
        let years = years_since_first(&dates(10));
        let mut cols = vec![vec![0.0; 10]; 5];
        cols[3] = years.iter().map(|t| 50.0 * t).collect();
        let alerts = alert_scan(&profile(cols), 10.0, 5.0).unwrap();
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].sample, 3);
        assert_eq!(alerts[0].distance_m, 15.0);
        assert_eq!(alerts[0].triggers, vec![Trigger::Rate]);
        assert!((alerts[0].rate_mm_per_year - 50.0).abs() < 1e-9);
    }

    #[test]
    fn accelerating_series_trips_rmse_only() {
        let years = years_since_first(&dates(25));
        let mid = years[24] / 2.0;
        // symmetric sampling makes the OLS slope vanish; residuals are then
        // the deviations from the mean
        let y: Vec<f64> = years.iter().map(|t| 400.0 * (t - mid).powi(2)).collect();
        let mean = y.iter().sum::<f64>() / 25.0;
        let expected_rmse = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0).sqrt();
        let alerts = alert_scan(&profile(vec![y]), 10.0, 5.0).unwrap();
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].triggers, vec![Trigger::Rmse]);
        assert!(alerts[0].rate_mm_per_year.abs() < 1e-9);
        assert!((alerts[0].rmse_mm - expected_rmse).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn alerts_monotone_in_thresholds(
            cols in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 8), 1..6),
            r1 in 0.0f64..200.0, r2 in 0.0f64..200.0, e1 in 0.0f64..20.0, e2 in 0.0f64..20.0,
        ) {
            let p = profile(cols);
            let (lo_r, hi_r) = (r1.min(r2), r1.max(r2));
            let (lo_e, hi_e) = (e1.min(e2), e1.max(e2));
            let strict = alert_scan(&p, hi_r, hi_e).unwrap();
            let loose = alert_scan(&p, lo_r, lo_e).unwrap();
            proptest::prop_assert!(strict.len() <= loose.len());
            for a in &strict {
                proptest::prop_assert!(loose.iter().any(|b| b.sample == a.sample));
            }
        }
    }
}
