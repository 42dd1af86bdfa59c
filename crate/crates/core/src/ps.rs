//! Persistent-scatterer candidates by amplitude dispersion, and their
//! displacement accuracy against a reference series.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::displacement::DisplacementSeries;
use crate::error::{Error, Result};
use crate::raster::{ComplexRaster, Pixel, RasterKind, RealRaster};

pub const MIN_EPOCHS: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.25;

/// `D_A = σ(|s_t|)/μ(|s_t|)` per pixel with the population (1/N) deviation.
/// Pixels with zero mean amplitude are masked.
pub fn amplitude_dispersion(stack: &[ComplexRaster]) -> Result<RealRaster> {
    if stack.len() < MIN_EPOCHS {
        return Err(Error::TooFew {
            needed: MIN_EPOCHS,
            got: stack.len(),
        });
    }
    let meta = stack[0].meta;
    for s in stack {
        s.meta.ensure_compatible(&meta)?;
    }
    let n = stack.len() as f64;
    let data: Vec<f64> = (0..meta.len())
        .into_par_iter()
        .map(|i| {
            let amps = stack.iter().map(|s| s.data[i].norm() as f64);
            let mean = amps.clone().sum::<f64>() / n;
            if mean == 0.0 {
                return f64::NAN;
            }
            let var = amps.map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() / mean
        })
        .collect();
    RealRaster::new(meta, RasterKind::AmplitudeDispersion, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsCandidate {
    pub pixel: Pixel,
    pub amp_dispersion: f64,
    /// Mean interferometric coherence, when known.
    pub mean_coherence: Option<f64>,
    pub selected: bool,
}

/// Pixels with `D_A < threshold`, ascending by `D_A` (row-major on ties).
pub fn select_ps(da: &RealRaster, threshold: f64) -> Vec<PsCandidate> {
    let mut out: Vec<PsCandidate> = da
        .valid()
        .filter(|(_, v)| *v < threshold)
        .map(|(i, v)| PsCandidate {
            pixel: da.meta.pixel(i),
            amp_dispersion: v,
            mean_coherence: None,
            selected: true,
        })
        .collect();
    out.sort_by(|a, b| {
        a.amp_dispersion
            .total_cmp(&b.amp_dispersion)
            .then(a.pixel.cmp(&b.pixel))
    });
    out
}

/// Fills `mean_coherence` from a mean-coherence raster.
pub fn attach_coherence(candidates: &mut [PsCandidate], mean_coherence: &RealRaster) {
    for c in candidates {
        c.mean_coherence = mean_coherence.get(c.pixel);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelComparison {
    pub pixel: Pixel,
    pub amp_dispersion: Option<f64>,
    pub n_epochs: usize,
    pub rmse_mm: f64,
    pub max_abs_dev_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub entries: Vec<PixelComparison>,
    /// Root mean square over every compared PS epoch.
    pub ps_pooled_rmse_mm: Option<f64>,
    pub ps_median_rmse_mm: Option<f64>,
    pub ps_max_abs_dev_mm: Option<f64>,
    pub non_ps_count: usize,
    pub non_ps_median_rmse_mm: Option<f64>,
}

fn compare_pixel(series: &DisplacementSeries, reference: &DisplacementSeries, p: Pixel) -> Option<(usize, f64, f64)> {
    let (mut n, mut sq, mut max) = (0usize, 0.0, 0.0f64);
    for (a, b) in series.at(p).into_iter().zip(reference.at(p)) {
        if let (Some(a), Some(b)) = (a, b) {
            let d = a - b;
            n += 1;
            sq += d * d;
            max = max.max(d.abs());
        }
    }
    (n > 0).then_some((n, sq, max))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Compares `series` against `reference` (ground truth or another
/// processing variant) at every selected PS. With `region`, PS outside the
/// region are skipped and the non-PS statistics use only region pixels;
/// otherwise they use the whole grid.
pub fn compare_ps_dinsar(
    series: &DisplacementSeries,
    reference: &DisplacementSeries,
    ps: &[PsCandidate],
    region: Option<&[Pixel]>,
) -> Result<ComparisonReport> {
    series.meta.ensure_compatible(&reference.meta)?;
    if series.dates != reference.dates {
        return Err(Error::InvalidInput("series and reference cover different dates".into()));
    }
    let selected: std::collections::HashSet<Pixel> = ps.iter().filter(|c| c.selected).map(|c| c.pixel).collect();
    let in_region = |p: &Pixel| region.is_none_or(|r| r.contains(p));

    let mut entries = Vec::new();
    let (mut pooled_n, mut pooled_sq) = (0usize, 0.0);
    for c in ps.iter().filter(|c| c.selected && in_region(&c.pixel)) {
        series.meta.check_bounds(c.pixel)?;
        if let Some((n, sq, max)) = compare_pixel(series, reference, c.pixel) {
            pooled_n += n;
            pooled_sq += sq;
            entries.push(PixelComparison {
                pixel: c.pixel,
                amp_dispersion: Some(c.amp_dispersion),
                n_epochs: n,
                rmse_mm: (sq / n as f64).sqrt(),
                max_abs_dev_mm: max,
            });
        }
    }

    let others: Vec<Pixel> = match region {
        Some(r) => r.iter().copied().filter(|p| !selected.contains(p)).collect(),
        None => (0..series.meta.len())
            .map(|i| series.meta.pixel(i))
            .filter(|p| !selected.contains(p))
            .collect(),
    };
    let non_ps: Vec<f64> = others
        .par_iter()
        .filter_map(|p| compare_pixel(series, reference, *p).map(|(n, sq, _)| (sq / n as f64).sqrt()))
        .collect();

    Ok(ComparisonReport {
        ps_pooled_rmse_mm: (pooled_n > 0).then(|| (pooled_sq / pooled_n as f64).sqrt()),
        ps_median_rmse_mm: median(entries.iter().map(|e| e.rmse_mm).collect()),
        ps_max_abs_dev_mm: entries.iter().map(|e| e.max_abs_dev_mm).reduce(f64::max),
        non_ps_count: non_ps.len(),
        non_ps_median_rmse_mm: median(non_ps),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridMeta;
    use chrono::{Days, NaiveDate};
    use num_complex::Complex32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn meta(w: usize, h: usize) -> GridMeta {
        GridMeta::new(w, h, 5.0, 5.0, 0.0, 0.0).unwrap()
    }

    fn speckle_stack(w: usize, h: usize, epochs: usize, seed: u64) -> Vec<ComplexRaster> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..epochs)
            .map(|_| {
                let data = (0..w * h)
                    .map(|_| {
                        Complex32::new(
                            rng.sample::<f32, _>(StandardNormal),
                            rng.sample::<f32, _>(StandardNormal),
                        )
                    })
                    .collect();
                ComplexRaster::new(meta(w, h), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_amplitude_has_zero_dispersion() {
        let stack: Vec<_> = (0..10)
            .map(|t| ComplexRaster::new(meta(2, 2), vec![Complex32::from_polar(3.0, t as f32); 4]).unwrap())
            .collect();
        let da = amplitude_dispersion(&stack).unwrap();
        assert!(da.data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn population_deviation_convention() {
        let amps = [1.0f32, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0, 3.0];
        let stack: Vec<_> = amps
            .iter()
            .map(|a| ComplexRaster::new(meta(1, 1), vec![Complex32::new(*a, 0.0)]).unwrap())
            .collect();
        let da = amplitude_dispersion(&stack).unwrap();
        assert!((da.data[0] - 0.75f64.sqrt() / 1.5).abs() < 1e-12);
        assert!((da.data[0] - 0.577).abs() < 1e-3);
    }

    #[test]
    fn zero_mean_masked_and_short_stack_rejected() {
        let stack: Vec<_> = (0..10)
            .map(|_| ComplexRaster::new(meta(1, 1), vec![Complex32::new(0.0, 0.0)]).unwrap())
            .collect();
        assert_eq!(amplitude_dispersion(&stack).unwrap().valid_count(), 0);
        assert!(amplitude_dispersion(&stack[..9]).is_err());
    }

    #[test]
    fn rayleigh_median_and_tail() {
        let stack = speckle_stack(128, 128, 25, 3);
        let da = amplitude_dispersion(&stack).unwrap();
        let mut v: Vec<f64> = da.valid().map(|(_, x)| x).collect();
        v.sort_by(f64::total_cmp);
        let med = v[v.len() / 2];
        assert!((med - (4.0 / std::f64::consts::PI - 1.0).sqrt()).abs() < 0.03, "{med}");
        let rate = select_ps(&da, DEFAULT_THRESHOLD).len() as f64 / v.len() as f64;
        assert!(rate < 0.01, "{rate}");
    }

    #[test]
    fn scale_invariance_and_monotone_selection() {
        let stack = speckle_stack(16, 16, 12, 4);
        let scaled: Vec<_> = stack
            .iter()
            .map(|s| ComplexRaster::new(s.meta, s.data.iter().map(|z| z * 7.5).collect()).unwrap())
            .collect();
        let (a, b) = (
            amplitude_dispersion(&stack).unwrap(),
            amplitude_dispersion(&scaled).unwrap(),
        );
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
        let mut prev = usize::MAX;
        for t in [1.0, 0.7, 0.5, 0.3, 0.1, 0.0] {
            let n = select_ps(&a, t).len();
            assert!(n <= prev);
            prev = n;
        }
        assert!(select_ps(&a, 0.0).is_empty());
        let sel = select_ps(&a, 0.6);
        assert!(sel.windows(2).all(|w| w[0].amp_dispersion <= w[1].amp_dispersion));
    }

    #[test]
    fn stable_reflectors_selected() {
        let mut stack = speckle_stack(16, 16, 20, 5);
        let targets = [Pixel::new(3, 4), Pixel::new(10, 12)];
        for s in &mut stack {
            for p in targets {
                let i = s.meta.index(p);
                s.data[i] += Complex32::new(10.0 * 1.2533, 0.0);
            }
        }
        let sel = select_ps(&amplitude_dispersion(&stack).unwrap(), DEFAULT_THRESHOLD);
        for p in targets {
            assert!(sel.iter().any(|c| c.pixel == p));
        }
    }

    fn series(values: impl Fn(usize, usize) -> f64) -> DisplacementSeries {
        let m = meta(3, 3);
        let d0 = NaiveDate::from_ymd_opt(2017, 8, 8).unwrap();
        DisplacementSeries {
            meta: m,
            dates: (0..4).map(|k| d0 + Days::new(12 * k)).collect(),
            cumulative_mm: (0..4)
                .map(|k| {
                    RealRaster::new(
                        m,
                        RasterKind::DisplacementMm,
                        (0..9).map(|i| values(k as usize, i)).collect(),
                    )
                    .unwrap()
                })
                .collect(),
            reference_pixel: Pixel::new(0, 0),
        }
    }

    fn candidate(p: Pixel) -> PsCandidate {
        PsCandidate {
            pixel: p,
            amp_dispersion: 0.1,
            mean_coherence: None,
            selected: true,
        }
    }

    #[test]
    fn comparison_against_truth() {
        let truth = series(|k, i| (k * i) as f64);
        let report = compare_ps_dinsar(&truth, &truth, &[candidate(Pixel::new(1, 1))], None).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].rmse_mm, 0.0);
        let noisy = series(|k, i| (k * i) as f64 + if i == 4 { 0.0 } else { k as f64 });
        let report = compare_ps_dinsar(&noisy, &truth, &[candidate(Pixel::new(1, 1))], None).unwrap();
        assert_eq!(report.ps_pooled_rmse_mm, Some(0.0));
        assert_eq!(report.non_ps_count, 8);
        assert!((report.non_ps_median_rmse_mm.unwrap() - 3.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(report.ps_max_abs_dev_mm, Some(0.0));
    }

    #[test]
    fn empty_candidate_list() {
        let s = series(|_, _| 0.0);
        let report = compare_ps_dinsar(&s, &s, &[], Some(&[Pixel::new(0, 1)])).unwrap();
        assert!(report.entries.is_empty());
        assert_eq!(report.ps_pooled_rmse_mm, None);
        assert_eq!(report.non_ps_count, 1);
    }
}
