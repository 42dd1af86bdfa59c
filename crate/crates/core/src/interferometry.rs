//! Pairwise interferometric processing.
//!
//! Interferogram phase is `arg(master · conj(slave))`, wrapped to `(-π, π]`.
//! Pixels where either image has zero amplitude carry no phase and are
//! masked rather than set to zero.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::catalog::{AcquisitionMeta, PairSpec};
use crate::error::{Error, Result};
use crate::phase::wrap;
use crate::raster::{ComplexRaster, GridMeta, RasterKind, RealRaster, SlcInfo};

/// Sensor and viewing geometry needed by the geometric phase terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub wavelength_m: f64,
    pub incidence_deg: f64,
    pub slant_range_m: f64,
}

impl SensorGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_m > 0.0 && self.slant_range_m > 0.0) {
            return Err(Error::InvalidInput("wavelength and slant range must be > 0".into()));
        }
        if !(self.incidence_deg > 0.0 && self.incidence_deg < 90.0) {
            return Err(Error::InvalidInput("incidence must lie in (0, 90) degrees".into()));
        }
        Ok(())
    }

    /// Two-way phase per meter of path difference, `4π/λ`.
    #[inline]
    pub fn phase_per_meter(&self) -> f64 {
        4.0 * PI / self.wavelength_m
    }

    /// Flat-earth phase at ground-range offset `x_ground_m` for baseline `bperp_m`.
    #[inline]
    pub fn flat_earth_phase(&self, bperp_m: f64, x_ground_m: f64) -> f64 {
        self.phase_per_meter() * bperp_m * x_ground_m / (self.slant_range_m * self.incidence_deg.to_radians().tan())
    }

    /// Topographic phase of a scatterer at height `h_m` for baseline `bperp_m`.
    #[inline]
    pub fn topographic_phase(&self, bperp_m: f64, h_m: f64) -> f64 {
        self.phase_per_meter() * bperp_m * h_m / (self.slant_range_m * self.incidence_deg.to_radians().sin())
    }
}

impl From<&AcquisitionMeta> for SensorGeometry {
    fn from(a: &AcquisitionMeta) -> Self {
        SensorGeometry {
            wavelength_m: a.wavelength_m,
            incidence_deg: a.incidence_deg,
            slant_range_m: a.slant_range_m,
        }
    }
}

impl From<&SlcInfo> for SensorGeometry {
    fn from(a: &SlcInfo) -> Self {
        SensorGeometry {
            wavelength_m: a.wavelength_m,
            incidence_deg: a.incidence_deg,
            slant_range_m: a.slant_range_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interferogram {
    pub meta: GridMeta,
    /// Wrapped phase in `(-π, π]`.
    pub phase: RealRaster,
    /// `|master · conj(slave)|`, used as the Goldstein filter weight.
    pub magnitude: RealRaster,
    /// Unset until [`estimate_coherence`] fills it.
    pub coherence: Option<RealRaster>,
    pub pair: PairSpec,
}

impl Interferogram {
    /// Complex sample `magnitude · e^{iφ}`, zero when masked.
    #[inline]
    fn complex(&self, i: usize) -> Complex64 {
        if self.phase.mask[i] {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(self.magnitude.data[i], self.phase.data[i])
        }
    }

    pub fn with_coherence(mut self, coherence: RealRaster) -> Result<Self> {
        self.meta.ensure_compatible(&coherence.meta)?;
        self.coherence = Some(coherence);
        Ok(self)
    }

    /// Checks the range invariants on every unmasked pixel.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some((i, v)) = self.phase.valid().find(|(_, v)| !(*v > -PI && *v <= PI)) {
            return Err(Error::InvalidInput(format!("phase {v} at index {i} outside (-pi, pi]")));
        }
        if let Some(c) = &self.coherence {
            if let Some((i, v)) = c.valid().find(|(_, v)| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "coherence {v} at index {i} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub goldstein_alpha: f64,
    pub patch: usize,
    pub overlap: usize,
    pub coherence_window: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            goldstein_alpha: 0.5,
            patch: 32,
            overlap: 16,
            coherence_window: 5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.goldstein_alpha) {
            return Err(Error::InvalidInput(format!(
                "goldstein_alpha {} outside [0, 1]",
                self.goldstein_alpha
            )));
        }
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return Err(Error::InvalidInput(format!(
                "patch {} must be a power of two >= 2",
                self.patch
            )));
        }
        if self.overlap >= self.patch {
            return Err(Error::InvalidInput("overlap must be smaller than patch".into()));
        }
        if self.coherence_window.is_multiple_of(2) {
            return Err(Error::EvenWindow(self.coherence_window));
        }
        Ok(())
    }
}

pub fn form_interferogram(master: &ComplexRaster, slave: &ComplexRaster, pair: &PairSpec) -> Result<Interferogram> {
    master.meta.ensure_compatible(&slave.meta)?;
    let meta = master.meta;
    let (phase, magnitude): (Vec<f64>, Vec<f64>) = master
        .data
        .iter()
        .zip(&slave.data)
        .map(|(m, s)| {
            let m = Complex64::new(m.re as f64, m.im as f64);
            let s = Complex64::new(s.re as f64, s.im as f64);
            let z = m * s.conj();
            if m.norm_sqr() == 0.0 || s.norm_sqr() == 0.0 {
                (f64::NAN, f64::NAN)
            } else {
                (wrap(z.arg()), z.norm())
            }
        })
        .unzip();
    Ok(Interferogram {
        meta,
        phase: RealRaster::new(meta, RasterKind::Phase, phase)?,
        magnitude: RealRaster::new(meta, RasterKind::Amplitude, magnitude)?,
        coherence: None,
        pair: pair.clone(),
    })
}

fn subtract_phase(ifg: &Interferogram, model: impl Fn(usize) -> Option<f64>) -> Interferogram {
    let mut out = ifg.clone();
    for i in 0..out.phase.data.len() {
        if out.phase.mask[i] {
            continue;
        }
        match model(i) {
            Some(p) => out.phase.data[i] = wrap(out.phase.data[i] - p),
            None => out.phase.set_masked(i),
        }
    }
    out
}

pub fn remove_flat_earth(ifg: &Interferogram, pair: &PairSpec, geometry: &SensorGeometry) -> Result<Interferogram> {
    geometry.validate()?;
    let meta = ifg.meta;
    Ok(subtract_phase(ifg, |i| {
        let col = (i % meta.width) as f64;
        Some(geometry.flat_earth_phase(pair.perp_baseline_m, col * meta.pixel_spacing_east))
    }))
}

/// Subtracts the DEM-predicted phase; DEM nodata masks the output pixel.
pub fn remove_topographic_phase(
    ifg: &Interferogram,
    dem: &RealRaster,
    pair: &PairSpec,
    geometry: &SensorGeometry,
) -> Result<Interferogram> {
    geometry.validate()?;
    ifg.meta.ensure_compatible(&dem.meta)?;
    Ok(subtract_phase(ifg, |i| {
        (!dem.mask[i]).then(|| geometry.topographic_phase(pair.perp_baseline_m, dem.data[i]))
    }))
}

/// Windowed sample coherence. Border pixels use the truncated window; a
/// window with no energy yields a masked pixel.
pub fn estimate_coherence(master: &ComplexRaster, slave: &ComplexRaster, window: usize) -> Result<RealRaster> {
    master.meta.ensure_compatible(&slave.meta)?;
    if window.is_multiple_of(2) {
        return Err(Error::EvenWindow(window));
    }
    let meta = master.meta;
    let (w, h) = (meta.width, meta.height);
    let half = window / 2;
    let cross: Vec<Complex64> = master
        .data
        .iter()
        .zip(&slave.data)
        .map(|(m, s)| Complex64::new(m.re as f64, m.im as f64) * Complex64::new(s.re as f64, -(s.im as f64)))
        .collect();
    let pm: Vec<f64> = master
        .data
        .iter()
        .map(|m| (m.re as f64).powi(2) + (m.im as f64).powi(2))
        .collect();
    let ps: Vec<f64> = slave
        .data
        .iter()
        .map(|s| (s.re as f64).powi(2) + (s.im as f64).powi(2))
        .collect();

    let data: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|r| {
            let (cross, pm, ps) = (&cross, &pm, &ps);
            (0..w).map(move |c| {
                let mut num = Complex64::new(0.0, 0.0);
                let (mut em, mut es) = (0.0, 0.0);
                for rr in r.saturating_sub(half)..(r + half + 1).min(h) {
                    for cc in c.saturating_sub(half)..(c + half + 1).min(w) {
                        let i = rr * w + cc;
                        num += cross[i];
                        em += pm[i];
                        es += ps[i];
                    }
                }
                let den = (em * es).sqrt();
                if den > 0.0 {
                    (num.norm() / den).min(1.0)
                } else {
                    f64::NAN
                }
            })
        })
        .collect();
    RealRaster::new(meta, RasterKind::Coherence, data)
}

/// Patch origins covering `len` samples with the given step; the last patch
/// is aligned with the end.
fn patch_starts(len: usize, patch: usize, step: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|s| s + patch < len).collect();
    starts.push(len - patch);
    starts.dedup();
    starts
}

struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let fft = if inverse { &self.inverse } else { &self.forward };
        fft.process(buf);
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = buf[r * n + c];
            }
            fft.process(&mut col);
            for r in 0..n {
                buf[r * n + c] = col[r];
            }
        }
        if inverse {
            let scale = 1.0 / (n * n) as f64;
            buf.iter_mut().for_each(|z| *z *= scale);
        }
    }
}

/// Goldstein adaptive filter: each patch spectrum is weighted by its
/// normalized magnitude raised to `alpha`, and patches are blended with a
/// raised-cosine taper. Coherence is carried through unchanged.
pub fn goldstein_filter(ifg: &Interferogram, cfg: &FilterConfig) -> Result<Interferogram> {
    cfg.validate()?;
    let (w, h) = (ifg.meta.width, ifg.meta.height);
    let n = cfg.patch;
    let step = n - cfg.overlap;
    let taper: Vec<f64> = (0..n)
        .map(|x| (PI * (x as f64 + 0.5) / n as f64).sin().powi(2))
        .collect();
    let fft = Fft2::new(n);
    let alpha = cfg.goldstein_alpha;

    let origins: Vec<(usize, usize)> = patch_starts(h, n, step)
        .into_iter()
        .flat_map(|r0| patch_starts(w, n, step).into_iter().map(move |c0| (r0, c0)))
        .collect();

    let filtered: Vec<Vec<Complex64>> = origins
        .par_iter()
        .map(|&(r0, c0)| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
            for r in 0..n.min(h - r0) {
                for c in 0..n.min(w - c0) {
                    buf[r * n + c] = ifg.complex((r0 + r) * w + c0 + c);
                }
            }
            fft.run(&mut buf, false);
            let peak = buf.iter().map(|z| z.norm()).fold(0.0, f64::max);
            if peak > 0.0 {
                for z in buf.iter_mut() {
                    *z *= (z.norm() / peak).powf(alpha);
                }
            }
            fft.run(&mut buf, true);
            buf
        })
        .collect();

    let mut acc = vec![Complex64::new(0.0, 0.0); w * h];
    let mut weight = vec![0.0f64; w * h];
    for (&(r0, c0), buf) in origins.iter().zip(&filtered) {
        for r in 0..n.min(h - r0) {
            for c in 0..n.min(w - c0) {
                let t = taper[r] * taper[c];
                let i = (r0 + r) * w + c0 + c;
                acc[i] += buf[r * n + c] * t;
                weight[i] += t;
            }
        }
    }

    let mut out = ifg.clone();
    for i in 0..w * h {
        if ifg.phase.mask[i] {
            continue;
        }
        let z = acc[i] / weight[i];
        if z.norm_sqr() > 0.0 {
            out.phase.data[i] = wrap(z.arg());
            out.magnitude.data[i] = z.norm();
        } else {
            out.phase.set_masked(i);
            out.magnitude.set_masked(i);
        }
    }
    Ok(out)
}

/// Coherence-weighted complex averaging over `looks_x × looks_y` blocks.
/// Output coherence is the block mean of the unmasked input coherence.
pub fn multilook(ifg: &Interferogram, looks_x: usize, looks_y: usize) -> Result<Interferogram> {
    if looks_x == 0 || looks_y == 0 {
        return Err(Error::InvalidInput("looks must be >= 1".into()));
    }
    if looks_x > ifg.meta.width || looks_y > ifg.meta.height {
        return Err(Error::InvalidInput("looks exceed raster size".into()));
    }
    let src = ifg.meta;
    let meta = src.multilooked(looks_x, looks_y);
    let mut phase = Vec::with_capacity(meta.len());
    let mut magnitude = Vec::with_capacity(meta.len());
    let mut coherence = Vec::with_capacity(meta.len());
    for r in 0..meta.height {
        for c in 0..meta.width {
            let mut sum = Complex64::new(0.0, 0.0);
            let (mut mag, mut coh, mut count) = (0.0, 0.0, 0usize);
            for rr in r * looks_y..(r + 1) * looks_y {
                for cc in c * looks_x..(c + 1) * looks_x {
                    let i = rr * src.width + cc;
                    if ifg.phase.mask[i] {
                        continue;
                    }
                    let g = match &ifg.coherence {
                        Some(cr) if cr.mask[i] => continue,
                        Some(cr) => cr.data[i],
                        None => 1.0,
                    };
                    sum += Complex64::from_polar(g, ifg.phase.data[i]);
                    mag += ifg.magnitude.data[i];
                    coh += g;
                    count += 1;
                }
            }
            if count == 0 || sum.norm_sqr() == 0.0 {
                phase.push(f64::NAN);
                magnitude.push(f64::NAN);
                coherence.push(f64::NAN);
            } else {
                phase.push(wrap(sum.arg()));
                magnitude.push(mag / count as f64);
                coherence.push(coh / count as f64);
            }
        }
    }
    Ok(Interferogram {
        meta,
        phase: RealRaster::new(meta, RasterKind::Phase, phase)?,
        magnitude: RealRaster::new(meta, RasterKind::Amplitude, magnitude)?,
        coherence: match ifg.coherence {
            Some(_) => Some(RealRaster::new(meta, RasterKind::Coherence, coherence)?),
            None => None,
        },
        pair: ifg.pair.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::circular_distance;
    use num_complex::Complex32;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid(w: usize, h: usize) -> GridMeta {
        GridMeta::new(w, h, 5.0, 5.0, 44.43, 8.9).unwrap()
    }

    fn pair(bperp: f64) -> PairSpec {
        PairSpec {
            master_id: "m".into(),
            slave_id: "s".into(),
            master_date: "2017-08-08".parse().unwrap(),
            slave_date: "2017-08-20".parse().unwrap(),
            perp_baseline_m: bperp,
            temporal_baseline_days: 12,
            gap: false,
        }
    }

    fn geometry() -> SensorGeometry {
        SensorGeometry {
            wavelength_m: 0.05546576,
            incidence_deg: 39.0,
            slant_range_m: 850_000.0,
        }
    }

    fn speckle(meta: GridMeta, seed: u64) -> ComplexRaster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..meta.len())
            .map(|_| {
                Complex32::new(
                    rng.sample::<f32, _>(StandardNormal),
                    rng.sample::<f32, _>(StandardNormal),
                )
            })
            .collect();
        ComplexRaster::new(meta, data).unwrap()
    }

    fn rotate(r: &ComplexRaster, f: impl Fn(usize) -> f64) -> ComplexRaster {
        let data = r
            .data
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let z = Complex64::new(z.re as f64, z.im as f64) * Complex64::from_polar(1.0, f(i));
                Complex32::new(z.re as f32, z.im as f32)
            })
            .collect();
        ComplexRaster::new(r.meta, data).unwrap()
    }

    #[test]
    fn identical_images_give_zero_phase() {
        let m = speckle(grid(16, 16), 1);
        let ifg = form_interferogram(&m, &m, &pair(0.0)).unwrap();
        assert!(ifg.phase.valid().all(|(_, v)| v == 0.0));
    }

    #[test]
    fn constant_rotation() {
        let m = speckle(grid(16, 16), 2);
        let s = rotate(&m, |_| -0.7);
        let ifg = form_interferogram(&m, &s, &pair(0.0)).unwrap();
        for (_, v) in ifg.phase.valid() {
            assert!((v - 0.7).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn zero_master_pixel_is_masked() {
        let mut m = speckle(grid(4, 4), 3);
        m.data[5] = Complex32::new(0.0, 0.0);
        let s = speckle(grid(4, 4), 4);
        let ifg = form_interferogram(&m, &s, &pair(0.0)).unwrap();
        assert!(ifg.phase.mask[5]);
        assert_eq!(ifg.phase.valid_count(), 15);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let m = speckle(grid(4, 4), 3);
        let s = speckle(grid(4, 5), 3);
        assert!(matches!(
            form_interferogram(&m, &s, &pair(0.0)),
            Err(Error::GridMismatch)
        ));
        assert!(matches!(estimate_coherence(&m, &s, 5), Err(Error::GridMismatch)));
    }

    #[test]
    fn swapping_master_and_slave_negates_phase() {
        let m = speckle(grid(12, 12), 5);
        let s = speckle(grid(12, 12), 6);
        let a = form_interferogram(&m, &s, &pair(0.0)).unwrap();
        let b = form_interferogram(&s, &m, &pair(0.0)).unwrap();
        for i in 0..a.phase.data.len() {
            assert!(circular_distance(a.phase.data[i], -b.phase.data[i]) < 1e-12);
        }
    }

    #[test]
    fn zero_baseline_flat_earth_is_identity() {
        let m = speckle(grid(16, 16), 7);
        let s = speckle(grid(16, 16), 8);
        let ifg = form_interferogram(&m, &s, &pair(0.0)).unwrap();
        let out = remove_flat_earth(&ifg, &pair(0.0), &geometry()).unwrap();
        assert_eq!(out.phase, ifg.phase);
    }

    #[test]
    fn flat_earth_only_stack_leaves_no_residual() {
        let meta = grid(64, 8);
        let g = geometry();
        let p = pair(100.0);
        let m = speckle(meta, 9);
        // slave carries the conjugate path phase so that master·conj(slave) shows +φ_flat
        let s = rotate(&m, |i| -g.flat_earth_phase(p.perp_baseline_m, (i % 64) as f64 * 5.0));
        let ifg = form_interferogram(&m, &s, &p).unwrap();
        let out = remove_flat_earth(&ifg, &p, &g).unwrap();
        for (_, v) in out.phase.valid() {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn flat_earth_fringe_period() {
        let g = geometry();
        // one 2π cycle every λ·R·tanθ / (2·B⊥) meters of ground range
        let period_m = g.wavelength_m * g.slant_range_m * 39f64.to_radians().tan() / (2.0 * 100.0);
        let period_px = period_m / 5.0;
        assert!((period_px - 38.18).abs() < 0.01, "{period_px}");
        let cycle = g.flat_earth_phase(100.0, period_px * 5.0) - g.flat_earth_phase(100.0, 0.0);
        assert!((cycle - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn flat_earth_removal_then_readd_is_identity() {
        let m = speckle(grid(40, 6), 10);
        let s = speckle(grid(40, 6), 11);
        let p = pair(137.0);
        let g = geometry();
        let ifg = form_interferogram(&m, &s, &p).unwrap();
        let removed = remove_flat_earth(&ifg, &p, &g).unwrap();
        for (i, v) in removed.phase.valid() {
            let back = wrap(v + g.flat_earth_phase(p.perp_baseline_m, (i % 40) as f64 * 5.0));
            assert!(circular_distance(back, ifg.phase.data[i]) < 1e-12);
        }
    }

    #[test]
    fn topographic_removal() {
        let meta = grid(8, 8);
        let m = speckle(meta, 12);
        let s = speckle(meta, 13);
        let p = pair(80.0);
        let g = geometry();
        let ifg = form_interferogram(&m, &s, &p).unwrap();

        let flat = RealRaster::filled(meta, RasterKind::Dem, 120.0).unwrap();
        let out = remove_topographic_phase(&ifg, &flat, &p, &g).unwrap();
        let shift = g.topographic_phase(80.0, 120.0);
        for (i, v) in out.phase.valid() {
            assert!(circular_distance(v + shift, ifg.phase.data[i]) < 1e-12);
        }

        let heights: Vec<f64> = (0..64).map(|i| (i as f64 * 7.3) % 90.0).collect();
        let dem = RealRaster::new(meta, RasterKind::Dem, heights.clone()).unwrap();
        let s = rotate(&m, |i| -g.topographic_phase(80.0, heights[i]));
        let ifg = form_interferogram(&m, &s, &p).unwrap();
        let out = remove_topographic_phase(&ifg, &dem, &p, &g).unwrap();
        assert!(out.phase.valid().all(|(_, v)| v.abs() < 1e-6));

        let mut holey = dem.clone();
        holey.set_masked(10);
        let out = remove_topographic_phase(&ifg, &holey, &p, &g).unwrap();
        assert!(out.phase.mask[10]);
    }

    #[test]
    fn coherence_of_identical_images_is_one() {
        let m = speckle(grid(20, 20), 14);
        let c = estimate_coherence(&m, &m, 5).unwrap();
        assert!(c.valid().all(|(_, v)| v == 1.0));
    }

    #[test]
    fn coherence_rejects_even_window_and_masks_empty() {
        let m = speckle(grid(8, 8), 15);
        assert!(matches!(estimate_coherence(&m, &m, 4), Err(Error::EvenWindow(4))));
        let z = ComplexRaster::new(grid(8, 8), vec![Complex32::new(0.0, 0.0); 64]).unwrap();
        let c = estimate_coherence(&z, &m, 5).unwrap();
        assert_eq!(c.valid_count(), 0);
    }

    #[test]
    fn independent_noise_coherence_bias() {
        // brute-force oracle: draw 25-sample windows directly and average |Σ m s*| / sqrt(Σ|m|² Σ|s|²)
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut draw = || Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let trials = 20_000;
        let oracle: f64 = (0..trials)
            .map(|_| {
                let (mut num, mut a, mut b) = (Complex64::new(0.0, 0.0), 0.0, 0.0);
                for _ in 0..25 {
                    let (m, s) = (draw(), draw());
                    num += m * s.conj();
                    a += m.norm_sqr();
                    b += s.norm_sqr();
                }
                num.norm() / (a * b).sqrt()
            })
            .sum::<f64>()
            / trials as f64;
        assert!((oracle - 0.20).abs() < 0.03, "oracle {oracle}");

        let meta = grid(128, 128);
        let c = estimate_coherence(&speckle(meta, 16), &speckle(meta, 17), 5).unwrap();
        let interior: Vec<f64> = (2..126)
            .flat_map(|r| (2..126).map(move |col| (r, col)))
            .map(|(r, col)| c.data[r * 128 + col])
            .collect();
        assert!(interior.len() >= 10_000);
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!((mean - oracle).abs() < 0.03, "mean {mean} oracle {oracle}");
    }

    fn ramp_ifg(meta: GridMeta, f: impl Fn(usize, usize) -> f64) -> Interferogram {
        let phase: Vec<f64> = (0..meta.len())
            .map(|i| wrap(f(i / meta.width, i % meta.width)))
            .collect();
        Interferogram {
            meta,
            phase: RealRaster::new(meta, RasterKind::Phase, phase).unwrap(),
            magnitude: RealRaster::filled(meta, RasterKind::Amplitude, 1.0).unwrap(),
            coherence: None,
            pair: pair(0.0),
        }
    }

    #[test]
    fn goldstein_alpha_zero_is_identity() {
        let meta = grid(70, 45);
        let m = speckle(meta, 18);
        let s = speckle(meta, 19);
        let ifg = form_interferogram(&m, &s, &pair(0.0)).unwrap();
        let cfg = FilterConfig {
            goldstein_alpha: 0.0,
            ..FilterConfig::default()
        };
        let out = goldstein_filter(&ifg, &cfg).unwrap();
        for i in 0..meta.len() {
            assert!(circular_distance(out.phase.data[i], ifg.phase.data[i]) < 1e-9);
        }
    }

    #[test]
    fn goldstein_constant_phase_fixed_point() {
        let ifg = ramp_ifg(grid(64, 64), |_, _| 1.2);
        let out = goldstein_filter(&ifg, &FilterConfig::default()).unwrap();
        for (_, v) in out.phase.valid() {
            assert!((v - 1.2).abs() < 1e-9);
        }
    }

    #[test]
    fn goldstein_reduces_noise_on_fringe_ramp() {
        // oracle: one fringe across the scene, corrupted by γ = 0.5 circular-Gaussian noise
        let meta = grid(128, 128);
        let truth = |_: usize, c: usize| 2.0 * PI * c as f64 / 128.0;
        let gamma: f64 = 0.5;
        let common = speckle(meta, 20);
        let n1 = speckle(meta, 21);
        let n2 = speckle(meta, 22);
        let mix = |n: &ComplexRaster| {
            let data = common
                .data
                .iter()
                .zip(&n.data)
                .map(|(c, n)| c * gamma.sqrt() as f32 + n * (1.0 - gamma).sqrt() as f32)
                .collect();
            ComplexRaster::new(meta, data).unwrap()
        };
        let m = mix(&n1);
        let s = rotate(&mix(&n2), |i| -truth(i / 128, i % 128));
        let ifg = form_interferogram(&m, &s, &pair(0.0)).unwrap();
        let rmse = |x: &Interferogram| {
            let sum: f64 = x
                .phase
                .valid()
                .map(|(i, v)| circular_distance(v, truth(i / 128, i % 128)).powi(2))
                .sum();
            (sum / x.phase.valid_count() as f64).sqrt()
        };
        let before = rmse(&ifg);
        let after = rmse(&goldstein_filter(&ifg, &FilterConfig::default()).unwrap());
        assert!(after < before, "before {before} after {after}");
    }

    #[test]
    fn multilook_cases() {
        let meta = grid(256, 256);
        let ifg = ramp_ifg(meta, |r, c| 0.01 * (r + c) as f64);
        let same = multilook(&ifg, 1, 1).unwrap();
        assert_eq!(same.meta, ifg.meta);
        for i in 0..meta.len() {
            assert!(circular_distance(same.phase.data[i], ifg.phase.data[i]) < 1e-12);
        }

        let ml = multilook(&ifg, 2, 2).unwrap();
        assert_eq!((ml.meta.width, ml.meta.height), (128, 128));
        assert_eq!(ml.meta.pixel_spacing_east, 10.0);
        assert_eq!(ml.meta.pixel_spacing_north, 10.0);

        let flat = ramp_ifg(grid(2, 2), |_, _| 0.1);
        let one = multilook(&flat, 2, 2).unwrap();
        assert!((one.phase.data[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn patch_layout_covers_everything() {
        assert_eq!(patch_starts(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(patch_starts(70, 32, 16), vec![0, 16, 32, 38]);
        assert_eq!(patch_starts(20, 32, 16), vec![0]);
    }

    proptest! {
        #[test]
        fn coherence_ignores_global_unit_rotation(seed in 0u64..1000, theta in -PI..PI) {
            let meta = grid(12, 9);
            let m = speckle(meta, seed);
            let s = speckle(meta, seed + 1);
            let base = estimate_coherence(&m, &s, 3).unwrap();
            let rotated = estimate_coherence(&m, &rotate(&s, |_| theta), 3).unwrap();
            for i in 0..meta.len() {
                prop_assert!((base.data[i] - rotated.data[i]).abs() < 1e-5);
            }
        }

        #[test]
        fn filtered_outputs_stay_in_range(seed in 0u64..1000, alpha in 0.0f64..1.0) {
            let meta = grid(40, 33);
            let m = speckle(meta, seed);
            let s = speckle(meta, seed + 7);
            let ifg = form_interferogram(&m, &s, &pair(0.0)).unwrap()
                .with_coherence(estimate_coherence(&m, &s, 5).unwrap()).unwrap();
            ifg.check_invariants().unwrap();
            let cfg = FilterConfig { goldstein_alpha: alpha, ..FilterConfig::default() };
            goldstein_filter(&ifg, &cfg).unwrap().check_invariants().unwrap();
            multilook(&ifg, 3, 2).unwrap().check_invariants().unwrap();
        }
    }
}
