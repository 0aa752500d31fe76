//! Evaluation metrics: relative error, Gaussian KDE, film thickness and
//! spreading angle on axisymmetric `(x, r)` grids, spectral peaks and
//! field-level error summaries.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::snapshot::{check_uniform_times, SnapshotSet};

/// Relative tolerance used to match a requested station to a grid node.
pub const STATION_RTOL: f64 = 1e-9;

/// Percent relative error `|sim - emu| / |sim| · 100`.
pub fn relative_error(x_sim: f64, x_emu: f64) -> Result<f64> {
    if x_sim == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok((x_sim - x_emu).abs() / x_sim.abs() * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Silverman's rule `1.06 σ̂ n^(-1/5)`.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KdeSpec {
    pub bandwidth: Bandwidth,
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    samples: Vec<f64>,
    h: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fits a KDE. With automatic bandwidth and zero sample spread the rule gives
/// `h = 0`; a floor of `1e-3 · max(|mean|, 1)` is used instead.
pub fn kde(samples: &[f64], spec: &KdeSpec) -> Result<Kde> {
    if samples.is_empty() {
        return invalid("kernel density estimate needs at least one sample");
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return invalid("samples must be finite");
    }
    let h = match spec.bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return invalid(format!("bandwidth must be positive, got {h}"));
            }
            h
        }
        Bandwidth::Auto => {
            let (mean, sd) = mean_std(samples);
            let h = 1.06 * sd * (samples.len() as f64).powf(-0.2);
            if h > 0.0 {
                h
            } else {
                1e-3 * mean.abs().max(1.0)
            }
        }
    };
    Ok(Kde {
        samples: samples.to_vec(),
        h,
    })
}

impl Kde {
    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn eval(&self, x: f64) -> f64 {
        let norm = 1.0 / ((2.0 * PI).sqrt() * self.h * self.samples.len() as f64);
        self.samples
            .iter()
            .map(|xi| {
                let z = (x - xi) / self.h;
                (-0.5 * z * z).exp()
            })
            .sum::<f64>()
            * norm
    }

    /// Support `[min - pad·h, max + pad·h]` of the samples.
    pub fn support(&self, pad: f64) -> (f64, f64) {
        let lo = self.samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo - pad * self.h, hi + pad * self.h)
    }
}

/// Axial-major tensor grid: node `ix * nr + ir` sits at `(xs[ix], rs[ir])`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredGrid {
    pub xs: Vec<f64>,
    pub rs: Vec<f64>,
}

impl StructuredGrid {
    pub fn detect(grid: &[[f64; 2]]) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::UnsupportedGrid("empty grid".into()));
        }
        let x0 = grid[0][0];
        let nr = grid.iter().take_while(|p| p[0] == x0).count();
        if grid.len() % nr != 0 {
            return Err(Error::UnsupportedGrid(format!(
                "{} points do not form rows of {nr} radial nodes",
                grid.len()
            )));
        }
        let rs: Vec<f64> = grid[..nr].iter().map(|p| p[1]).collect();
        let xs: Vec<f64> = grid.iter().step_by(nr).map(|p| p[0]).collect();
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&rs) || !increasing(&xs) {
            return Err(Error::UnsupportedGrid("coordinates are not strictly increasing".into()));
        }
        for (j, p) in grid.iter().enumerate() {
            if p[0] != xs[j / nr] || p[1] != rs[j % nr] {
                return Err(Error::UnsupportedGrid(format!("point {j} breaks the tensor layout")));
            }
        }
        Ok(StructuredGrid { xs, rs })
    }

    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn nr(&self) -> usize {
        self.rs.len()
    }

    /// Index of the axial node at `x`.
    pub fn station(&self, x: f64) -> Result<usize> {
        let tol = STATION_RTOL * x.abs().max(1.0);
        self.xs
            .iter()
            .position(|&xi| (xi - x).abs() <= tol)
            .ok_or_else(|| Error::InvalidArgument(format!("station x = {x} is not an axial grid node")))
    }

    fn column<'a>(&self, values: &'a [f64], ix: usize) -> &'a [f64] {
        let nr = self.nr();
        &values[ix * nr..(ix + 1) * nr]
    }

    /// Radial extent of the above-threshold run touching the outer wall.
    fn wall_film(&self, col: &[f64], threshold: f64) -> f64 {
        let nr = self.nr();
        let run = col.iter().rev().take_while(|&&v| v >= threshold).count();
        if run == 0 {
            0.0
        } else {
            self.rs[nr - 1] - self.rs[nr - run]
        }
    }

    /// Midpoint radius of the outermost above-threshold run.
    fn film_midpoint(&self, col: &[f64], threshold: f64) -> Option<f64> {
        let top = col.iter().rposition(|&v| v >= threshold)?;
        let mut bottom = top;
        while bottom > 0 && col[bottom - 1] >= threshold {
            bottom -= 1;
        }
        Some(0.5 * (self.rs[top] + self.rs[bottom]))
    }
}

fn check_values(grid: &[[f64; 2]], values: &[f64]) -> Result<()> {
    if grid.len() != values.len() {
        return Err(Error::DimensionMismatch {
            what: "snapshot values",
            expected: grid.len(),
            got: values.len(),
        });
    }
    Ok(())
}

/// Midpoint of the minimum and maximum of `values`.
pub fn midpoint_threshold(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThicknessProfile {
    pub stations: Vec<f64>,
    pub thickness: Vec<f64>,
}

/// Film thickness at each axial station of one snapshot. The threshold
/// defaults to the midpoint of the snapshot's range.
pub fn film_thickness_profile(grid: &[[f64; 2]], values: &[f64], threshold: Option<f64>) -> Result<ThicknessProfile> {
    check_values(grid, values)?;
    let g = StructuredGrid::detect(grid)?;
    let threshold = resolve_threshold(threshold, values)?;
    let thickness = (0..g.nx()).map(|ix| g.wall_film(g.column(values, ix), threshold)).collect();
    Ok(ThicknessProfile {
        stations: g.xs.clone(),
        thickness,
    })
}

fn resolve_threshold(threshold: Option<f64>, values: &[f64]) -> Result<f64> {
    match threshold {
        Some(t) if t.is_finite() => Ok(t),
        Some(t) => invalid(format!("threshold must be finite, got {t}")),
        None => Ok(midpoint_threshold(values)),
    }
}

/// Cone angle in degrees of the film mid-surface between two axial stations.
pub fn spreading_angle(
    grid: &[[f64; 2]],
    values: &[f64],
    threshold: Option<f64>,
    stations: (f64, f64),
) -> Result<f64> {
    check_values(grid, values)?;
    let (x1, x2) = stations;
    if !(x2 > x1) {
        return invalid(format!("stations must satisfy x2 > x1, got ({x1}, {x2})"));
    }
    let g = StructuredGrid::detect(grid)?;
    let threshold = resolve_threshold(threshold, values)?;
    let mid = |x: f64| -> Result<f64> {
        let ix = g.station(x)?;
        g.film_midpoint(g.column(values, ix), threshold)
            .ok_or(Error::NoFilm { station: x })
    };
    let (r1, r2) = (mid(x1)?, mid(x2)?);
    Ok(((r2 - r1) / (x2 - x1)).atan().to_degrees())
}

/// Frequency (Hz) of the largest non-DC DFT bin, or `None` for a flat spectrum.
pub fn dominant_frequency(series: &[f64], dt: f64) -> Result<Option<f64>> {
    let m = series.len();
    if m < 4 {
        return invalid(format!("spectral peak needs at least 4 samples, got {m}"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return invalid(format!("sampling interval must be positive, got {dt}"));
    }
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let dc = buf[0].norm();
    let (mut best, mut best_mag) = (0, f64::NEG_INFINITY);
    for (k, c) in buf.iter().enumerate().take(m / 2 + 1).skip(1) {
        let mag = c.norm();
        if mag > best_mag {
            best = k;
            best_mag = mag;
        }
    }
    if best_mag < 1e-12 * (dc + 1.0) {
        return Ok(None);
    }
    Ok(Some(best as f64 / (m as f64 * dt)))
}

/// [`dominant_frequency`] for a series sampled at `times`, which must be uniform.
pub fn dominant_frequency_at(series: &[f64], times: &[f64]) -> Result<Option<f64>> {
    if series.len() != times.len() {
        return Err(Error::DimensionMismatch {
            what: "series length",
            expected: times.len(),
            got: series.len(),
        });
    }
    if times.len() < 4 {
        return invalid(format!("spectral peak needs at least 4 samples, got {}", times.len()));
    }
    let dt = check_uniform_times(times)?;
    dominant_frequency(series, dt)
}

fn check_pair(sim: &SnapshotSet, emu: &SnapshotSet) -> Result<()> {
    if sim.grid != emu.grid {
        return Err(Error::IncompatibleCases(format!(
            "grids of {} and {} differ",
            sim.case_id, emu.case_id
        )));
    }
    if sim.times != emu.times {
        return Err(Error::IncompatibleCases(format!(
            "times of {} and {} differ",
            sim.case_id, emu.case_id
        )));
    }
    Ok(())
}

/// Time-averaged thickness at every station, one threshold for all snapshots.
pub fn mean_thickness_profile(set: &SnapshotSet, threshold: f64) -> Result<ThicknessProfile> {
    let g = StructuredGrid::detect(&set.grid)?;
    let m = set.snapshots();
    let mut acc = vec![0.0; g.nx()];
    for col in set.field.column_iter() {
        let values: Vec<f64> = col.iter().copied().collect();
        for (ix, a) in acc.iter_mut().enumerate() {
            *a += g.wall_film(g.column(&values, ix), threshold);
        }
    }
    Ok(ThicknessProfile {
        stations: g.xs,
        thickness: acc.into_iter().map(|a| a / m.max(1) as f64).collect(),
    })
}

/// Per-snapshot station-averaged film thickness.
pub fn thickness_series(set: &SnapshotSet, threshold: f64) -> Result<Vec<f64>> {
    let g = StructuredGrid::detect(&set.grid)?;
    Ok(set
        .field
        .column_iter()
        .map(|col| {
            let values: Vec<f64> = col.iter().copied().collect();
            (0..g.nx()).map(|ix| g.wall_film(g.column(&values, ix), threshold)).sum::<f64>() / g.nx() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialStation {
    pub x: f64,
    pub sim: f64,
    pub emu: f64,
    /// Percent error; absent when the simulated thickness is zero.
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialErrorProfile {
    pub threshold: f64,
    pub stations: Vec<AxialStation>,
    /// Mean percent error over stations with nonzero simulated thickness.
    pub mean_eps: f64,
    pub excluded: Vec<f64>,
}

/// Per-station percent error of the time-averaged film thickness. The
/// threshold defaults to the midpoint of the simulated field's range.
pub fn axial_error_profile(sim: &SnapshotSet, emu: &SnapshotSet, threshold: Option<f64>) -> Result<AxialErrorProfile> {
    check_pair(sim, emu)?;
    let threshold = resolve_threshold(threshold, sim.field.as_slice())?;
    let ps = mean_thickness_profile(sim, threshold)?;
    let pe = mean_thickness_profile(emu, threshold)?;
    let mut stations = Vec::with_capacity(ps.stations.len());
    let mut excluded = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for ((&x, &s), &e) in ps.stations.iter().zip(&ps.thickness).zip(&pe.thickness) {
        let eps = relative_error(s, e).ok();
        match eps {
            Some(v) => {
                sum += v;
                count += 1;
            }
            None => excluded.push(x),
        }
        stations.push(AxialStation { x, sim: s, emu: e, eps });
    }
    if count == 0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok(AxialErrorProfile {
        threshold,
        stations,
        mean_eps: sum / count as f64,
        excluded,
    })
}

/// Mean over snapshots of `‖sim_q - emu_q‖₂ / ‖sim_q‖₂`.
pub fn field_relative_error(sim: &DMatrix<f64>, emu: &DMatrix<f64>) -> Result<f64> {
    if sim.shape() != emu.shape() {
        return Err(Error::DimensionMismatch {
            what: "field columns",
            expected: sim.ncols(),
            got: emu.ncols(),
        });
    }
    if sim.ncols() == 0 {
        return invalid("no snapshots to compare");
    }
    let mut total = 0.0;
    for (s, e) in sim.column_iter().zip(emu.column_iter()) {
        let base = s.norm();
        if base == 0.0 {
            return Err(Error::UndefinedBaseline);
        }
        total += (s - e).norm() / base;
    }
    Ok(total / sim.ncols() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sim: f64,
    pub emu: f64,
    pub eps: Option<f64>,
}

impl Comparison {
    pub fn new(sim: f64, emu: f64) -> Self {
        Comparison {
            sim,
            emu,
            eps: relative_error(sim, emu).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeReport {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub sim_density: Vec<f64>,
    pub emu_density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub design: Vec<f64>,
    pub field_error: f64,
    pub spreading_angle: Option<Comparison>,
    pub thickness: Comparison,
    pub threshold: f64,
    pub axial_profile: Vec<AxialStation>,
    pub axial_mean_eps: f64,
    pub excluded_stations: Vec<f64>,
    pub kde: KdeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: Option<f64>,
    /// Stations for the spreading angle; nearest axial nodes to 60% and 100%
    /// of the domain length when absent.
    pub stations: Option<(f64, f64)>,
    pub kde: KdeSpec,
    pub kde_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: None,
            stations: None,
            kde: KdeSpec::default(),
            kde_points: 128,
        }
    }
}

fn mean_field(set: &SnapshotSet) -> Vec<f64> {
    set.field.column_mean().iter().copied().collect()
}

fn default_stations(g: &StructuredGrid) -> (f64, f64) {
    let (lo, hi) = (g.xs[0], g.xs[g.nx() - 1]);
    let target = lo + 0.6 * (hi - lo);
    let x1 = g
        .xs
        .iter()
        .copied()
        .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
        .unwrap_or(lo);
    (x1, hi)
}

/// Full comparison of an emulated case against its reference.
pub fn evaluate_case(sim: &SnapshotSet, emu: &SnapshotSet, opts: &EvalOptions) -> Result<CaseReport> {
    check_pair(sim, emu)?;
    let g = StructuredGrid::detect(&sim.grid)?;
    let threshold = resolve_threshold(opts.threshold, sim.field.as_slice())?;
    let axial = axial_error_profile(sim, emu, Some(threshold))?;
    let field_error = field_relative_error(&sim.field, &emu.field)? * 100.0;

    let stations = opts.stations.unwrap_or_else(|| default_stations(&g));
    let angle = |set: &SnapshotSet| spreading_angle(&set.grid, &mean_field(set), Some(threshold), stations);
    let spreading_angle = match (angle(sim), angle(emu)) {
        (Ok(a), Ok(b)) => Some(Comparison::new(a, b)),
        (Err(e @ Error::InvalidArgument(_)), _) => return Err(e),
        _ => None,
    };

    let ts = thickness_series(sim, threshold)?;
    let te = thickness_series(emu, threshold)?;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let thickness = Comparison::new(avg(&ts), avg(&te));

    let ks = kde(&ts, &opts.kde)?;
    let h = ks.bandwidth();
    let ke = kde(&te, &KdeSpec {
        bandwidth: Bandwidth::Fixed(h),
    })?;
    let (a, b) = ks.support(3.0);
    let (c, d) = ke.support(3.0);
    let (lo, hi) = (a.min(c), b.max(d));
    let pts = opts.kde_points.max(2);
    let grid: Vec<f64> = (0..pts).map(|i| lo + (hi - lo) * i as f64 / (pts - 1) as f64).collect();
    let kde = KdeReport {
        bandwidth: h,
        sim_density: grid.iter().map(|&x| ks.eval(x)).collect(),
        emu_density: grid.iter().map(|&x| ke.eval(x)).collect(),
        grid,
    };

    Ok(CaseReport {
        case_id: sim.case_id.clone(),
        design: sim.design.clone(),
        field_error,
        spreading_angle,
        thickness,
        threshold,
        axial_profile: axial.stations,
        axial_mean_eps: axial.mean_eps,
        excluded_stations: axial.excluded,
        kde,
    })
}
