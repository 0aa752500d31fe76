//! Space-filling designs, physical design ranges, swirl geometry and
//! inlet-velocity clusters.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Number of random within-slice swaps tried by the maximin improvement pass.
pub const MAXIMIN_SWAP_ATTEMPTS: usize = 1000;

/// Exponent of the Morris-Mitchell criterion driving the swap pass.
const PHI_P: i32 = 15;

/// `n` points in the unit hypercube, each tagged with a 1-based slice id.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    points: DMatrix<f64>,
    slice_id: Vec<usize>,
}

impl DesignMatrix {
    /// Wraps unit-cube coordinates. Every coordinate must lie in `[0, 1)`.
    pub fn new(points: DMatrix<f64>, slice_id: Vec<usize>) -> Result<Self> {
        if slice_id.len() != points.nrows() {
            return Err(Error::DimensionMismatch {
                what: "slice ids",
                expected: points.nrows(),
                got: slice_id.len(),
            });
        }
        if points.iter().any(|c| !(0.0..1.0).contains(c)) {
            return invalid("design coordinates must lie in [0, 1)");
        }
        if slice_id.contains(&0) {
            return invalid("slice ids are 1-based");
        }
        Ok(DesignMatrix { points, slice_id })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dims(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn slice_id(&self) -> &[usize] {
        &self.slice_id
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    pub fn slices(&self) -> usize {
        self.slice_id.iter().copied().max().unwrap_or(0)
    }

    /// Writes `slice,x1,...,xd` CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["slice".to_string()];
        header.extend((1..=self.dims()).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.slice_id[i].to_string()];
            rec.extend(self.points.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("slice") {
            return invalid("design CSV must start with a `slice` column");
        }
        let d = header.len() - 1;
        let mut slices = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
            };
            let slice = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("bad slice id: {e}")))?;
            slices.push(slice);
            for k in 1..=d {
                values.push(parse(&rec[k])?);
            }
        }
        let n = slices.len();
        DesignMatrix::new(DMatrix::from_row_slice(n, d, &values), slices)
    }
}

/// Physical `(lower, upper)` bounds per design dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRanges {
    bounds: Vec<(f64, f64)>,
}

impl DesignRanges {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return invalid("design ranges need at least one dimension");
        }
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return invalid(format!("dimension {k}: lower {lo} must be below upper {hi}"));
            }
        }
        Ok(DesignRanges { bounds })
    }

    /// Injection angle (deg), inlet width (mm), inlet-to-headend distance (mm).
    pub fn swirl_injector() -> Self {
        DesignRanges {
            bounds: vec![(35.0, 62.2), (0.27, 1.53), (0.85, 3.40)],
        }
    }

    pub fn unit(d: usize) -> Self {
        DesignRanges {
            bounds: vec![(0.0, 1.0); d],
        }
    }

    /// Bounding box of a set of physical points. Degenerate dimensions are
    /// widened to unit width around their value.
    pub fn bounding(points: &DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return invalid("cannot bound an empty point set");
        }
        let bounds = points
            .column_iter()
            .map(|c| {
                let lo = c.min();
                let hi = c.max();
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            })
            .collect();
        DesignRanges::new(bounds)
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn to_physical(&self, unit: &[f64]) -> Result<Vec<f64>> {
        self.check_len(unit.len())?;
        Ok(unit
            .iter()
            .zip(&self.bounds)
            .map(|(c, (lo, hi))| lo + c * (hi - lo))
            .collect())
    }

    pub fn to_unit(&self, physical: &[f64]) -> Result<Vec<f64>> {
        self.check_len(physical.len())?;
        Ok(physical
            .iter()
            .zip(&self.bounds)
            .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
            .collect())
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.dims() {
            return Err(Error::DimensionMismatch {
                what: "design dimensions",
                expected: self.dims(),
                got,
            });
        }
        Ok(())
    }
}

/// Ten runs per design parameter.
pub fn recommended_sample_size(d: i64) -> Result<usize> {
    if d <= 0 {
        return invalid(format!("dimension count must be positive, got {d}"));
    }
    Ok(10 * d as usize)
}

/// Sliced Latin hypercube with `s` slices of `q` points in `d` dimensions.
///
/// For every dimension the `n = s*q` bins are split into `q` consecutive
/// groups of `s` bins; each slice draws exactly one bin from every group, so
/// the union is a Latin hypercube in `n` bins and each slice is a Latin
/// hypercube in `q` bins. Coordinates sit at bin centres. A fixed number of
/// within-slice swaps then lowers the Morris-Mitchell criterion.
pub fn generate_slhd(s: usize, q: usize, d: usize, seed: u64) -> Result<DesignMatrix> {
    if s == 0 || q == 0 || d == 0 {
        return invalid(format!("slices, points per slice and dims must be >= 1 (got {s}, {q}, {d})"));
    }
    let n = s * q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // bins[k][i]: bin index of point i in dimension k; point i belongs to slice i / q.
    let mut bins = vec![vec![0usize; n]; d];
    for col in bins.iter_mut() {
        for group in 0..q {
            let mut sub: Vec<usize> = (0..s).collect();
            sub.shuffle(&mut rng);
            for (slice, &offset) in sub.iter().enumerate() {
                col[slice * q + group] = group * s + offset;
            }
        }
        for slice in 0..s {
            col[slice * q..(slice + 1) * q].shuffle(&mut rng);
        }
    }

    let coord = |b: usize| (b as f64 + 0.5) / n as f64;
    let mut points = DMatrix::from_fn(n, d, |i, k| coord(bins[k][i]));

    if q >= 2 {
        let mut crit = phi_p(&points);
        for _ in 0..MAXIMIN_SWAP_ATTEMPTS {
            let slice = rng.random_range(0..s);
            let k = rng.random_range(0..d);
            let a = slice * q + rng.random_range(0..q);
            let b = slice * q + rng.random_range(0..q);
            if a == b {
                continue;
            }
            points.swap((a, k), (b, k));
            let next = phi_p(&points);
            if next < crit {
                crit = next;
            } else {
                points.swap((a, k), (b, k));
            }
        }
    }

    let slice_id = (0..n).map(|i| i / q + 1).collect();
    DesignMatrix::new(points, slice_id)
}

fn phi_p(points: &DMatrix<f64>) -> f64 {
    let n = points.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..points.ncols())
                .map(|k| (points[(i, k)] - points[(j, k)]).powi(2))
                .sum();
            sum += d2.sqrt().powi(-PHI_P);
        }
    }
    sum.powf(1.0 / PHI_P as f64)
}

/// Maps unit coordinates onto physical ranges, row by row.
pub fn scale_design(unit: &DesignMatrix, ranges: &DesignRanges) -> Result<DMatrix<f64>> {
    if unit.dims() != ranges.dims() {
        return Err(Error::DimensionMismatch {
            what: "design dimensions",
            expected: ranges.dims(),
            got: unit.dims(),
        });
    }
    let mut out = unit.points.clone();
    for (k, &(lo, hi)) in ranges.bounds.iter().enumerate() {
        out.column_mut(k).apply(|c| *c = lo + *c * (hi - lo));
    }
    Ok(out)
}

/// Inverse of [`scale_design`].
pub fn unscale_design(physical: &DMatrix<f64>, ranges: &DesignRanges) -> Result<DMatrix<f64>> {
    if physical.ncols() != ranges.dims() {
        return Err(Error::DimensionMismatch {
            what: "design dimensions",
            expected: ranges.dims(),
            got: physical.ncols(),
        });
    }
    let mut out = physical.clone();
    for (k, &(lo, hi)) in ranges.bounds.iter().enumerate() {
        out.column_mut(k).apply(|c| *c = (*c - lo) / (hi - lo));
    }
    Ok(out)
}

/// Injector geometry in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    /// Exit cross-section area (mm²).
    pub exit_area: f64,
    /// Total tangential inlet area (mm²).
    pub inlet_area: f64,
    /// Radial offset of the inlets (mm).
    pub inlet_radius: f64,
    /// Nozzle radius (mm).
    pub nozzle_radius: f64,
}

/// Swirl-strength indicator `A_n R_in / (A_in R_n)`.
pub fn swirl_geometric_constant(g: &GeometrySpec) -> Result<f64> {
    let fields = [
        ("exit_area", g.exit_area),
        ("inlet_area", g.inlet_area),
        ("inlet_radius", g.inlet_radius),
        ("nozzle_radius", g.nozzle_radius),
    ];
    for (name, v) in fields {
        if !(v > 0.0 && v.is_finite()) {
            return invalid(format!("{name} must be positive, got {v}"));
        }
    }
    Ok(g.exit_area * g.inlet_radius / (g.inlet_area * g.nozzle_radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cluster {
    A,
    B,
    C,
    D,
}

impl Cluster {
    pub const ALL: [Cluster; 4] = [Cluster::A, Cluster::B, Cluster::C, Cluster::D];

    pub(crate) fn bit(self) -> u64 {
        1 << (self as u64)
    }
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Cluster::A => "A",
            Cluster::B => "B",
            Cluster::C => "C",
            Cluster::D => "D",
        };
        f.write_str(c)
    }
}

/// Groups a case by inlet velocity (m/s): breakpoints at 10, 18 and 25, each
/// closed below.
pub fn assign_cluster(u_in: f64) -> Result<Cluster> {
    if !(u_in > 0.0 && u_in.is_finite()) {
        return invalid(format!("inlet velocity must be positive, got {u_in}"));
    }
    Ok(if u_in < 10.0 {
        Cluster::A
    } else if u_in < 18.0 {
        Cluster::B
    } else if u_in < 25.0 {
        Cluster::C
    } else {
        Cluster::D
    })
}

/// Per-case inlet metadata. Velocity components are independent of each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetadata {
    pub u_in: f64,
    pub u_r: f64,
    pub u_theta: f64,
    pub cluster: Cluster,
    pub operating: Option<OperatingConditions>,
}

impl CaseMetadata {
    pub fn new(u_in: f64, u_r: f64, u_theta: f64) -> Result<Self> {
        Ok(CaseMetadata {
            u_in,
            u_r,
            u_theta,
            cluster: assign_cluster(u_in)?,
            operating: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingConditions {
    /// K
    pub inlet_temperature: f64,
    /// K
    pub ambient_temperature: f64,
    /// MPa
    pub ambient_pressure: f64,
    /// kg/s
    pub mass_flow: f64,
}
