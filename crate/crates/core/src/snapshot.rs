//! Snapshot datasets: one flow variable of one case on a fixed grid, the
//! KSPD1 binary container, and the synthetic parametric flow used as ground
//! truth.
//!
//! KSPD1 layout (little endian, no padding):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..6         | `KSPD1\n`                                 |
//! | 6..30        | `u64` J, m, d                             |
//! | ...          | d design values                           |
//! | ...          | J grid points, `x` then `r`               |
//! | ...          | m times                                   |
//! | ...          | J*m field values, all of `t_1` first      |
//!
//! Case id and variable name are not part of the container; readers take the
//! case id from the file stem.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binio::{checked_product, Reader, Writer};
use crate::design::DesignRanges;
use crate::error::{invalid, Error, ParseError, Result};

pub const KSPD_TAG: &[u8; 6] = b"KSPD1\n";

/// Relative tolerance on the spacing of snapshot times.
pub const TIME_SPACING_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub units: String,
}

impl Default for Variable {
    fn default() -> Self {
        Variable {
            name: "field".into(),
            units: String::new(),
        }
    }
}

/// Field `f(u_j, t_q)` of one case. Columns of `field` are snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub case_id: String,
    pub design: Vec<f64>,
    pub grid: Vec<[f64; 2]>,
    pub times: Vec<f64>,
    pub field: DMatrix<f64>,
    pub variable: Variable,
}

impl SnapshotSet {
    pub fn new(
        case_id: impl Into<String>,
        design: Vec<f64>,
        grid: Vec<[f64; 2]>,
        times: Vec<f64>,
        field: DMatrix<f64>,
    ) -> Result<Self> {
        let s = SnapshotSet {
            case_id: case_id.into(),
            design,
            grid,
            times,
            field,
            variable: Variable::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_variable(mut self, name: &str, units: &str) -> Self {
        self.variable = Variable {
            name: name.into(),
            units: units.into(),
        };
        self
    }

    pub fn points(&self) -> usize {
        self.grid.len()
    }

    pub fn snapshots(&self) -> usize {
        self.times.len()
    }

    /// Uniform time step, or 0 for a single snapshot.
    pub fn dt(&self) -> f64 {
        match self.times.len() {
            0 | 1 => 0.0,
            m => (self.times[m - 1] - self.times[0]) / (m - 1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (j, m) = (self.grid.len(), self.times.len());
        if j == 0 || m == 0 {
            return invalid("a dataset needs at least one grid point and one snapshot");
        }
        if self.field.shape() != (j, m) {
            return invalid(format!(
                "field is {:?}, expected ({j}, {m})",
                self.field.shape()
            ));
        }
        if self.field.iter().any(|v| !v.is_finite()) {
            return invalid("field contains non-finite values");
        }
        if self.design.iter().any(|v| !v.is_finite())
            || self.grid.iter().flatten().any(|v| !v.is_finite())
            || self.times.iter().any(|v| !v.is_finite())
        {
            return invalid("design, grid or times contain non-finite values");
        }
        check_uniform_times(&self.times)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(KSPD_TAG);
        w.u64(self.grid.len() as u64);
        w.u64(self.times.len() as u64);
        w.u64(self.design.len() as u64);
        w.f64s(self.design.iter().copied());
        w.f64s(self.grid.iter().flatten().copied());
        w.f64s(self.times.iter().copied());
        w.f64s(self.field.as_slice().iter().copied());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], case_id: &str) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_tag(KSPD_TAG)?;
        let j = r.count("J")?;
        let m = r.count("m")?;
        let d = r.count("d")?;
        let payload = checked_product(&[j, m], "field")
            .and_then(|f| checked_product(&[j, 2], "grid").map(|g| (f, g)))
            .and_then(|(f, g)| {
                f.checked_add(g)
                    .and_then(|x| x.checked_add(m))
                    .and_then(|x| x.checked_add(d))
                    .and_then(|x| x.checked_mul(8))
                    .ok_or_else(|| ParseError::DimensionOverflow(format!("J={j}, m={m}, d={d}")))
            })?;
        if payload > r.remaining() {
            return Err(ParseError::Truncated {
                needed: payload,
                available: r.remaining(),
            }
            .into());
        }
        let design = r.finite_f64s(d, "design")?;
        let grid_flat = r.finite_f64s(2 * j, "grid")?;
        let times = r.finite_f64s(m, "times")?;
        let field = r.finite_f64s(j * m, "field")?;
        r.finish()?;
        let grid = grid_flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        SnapshotSet::new(case_id, design, grid, times, DMatrix::from_vec(j, m, field))
            .map_err(|e| ParseError::Invalid(e.to_string()).into())
    }
}

pub fn write_dataset(s: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    s.validate()?;
    fs::write(path, s.to_bytes())?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SnapshotSet::from_bytes(&bytes, &id)
}

/// Returns the uniform spacing of `times`, which must be strictly increasing.
pub fn check_uniform_times(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Ok(0.0);
    }
    let m = times.len();
    let dt = (times[m - 1] - times[0]) / (m - 1) as f64;
    if !(dt > 0.0) {
        return invalid("times must be strictly increasing");
    }
    for w in times.windows(2) {
        let step = w[1] - w[0];
        if !(step > 0.0) || (step - dt).abs() > TIME_SPACING_RTOL * dt {
            return Err(Error::NonUniformSampling(format!(
                "step {step:e} deviates from mean spacing {dt:e}"
            )));
        }
    }
    Ok(dt)
}

/// Tensor grid in axial-major order: point `ix * rs.len() + ir` is `(xs[ix], rs[ir])`.
pub fn tensor_grid(xs: &[f64], rs: &[f64]) -> Vec<[f64; 2]> {
    xs.iter()
        .flat_map(|&x| rs.iter().map(move |&r| [x, r]))
        .collect()
}

/// `count` equally spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// `m` snapshot times `t_q = q * dt`, starting at zero.
pub fn uniform_times(m: usize, dt: f64) -> Vec<f64> {
    (0..m).map(|q| q as f64 * dt).collect()
}

/// Smooth scalar map of the normalized design vector `s` in the unit cube:
/// `base + Σ linear_k s_k + Σ quadratic_k s_k² + ripple · sin(π mean(s))`.
/// Coefficients beyond the design dimension are ignored; missing ones are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMap {
    pub base: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub ripple: f64,
}

impl DesignMap {
    pub fn constant(v: f64) -> Self {
        DesignMap {
            base: v,
            linear: Vec::new(),
            quadratic: Vec::new(),
            ripple: 0.0,
        }
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(s).map(|(c, x)| c * x).sum();
        let quad: f64 = self.quadratic.iter().zip(s).map(|(c, x)| c * x * x).sum();
        let mean = if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        };
        self.base + lin + quad + self.ripple * (PI * mean).sin()
    }
}

/// Film-like mean profile: `gas + (liquid - gas) · ½(1 + tanh((r - r_i(x)) / width))`
/// with interface radius `r_i(x) = wall - h(s) (1 - thinning · x / length)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanProfile {
    pub gas: f64,
    pub liquid: f64,
    pub interface_width: f64,
    pub wall_radius: f64,
    pub length: f64,
    pub thickness: DesignMap,
    pub axial_thinning: f64,
}

impl MeanProfile {
    pub fn film_thickness(&self, s: &[f64], x: f64) -> f64 {
        self.thickness.eval(s) * (1.0 - self.axial_thinning * x / self.length)
    }

    pub fn eval(&self, s: &[f64], x: f64, r: f64) -> f64 {
        let interface = self.wall_radius - self.film_thickness(s, x);
        let frac = 0.5 * (1.0 + ((r - interface) / self.interface_width).tanh());
        self.gas + (self.liquid - self.gas) * frac
    }
}

/// Standing wave `a(s) g(u) cos(2π f(s) t + ψ(s))` with
/// `g(x, r) = sin(axial_mode π x / length) · exp(-((wall - r) / radial_decay)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveTerm {
    pub amplitude: DesignMap,
    pub frequency: DesignMap,
    pub phase: DesignMap,
    pub axial_mode: u32,
    pub radial_decay: f64,
}

impl WaveTerm {
    pub fn pattern(&self, x: f64, r: f64, wall: f64, length: f64) -> f64 {
        (self.axial_mode as f64 * PI * x / length).sin() * (-((wall - r) / self.radial_decay).powi(2)).exp()
    }
}

/// Separable parametric flow standing in for high-fidelity data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecipe {
    pub ranges: DesignRanges,
    pub mean: MeanProfile,
    pub waves: Vec<WaveTerm>,
}

impl SynthRecipe {
    /// Desk-scale swirl-film recipe with three wave terms whose amplitude
    /// ranking is the same everywhere in the design range. Dimension 0 acts
    /// like the injection angle, 1 like the inlet width, 2 like the headend
    /// distance; further dimensions are inert.
    pub fn desk(ranges: DesignRanges) -> Self {
        let map = |base: f64, linear: &[f64], quadratic: &[f64], ripple: f64| DesignMap {
            base,
            linear: linear.to_vec(),
            quadratic: quadratic.to_vec(),
            ripple,
        };
        SynthRecipe {
            ranges,
            mean: MeanProfile {
                gas: 100.0,
                liquid: 1000.0,
                interface_width: 0.3,
                wall_radius: 4.5,
                length: 25.0,
                thickness: map(0.91, &[-0.25, 0.55, 0.05], &[0.0, 0.05, 0.0], 0.0),
                axial_thinning: 0.3,
            },
            waves: vec![
                WaveTerm {
                    amplitude: map(60.0, &[12.0, -8.0, 0.0], &[0.0, 0.0, 6.0], 0.0),
                    frequency: map(420.0, &[20.0, 15.0, -10.0], &[], 0.0),
                    phase: map(0.0, &[0.3, 0.0, 0.6], &[], 0.0),
                    axial_mode: 1,
                    radial_decay: 1.2,
                },
                WaveTerm {
                    amplitude: map(28.0, &[0.0, 5.0, -4.0], &[3.0, 0.0, 0.0], 0.0),
                    frequency: map(640.0, &[-15.0, 25.0, 0.0], &[], 0.0),
                    phase: map(0.0, &[0.8, -0.4, 0.0], &[], 0.0),
                    axial_mode: 2,
                    radial_decay: 1.2,
                },
                WaveTerm {
                    amplitude: map(12.0, &[-2.0, 0.0, 3.0], &[], 0.0),
                    frequency: map(1150.0, &[0.0, 0.0, 40.0], &[], 0.0),
                    phase: map(0.0, &[0.0, 0.5, 0.0], &[], 0.0),
                    axial_mode: 3,
                    radial_decay: 1.2,
                },
            ],
        }
    }

    /// Frequencies (Hz) of each wave term at a physical design point.
    pub fn frequencies(&self, design: &[f64]) -> Result<Vec<f64>> {
        let s = self.ranges.to_unit(design)?;
        Ok(self.waves.iter().map(|w| w.frequency.eval(&s)).collect())
    }
}

/// Evaluates the recipe at a physical design point on the given grid and times.
pub fn synth_flowfield(
    design: &[f64],
    grid: &[[f64; 2]],
    times: &[f64],
    recipe: &SynthRecipe,
) -> Result<SnapshotSet> {
    let s = recipe.ranges.to_unit(design)?;
    let dt = check_uniform_times(times)?;
    let mean = &recipe.mean;
    let terms: Vec<(f64, f64, f64)> = recipe
        .waves
        .iter()
        .map(|w| (w.amplitude.eval(&s), w.frequency.eval(&s), w.phase.eval(&s)))
        .collect();
    if times.len() >= 2 {
        let nyquist = 0.5 / dt;
        if let Some((_, f, _)) = terms.iter().find(|(_, f, _)| !(f.abs() < nyquist)) {
            return invalid(format!("wave frequency {f} Hz violates the sampling bound {nyquist} Hz"));
        }
    }
    let patterns: Vec<Vec<f64>> = recipe
        .waves
        .iter()
        .map(|w| {
            grid.iter()
                .map(|&[x, r]| w.pattern(x, r, mean.wall_radius, mean.length))
                .collect()
        })
        .collect();
    let base: Vec<f64> = grid.iter().map(|&[x, r]| mean.eval(&s, x, r)).collect();
    let field = DMatrix::from_fn(grid.len(), times.len(), |j, q| {
        let t = times[q];
        base[j]
            + terms
                .iter()
                .zip(&patterns)
                .map(|(&(a, f, psi), g)| a * g[j] * (2.0 * PI * f * t + psi).cos())
                .sum::<f64>()
    });
    SnapshotSet::new("synthetic", design.to_vec(), grid.to_vec(), times.to_vec(), field)
        .map(|s| s.with_variable("density", "kg/m^3"))
}
