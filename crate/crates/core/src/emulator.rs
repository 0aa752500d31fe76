//! Kernel-smoothed POD emulator.
//!
//! Training runs three steps over `n` cases that share one grid and one time
//! vector:
//!
//! 1. per-case POD, truncated to a common rank `K` and sign-aligned to the
//!    first case;
//! 2. one ordinary-kriging model per `(mode k, time step q)` on the `n`
//!    coefficients `β^k(x_i, t_q)`;
//! 3. indicator kriging of the unit vectors `e_i` with one shared isotropic
//!    correlation, giving blending weights `ŵ_i(x_new)`.
//!
//! A prediction blends the aligned modes with the normalized weights,
//! evaluates the coefficient models, and sums `β̂^k φ̂^k`. With centering on,
//! the per-case temporal means are blended with the same weights.
//!
//! Designs are mapped to the unit cube through [`DesignRanges`] before any
//! kriging.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{checked_product, Reader, Writer};
use crate::design::{assign_cluster, Cluster, DesignRanges};
use crate::error::{invalid, Error, ParseError, Result};
use crate::kriging::{fit_theta, maximize, INTERPOLATION_RTOL, CorrelationParams, IndicatorWeights, KrigingModel, KrigingOptions};
use crate::pod::{align_modes, decompose, select_rank, truncate, PodBasis, PodOptions, Truncation};
use crate::snapshot::SnapshotSet;

pub const KSEM_TAG: &[u8; 6] = b"KSEM1\n";

/// Smallest accepted `|Σ raw weights|` before normalizing.
pub const WEIGHT_SUM_EPS: f64 = 1e-6;

/// How coefficient-model correlation parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoefficientTheta {
    /// One likelihood fit per `(mode, time step)`.
    #[default]
    PerTimeStep,
    /// One likelihood fit per mode, shared by all its time steps.
    SharedPerMode,
}

/// How the shared correlation of the indicator weights is chosen when it is
/// not fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightThetaRule {
    /// Minimizes the leave-one-out error of the blended mean fields and modes.
    #[default]
    CrossValidation,
    /// Maximizes the summed profile likelihood of the indicator responses.
    Likelihood,
}

/// Restricts training to cases whose inlet velocity falls in chosen clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFilter {
    pub keep: Vec<Cluster>,
    /// Inlet velocity (m/s) of every input case, in input order.
    pub inlet_velocity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub energy_threshold: f64,
    pub explicit_rank: Option<usize>,
    pub centering: bool,
    pub quadrature_weights: Option<Vec<f64>>,
    pub cluster_filter: Option<ClusterFilter>,
    /// Physical ranges used to normalize designs; the bounding box of the
    /// training designs when absent.
    pub ranges: Option<DesignRanges>,
    pub kriging: KrigingOptions,
    pub coefficient_theta: CoefficientTheta,
    /// Fixed isotropic correlation for the indicator weights.
    pub weight_theta: Option<f64>,
    pub weight_rule: WeightThetaRule,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            energy_threshold: 0.99,
            explicit_rank: None,
            centering: true,
            quadrature_weights: None,
            cluster_filter: None,
            ranges: None,
            kriging: KrigingOptions::default(),
            coefficient_theta: CoefficientTheta::PerTimeStep,
            weight_theta: None,
            weight_rule: WeightThetaRule::CrossValidation,
        }
    }
}

/// Blending weights at one query; `normalized` sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightVector {
    fn from_raw(raw: Vec<f64>, x_new: &[f64]) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if !(sum.abs() >= WEIGHT_SUM_EPS) {
            return Err(Error::DegenerateWeights {
                x_new: x_new.to_vec(),
                sum,
            });
        }
        let normalized = raw.iter().map(|w| w / sum).collect();
        Ok(WeightVector { raw, normalized })
    }
}

/// Weighting used to blend modes and means.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WeightScheme {
    /// Indicator kriging with the trained shared correlation.
    #[default]
    Kriging,
    /// Isotropic Gaussian kernel `exp(-θ ‖x_i - x_new‖²)` on unit-cube designs.
    NadarayaWatson { theta: f64 },
}

/// Trained emulator. Immutable; safe to share across prediction threads.
#[derive(Debug, Clone)]
pub struct EmulatorModel {
    ranges: DesignRanges,
    design: DMatrix<f64>,
    unit_design: DMatrix<f64>,
    case_ids: Vec<String>,
    grid: Vec<[f64; 2]>,
    times: Vec<f64>,
    rank: usize,
    modes: Vec<PodBasis>,
    /// Indexed `k * m + q`.
    coeff_models: Vec<KrigingModel>,
    weight_model: IndicatorWeights,
    options: TrainOptions,
}

impl PartialEq for EmulatorModel {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

fn check_compatible(cases: &[SnapshotSet]) -> Result<()> {
    let first = &cases[0];
    for c in &cases[1..] {
        let same_grid = c.grid.len() == first.grid.len()
            && c.grid
                .iter()
                .flatten()
                .zip(first.grid.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_grid {
            return Err(Error::IncompatibleCases(format!(
                "grid of {} differs from {}",
                c.case_id, first.case_id
            )));
        }
        let same_times = c.times.len() == first.times.len()
            && c.times.iter().zip(&first.times).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_times {
            return Err(Error::IncompatibleCases(format!(
                "times of {} differ from {}",
                c.case_id, first.case_id
            )));
        }
        if c.design.len() != first.design.len() {
            return Err(Error::IncompatibleCases(format!(
                "design of {} has {} entries, {} has {}",
                c.case_id,
                c.design.len(),
                first.case_id,
                first.design.len()
            )));
        }
    }
    Ok(())
}

fn apply_cluster_filter<'a>(cases: &'a [SnapshotSet], filter: &Option<ClusterFilter>) -> Result<Vec<&'a SnapshotSet>> {
    let Some(f) = filter else {
        return Ok(cases.iter().collect());
    };
    if f.inlet_velocity.len() != cases.len() {
        return Err(Error::DimensionMismatch {
            what: "inlet velocities for the cluster filter",
            expected: cases.len(),
            got: f.inlet_velocity.len(),
        });
    }
    let mut kept = Vec::new();
    for (c, &u) in cases.iter().zip(&f.inlet_velocity) {
        if f.keep.contains(&assign_cluster(u)?) {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// Trains on snapshot sets. `cases[0]` (after cluster filtering) is the sign
/// reference for every mode.
pub fn train(cases: &[SnapshotSet], opts: &TrainOptions) -> Result<EmulatorModel> {
    if cases.is_empty() {
        return invalid("training needs at least one case");
    }
    let selected = apply_cluster_filter(cases, &opts.cluster_filter)?;
    if selected.is_empty() {
        return invalid("cluster filter removed every case");
    }
    let owned: Vec<SnapshotSet> = selected.into_iter().cloned().collect();
    check_compatible(&owned)?;
    let pod_opts = PodOptions {
        centering: opts.centering,
        weights: opts.quadrature_weights.clone(),
    };
    let bases = owned
        .par_iter()
        .map(|c| decompose(c, &pod_opts))
        .collect::<Result<Vec<_>>>()?;
    let n = owned.len();
    let d = owned[0].design.len();
    let design = DMatrix::from_fn(n, d, |i, k| owned[i].design[k]);
    let ids = owned.iter().map(|c| c.case_id.clone()).collect();
    train_from_bases(design, ids, bases, owned[0].grid.clone(), owned[0].times.clone(), opts)
}

/// Steps 2 and 3 (plus rank selection and alignment) on precomputed bases.
pub fn train_from_bases(
    design: DMatrix<f64>,
    case_ids: Vec<String>,
    bases: Vec<PodBasis>,
    grid: Vec<[f64; 2]>,
    times: Vec<f64>,
    opts: &TrainOptions,
) -> Result<EmulatorModel> {
    let n = bases.len();
    if n == 0 {
        return invalid("training needs at least one case");
    }
    if design.nrows() != n || case_ids.len() != n {
        return Err(Error::DimensionMismatch {
            what: "cases",
            expected: n,
            got: design.nrows(),
        });
    }
    if n == 1 {
        log::warn!("training on a single case: every prediction reproduces it");
    }
    for i in 0..n {
        for j in 0..i {
            if design.row(i) == design.row(j) {
                return Err(Error::IncompatibleCases(format!(
                    "cases {} and {} share a design point",
                    case_ids[j], case_ids[i]
                )));
            }
        }
    }
    let (j_pts, m) = (grid.len(), times.len());
    for (b, id) in bases.iter().zip(&case_ids) {
        if b.points() != j_pts || b.snapshots() != m {
            return Err(Error::IncompatibleCases(format!(
                "basis of {id} is {}x{}, expected {j_pts}x{m}",
                b.points(),
                b.snapshots()
            )));
        }
    }

    let rank = match opts.explicit_rank {
        Some(k) => {
            for (b, id) in bases.iter().zip(&case_ids) {
                if k == 0 || k > b.rank() {
                    return invalid(format!("explicit rank {k} unavailable for {id} ({} modes)", b.rank()));
                }
            }
            k
        }
        None => bases
            .iter()
            .map(|b| select_rank(b, Truncation::Energy(opts.energy_threshold)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .min()
            .unwrap_or(0),
    };
    if rank == 0 {
        return invalid("at least one case has no energetic modes");
    }
    let truncated = bases
        .iter()
        .map(|b| truncate(b, Truncation::Rank(rank)))
        .collect::<Result<Vec<_>>>()?;
    let reference = truncated[0].clone();
    let modes = truncated
        .iter()
        .map(|b| align_modes(&reference, b))
        .collect::<Result<Vec<_>>>()?;

    let ranges = match &opts.ranges {
        Some(r) => r.clone(),
        None => DesignRanges::bounding(&design)?,
    };
    let unit_design = unit_rows(&design, &ranges)?;

    let coeff_models = fit_coefficients(&unit_design, &modes, rank, m, opts)?;
    let weight_theta = match (opts.weight_theta, opts.weight_rule) {
        (Some(t), _) => Some(t),
        (None, WeightThetaRule::CrossValidation) if n >= 3 => Some(cross_validated_theta(&unit_design, &modes, &opts.kriging)?),
        _ => None,
    };
    let weight_opts = KrigingOptions {
        theta: weight_theta.map(|t| vec![t]),
        ..opts.kriging.clone()
    };
    let weight_model = IndicatorWeights::fit(&unit_design, &weight_opts)?;

    Ok(EmulatorModel {
        ranges,
        design,
        unit_design,
        case_ids,
        grid,
        times,
        rank,
        modes,
        coeff_models,
        weight_model,
        options: opts.clone(),
    })
}

fn unit_rows(design: &DMatrix<f64>, ranges: &DesignRanges) -> Result<DMatrix<f64>> {
    let (n, d) = design.shape();
    if d != ranges.dims() {
        return Err(Error::DimensionMismatch {
            what: "design ranges",
            expected: d,
            got: ranges.dims(),
        });
    }
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let row: Vec<f64> = design.row(i).iter().copied().collect();
        for (k, v) in ranges.to_unit(&row)?.into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

fn coefficient_obs(modes: &[PodBasis], k: usize, q: usize) -> Vec<f64> {
    modes.iter().map(|b| b.coeffs[(q, k)]).collect()
}

fn fit_coefficients(
    unit: &DMatrix<f64>,
    modes: &[PodBasis],
    rank: usize,
    m: usize,
    opts: &TrainOptions,
) -> Result<Vec<KrigingModel>> {
    match opts.coefficient_theta {
        CoefficientTheta::PerTimeStep => (0..rank * m)
            .into_par_iter()
            .map(|idx| {
                let (k, q) = (idx / m, idx % m);
                KrigingModel::fit(unit, &coefficient_obs(modes, k, q), &opts.kriging)
            })
            .collect(),
        CoefficientTheta::SharedPerMode => {
            let thetas = (0..rank)
                .into_par_iter()
                .map(|k| {
                    let responses: Vec<DVector<f64>> = (0..m)
                        .map(|q| DVector::from_vec(coefficient_obs(modes, k, q)))
                        .collect();
                    fit_theta(unit, &responses, &opts.kriging, false)
                })
                .collect::<Result<Vec<_>>>()?;
            (0..rank * m)
                .into_par_iter()
                .map(|idx| {
                    let (k, q) = (idx / m, idx % m);
                    let params = CorrelationParams::new(thetas[k].clone(), opts.kriging.nugget)?;
                    KrigingModel::with_params(unit, &coefficient_obs(modes, k, q), params)
                })
                .collect()
        }
    }
}

/// Leave-one-out error of blending the other cases' mean fields and modes at
/// each training design, relative to the case's energy. With the case's own
/// coefficients `B` (where `BᵀB = diag(λ)` and, when centered, `Bᵀ1 = 0`) the
/// squared reconstruction error is `m ‖Δmean‖² + Σ_k λ_k ‖Δφ_k‖²`.
fn loo_blend_error(unit: &DMatrix<f64>, modes: &[PodBasis], theta: f64, nugget: f64) -> f64 {
    let (n, d) = unit.shape();
    let Ok(params) = CorrelationParams::isotropic(theta, d, nugget) else {
        return f64::INFINITY;
    };
    let errors: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let sub = unit.select_rows(&others);
            let Ok(model) = IndicatorWeights::new(&sub, params.clone()) else {
                return f64::INFINITY;
            };
            let x_i: Vec<f64> = unit.row(i).iter().copied().collect();
            let Ok(raw) = model.weights(&x_i) else {
                return f64::INFINITY;
            };
            let sum: f64 = raw.iter().sum();
            if !(sum.abs() >= WEIGHT_SUM_EPS) {
                return f64::INFINITY;
            }
            let target = &modes[i];
            let m = target.snapshots() as f64;
            let mut err = 0.0;
            let mut energy = 0.0;
            if let Some(mean) = &target.mean_field {
                let mut blend = vec![0.0; mean.len()];
                for (&j, w) in others.iter().zip(&raw) {
                    if let Some(mj) = &modes[j].mean_field {
                        for (b, v) in blend.iter_mut().zip(mj) {
                            *b += w / sum * v;
                        }
                    }
                }
                let diff: Vec<f64> = blend.iter().zip(mean).map(|(a, b)| a - b).collect();
                err += m * target.inner(&diff, &diff);
                energy += m * target.inner(mean, mean);
            }
            for k in 0..target.rank() {
                let mut diff: Vec<f64> = target.modes.column(k).iter().map(|v| -v).collect();
                for (&j, w) in others.iter().zip(&raw) {
                    for (dv, v) in diff.iter_mut().zip(modes[j].modes.column(k).iter()) {
                        *dv += w / sum * v;
                    }
                }
                err += target.eigenvalues[k] * target.inner(&diff, &diff);
                energy += target.eigenvalues[k];
            }
            if energy > 0.0 {
                err / energy
            } else {
                err
            }
        })
        .collect();
    errors.iter().sum::<f64>() / n as f64
}

/// True when the full indicator model reproduces every unit vector at the
/// training designs to within [`INTERPOLATION_RTOL`].
fn indicator_interpolates(unit: &DMatrix<f64>, theta: f64, nugget: f64) -> bool {
    let Ok(params) = CorrelationParams::isotropic(theta, unit.ncols(), nugget) else {
        return false;
    };
    let Ok(model) = IndicatorWeights::new(unit, params) else {
        return false;
    };
    (0..unit.nrows()).all(|i| {
        let x_i: Vec<f64> = unit.row(i).iter().copied().collect();
        model.weights(&x_i).is_ok_and(|w| {
            w.iter()
                .enumerate()
                .all(|(j, v)| (v - if i == j { 1.0 } else { 0.0 }).abs() <= INTERPOLATION_RTOL)
        })
    })
}

/// Weight correlation minimizing [`loo_blend_error`] among values whose
/// indicator model still interpolates.
fn cross_validated_theta(unit: &DMatrix<f64>, modes: &[PodBasis], opts: &KrigingOptions) -> Result<f64> {
    let objective = |lt: &[f64]| {
        let theta = lt[0].exp();
        if !indicator_interpolates(unit, theta, opts.nugget) {
            return f64::NEG_INFINITY;
        }
        -loo_blend_error(unit, modes, theta, opts.nugget)
    };
    let (best, value) = maximize(
        objective,
        1,
        opts.log_theta_bounds,
        opts.restarts,
    );
    if !value.is_finite() {
        return Err(Error::FitFailed {
            best_theta: vec![best[0].exp()],
            reason: "no weight correlation in the search box gives usable leave-one-out weights".into(),
        });
    }
    Ok(best[0].exp())
}

/// Gaussian-kernel weights `exp(-θ ‖x_i - x_new‖²)` over the rows of `unit_design`.
pub fn nadaraya_watson_weights(unit_design: &DMatrix<f64>, x_unit: &[f64], theta: f64) -> Result<WeightVector> {
    if !(theta > 0.0 && theta.is_finite()) {
        return invalid(format!("kernel parameter must be positive, got {theta}"));
    }
    if x_unit.len() != unit_design.ncols() {
        return Err(Error::DimensionMismatch {
            what: "query point",
            expected: unit_design.ncols(),
            got: x_unit.len(),
        });
    }
    let raw: Vec<f64> = unit_design
        .row_iter()
        .map(|row| {
            let d2: f64 = row.iter().zip(x_unit).map(|(a, b)| (a - b) * (a - b)).sum();
            (-theta * d2).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        // every kernel value underflowed: fall back to the nearest design
        let nearest = unit_design
            .row_iter()
            .map(|row| row.iter().zip(x_unit).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut normalized = vec![0.0; raw.len()];
        normalized[nearest] = 1.0;
        return Ok(WeightVector { raw, normalized });
    }
    let normalized = raw.iter().map(|w| w / sum).collect();
    Ok(WeightVector { raw, normalized })
}

impl EmulatorModel {
    pub fn cases(&self) -> usize {
        self.modes.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn unit_design(&self) -> &DMatrix<f64> {
        &self.unit_design
    }

    pub fn ranges(&self) -> &DesignRanges {
        &self.ranges
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn grid(&self) -> &[[f64; 2]] {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Sign-aligned, rank-`K` bases in training order.
    pub fn mode_library(&self) -> &[PodBasis] {
        &self.modes
    }

    pub fn coefficient_model(&self, k: usize, q: usize) -> &KrigingModel {
        &self.coeff_models[k * self.times.len() + q]
    }

    pub fn weight_params(&self) -> &CorrelationParams {
        self.weight_model.params()
    }

    pub fn options(&self) -> &TrainOptions {
        &self.options
    }

    fn to_unit(&self, x_new: &[f64]) -> Result<Vec<f64>> {
        self.ranges.to_unit(x_new)
    }

    /// Indicator-kriging weights at a physical design point.
    pub fn weights(&self, x_new: &[f64]) -> Result<WeightVector> {
        let u = self.to_unit(x_new)?;
        WeightVector::from_raw(self.weight_model.weights(&u)?, x_new)
    }

    /// Gaussian-kernel weights at a physical design point.
    pub fn nw_weights(&self, x_new: &[f64], theta: f64) -> Result<WeightVector> {
        let u = self.to_unit(x_new)?;
        nadaraya_watson_weights(&self.unit_design, &u, theta)
    }

    pub fn weights_with(&self, x_new: &[f64], scheme: WeightScheme) -> Result<WeightVector> {
        match scheme {
            WeightScheme::Kriging => self.weights(x_new),
            WeightScheme::NadarayaWatson { theta } => self.nw_weights(x_new, theta),
        }
    }

    /// Blends the aligned modes with the given weights: `J x K`.
    pub fn blend_modes(&self, w: &WeightVector) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.grid.len(), self.rank);
        for (b, &wi) in self.modes.iter().zip(&w.normalized) {
            out += &b.modes * wi;
        }
        out
    }

    fn blend_mean(&self, w: &WeightVector) -> Option<DVector<f64>> {
        let mut acc = DVector::zeros(self.grid.len());
        for (b, &wi) in self.modes.iter().zip(&w.normalized) {
            acc += DVector::from_column_slice(b.mean_field.as_ref()?) * wi;
        }
        Some(acc)
    }

    pub fn predict_modes(&self, x_new: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.blend_modes(&self.weights(x_new)?))
    }

    /// `K x m` predicted coefficients.
    pub fn predict_coefficients(&self, x_new: &[f64]) -> Result<DMatrix<f64>> {
        let all: Vec<usize> = (0..self.times.len()).collect();
        self.coefficients_at(x_new, &all)
    }

    fn coefficients_at(&self, x_new: &[f64], time_indices: &[usize]) -> Result<DMatrix<f64>> {
        let u = self.to_unit(x_new)?;
        let m = self.times.len();
        if let Some(&q) = time_indices.iter().find(|&&q| q >= m) {
            return invalid(format!("time index {q} out of range ({m} snapshots)"));
        }
        Ok(DMatrix::from_fn(self.rank, time_indices.len(), |k, c| {
            self.coeff_models[k * m + time_indices[c]].predict_unchecked(&u)
        }))
    }

    /// Predicted field `J x |time_indices|`.
    pub fn predict_field(&self, x_new: &[f64], time_indices: &[usize]) -> Result<DMatrix<f64>> {
        self.predict_field_with(x_new, time_indices, WeightScheme::Kriging)
    }

    /// Like [`predict_field`](Self::predict_field) with a chosen weighting for
    /// modes and means. Coefficients always come from the kriging models.
    pub fn predict_field_with(
        &self,
        x_new: &[f64],
        time_indices: &[usize],
        scheme: WeightScheme,
    ) -> Result<DMatrix<f64>> {
        let w = self.weights_with(x_new, scheme)?;
        let beta = self.coefficients_at(x_new, time_indices)?;
        let phi = self.blend_modes(&w);
        let mut out = phi * beta;
        if let Some(mean) = self.blend_mean(&w) {
            for mut col in out.column_iter_mut() {
                col += &mean;
            }
        }
        Ok(out)
    }

    /// Full prediction packaged as a dataset with id `predicted:<hash>`.
    pub fn predict_dataset(&self, x_new: &[f64], time_indices: &[usize]) -> Result<SnapshotSet> {
        let field = self.predict_field(x_new, time_indices)?;
        let times = time_indices.iter().map(|&q| self.times[q]).collect();
        SnapshotSet::new(predicted_case_id(x_new), x_new.to_vec(), self.grid.clone(), times, field)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.design.shape();
        let (j, m, k) = (self.grid.len(), self.times.len(), self.rank);
        let o = &self.options;
        let mut w = Writer::with_tag(KSEM_TAG);
        for v in [n, d, j, m, k] {
            w.u64(v as u64);
        }
        w.u64(u64::from(o.centering));
        w.u64(o.explicit_rank.unwrap_or(0) as u64);
        w.f64(o.energy_threshold);
        w.u64(match o.coefficient_theta {
            CoefficientTheta::PerTimeStep => 0,
            CoefficientTheta::SharedPerMode => 1,
        });
        w.u64(match o.weight_rule {
            WeightThetaRule::CrossValidation => 0,
            WeightThetaRule::Likelihood => 1,
        });
        w.u64(
            o.cluster_filter
                .as_ref()
                .map_or(0, |f| f.keep.iter().fold(0, |acc, c| acc | c.bit())),
        );
        w.f64(o.kriging.nugget);
        w.f64(o.kriging.log_theta_bounds.0);
        w.f64(o.kriging.log_theta_bounds.1);
        w.u64(o.kriging.restarts as u64);
        w.f64s(self.ranges.bounds().iter().flat_map(|&(lo, hi)| [lo, hi]));
        w.f64s(self.design.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        w.f64s(self.grid.iter().flatten().copied());
        w.f64s(self.times.iter().copied());
        for id in &self.case_ids {
            w.u64(id.len() as u64);
            w.bytes(id.as_bytes());
        }
        let wp = self.weight_model.params();
        w.f64(wp.theta[0]);
        w.f64(wp.nugget);
        for b in &self.modes {
            b.write_body(&mut w);
        }
        for model in &self.coeff_models {
            w.f64s(model.params().theta.iter().copied());
            w.f64(model.mu_hat());
            w.f64(model.sigma2_hat());
        }
        w.finish()
    }

    /// Rebuilds a model; all factorizations are recomputed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_tag(KSEM_TAG)?;
        let n = r.count("n")?;
        let d = r.count("d")?;
        let j = r.count("J")?;
        let m = r.count("m")?;
        let k = r.count("K")?;
        let centering = r.u64()? != 0;
        let explicit_rank = match r.count("explicit rank")? {
            0 => None,
            v => Some(v),
        };
        let energy_threshold = r.f64()?;
        let coefficient_theta = match r.u64()? {
            0 => CoefficientTheta::PerTimeStep,
            1 => CoefficientTheta::SharedPerMode,
            v => return Err(ParseError::Invalid(format!("coefficient theta mode {v}")).into()),
        };
        let weight_rule = match r.u64()? {
            0 => WeightThetaRule::CrossValidation,
            1 => WeightThetaRule::Likelihood,
            v => return Err(ParseError::Invalid(format!("weight rule {v}")).into()),
        };
        let mask = r.u64()?;
        let nugget = r.f64()?;
        let lo = r.f64()?;
        let hi = r.f64()?;
        let restarts = r.count("restarts")?;
        let bounds = r.finite_f64s(checked_product(&[d, 2], "ranges")?, "ranges")?;
        let nd = checked_product(&[n, d], "design")?;
        let design = DMatrix::from_row_slice(n, d, &r.finite_f64s(nd, "design")?);
        let grid_flat = r.finite_f64s(checked_product(&[j, 2], "grid")?, "grid")?;
        let times = r.finite_f64s(m, "times")?;
        let mut case_ids = Vec::with_capacity(n.min(r.remaining()));
        for _ in 0..n {
            let len = r.count("case id length")?;
            let raw = r.bytes(len)?.to_vec();
            case_ids.push(
                String::from_utf8(raw).map_err(|e| ParseError::Invalid(format!("case id: {e}")))?,
            );
        }
        let weight_theta = r.f64()?;
        let weight_nugget = r.f64()?;
        let mut modes = Vec::with_capacity(n.min(r.remaining()));
        for _ in 0..n {
            modes.push(PodBasis::read_body(&mut r)?);
        }
        let km = checked_product(&[k, m], "coefficient models")?;
        let mut coeff_params = Vec::with_capacity(km.min(r.remaining()));
        for _ in 0..km {
            let theta = r.finite_f64s(d, "coefficient theta")?;
            let _mu = r.f64()?;
            let _sigma2 = r.f64()?;
            coeff_params.push(theta);
        }
        r.finish()?;

        let ranges = DesignRanges::new(bounds.chunks_exact(2).map(|c| (c[0], c[1])).collect())?;
        let unit_design = unit_rows(&design, &ranges)?;
        for b in &modes {
            if b.points() != j || b.snapshots() != m || b.rank() != k {
                return Err(ParseError::Invalid("mode library does not match the header".into()).into());
            }
        }
        let coeff_models = coeff_params
            .into_par_iter()
            .enumerate()
            .map(|(idx, theta)| {
                let (kk, q) = (idx / m, idx % m);
                KrigingModel::with_params(&unit_design, &coefficient_obs(&modes, kk, q), CorrelationParams::new(theta, nugget)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let weight_model = IndicatorWeights::new(
            &unit_design,
            CorrelationParams::isotropic(weight_theta, d, weight_nugget)?,
        )?;
        let keep: Vec<Cluster> = Cluster::ALL.into_iter().filter(|c| mask & c.bit() != 0).collect();
        let options = TrainOptions {
            energy_threshold,
            explicit_rank,
            centering,
            quadrature_weights: modes.first().map(|b| b.weights.clone()),
            cluster_filter: (!keep.is_empty()).then(|| ClusterFilter {
                keep,
                inlet_velocity: Vec::new(),
            }),
            ranges: Some(ranges.clone()),
            kriging: KrigingOptions {
                nugget,
                log_theta_bounds: (lo, hi),
                restarts,
                theta: None,
            },
            coefficient_theta,
            weight_theta: Some(weight_theta),
            weight_rule,
        };
        Ok(EmulatorModel {
            ranges,
            design,
            unit_design,
            case_ids,
            grid: grid_flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            times,
            rank: k,
            modes,
            coeff_models,
            weight_model,
            options,
        })
    }
}

/// `predicted:` followed by the first 16 hex digits of SHA-256 over the
/// little-endian design values.
pub fn predicted_case_id(x_new: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x_new {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("predicted:{hex}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{generate_slhd, scale_design};
    use crate::pod::{decompose_matrix, reconstruct};
    use crate::snapshot::{linspace, synth_flowfield, tensor_grid, uniform_times, SynthRecipe};

    fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn small_grid() -> Vec<[f64; 2]> {
        tensor_grid(&linspace(0.0, 25.0, 12), &linspace(0.0, 4.5, 10))
    }

    fn synthetic_cases(s: usize, q: usize, seed: u64) -> Vec<SnapshotSet> {
        let ranges = DesignRanges::swirl_injector();
        let recipe = SynthRecipe::desk(ranges.clone());
        let unit = generate_slhd(s, q, 3, seed).unwrap();
        let phys = scale_design(&unit, &ranges).unwrap();
        let grid = small_grid();
        let times = uniform_times(24, 1e-4);
        (0..unit.n())
            .map(|i| {
                let x: Vec<f64> = phys.row(i).iter().copied().collect();
                let mut c = synth_flowfield(&x, &grid, &times, &recipe).unwrap();
                c.case_id = format!("case{i:02}");
                c
            })
            .collect()
    }

    fn synthetic_options() -> TrainOptions {
        TrainOptions {
            ranges: Some(DesignRanges::swirl_injector()),
            ..TrainOptions::default()
        }
    }

    fn all_times(model: &EmulatorModel) -> Vec<usize> {
        (0..model.times().len()).collect()
    }

    /// Field with orthonormal spatial and temporal factors and given energies.
    fn energy_field(j: usize, m: usize, energies: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(j, m, |i, q| {
            energies
                .iter()
                .enumerate()
                .map(|(k, e)| if i == k && q == k { e.sqrt() } else { 0.0 })
                .sum()
        })
    }

    fn uncentered() -> PodOptions {
        PodOptions {
            centering: false,
            weights: None,
        }
    }

    fn line_grid(j: usize) -> Vec<[f64; 2]> {
        (0..j).map(|i| [i as f64, 0.0]).collect()
    }

    fn unit_options(d: usize) -> TrainOptions {
        TrainOptions {
            ranges: Some(DesignRanges::unit(d)),
            centering: false,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn common_rank_is_minimum_of_case_ranks() {
        let a = decompose_matrix(&energy_field(6, 5, &[0.8, 0.2]), &uncentered()).unwrap();
        let b = decompose_matrix(&energy_field(6, 5, &[0.95, 0.05]), &uncentered()).unwrap();
        assert_eq!(select_rank(&a, Truncation::Energy(0.9)).unwrap(), 2);
        assert_eq!(select_rank(&b, Truncation::Energy(0.9)).unwrap(), 1);
        let opts = TrainOptions {
            energy_threshold: 0.9,
            ..unit_options(1)
        };
        let design = DMatrix::from_row_slice(2, 1, &[0.2, 0.7]);
        let model = train_from_bases(
            design,
            vec!["a".into(), "b".into()],
            vec![a, b],
            line_grid(6),
            uniform_times(5, 1.0),
            &opts,
        )
        .unwrap();
        assert_eq!(model.rank(), 1);
    }

    #[test]
    fn identical_cases_give_equal_aligned_modes_and_constant_coefficients() {
        let base = synthetic_cases(1, 1, 3).remove(0);
        let mut cases = Vec::new();
        for (i, x) in [[40.0, 0.5, 1.0], [55.0, 1.2, 2.5], [45.0, 0.9, 3.0]].iter().enumerate() {
            let mut c = base.clone();
            c.design = x.to_vec();
            c.case_id = format!("dup{i}");
            cases.push(c);
        }
        let model = train(&cases, &synthetic_options()).unwrap();
        let lib = model.mode_library();
        assert!(rel_fro(&lib[1].modes, &lib[0].modes) < 1e-12);
        assert!(rel_fro(&lib[2].modes, &lib[0].modes) < 1e-12);
        let x_new = [50.0, 1.0, 1.7];
        let beta = model.predict_coefficients(&x_new).unwrap();
        for k in 0..model.rank() {
            for q in 0..model.times().len() {
                let c = lib[0].coeffs[(q, k)];
                assert!((beta[(k, q)] - c).abs() <= 1e-9 * c.abs().max(1.0));
            }
        }
        // mode averaging of identical modes returns them whatever the weights
        let phi = model.predict_modes(&x_new).unwrap();
        assert!(rel_fro(&phi, &lib[0].modes) < 1e-10);
    }

    #[test]
    fn prediction_at_training_designs_reproduces_truncated_reconstruction() {
        let cases = synthetic_cases(2, 4, 11);
        let model = train(&cases, &synthetic_options()).unwrap();
        let idx = all_times(&model);
        for (i, c) in cases.iter().enumerate() {
            let pred = model.predict_field(&c.design, &idx).unwrap();
            let rec = reconstruct(&model.mode_library()[i], model.rank(), &idx).unwrap();
            assert!(rel_fro(&pred, &rec) < 1e-5, "case {i}: {}", rel_fro(&pred, &rec));
            let w = model.weights(&c.design).unwrap();
            for (j, v) in w.normalized.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
            let phi = model.predict_modes(&c.design).unwrap();
            let own = &model.mode_library()[i].modes;
            assert!(rel_fro(&phi, own) < 1e-6);
            let beta = model.predict_coefficients(&c.design).unwrap();
            for k in 0..model.rank() {
                let obs: Vec<f64> = (0..idx.len()).map(|q| model.mode_library()[i].coeffs[(q, k)]).collect();
                let span = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - obs.iter().copied().fold(f64::INFINITY, f64::min);
                for (q, o) in obs.iter().enumerate() {
                    assert!((beta[(k, q)] - o).abs() <= 1e-6 * span);
                }
            }
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let cases = synthetic_cases(2, 4, 5);
        let model = train(&cases, &synthetic_options()).unwrap();
        for x in [[36.0, 0.3, 0.9], [50.0, 1.0, 2.0], [61.0, 1.5, 3.3], [40.0, 1.4, 1.0]] {
            let w = model.weights(&x).unwrap();
            assert!((w.raw.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn equidistant_query_averages_two_modes() {
        let mk = |shift: f64| {
            DMatrix::from_fn(8, 6, |i, q| {
                let t = q as f64 * 0.9;
                (1.0 + shift * i as f64) * t.cos() + (0.5 + i as f64 * 0.1) * (2.0 * t).sin()
            })
        };
        let a = decompose_matrix(&mk(0.1), &uncentered()).unwrap();
        let b = decompose_matrix(&mk(0.3), &uncentered()).unwrap();
        let opts = TrainOptions {
            explicit_rank: Some(2),
            ..unit_options(1)
        };
        let design = DMatrix::from_row_slice(2, 1, &[0.2, 0.8]);
        let model = train_from_bases(design, vec!["a".into(), "b".into()], vec![a, b], line_grid(8), uniform_times(6, 1.0), &opts)
            .unwrap();
        let phi = model.predict_modes(&[0.5]).unwrap();
        let lib = model.mode_library();
        let mean = (&lib[0].modes + &lib[1].modes) * 0.5;
        assert!(rel_fro(&phi, &mean) < 1e-10);
        let nw = model.nw_weights(&[0.5], 3.0).unwrap();
        assert!((nw.normalized[0] - 0.5).abs() < 1e-15 && (nw.normalized[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nadaraya_watson_two_points() {
        let design = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let w = nadaraya_watson_weights(&design, &[0.0], 1.0).unwrap();
        assert!((w.raw[0] - 1.0).abs() < 1e-15);
        assert!((w.raw[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w.normalized[0] - 0.7311).abs() < 5e-5);
        assert!((w.normalized[1] - 0.2689).abs() < 5e-5);
        assert!(nadaraya_watson_weights(&design, &[0.0], 0.0).is_err());
    }

    #[test]
    fn separated_indicator_weights_follow_identity_limit() {
        // With C ≈ I the ordinary indicator weights tend to
        // 1/n + r_i - (Σ r)/n, not to r_i itself.
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.6, 0.0, 0.0, 0.7]);
        let params = CorrelationParams::isotropic(50.0, 2, 1e-8).unwrap();
        let model = IndicatorWeights::new(&x, params).unwrap();
        let q = [0.05, 0.02];
        let w = model.weights(&q).unwrap();
        let nw = nadaraya_watson_weights(&x, &q, 50.0).unwrap();
        let n = 3.0;
        let total: f64 = nw.raw.iter().sum();
        for (wi, ri) in w.iter().zip(&nw.raw) {
            assert!((wi - (1.0 / n + ri - total / n)).abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_weight_sum_is_rejected() {
        match WeightVector::from_raw(vec![0.5, -0.5], &[1.0]) {
            Err(Error::DegenerateWeights { x_new, .. }) => assert_eq!(x_new, vec![1.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sign_flip_of_one_case_is_undone() {
        let cases = synthetic_cases(2, 3, 21);
        let opts = synthetic_options();
        let pod_opts = PodOptions::default();
        let bases: Vec<PodBasis> = cases.iter().map(|c| decompose(c, &pod_opts).unwrap()).collect();
        let design = DMatrix::from_fn(cases.len(), 3, |i, k| cases[i].design[k]);
        let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
        let grid = cases[0].grid.clone();
        let times = cases[0].times.clone();
        let plain = train_from_bases(design.clone(), ids.clone(), bases.clone(), grid.clone(), times.clone(), &opts).unwrap();
        let mut flipped = bases;
        for k in 0..flipped[3].rank() {
            flipped[3].negate_mode(k);
        }
        let other = train_from_bases(design, ids, flipped, grid, times, &opts).unwrap();
        let x_new = [47.0, 0.8, 2.2];
        let idx = all_times(&plain);
        let a = plain.predict_field(&x_new, &idx).unwrap();
        let b = other.predict_field(&x_new, &idx).unwrap();
        assert!(rel_fro(&b, &a) < 1e-12);
    }

    #[test]
    fn more_modes_never_hurt_at_training_designs() {
        let cases = synthetic_cases(2, 3, 8);
        let idx: Vec<usize> = (0..cases[0].snapshots()).collect();
        let errors: Vec<Vec<f64>> = (1..=3)
            .map(|k| {
                let opts = TrainOptions {
                    explicit_rank: Some(k),
                    ..synthetic_options()
                };
                let model = train(&cases, &opts).unwrap();
                cases
                    .iter()
                    .map(|c| rel_fro(&model.predict_field(&c.design, &idx).unwrap(), &c.field))
                    .collect()
            })
            .collect();
        for w in errors.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(*b <= *a + 1e-9);
            }
        }
    }

    #[test]
    fn single_case_model_reproduces_its_case() {
        let cases = synthetic_cases(1, 1, 2);
        let model = train(&cases, &synthetic_options()).unwrap();
        let idx = all_times(&model);
        let rec = reconstruct(&model.mode_library()[0], model.rank(), &idx).unwrap();
        for x in [[36.0, 0.3, 0.9], [60.0, 1.5, 3.3]] {
            assert!(rel_fro(&model.predict_field(&x, &idx).unwrap(), &rec) < 1e-12);
        }
    }

    #[test]
    fn training_input_errors() {
        let mut cases = synthetic_cases(1, 3, 4);
        let opts = synthetic_options();
        let too_big = TrainOptions {
            explicit_rank: Some(500),
            ..opts.clone()
        };
        assert!(matches!(train(&cases, &too_big), Err(Error::InvalidArgument(_))));
        let mut dup = cases.clone();
        dup[1].design = dup[0].design.clone();
        assert!(matches!(train(&dup, &opts), Err(Error::IncompatibleCases(_))));
        cases[2].grid[0][1] += 1e-3;
        assert!(matches!(train(&cases, &opts), Err(Error::IncompatibleCases(_))));
        assert!(train(&[], &opts).is_err());
    }

    #[test]
    fn cluster_filter_keeps_matching_cases() {
        let cases = synthetic_cases(2, 3, 6);
        let opts = TrainOptions {
            cluster_filter: Some(ClusterFilter {
                keep: vec![Cluster::A, Cluster::B],
                inlet_velocity: vec![6.0, 12.0, 20.0, 30.0, 8.0, 15.0],
            }),
            ..synthetic_options()
        };
        let model = train(&cases, &opts).unwrap();
        assert_eq!(model.case_ids(), ["case00", "case01", "case04", "case05"]);
        let short = TrainOptions {
            cluster_filter: Some(ClusterFilter {
                keep: vec![Cluster::A],
                inlet_velocity: vec![6.0],
            }),
            ..synthetic_options()
        };
        assert!(matches!(train(&cases, &short), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn likelihood_rule_is_available() {
        let cases = synthetic_cases(2, 3, 9);
        let opts = TrainOptions {
            weight_rule: WeightThetaRule::Likelihood,
            ..synthetic_options()
        };
        let model = train(&cases, &opts).unwrap();
        let w = model.weights(&[48.0, 0.9, 2.0]).unwrap();
        assert!((w.raw.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn shared_theta_per_mode_interpolates() {
        let cases = synthetic_cases(2, 3, 12);
        let opts = TrainOptions {
            coefficient_theta: CoefficientTheta::SharedPerMode,
            ..synthetic_options()
        };
        let model = train(&cases, &opts).unwrap();
        let idx = all_times(&model);
        for (i, c) in cases.iter().enumerate() {
            let rec = reconstruct(&model.mode_library()[i], model.rank(), &idx).unwrap();
            assert!(rel_fro(&model.predict_field(&c.design, &idx).unwrap(), &rec) < 1e-5);
        }
        let theta0 = &model.coefficient_model(0, 0).params().theta;
        assert_eq!(theta0, &model.coefficient_model(0, 5).params().theta);
    }

    #[test]
    fn nadaraya_watson_scheme_predicts() {
        let cases = synthetic_cases(2, 3, 13);
        let model = train(&cases, &synthetic_options()).unwrap();
        let idx = [0, 3];
        let f = model
            .predict_field_with(&[50.0, 1.0, 2.0], &idx, WeightScheme::NadarayaWatson { theta: 10.0 })
            .unwrap();
        assert_eq!(f.shape(), (cases[0].points(), 2));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn model_round_trip() {
        let cases = synthetic_cases(2, 3, 14);
        let model = train(&cases, &synthetic_options()).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..6], KSEM_TAG);
        let back = EmulatorModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let x = [44.0, 1.1, 2.9];
        let idx = all_times(&model);
        let a = model.predict_field(&x, &idx).unwrap();
        let b = back.predict_field(&x, &idx).unwrap();
        assert!(rel_fro(&b, &a) < 1e-12);
        assert_eq!(back.case_ids(), model.case_ids());
        assert!(EmulatorModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            EmulatorModel::from_bytes(&extra),
            Err(Error::Parse(ParseError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn predicted_dataset_identity() {
        let cases = synthetic_cases(1, 2, 15);
        let model = train(&cases, &synthetic_options()).unwrap();
        let x = [50.0, 1.0, 2.0];
        let set = model.predict_dataset(&x, &[1, 4]).unwrap();
        assert!(set.case_id.starts_with("predicted:"));
        assert_eq!(set.case_id, predicted_case_id(&x));
        assert_ne!(set.case_id, predicted_case_id(&[50.0, 1.0, 2.5]));
        assert_eq!(set.times, vec![model.times()[1], model.times()[4]]);
        assert!(model.predict_field(&x, &[999]).is_err());
        assert!(model.weights(&[50.0, 1.0]).is_err());
    }
}
