//! Ordinary kriging with a squared-exponential correlation.
//!
//! Model: `Y(x) = μ + Z(x)`, `Corr(Z(x_i), Z(x_j)) = exp(-Σ_k θ_k (x_ik - x_jk)²)`.
//! The conditional mean at `x` is `μ̂ + rᵀ C⁻¹ (y - μ̂ 1)` with `C = R + nugget·I`
//! and `μ̂ = 1ᵀC⁻¹y / 1ᵀC⁻¹1`. Correlation lengths are chosen by maximizing the
//! profile log-likelihood over `log θ`.
//!
//! A nonzero nugget makes the predictor miss the data at a training input by
//! exactly `nugget · [C⁻¹(y - μ̂1)]_i`. The likelihood search only accepts `θ`
//! for which that miss stays below [`INTERPOLATION_RTOL`] of the data range.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::binio::{checked_product, Reader, Writer};
use crate::error::{invalid, Error, ParseError, Result};

pub const KSGP_TAG: &[u8; 6] = b"KSGP1\n";

pub const DEFAULT_NUGGET: f64 = 1e-8;

/// Largest accepted training-point miss, relative to the data range.
pub const INTERPOLATION_RTOL: f64 = 5e-7;

const SEARCH_STEP_MIN: f64 = 1e-4;
const SEARCH_MAX_EVALS: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationParams {
    pub theta: Vec<f64>,
    pub nugget: f64,
}

impl CorrelationParams {
    pub fn new(theta: Vec<f64>, nugget: f64) -> Result<Self> {
        if theta.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return invalid(format!("correlation parameters must be positive: {theta:?}"));
        }
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return invalid(format!("nugget must be nonnegative, got {nugget}"));
        }
        Ok(CorrelationParams { theta, nugget })
    }

    pub fn isotropic(theta: f64, d: usize, nugget: f64) -> Result<Self> {
        Self::new(vec![theta; d], nugget)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingOptions {
    pub nugget: f64,
    /// Search box for each `ln θ_k`.
    pub log_theta_bounds: (f64, f64),
    pub restarts: usize,
    /// Skip the likelihood search and use these values.
    pub theta: Option<Vec<f64>>,
}

impl Default for KrigingOptions {
    fn default() -> Self {
        KrigingOptions {
            nugget: DEFAULT_NUGGET,
            log_theta_bounds: (-6.0, 6.0),
            restarts: 8,
            theta: None,
        }
    }
}

impl KrigingOptions {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.log_theta_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return invalid(format!("bad log-theta bounds ({lo}, {hi})"));
        }
        if self.restarts == 0 {
            return invalid("at least one optimizer start is required");
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return invalid(format!("nugget must be nonnegative, got {}", self.nugget));
        }
        Ok(())
    }
}

/// `exp(-Σ_k θ_k (a_k - b_k)²)`.
pub fn correlation(a: &[f64], b: &[f64], params: &CorrelationParams) -> Result<f64> {
    if a.len() != b.len() || a.len() != params.theta.len() {
        return Err(Error::DimensionMismatch {
            what: "correlation inputs",
            expected: params.theta.len(),
            got: if a.len() != params.theta.len() { a.len() } else { b.len() },
        });
    }
    Ok(corr(a.iter().copied(), b.iter().copied(), &params.theta))
}

fn corr(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>, theta: &[f64]) -> f64 {
    let s: f64 = a
        .zip(b)
        .zip(theta)
        .map(|((a, b), t)| t * (a - b) * (a - b))
        .sum();
    (-s).exp()
}

/// `R + nugget·I` over the rows of `x`.
pub fn correlation_matrix(x: &DMatrix<f64>, theta: &[f64], nugget: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut c = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = corr(x.row(i).iter().copied(), x.row(j).iter().copied(), theta);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
        c[(i, i)] += nugget;
    }
    c
}

fn cross_correlation(x: &DMatrix<f64>, x_new: &[f64], theta: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        x.nrows(),
        x.row_iter()
            .map(|row| corr(row.iter().copied(), x_new.iter().copied(), theta)),
    )
}

struct Factorization {
    chol: Cholesky<f64, Dyn>,
    cinv_ones: DVector<f64>,
    ones_cinv_ones: f64,
    log_det: f64,
}

impl Factorization {
    fn new(x: &DMatrix<f64>, theta: &[f64], nugget: f64) -> Option<Self> {
        let n = x.nrows();
        let chol = Cholesky::new(correlation_matrix(x, theta, nugget))?;
        let l = chol.l_dirty();
        let mut log_det = 0.0;
        for i in 0..n {
            let d = l[(i, i)];
            if !(d > 0.0 && d.is_finite()) {
                return None;
            }
            log_det += 2.0 * d.ln();
        }
        let cinv_ones = chol.solve(&DVector::from_element(n, 1.0));
        let ones_cinv_ones = cinv_ones.sum();
        if !(ones_cinv_ones > 0.0 && ones_cinv_ones.is_finite()) {
            return None;
        }
        Some(Factorization {
            chol,
            cinv_ones,
            ones_cinv_ones,
            log_det,
        })
    }

    /// `(μ̂, σ̂², C⁻¹(y - μ̂1))`.
    fn profile(&self, y: &DVector<f64>) -> (f64, f64, DVector<f64>) {
        let n = y.len() as f64;
        let cinv_y = self.chol.solve(y);
        let mu = self.cinv_ones.dot(y) / self.ones_cinv_ones;
        let alpha = cinv_y - &self.cinv_ones * mu;
        let resid = y.add_scalar(-mu);
        let sigma2 = (resid.dot(&alpha) / n).max(0.0);
        (mu, sigma2, alpha)
    }
}

fn range(y: &[f64]) -> f64 {
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Sum of profile log-likelihoods `-(n/2) ln σ̂² - ½ ln|C|` over the responses,
/// or `-∞` when the factorization fails or would not interpolate the data.
fn profile_objective(x: &DMatrix<f64>, responses: &[DVector<f64>], theta: &[f64], nugget: f64) -> f64 {
    let Some(f) = Factorization::new(x, theta, nugget) else {
        return f64::NEG_INFINITY;
    };
    let n = x.nrows() as f64;
    let mut total = 0.0;
    for y in responses {
        let (_, sigma2, alpha) = f.profile(y);
        let span = range(y.as_slice());
        if span == 0.0 {
            total -= 0.5 * f.log_det;
            continue;
        }
        if nugget * alpha.amax() > INTERPOLATION_RTOL * span || !(sigma2 > 0.0) {
            return f64::NEG_INFINITY;
        }
        total += -0.5 * n * sigma2.ln() - 0.5 * f.log_det;
    }
    if total.is_finite() {
        total
    } else {
        f64::NEG_INFINITY
    }
}

/// Profile log-likelihood of a single response at the given parameters.
pub fn log_likelihood(x: &DMatrix<f64>, y: &[f64], params: &CorrelationParams) -> f64 {
    profile_objective(x, &[DVector::from_column_slice(y)], &params.theta, params.nugget)
}

/// Radical inverse of `i` in base `b`: the Halton sequence coordinate.
fn radical_inverse(mut i: usize, b: usize) -> f64 {
    let (mut f, mut out) = (1.0, 0.0);
    while i > 0 {
        f /= b as f64;
        out += f * (i % b) as f64;
        i /= b;
    }
    out
}

const HALTON_BASES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Screening points per search dimension before the local searches start.
const SCREEN_PER_DIM: usize = 32;

/// Maximizes `objective` over a box. A deterministic Halton screen plus
/// golden-ratio points picks `starts` starting points, each refined by a
/// coordinate pattern search. Returns the best point and value.
pub(crate) fn maximize(
    objective: impl Fn(&[f64]) -> f64,
    dim: usize,
    (lo, hi): (f64, f64),
    starts: usize,
) -> (Vec<f64>, f64) {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    let mut candidates: Vec<(Vec<f64>, f64)> = Vec::new();
    for s in 0..starts {
        let u = (s as f64 + 0.5) / starts as f64;
        let p: Vec<f64> = (0..dim)
            .map(|k| lo + (hi - lo) * (u + k as f64 * GOLDEN).fract())
            .collect();
        let v = objective(&p);
        candidates.push((p, v));
    }
    for i in 1..=SCREEN_PER_DIM * dim {
        let p: Vec<f64> = (0..dim)
            .map(|k| lo + (hi - lo) * radical_inverse(i, HALTON_BASES[k % HALTON_BASES.len()]))
            .collect();
        let v = objective(&p);
        candidates.push((p, v));
    }
    // stable sort keeps the order deterministic among ties
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut best = (vec![0.5 * (lo + hi); dim], f64::NEG_INFINITY);
    let mut evals = 0usize;
    for (mut point, mut value) in candidates.into_iter().take(starts.max(1)) {
        let mut step = (hi - lo) / 8.0;
        while step >= SEARCH_STEP_MIN && evals < SEARCH_MAX_EVALS * starts.max(1) {
            let mut improved = false;
            for k in 0..dim {
                for dir in [1.0, -1.0] {
                    let mut trial = point.clone();
                    trial[k] = (trial[k] + dir * step).clamp(lo, hi);
                    if trial[k] == point[k] {
                        continue;
                    }
                    let v = objective(&trial);
                    evals += 1;
                    if v > value {
                        point = trial;
                        value = v;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if value > best.1 {
            best = (point, value);
        }
    }
    best
}

fn has_duplicate_rows(x: &DMatrix<f64>) -> bool {
    (0..x.nrows()).any(|i| (0..i).any(|j| x.row(i) == x.row(j)))
}

fn check_inputs(x: &DMatrix<f64>, nugget: f64) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return invalid("kriging needs at least one input of dimension >= 1");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("kriging inputs must be finite");
    }
    if nugget == 0.0 && has_duplicate_rows(x) {
        return Err(Error::IllConditioned(
            "duplicate inputs with zero nugget give a singular correlation matrix".into(),
        ));
    }
    Ok(())
}

/// Shared likelihood search used by single fits, shared-θ coefficient fits
/// and indicator weights.
pub(crate) fn fit_theta(
    x: &DMatrix<f64>,
    responses: &[DVector<f64>],
    opts: &KrigingOptions,
    isotropic: bool,
) -> Result<Vec<f64>> {
    opts.validate()?;
    let d = x.ncols();
    let n = x.nrows();
    if let Some(theta) = &opts.theta {
        let want = if isotropic { 1 } else { d };
        if theta.len() != want && theta.len() != d {
            return Err(Error::DimensionMismatch {
                what: "fixed theta",
                expected: want,
                got: theta.len(),
            });
        }
        let full = if theta.len() == d { theta.clone() } else { vec![theta[0]; d] };
        CorrelationParams::new(full.clone(), opts.nugget)?;
        return Ok(full);
    }
    let trivial = n < 2 || responses.iter().all(|y| range(y.as_slice()) == 0.0);
    if trivial {
        return Ok(vec![1.0; d]);
    }
    let dim = if isotropic { 1 } else { d };
    let expand = |log_theta: &[f64]| -> Vec<f64> {
        if isotropic {
            vec![log_theta[0].exp(); d]
        } else {
            log_theta.iter().map(|v| v.exp()).collect()
        }
    };
    let (best, value) = maximize(
        |lt| profile_objective(x, responses, &expand(lt), opts.nugget),
        dim,
        opts.log_theta_bounds,
        opts.restarts,
    );
    let theta = expand(&best);
    if !value.is_finite() {
        if Factorization::new(x, &theta, opts.nugget).is_none() {
            return Err(Error::IllConditioned(format!(
                "no correlation parameters in the search box give a factorizable matrix (nugget {})",
                opts.nugget
            )));
        }
        return Err(Error::FitFailed {
            best_theta: theta,
            reason: "no parameters in the search box interpolate the data".into(),
        });
    }
    Ok(theta)
}

/// Fitted ordinary-kriging model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct KrigingModel {
    inputs: DMatrix<f64>,
    obs: Vec<f64>,
    params: CorrelationParams,
    mu_hat: f64,
    sigma2_hat: f64,
    cinv_ones: DVector<f64>,
    alpha: DVector<f64>,
}

impl PartialEq for KrigingModel {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs
            && self.obs == other.obs
            && self.params == other.params
            && self.mu_hat == other.mu_hat
            && self.sigma2_hat == other.sigma2_hat
    }
}

impl KrigingModel {
    /// Fits `θ` by maximum likelihood (or uses `opts.theta`) and conditions on `y`.
    pub fn fit(x: &DMatrix<f64>, y: &[f64], opts: &KrigingOptions) -> Result<Self> {
        check_inputs(x, opts.nugget)?;
        check_obs(x, y)?;
        let theta = fit_theta(x, &[DVector::from_column_slice(y)], opts, false)?;
        Self::with_params(x, y, CorrelationParams::new(theta, opts.nugget)?)
    }

    /// Conditions on `y` with fixed correlation parameters.
    pub fn with_params(x: &DMatrix<f64>, y: &[f64], params: CorrelationParams) -> Result<Self> {
        check_inputs(x, params.nugget)?;
        check_obs(x, y)?;
        if params.theta.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: x.ncols(),
                got: params.theta.len(),
            });
        }
        let f = Factorization::new(x, &params.theta, params.nugget).ok_or_else(|| {
            Error::IllConditioned(format!(
                "Cholesky factorization failed for theta {:?}, nugget {}",
                params.theta, params.nugget
            ))
        })?;
        let (mu_hat, sigma2_hat, alpha) = f.profile(&DVector::from_column_slice(y));
        Ok(KrigingModel {
            inputs: x.clone(),
            obs: y.to_vec(),
            params,
            mu_hat,
            sigma2_hat,
            cinv_ones: f.cinv_ones,
            alpha,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    pub fn params(&self) -> &CorrelationParams {
        &self.params
    }

    pub fn mu_hat(&self) -> f64 {
        self.mu_hat
    }

    pub fn sigma2_hat(&self) -> f64 {
        self.sigma2_hat
    }

    /// `C⁻¹ 1`, exposed for checking the GLS identity.
    pub fn cinv_ones(&self) -> &DVector<f64> {
        &self.cinv_ones
    }

    pub fn predict(&self, x_new: &[f64]) -> Result<f64> {
        if x_new.len() != self.inputs.ncols() {
            return Err(Error::DimensionMismatch {
                what: "prediction point",
                expected: self.inputs.ncols(),
                got: x_new.len(),
            });
        }
        Ok(self.predict_unchecked(x_new))
    }

    pub(crate) fn predict_unchecked(&self, x_new: &[f64]) -> f64 {
        let r = cross_correlation(&self.inputs, x_new, &self.params.theta);
        self.mu_hat + r.dot(&self.alpha)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(KSGP_TAG);
        self.write_body(&mut w);
        w.finish()
    }

    pub(crate) fn write_body(&self, w: &mut Writer) {
        let (n, d) = self.inputs.shape();
        w.u64(n as u64);
        w.u64(d as u64);
        w.f64s(self.inputs.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        w.f64s(self.obs.iter().copied());
        w.f64s(self.params.theta.iter().copied());
        w.f64(self.params.nugget);
        w.f64(self.mu_hat);
        w.f64(self.sigma2_hat);
    }

    /// Reads a model; the factorization is recomputed from the stored parameters.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_tag(KSGP_TAG)?;
        let n = r.count("n")?;
        let d = r.count("d")?;
        let nd = checked_product(&[n, d], "inputs")?;
        let inputs = DMatrix::from_row_slice(n, d, &r.finite_f64s(nd, "inputs")?);
        let obs = r.finite_f64s(n, "observations")?;
        let theta = r.finite_f64s(d, "theta")?;
        let nugget = r.f64()?;
        let _mu = r.f64()?;
        let _sigma2 = r.f64()?;
        r.finish()?;
        let params = CorrelationParams::new(theta, nugget)
            .map_err(|e| ParseError::Invalid(e.to_string()))?;
        Self::with_params(&inputs, &obs, params)
    }
}

fn check_obs(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            what: "observations",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("observations must be finite");
    }
    Ok(())
}

/// Kriging of the indicator vectors `e_1..e_n` with one shared correlation.
///
/// All `n` indicator models share the factorization, so the raw weights at a
/// query are `ŵ = μ̂ + s - μ̂ (1ᵀs)` with `s = C⁻¹ r` and `μ̂_i = (C⁻¹1)_i / 1ᵀC⁻¹1`.
/// They sum to one and may be negative.
#[derive(Debug, Clone)]
pub struct IndicatorWeights {
    inputs: DMatrix<f64>,
    params: CorrelationParams,
    chol: Cholesky<f64, Dyn>,
    mu: DVector<f64>,
}

impl IndicatorWeights {
    pub fn new(x: &DMatrix<f64>, params: CorrelationParams) -> Result<Self> {
        check_inputs(x, params.nugget)?;
        if params.theta.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: x.ncols(),
                got: params.theta.len(),
            });
        }
        let f = Factorization::new(x, &params.theta, params.nugget).ok_or_else(|| {
            Error::IllConditioned(format!(
                "indicator correlation matrix is not positive definite (theta {:?}, nugget {})",
                params.theta, params.nugget
            ))
        })?;
        let mu = &f.cinv_ones / f.ones_cinv_ones;
        Ok(IndicatorWeights {
            inputs: x.clone(),
            params,
            chol: f.chol,
            mu,
        })
    }

    /// Fits one isotropic `θ` by maximizing the summed likelihood of all `n`
    /// indicator responses, unless `opts.theta` overrides it.
    pub fn fit(x: &DMatrix<f64>, opts: &KrigingOptions) -> Result<Self> {
        check_inputs(x, opts.nugget)?;
        let n = x.nrows();
        let responses: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                e
            })
            .collect();
        let theta = fit_theta(x, &responses, opts, true)?;
        Self::new(x, CorrelationParams::new(theta, opts.nugget)?)
    }

    pub fn params(&self) -> &CorrelationParams {
        &self.params
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// Raw (unnormalized) weights at `x_new`.
    pub fn weights(&self, x_new: &[f64]) -> Result<Vec<f64>> {
        if x_new.len() != self.inputs.ncols() {
            return Err(Error::DimensionMismatch {
                what: "query point",
                expected: self.inputs.ncols(),
                got: x_new.len(),
            });
        }
        let r = cross_correlation(&self.inputs, x_new, &self.params.theta);
        let s = self.chol.solve(&r);
        let total = s.sum();
        Ok(self
            .mu
            .iter()
            .zip(s.iter())
            .map(|(mu, s)| mu + s - mu * total)
            .collect())
    }
}

/// One-shot indicator weights for a query with given shared parameters.
pub fn indicator_weights(x: &DMatrix<f64>, params: &CorrelationParams, x_new: &[f64]) -> Result<Vec<f64>> {
    IndicatorWeights::new(x, params.clone())?.weights(x_new)
}
