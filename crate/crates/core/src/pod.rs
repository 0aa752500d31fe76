//! Proper orthogonal decomposition by the method of snapshots.
//!
//! For a `J x m` snapshot matrix `X` and quadrature weights `W`, the temporal
//! Gram matrix `G = Xᵀ W X` is eigen-decomposed as `G = V Λ Vᵀ`. Modes are
//! `φ_k = X v_k / sqrt(λ_k)` (orthonormal under `W`) and coefficients are
//! `β_k = sqrt(λ_k) v_k`, so `X = Σ_k φ_k β_kᵀ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::binio::{checked_product, Reader, Writer};
use crate::error::{invalid, Error, ParseError, Result};
use crate::snapshot::SnapshotSet;

/// Eigenvalues at or below `RANK_EPS * λ_max` are treated as null directions.
pub const RANK_EPS: f64 = 1e-12;

/// Slack allowed when comparing cumulative energy against a threshold.
pub const ENERGY_SLACK: f64 = 1e-9;

pub const KSPB_TAG: &[u8; 6] = b"KSPB1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct PodOptions {
    /// Subtract the per-point temporal mean before decomposing.
    pub centering: bool,
    /// Quadrature weights for the spatial inner product; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for PodOptions {
    fn default() -> Self {
        PodOptions {
            centering: true,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Smallest rank whose cumulative energy fraction reaches the threshold.
    Energy(f64),
    Rank(usize),
}

/// Spatial modes and temporal coefficients of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// `J x K`, orthonormal under the quadrature weights.
    pub modes: DMatrix<f64>,
    /// `m x K`.
    pub coeffs: DMatrix<f64>,
    /// Nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// `λ_k` over the energy of the untruncated decomposition.
    pub energy_fractions: Vec<f64>,
    pub total_energy: f64,
    pub mean_field: Option<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn points(&self) -> usize {
        self.modes.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_centered(&self) -> bool {
        self.mean_field.is_some()
    }

    /// Weighted inner product `aᵀ W b`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        weighted_inner(&self.weights, a, b)
    }

    /// Cumulative energy fractions, one entry per retained mode.
    pub fn energy_curve(&self) -> Vec<f64> {
        self.energy_fractions
            .iter()
            .scan(0.0, |acc, f| {
                *acc += f;
                Some(*acc)
            })
            .collect()
    }

    /// Flips the sign of mode `k` and its coefficients together.
    pub fn negate_mode(&mut self, k: usize) {
        self.modes.column_mut(k).neg_mut();
        self.coeffs.column_mut(k).neg_mut();
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(KSPB_TAG);
        self.write_body(&mut w);
        w.finish()
    }

    pub(crate) fn write_body(&self, w: &mut Writer) {
        w.u64(self.points() as u64);
        w.u64(self.snapshots() as u64);
        w.u64(self.rank() as u64);
        w.u64(u64::from(self.is_centered()));
        w.f64(self.total_energy);
        w.f64s(self.eigenvalues.iter().copied());
        w.f64s(self.energy_fractions.iter().copied());
        w.f64s(self.weights.iter().copied());
        if let Some(mean) = &self.mean_field {
            w.f64s(mean.iter().copied());
        }
        w.f64s(self.modes.as_slice().iter().copied());
        w.f64s(self.coeffs.as_slice().iter().copied());
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_tag(KSPB_TAG)?;
        let b = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(b)
    }

    pub(crate) fn read_body(r: &mut Reader<'_>) -> Result<Self, ParseError> {
        let j = r.count("J")?;
        let m = r.count("m")?;
        let k = r.count("K")?;
        let centered = match r.u64()? {
            0 => false,
            1 => true,
            v => return Err(ParseError::Invalid(format!("centering flag {v}"))),
        };
        let jk = checked_product(&[j, k], "modes")?;
        let mk = checked_product(&[m, k], "coefficients")?;
        let total_energy = r.f64()?;
        let eigenvalues = r.finite_f64s(k, "eigenvalues")?;
        let energy_fractions = r.finite_f64s(k, "energy fractions")?;
        let weights = r.finite_f64s(j, "weights")?;
        let mean_field = if centered {
            Some(r.finite_f64s(j, "mean field")?)
        } else {
            None
        };
        let modes = DMatrix::from_vec(j, k, r.finite_f64s(jk, "modes")?);
        let coeffs = DMatrix::from_vec(m, k, r.finite_f64s(mk, "coefficients")?);
        Ok(PodBasis {
            modes,
            coeffs,
            eigenvalues,
            energy_fractions,
            total_energy,
            mean_field,
            weights,
        })
    }
}

pub(crate) fn weighted_inner(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Trapezoidal cell-area weights for a tensor grid in axial-major order
/// (see [`crate::snapshot::tensor_grid`]).
pub fn trapezoid_weights(xs: &[f64], rs: &[f64]) -> Vec<f64> {
    fn spans(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|i| {
                let lo = if i == 0 { v[0] } else { 0.5 * (v[i - 1] + v[i]) };
                let hi = if i == n - 1 { v[n - 1] } else { 0.5 * (v[i] + v[i + 1]) };
                hi - lo
            })
            .collect()
    }
    let (wx, wr) = (spans(xs), spans(rs));
    wx.iter().flat_map(|a| wr.iter().map(move |b| a * b)).collect()
}

pub fn decompose(s: &SnapshotSet, opts: &PodOptions) -> Result<PodBasis> {
    decompose_matrix(&s.field, opts)
}

/// Method-of-snapshots POD of a `J x m` matrix.
pub fn decompose_matrix(field: &DMatrix<f64>, opts: &PodOptions) -> Result<PodBasis> {
    let (j, m) = field.shape();
    if j == 0 {
        return invalid("POD needs at least one grid point");
    }
    if m < 2 {
        return invalid(format!("POD needs at least two snapshots, got {m}"));
    }
    let weights = match &opts.weights {
        Some(w) if w.len() != j => {
            return Err(Error::DimensionMismatch {
                what: "quadrature weights",
                expected: j,
                got: w.len(),
            })
        }
        Some(w) if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) => {
            return invalid("quadrature weights must be positive and finite")
        }
        Some(w) => w.clone(),
        None => vec![1.0; j],
    };

    let mut x = field.clone();
    let mean_field = if opts.centering {
        let mean: Vec<f64> = x.row_iter().map(|r| r.sum() / m as f64).collect();
        for (mut row, mu) in x.row_iter_mut().zip(&mean) {
            row.add_scalar_mut(-mu);
        }
        Some(mean)
    } else {
        None
    };

    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut y = x.clone();
    for (mut row, s) in y.row_iter_mut().zip(&sqrt_w) {
        row *= *s;
    }
    let gram = y.tr_mul(&y);
    let eig = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| lambda_max > 0.0 && eig.eigenvalues[i] > RANK_EPS * lambda_max)
        .collect();
    let k = keep.len();

    let eigenvalues: Vec<f64> = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    let v = DMatrix::from_fn(m, k, |q, c| eig.eigenvectors[(q, keep[c])]);
    // Weighted snapshot combinations, scaled to unit norm.
    let mut phi_w = &y * &v;
    let mut coeffs = v.clone();
    for c in 0..k {
        let s = eigenvalues[c].sqrt();
        phi_w.column_mut(c).unscale_mut(s);
        coeffs.column_mut(c).scale_mut(s);
    }

    // Re-orthonormalize: W^½Φ = QR, Φ ← W^-½Q, B ← B Rᵀ keeps Φ Bᵀ unchanged.
    let (modes, coeffs) = if k > 0 {
        let qr = phi_w.qr();
        let (q, r) = (qr.q(), qr.r());
        let coeffs = coeffs * r.transpose();
        let mut modes = q;
        for (mut row, s) in modes.row_iter_mut().zip(&sqrt_w) {
            row.unscale_mut(*s);
        }
        (modes, coeffs)
    } else {
        (DMatrix::zeros(j, 0), DMatrix::zeros(m, 0))
    };

    let total_energy: f64 = eigenvalues.iter().sum();
    let energy_fractions = eigenvalues.iter().map(|l| l / total_energy).collect();
    let mut basis = PodBasis {
        modes,
        coeffs,
        eigenvalues,
        energy_fractions,
        total_energy,
        mean_field,
        weights,
    };
    for c in 0..k {
        let col = basis.modes.column(c);
        let peak = col.iamax();
        if col[peak] < 0.0 {
            basis.negate_mode(c);
        }
    }
    Ok(basis)
}

/// Rank selected by a truncation criterion, without truncating.
pub fn select_rank(b: &PodBasis, criterion: Truncation) -> Result<usize> {
    match criterion {
        Truncation::Rank(0) => invalid("explicit rank must be at least 1"),
        Truncation::Rank(k) if k > b.rank() => invalid(format!(
            "explicit rank {k} exceeds the {} available modes",
            b.rank()
        )),
        Truncation::Rank(k) => Ok(k),
        Truncation::Energy(t) if !(t > 0.0 && t <= 1.0) => {
            invalid(format!("energy threshold must lie in (0, 1], got {t}"))
        }
        Truncation::Energy(t) if t >= 1.0 => Ok(b.rank()),
        Truncation::Energy(t) => Ok(b
            .energy_curve()
            .iter()
            .position(|&c| c >= t - ENERGY_SLACK)
            .map_or(b.rank(), |i| i + 1)),
    }
}

/// Keeps the leading modes selected by `criterion`.
pub fn truncate(b: &PodBasis, criterion: Truncation) -> Result<PodBasis> {
    let k = select_rank(b, criterion)?;
    Ok(PodBasis {
        modes: b.modes.columns(0, k).into_owned(),
        coeffs: b.coeffs.columns(0, k).into_owned(),
        eigenvalues: b.eigenvalues[..k].to_vec(),
        energy_fractions: b.energy_fractions[..k].to_vec(),
        total_energy: b.total_energy,
        mean_field: b.mean_field.clone(),
        weights: b.weights.clone(),
    })
}

/// `Σ_{k<rank} β_k(t_q) φ_k` (plus the mean when centered) for each index.
pub fn reconstruct(b: &PodBasis, rank: usize, time_indices: &[usize]) -> Result<DMatrix<f64>> {
    if rank > b.rank() {
        return invalid(format!("rank {rank} exceeds the {} available modes", b.rank()));
    }
    if let Some(&q) = time_indices.iter().find(|&&q| q >= b.snapshots()) {
        return invalid(format!("time index {q} out of range ({} snapshots)", b.snapshots()));
    }
    let phi = b.modes.columns(0, rank);
    let beta = DMatrix::from_fn(rank, time_indices.len(), |k, c| b.coeffs[(time_indices[c], k)]);
    let mut out = phi * beta;
    if let Some(mean) = &b.mean_field {
        for mut col in out.column_iter_mut() {
            col += DVector::from_column_slice(mean);
        }
    }
    Ok(out)
}

/// Flips target modes (and their coefficients) whose weighted inner product
/// with the same-index reference mode is negative.
pub fn align_modes(reference: &PodBasis, target: &PodBasis) -> Result<PodBasis> {
    if reference.points() != target.points() {
        return Err(Error::IncompatibleCases(format!(
            "grid sizes differ: {} vs {}",
            reference.points(),
            target.points()
        )));
    }
    if reference.weights != target.weights {
        return Err(Error::IncompatibleCases("quadrature weights differ".into()));
    }
    let mut out = target.clone();
    for k in 0..reference.rank().min(target.rank()) {
        let ip = weighted_inner(
            &reference.weights,
            reference.modes.column(k).as_slice(),
            target.modes.column(k).as_slice(),
        );
        if ip < 0.0 {
            out.negate_mode(k);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn uncentered() -> PodOptions {
        PodOptions {
            centering: false,
            weights: None,
        }
    }

    /// Two orthonormal patterns with amplitudes 2 cos and 1 sin over one period.
    pub(crate) fn two_mode_field(j: usize, m: usize) -> DMatrix<f64> {
        let p1: Vec<f64> = (0..j).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let p2: Vec<f64> = (0..j).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect();
        let n1 = p1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2 = p2.iter().map(|v| v * v).sum::<f64>().sqrt();
        DMatrix::from_fn(j, m, |i, q| {
            let t = 2.0 * PI * q as f64 / m as f64;
            2.0 * t.cos() * p1[i] / n1 + t.sin() * p2[i] / n2
        })
    }

    #[test]
    fn rank_one_field() {
        let a: Vec<f64> = (0..7).map(|i| 1.0 + i as f64).collect();
        let b: Vec<f64> = (0..5).map(|q| (q as f64 * 0.7).sin() + 2.0).collect();
        let x = DMatrix::from_fn(7, 5, |i, q| a[i] * b[q]);
        let basis = decompose_matrix(&x, &uncentered()).unwrap();
        assert_eq!(basis.rank(), 1);
        let rec = reconstruct(&basis, 1, &[0, 1, 2, 3, 4]).unwrap();
        assert!(rel_fro(&rec, &x) < 1e-12);
    }

    #[test]
    fn two_mode_energy_split() {
        let x = two_mode_field(10, 40);
        let basis = decompose_matrix(&x, &uncentered()).unwrap();
        assert_eq!(basis.rank(), 2);
        assert!((basis.energy_fractions[0] - 0.8).abs() < 1e-10);
        assert!((basis.energy_fractions[1] - 0.2).abs() < 1e-10);
        assert_eq!(select_rank(&basis, Truncation::Energy(0.8)).unwrap(), 1);
        assert_eq!(select_rank(&basis, Truncation::Energy(1.0)).unwrap(), 2);

        let all: Vec<usize> = (0..40).collect();
        let rec = reconstruct(&basis, 1, &all).unwrap();
        let err = (&rec - &x).norm_squared() / x.norm_squared();
        assert!((err - basis.energy_fractions[1]).abs() < 1e-8);
    }

    #[test]
    fn truncate_rejects_bad_criteria() {
        let basis = decompose_matrix(&two_mode_field(6, 12), &uncentered()).unwrap();
        assert!(truncate(&basis, Truncation::Rank(0)).is_err());
        assert!(truncate(&basis, Truncation::Rank(3)).is_err());
        assert!(truncate(&basis, Truncation::Energy(0.0)).is_err());
        assert!(truncate(&basis, Truncation::Energy(1.5)).is_err());
        let t = truncate(&basis, Truncation::Rank(1)).unwrap();
        assert_eq!(t.rank(), 1);
        assert_eq!(t.total_energy, basis.total_energy);
        assert_eq!(truncate(&basis, Truncation::Energy(1.0)).unwrap(), basis);
    }

    #[test]
    fn reconstruct_edge_cases() {
        let basis = decompose_matrix(&two_mode_field(6, 12), &PodOptions::default()).unwrap();
        assert_eq!(reconstruct(&basis, 1, &[]).unwrap().shape(), (6, 0));
        assert!(reconstruct(&basis, 5, &[0]).is_err());
        assert!(reconstruct(&basis, 1, &[12]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::from_element(4, 1, 1.0);
        assert!(decompose_matrix(&x, &PodOptions::default()).is_err());
        let x = DMatrix::from_element(4, 3, 1.0);
        let opts = PodOptions {
            centering: true,
            weights: Some(vec![1.0; 3]),
        };
        assert!(matches!(
            decompose_matrix(&x, &opts),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn centered_constant_field_has_no_modes() {
        let x = DMatrix::from_element(4, 3, 2.5);
        let basis = decompose_matrix(&x, &PodOptions::default()).unwrap();
        assert_eq!(basis.rank(), 0);
        let rec = reconstruct(&basis, 0, &[0, 2]).unwrap();
        assert!(rec.iter().all(|v| (*v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn weighted_modes_are_orthonormal() {
        let xs = crate::snapshot::linspace(0.0, 2.0, 6);
        let rs = crate::snapshot::linspace(0.0, 1.0, 5);
        let w = trapezoid_weights(&xs, &rs);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        let x = DMatrix::from_fn(30, 9, |i, q| ((i * 7 + q * 3) % 11) as f64 - 0.3 * q as f64);
        let basis = decompose_matrix(
            &x,
            &PodOptions {
                centering: true,
                weights: Some(w.clone()),
            },
        )
        .unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
        let gram = basis.modes.transpose() * wm * &basis.modes;
        assert!((gram - DMatrix::identity(basis.rank(), basis.rank())).amax() < 1e-10);
        let all: Vec<usize> = (0..9).collect();
        assert!(rel_fro(&reconstruct(&basis, basis.rank(), &all).unwrap(), &x) < 1e-10);
    }

    #[test]
    fn alignment_undoes_negation() {
        let x = two_mode_field(8, 16);
        let reference = decompose_matrix(&x, &uncentered()).unwrap();
        let mut flipped = reference.clone();
        for k in 0..flipped.rank() {
            flipped.negate_mode(k);
        }
        let aligned = align_modes(&reference, &flipped).unwrap();
        for k in 0..aligned.rank() {
            let ip = aligned.inner(
                reference.modes.column(k).as_slice(),
                aligned.modes.column(k).as_slice(),
            );
            assert!(ip >= 0.0);
        }
        assert_eq!(align_modes(&reference, &reference).unwrap(), reference);
        let all: Vec<usize> = (0..16).collect();
        let before = reconstruct(&flipped, 2, &all).unwrap();
        let after = reconstruct(&aligned, 2, &all).unwrap();
        assert!((before - after).amax() < 1e-12);
    }

    #[test]
    fn alignment_checks_grid() {
        let a = decompose_matrix(&two_mode_field(8, 16), &uncentered()).unwrap();
        let b = decompose_matrix(&two_mode_field(6, 16), &uncentered()).unwrap();
        assert!(matches!(align_modes(&a, &b), Err(Error::IncompatibleCases(_))));
    }

    #[test]
    fn kspb_round_trip() {
        let basis = decompose_matrix(&two_mode_field(8, 16), &PodOptions::default()).unwrap();
        let bytes = basis.to_bytes();
        assert_eq!(&bytes[..6], b"KSPB1\n");
        assert_eq!(PodBasis::from_bytes(&bytes).unwrap(), basis);
        assert!(PodBasis::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(j: usize, m: usize, seed: &[f64]) -> DMatrix<f64> {
            DMatrix::from_fn(j, m, |i, q| seed[(i * 31 + q * 17) % seed.len()] + 0.01 * ((i * m + q) as f64).sin())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn basis_invariants(
                j in 2usize..60,
                m in 2usize..30,
                centering in any::<bool>(),
                seed in prop::collection::vec(-5.0f64..5.0, 97),
            ) {
                let x = matrix(j, m, &seed);
                let b = decompose_matrix(&x, &PodOptions { centering, weights: None }).unwrap();
                let k = b.rank();
                let gram = b.modes.tr_mul(&b.modes);
                prop_assert!((gram - DMatrix::identity(k, k)).amax() < 1e-10);
                prop_assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!((b.energy_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let curve = b.energy_curve();
                prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
                let cg = b.coeffs.tr_mul(&b.coeffs);
                for a in 0..k {
                    for c in 0..k {
                        if a != c {
                            prop_assert!(cg[(a, c)].abs() <= 1e-8 * (cg[(a, a)] * cg[(c, c)]).sqrt());
                        }
                    }
                }
                let all: Vec<usize> = (0..m).collect();
                let rec = reconstruct(&b, k, &all).unwrap();
                prop_assert!((&rec - &x).norm() <= 1e-9 * x.norm());
            }

            #[test]
            fn time_relabeling(
                j in 3usize..40,
                m in 3usize..20,
                seed in prop::collection::vec(-5.0f64..5.0, 97),
                rot in 1usize..19,
            ) {
                let x = matrix(j, m, &seed);
                let perm: Vec<usize> = (0..m).map(|q| (q + rot) % m).collect();
                let xp = DMatrix::from_fn(j, m, |i, q| x[(i, perm[q])]);
                let opts = PodOptions { centering: false, weights: None };
                let a = decompose_matrix(&x, &opts).unwrap();
                let b = decompose_matrix(&xp, &opts).unwrap();
                prop_assert_eq!(a.rank(), b.rank());
                let lmax = a.eigenvalues[0];
                for (la, lb) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                    prop_assert!((la - lb).abs() <= 1e-12 * lmax);
                }
                for k in 0..a.rank() {
                    // well-separated eigenvalues only; clustered ones may rotate
                    let gap = a.eigenvalues.iter().enumerate()
                        .filter(|&(i, _)| i != k)
                        .map(|(_, l)| (l - a.eigenvalues[k]).abs())
                        .fold(f64::INFINITY, f64::min);
                    if gap < 1e-6 * lmax {
                        continue;
                    }
                    let ip = a.modes.column(k).dot(&b.modes.column(k));
                    prop_assert!((ip.abs() - 1.0).abs() < 1e-6);
                    for q in 0..m {
                        let s = ip.signum();
                        prop_assert!((b.coeffs[(q, k)] - s * a.coeffs[(perm[q], k)]).abs() <= 1e-6 * lmax.sqrt());
                    }
                }
            }
        }
    }
}
