//! Quadrature covariance-matrix algebra for two bosonic modes.
//!
//! Matrices are 4×4, real and symmetric, ordered `(x_A, p_A, x_B, p_B)` and
//! stored in units of the vacuum variance so that the two-mode vacuum is the
//! identity. In these units the uncertainty relation reads `γ + iΩ ≥ 0` and
//! vacuum saturates it exactly.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::V0;

/// Default tolerance on the minimum eigenvalue of `γ + iΩ`.
///
/// Vacuum passes at this tolerance while `0.999·vacuum` fails.
pub const DEFAULT_PHYSICALITY_TOL: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-12;

type Mat4 = SMatrix<f64, 4, 4>;
type Mat8 = SMatrix<f64, 8, 8>;

/// The fixed symplectic form for two modes in `(x_A, p_A, x_B, p_B)` order,
/// with 2×2 blocks `[[0, 1], [-1, 0]]` on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymplecticForm;

impl SymplecticForm {
    pub const ENTRIES: [[f64; 4]; 4] = [
        [0.0, 1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0, 0.0],
    ];

    pub fn matrix() -> Mat4 {
        Mat4::from_fn(|i, j| Self::ENTRIES[i][j])
    }
}

/// A pair of single-mode quadrature variances in absolute units
/// (vacuum = [`V0`]): `v_x` for the squeezed and `v_p` for the anti-squeezed
/// quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureVariancePair {
    pub v_x: f64,
    pub v_p: f64,
}

impl QuadratureVariancePair {
    pub fn new(v_x: f64, v_p: f64) -> Result<Self> {
        if !(v_x > 0.0) || !(v_p > 0.0) {
            return Err(Error::InvalidParameter {
                name: "variance_pair",
                reason: format!("variances must be positive, got ({v_x}, {v_p})"),
            });
        }
        Ok(Self { v_x, v_p })
    }

    /// Uncertainty product `v_x · v_p`; at least `V0²` for physical states.
    pub fn uncertainty_product(&self) -> f64 {
        self.v_x * self.v_p
    }
}

/// Pure Gaussian loss channel: `v' = η·v + (1−η)·V0` per quadrature
/// (absolute units).
pub fn apply_loss(pair: QuadratureVariancePair, eta: f64) -> Result<QuadratureVariancePair> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter {
            name: "eta",
            reason: format!("loss efficiency must be in [0, 1], got {eta}"),
        });
    }
    Ok(QuadratureVariancePair {
        v_x: eta * pair.v_x + (1.0 - eta) * V0,
        v_p: eta * pair.v_p + (1.0 - eta) * V0,
    })
}

/// 4×4 quadrature covariance matrix in `(x_A, p_A, x_B, p_B)` order,
/// entries in units of `V0` (vacuum = identity).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix4 {
    entries: [[f64; 4]; 4],
}

impl CovarianceMatrix4 {
    /// Builds a covariance matrix, enforcing symmetry (to `1e-12`) and a
    /// strictly positive diagonal.
    pub fn new(entries: [[f64; 4]; 4]) -> Result<Self> {
        for i in 0..4 {
            for j in (i + 1)..4 {
                let delta = (entries[i][j] - entries[j][i]).abs();
                if delta > SYMMETRY_TOL {
                    return Err(Error::NotSymmetric { i, j, delta });
                }
            }
        }
        for (i, row) in entries.iter().enumerate() {
            if !(row[i] > 0.0) {
                return Err(Error::NonPositiveDiagonal {
                    index: i,
                    value: row[i],
                });
            }
        }
        // Symmetrize exactly so downstream algebra sees m[i][j] == m[j][i].
        let mut m = entries;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let avg = 0.5 * (m[i][j] + m[j][i]);
                m[i][j] = avg;
                m[j][i] = avg;
            }
        }
        Ok(Self { entries: m })
    }

    /// Two-mode vacuum (identity in `V0` units).
    pub fn vacuum() -> Self {
        let mut entries = [[0.0; 4]; 4];
        for (i, row) in entries.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[[f64; 4]; 4] {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..4).map(|i| self.entries[i][i]).fold(f64::MIN, f64::max)
    }

    /// Minimum eigenvalue of the Hermitian matrix `γ + iΩ`.
    ///
    /// Computed through the real 8×8 representation `[[γ, −Ω], [Ω, γ]]`,
    /// whose spectrum is that of `γ + iΩ` with doubled multiplicities.
    pub fn min_uncertainty_eigenvalue(&self) -> f64 {
        min_eig_with_omega(&self.entries)
    }

    /// Uncertainty-relation check: true iff every eigenvalue of `γ + iΩ`
    /// is at least `−tol`. Vacuum saturates the bound exactly.
    pub fn is_physical(&self, tol: f64) -> bool {
        self.min_uncertainty_eigenvalue() >= -tol
    }

    /// Duan inseparability combination
    /// `⟨Δ(x_A+x_B)²⟩ + ⟨Δ(p_A−p_B)²⟩` in units of `V0`.
    ///
    /// Values below `4` certify inseparability.
    pub fn duan_criterion(&self) -> f64 {
        let m = &self.entries;
        let x_sum = m[0][0] + m[2][2] + 2.0 * m[0][2];
        let p_diff = m[1][1] + m[3][3] - 2.0 * m[1][3];
        x_sum + p_diff
    }

    /// Reid EPR products of conditional variances, `(Δ²inf x_{A|B}·Δ²inf
    /// p_{A|B}, Δ²inf x_{B|A}·Δ²inf p_{B|A})`, in units of `V0²`.
    ///
    /// `Δ²inf q_{i|j} = ⟨Δq_i²⟩ − ⟨q_i q_j⟩²/⟨Δq_j²⟩`; a product below `1`
    /// certifies EPR steering in that direction.
    pub fn reid_criterion(&self) -> Result<(f64, f64)> {
        let m = &self.entries;
        let inf = |var_i: f64, cov: f64, var_j: f64| -> Result<f64> {
            if var_j.abs() < 1e-300 {
                return Err(Error::ZeroConditioningVariance);
            }
            Ok(var_i - cov * cov / var_j)
        };
        let x_a_b = inf(m[0][0], m[0][2], m[2][2])?;
        let p_a_b = inf(m[1][1], m[1][3], m[3][3])?;
        let x_b_a = inf(m[2][2], m[0][2], m[0][0])?;
        let p_b_a = inf(m[3][3], m[1][3], m[1][1])?;
        Ok((x_a_b * p_a_b, x_b_a * p_b_a))
    }

    /// Applies an identical loss channel to both modes:
    /// `γ' = η·γ + (1−η)·1` in `V0` units.
    pub fn with_loss_both_modes(&self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter {
                name: "eta",
                reason: format!("loss efficiency must be in [0, 1], got {eta}"),
            });
        }
        let mut entries = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                entries[i][j] = eta * self.entries[i][j];
                if i == j {
                    entries[i][j] += 1.0 - eta;
                }
            }
        }
        Self::new(entries)
    }

    /// Congruence transform `S·γ·Sᵀ` for a symplectic `S`.
    pub fn transformed(&self, s: &Mat4) -> Result<Self> {
        let g = Mat4::from_fn(|i, j| self.entries[i][j]);
        let t = s * g * s.transpose();
        let mut entries = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                entries[i][j] = t[(i, j)];
            }
        }
        Self::new(entries)
    }

    pub fn to_json(&self) -> String {
        let tpl = CovarianceJson {
            order: ORDER.map(str::to_owned).to_vec(),
            v0: V0,
            entries: self
                .entries
                .iter()
                .map(|row| row.iter().map(|&v| Some(v)).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&tpl).expect("covariance serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tpl = CovarianceTemplate::from_json(text)?;
        tpl.require_complete()
    }
}

const ORDER: [&str; 4] = ["xA", "pA", "xB", "pB"];

#[derive(Serialize, Deserialize)]
struct CovarianceJson {
    order: Vec<String>,
    v0: f64,
    entries: Vec<Vec<Option<f64>>>,
}

/// Covariance matrix with the two intra-mode covariances
/// `a = ⟨x_A p_A⟩` and `b = ⟨x_B p_B⟩` optionally unknown (`None`).
///
/// Unknowns are only permitted at the `(x_A, p_A)` and `(x_B, p_B)`
/// positions; this matches the JSON wire format where unmeasured entries
/// are encoded as `null`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTemplate {
    fixed: [[f64; 4]; 4],
    a: Option<f64>,
    b: Option<f64>,
}

impl CovarianceTemplate {
    /// Template from a fully known matrix with `a`, `b` marked unknown.
    pub fn with_unknown_ab(base: &CovarianceMatrix4) -> Self {
        Self {
            fixed: *base.entries(),
            a: None,
            b: None,
        }
    }

    pub fn from_entries(entries: [[Option<f64>; 4]; 4]) -> Result<Self> {
        let mut fixed = [[0.0; 4]; 4];
        let mut a_unknown = false;
        let mut b_unknown = false;
        for i in 0..4 {
            for j in 0..4 {
                match entries[i][j] {
                    Some(v) => {
                        if let Some(w) = entries[j][i] {
                            let delta = (v - w).abs();
                            if delta > SYMMETRY_TOL {
                                return Err(Error::NotSymmetric { i, j, delta });
                            }
                        } else {
                            return Err(Error::CovarianceFormat(format!(
                                "entry [{i}][{j}] is fixed but its mirror is null"
                            )));
                        }
                        fixed[i][j] = v;
                    }
                    None => match (i.min(j), i.max(j)) {
                        (0, 1) => a_unknown = true,
                        (2, 3) => b_unknown = true,
                        _ => {
                            return Err(Error::CovarianceFormat(format!(
                                "null entry at [{i}][{j}]; only (xA,pA) and (xB,pB) may be unknown"
                            )))
                        }
                    },
                }
            }
        }
        for (i, row) in fixed.iter().enumerate() {
            if entries[i][i].is_none() || !(row[i] > 0.0) {
                return Err(Error::NonPositiveDiagonal {
                    index: i,
                    value: row[i],
                });
            }
        }
        Ok(Self {
            fixed,
            a: (!a_unknown).then_some(fixed[0][1]),
            b: (!b_unknown).then_some(fixed[2][3]),
        })
    }

    pub fn a_is_unknown(&self) -> bool {
        self.a.is_none()
    }

    pub fn b_is_unknown(&self) -> bool {
        self.b.is_none()
    }

    /// Concrete matrix with unknowns substituted by the given values
    /// (values are ignored for fixed entries).
    pub fn resolve(&self, a: f64, b: f64) -> CovarianceMatrix4 {
        let mut m = self.fixed;
        let a = self.a.unwrap_or(a);
        let b = self.b.unwrap_or(b);
        m[0][1] = a;
        m[1][0] = a;
        m[2][3] = b;
        m[3][2] = b;
        CovarianceMatrix4 { entries: m }
    }

    pub fn require_complete(&self) -> Result<CovarianceMatrix4> {
        if self.a.is_none() || self.b.is_none() {
            return Err(Error::CovarianceFormat(
                "matrix has unknown entries; expected a fully specified covariance".into(),
            ));
        }
        CovarianceMatrix4::new(self.fixed)
    }

    /// Minimum eigenvalue of `γ + iΩ` with the given unknowns pinned and
    /// any remaining unknown optimized over `±window`.
    pub fn best_min_eigenvalue(&self, a: Option<f64>, b: Option<f64>, window: f64) -> f64 {
        let tol = 1e-9 * window.max(1.0);
        let eig_at = |av: f64, bv: f64| min_eig_with_omega(self.resolve(av, bv).entries());
        match (
            a.or(self.a),
            b.or(self.b),
        ) {
            (Some(av), Some(bv)) => eig_at(av, bv),
            (Some(av), None) => ternary_max(|bv| eig_at(av, bv), -window, window, tol),
            (None, Some(bv)) => ternary_max(|av| eig_at(av, bv), -window, window, tol),
            (None, None) => {
                ternary_max(
                    |av| ternary_max(|bv| eig_at(av, bv), -window, window, tol),
                    -window,
                    window,
                    tol,
                )
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CovarianceJson = serde_json::from_str(text)?;
        if raw.order != ORDER {
            return Err(Error::CovarianceFormat(format!(
                "unexpected quadrature order {:?}",
                raw.order
            )));
        }
        if (raw.v0 - V0).abs() > 1e-12 {
            return Err(Error::CovarianceFormat(format!(
                "unsupported vacuum-variance convention v0 = {}",
                raw.v0
            )));
        }
        if raw.entries.len() != 4 || raw.entries.iter().any(|r| r.len() != 4) {
            return Err(Error::CovarianceFormat("entries must be 4×4".into()));
        }
        let mut entries = [[None; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                entries[i][j] = raw.entries[i][j];
            }
        }
        Self::from_entries(entries)
    }

    pub fn to_json(&self) -> String {
        let mut entries: Vec<Vec<Option<f64>>> = self
            .fixed
            .iter()
            .map(|row| row.iter().map(|&v| Some(v)).collect())
            .collect();
        if self.a.is_none() {
            entries[0][1] = None;
            entries[1][0] = None;
        }
        if self.b.is_none() {
            entries[2][3] = None;
            entries[3][2] = None;
        }
        let raw = CovarianceJson {
            order: ORDER.map(str::to_owned).to_vec(),
            v0: V0,
            entries,
        };
        serde_json::to_string_pretty(&raw).expect("covariance serialization cannot fail")
    }
}

fn min_eig_with_omega(entries: &[[f64; 4]; 4]) -> f64 {
    // Real representation of C + iΩ: [[C, -Ω], [Ω, C]].
    let om = SymplecticForm::ENTRIES;
    let m = Mat8::from_fn(|i, j| match (i < 4, j < 4) {
        (true, true) => entries[i][j],
        (true, false) => -om[i][j - 4],
        (false, true) => om[i - 4][j],
        (false, false) => entries[i - 4][j - 4],
    });
    let eig = m.symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::MAX, f64::min)
}

/// Result of [`bound_scan`]: the widest physical interval for each unknown.
///
/// A fixed entry reports a zero-width interval at its value; `None` ranges
/// mean the template is unphysical for every choice of the unknowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundScanResult {
    pub a_range: Option<(f64, f64)>,
    pub b_range: Option<(f64, f64)>,
}

/// Scans the physicality region of the unknown entries `a = ⟨x_A p_A⟩` and
/// `b = ⟨x_B p_B⟩`, returning for each the widest interval (extremized over
/// the other unknown) on which `γ + iΩ ≥ 0` holds, reported at `grid_step`
/// resolution.
///
/// The feasible set is convex (the minimum eigenvalue is concave in
/// `(a, b)`), so the projections are intervals and can be located by
/// bisection against the inner maximum over the companion unknown. The scan
/// window is `±3` times the largest diagonal entry.
pub fn bound_scan(template: &CovarianceTemplate, grid_step: f64) -> Result<BoundScanResult> {
    bound_scan_with_tol(template, grid_step, DEFAULT_PHYSICALITY_TOL)
}

pub fn bound_scan_with_tol(
    template: &CovarianceTemplate,
    grid_step: f64,
    tol: f64,
) -> Result<BoundScanResult> {
    if !(grid_step > 0.0) {
        return Err(Error::InvalidParameter {
            name: "grid_step",
            reason: format!("grid step must be positive, got {grid_step}"),
        });
    }
    let max_diag = (0..4).map(|i| template.fixed[i][i]).fold(0.0, f64::max);
    let window = 3.0 * max_diag;
    let inner_tol = (grid_step * 1e-3).max(1e-12);

    // λmin(a, b) with fixed entries taking precedence inside `resolve`.
    let eig = |a: f64, b: f64| min_eig_with_omega(template.resolve(a, b).entries());

    // Maximum of λmin over the companion unknown (ternary search on a
    // concave section), or the direct value when the companion is fixed.
    let g_a = |a: f64| -> f64 {
        if template.b_is_unknown() {
            ternary_max(|b| eig(a, b), -window, window, inner_tol)
        } else {
            eig(a, 0.0)
        }
    };
    let g_b = |b: f64| -> f64 {
        if template.a_is_unknown() {
            ternary_max(|a| eig(a, b), -window, window, inner_tol)
        } else {
            eig(0.0, b)
        }
    };

    // Fully pinned template: nothing to scan, only a physicality verdict.
    if !template.a_is_unknown() && !template.b_is_unknown() {
        let fixed = template.resolve(0.0, 0.0);
        if !fixed.is_physical(tol) {
            return Ok(BoundScanResult {
                a_range: None,
                b_range: None,
            });
        }
    }
    let a_range = if template.a_is_unknown() {
        feasible_interval(&g_a, window, tol, grid_step, inner_tol)
    } else {
        let v = template.a.expect("fixed value present");
        Some((v, v))
    };
    let b_range = if template.b_is_unknown() {
        feasible_interval(&g_b, window, tol, grid_step, inner_tol)
    } else {
        let v = template.b.expect("fixed value present");
        Some((v, v))
    };

    // A template infeasible in one projection is infeasible in the other.
    if a_range.is_none() || b_range.is_none() {
        return Ok(BoundScanResult {
            a_range: None,
            b_range: None,
        });
    }
    Ok(BoundScanResult { a_range, b_range })
}

/// Interval `{u : g(u) ≥ -tol}` for concave `g`, snapped to `grid_step`.
fn feasible_interval(
    g: &dyn Fn(f64) -> f64,
    window: f64,
    tol: f64,
    grid_step: f64,
    inner_tol: f64,
) -> Option<(f64, f64)> {
    let (u_best, g_best) = ternary_max_arg(g, -window, window, inner_tol);
    if g_best < -tol {
        return None;
    }
    let feasible = |u: f64| g(u) >= -tol;
    let lo = bisect_edge(&feasible, u_best, -window, inner_tol);
    let hi = bisect_edge(&feasible, u_best, window, inner_tol);
    let snap = |u: f64| (u / grid_step).round() * grid_step;
    Some((snap(lo), snap(hi)))
}

/// Walks from a feasible point toward an infeasible edge, bisecting the
/// boundary of a one-sided-monotone feasibility predicate.
fn bisect_edge(feasible: &dyn Fn(f64) -> bool, inside: f64, edge: f64, tol: f64) -> f64 {
    if feasible(edge) {
        return edge;
    }
    let (mut lo, mut hi) = (inside, edge);
    while (hi - lo).abs() > tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn ternary_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    ternary_max_arg(f, lo, hi, tol).1
}

fn ternary_max_arg(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    while hi - lo > tol {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let mid = 0.5 * (lo + hi);
    (mid, f(mid))
}

/// Symplectic local phase rotation `R(θ_A) ⊕ R(θ_B)`.
pub fn local_rotation(theta_a: f64, theta_b: f64) -> Mat4 {
    let mut s = Mat4::zeros();
    let blocks = [(0, theta_a), (2, theta_b)];
    for (off, th) in blocks {
        s[(off, off)] = th.cos();
        s[(off, off + 1)] = -th.sin();
        s[(off + 1, off)] = th.sin();
        s[(off + 1, off + 1)] = th.cos();
    }
    s
}

/// Symplectic beam splitter with power transmittance `t` mixing modes A and B.
pub fn beam_splitter(transmittance: f64) -> Mat4 {
    let c = transmittance.sqrt();
    let s = (1.0 - transmittance).sqrt();
    let mut m = Mat4::zeros();
    for k in 0..2 {
        m[(k, k)] = c;
        m[(k, k + 2)] = s;
        m[(k + 2, k)] = -s;
        m[(k + 2, k + 2)] = c;
    }
    m
}

/// The covariance matrix reconstructed from the measured dataset, used across
/// tests and as the bound-scan reference case.
pub fn measured_reference_matrix() -> CovarianceMatrix4 {
    CovarianceMatrix4::new([
        [4.36, 0.0, -3.84, 0.36],
        [0.0, 4.43, 0.45, 3.92],
        [-3.84, 0.45, 4.17, 0.0],
        [0.36, 3.92, 0.0, 4.26],
    ])
    .expect("reference matrix is symmetric and positive on the diagonal")
}
