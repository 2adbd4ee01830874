//! The switch/delay/beam-splitter network algebra.
//!
//! Path 1 (direct) and path 2 (delay) carry amplitude-squeezed states. The
//! delay mode is rotated by π/2 before the symmetric coupler, so the output
//! quadratures are
//!
//! ```text
//! x_A = (x₁ − p₂)/√2    p_A = (p₁ + x₂)/√2
//! x_B = (x₁ + p₂)/√2    p_B = (p₁ − x₂)/√2
//! ```
//!
//! Per path the state is squeezed, subjected to loss, rotated by the phase
//! offset, and only then interfered. All variances here are relative to shot
//! noise (vacuum = 1).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gaussian::CovarianceMatrix4;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Single-mode squeezed state in one network path.
///
/// `phase_jitter_sigma` is carried for the sampling and prediction layers;
/// the deterministic covariance algebra in this module treats the state at
/// its mean angle and ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathState {
    /// Squeezed-quadrature variance, shot units.
    pub v_x: f64,
    /// Anti-squeezed-quadrature variance, shot units.
    pub v_p: f64,
    /// Path efficiency in [0, 1].
    pub eta: f64,
    /// Deterministic phase offset, radians.
    pub phase_offset: f64,
    /// Phase-jitter standard deviation, radians.
    pub phase_jitter_sigma: f64,
}

impl PathState {
    pub fn new(v_x: f64, v_p: f64, eta: f64, phase_offset: f64, phase_jitter_sigma: f64) -> Self {
        Self {
            v_x,
            v_p,
            eta,
            phase_offset,
            phase_jitter_sigma,
        }
    }

    /// Lossless vacuum path.
    pub fn vacuum() -> Self {
        Self::new(1.0, 1.0, 1.0, 0.0, 0.0)
    }

    /// Ideal squeezed path with squeezing parameter `r`.
    pub fn squeezed(r: f64) -> Self {
        Self::new((-2.0 * r).exp(), (2.0 * r).exp(), 1.0, 0.0, 0.0)
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.phase_offset = offset;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    /// Variances after the loss channel, before the offset rotation.
    fn lossy(&self) -> (f64, f64) {
        (
            self.eta * self.v_x + 1.0 - self.eta,
            self.eta * self.v_p + 1.0 - self.eta,
        )
    }

    /// Second moments `(⟨x²⟩, ⟨p²⟩, ⟨xp⟩)` of the path mode after loss and
    /// the offset rotation.
    fn rotated_moments(&self) -> (f64, f64, f64) {
        let (vu, vw) = self.lossy();
        let (s, c) = self.phase_offset.sin_cos();
        let vx = vu * c * c + vw * s * s;
        let vp = vu * s * s + vw * c * c;
        let cxp = (vu - vw) * s * c;
        (vx, vp, cxp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_x > 0.0 && self.v_p > 0.0) {
            return Err(crate::Error::InvalidParameter {
                name: "path_variances",
                reason: format!("must be positive, got ({}, {})", self.v_x, self.v_p),
            });
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(crate::Error::InvalidParameter {
                name: "path_eta",
                reason: format!("must be in [0, 1], got {}", self.eta),
            });
        }
        if !(self.phase_jitter_sigma >= 0.0) {
            return Err(crate::Error::InvalidParameter {
                name: "phase_jitter_sigma",
                reason: format!("must be non-negative, got {}", self.phase_jitter_sigma),
            });
        }
        Ok(())
    }
}

/// Local-oscillator phases at the two homodyne stations, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementAngles {
    pub theta_a: f64,
    pub theta_b: f64,
}

impl MeasurementAngles {
    pub fn new(theta_a: f64, theta_b: f64) -> Self {
        Self { theta_a, theta_b }
    }
}

/// π/2 rotation on path 2 followed by the balanced coupler, applied to one
/// quadrature sample `(x₁, p₁, x₂, p₂)`.
pub fn interfere(quads: [f64; 4]) -> [f64; 4] {
    let [x1, p1, x2, p2] = quads;
    [
        SQRT_HALF * (x1 - p2),
        SQRT_HALF * (p1 + x2),
        SQRT_HALF * (x1 + p2),
        SQRT_HALF * (p1 - x2),
    ]
}

/// Projective homodyne outcome `q_i(θ_i) = x_i cos θ_i + p_i sin θ_i` at
/// both stations.
pub fn measured_quadrature(quads: [f64; 4], angles: MeasurementAngles) -> (f64, f64) {
    let [xa, pa, xb, pb] = quads;
    let (sa, ca) = angles.theta_a.sin_cos();
    let (sb, cb) = angles.theta_b.sin_cos();
    (xa * ca + pa * sa, xb * cb + pb * sb)
}

/// Covariance `⟨q_A(θ_A) q_B(θ_B)⟩` of the two station outcomes.
///
/// For identical lossless paths without offsets this reduces to
/// `½(V_x − V_p)·cos(θ_A + θ_B)`.
pub fn analytic_cov(path1: &PathState, path2: &PathState, angles: MeasurementAngles) -> f64 {
    let cov = build_two_mode_cov(path1, path2);
    let m = cov.entries();
    let (sa, ca) = angles.theta_a.sin_cos();
    let (sb, cb) = angles.theta_b.sin_cos();
    // q_A = (ca, sa, 0, 0)·ξ, q_B = (0, 0, cb, sb)·ξ
    ca * cb * m[0][2] + ca * sb * m[0][3] + sa * cb * m[1][2] + sa * sb * m[1][3]
}

fn combined_variances(
    path1: &PathState,
    path2: &PathState,
    angles: MeasurementAngles,
) -> (f64, f64) {
    let cov = build_two_mode_cov(path1, path2);
    let m = cov.entries();
    let (sa, ca) = angles.theta_a.sin_cos();
    let (sb, cb) = angles.theta_b.sin_cos();
    let var_a = ca * ca * m[0][0] + 2.0 * ca * sa * m[0][1] + sa * sa * m[1][1];
    let var_b = cb * cb * m[2][2] + 2.0 * cb * sb * m[2][3] + sb * sb * m[3][3];
    let cross = ca * cb * m[0][2] + ca * sb * m[0][3] + sa * cb * m[1][2] + sa * sb * m[1][3];
    (var_a + var_b + 2.0 * cross, var_a + var_b - 2.0 * cross)
}

/// Sum/difference variances along the constant-correlation tomography set,
/// `(θ_A, θ_B) = (θ, −θ)`.
///
/// Without offsets: `sum = 2(V_{x1}cos²θ + V_{x2}sin²θ)` and
/// `diff = 2(V_{p2}cos²θ + V_{p1}sin²θ)`.
pub fn variance_set1(path1: &PathState, path2: &PathState, theta: f64) -> (f64, f64) {
    combined_variances(path1, path2, MeasurementAngles::new(theta, -theta))
}

/// Sum/difference variances across the correlation structure,
/// `(θ_A, θ_B) = (θ, θ − π/2)`.
///
/// Maximal squeezing appears at `θ = π/4`; at `θ = 0` or `π/2` both
/// combinations measure half the sum of all four single-mode variances.
pub fn variance_set2(path1: &PathState, path2: &PathState, theta: f64) -> (f64, f64) {
    combined_variances(
        path1,
        path2,
        MeasurementAngles::new(theta, theta - std::f64::consts::FRAC_PI_2),
    )
}

/// Two-mode covariance of `(x_A, p_A, x_B, p_B)` produced by the network:
/// squeeze → loss → phase offset per path, then the coupler.
pub fn build_two_mode_cov(path1: &PathState, path2: &PathState) -> CovarianceMatrix4 {
    let (vx1, vp1, c1) = path1.rotated_moments();
    let (vx2, vp2, c2) = path2.rotated_moments();
    let intra = 0.5 * (c1 - c2);
    let inter = 0.5 * (c1 + c2);
    let entries = [
        [0.5 * (vx1 + vp2), intra, 0.5 * (vx1 - vp2), inter],
        [intra, 0.5 * (vp1 + vx2), inter, 0.5 * (vp1 - vx2)],
        [0.5 * (vx1 - vp2), inter, 0.5 * (vx1 + vp2), intra],
        [inter, 0.5 * (vp1 - vx2), intra, 0.5 * (vp1 + vx2)],
    ];
    CovarianceMatrix4::new(entries).expect("network covariance is symmetric by construction")
}

/// Closed form for the inter-mode covariance `⟨x_A p_B⟩ = ⟨x_B p_A⟩`
/// generated by the path phase offsets:
/// `½·Σᵢ ηᵢ(v_{x,i} − v_{p,i})·cos σᵢ·sin σᵢ`.
pub fn phase_offset_cross_covariance(path1: &PathState, path2: &PathState) -> f64 {
    let term = |p: &PathState| {
        let (s, c) = p.phase_offset.sin_cos();
        p.eta * (p.v_x - p.v_p) * s * c
    };
    0.5 * (term(path1) + term(path2))
}

/// Verifies `C_{x_A p_A} = C_{x_B p_B} = C_{x_A p_B} = C_{x_B p_A}` on the
/// constructed matrix to `1e-12`.
///
/// The equality holds exactly when the relative phase offset sits in a
/// single path (the other acting as the phase reference); with both paths
/// offset, the intra- and inter-mode pairs differ.
pub fn intra_inter_cov_equality_check(path1: &PathState, path2: &PathState) -> bool {
    let cov = build_two_mode_cov(path1, path2);
    let m = cov.entries();
    let values = [m[0][1], m[2][3], m[0][3], m[1][2]];
    values.iter().all(|&v| (v - values[0]).abs() <= 1e-12)
}
