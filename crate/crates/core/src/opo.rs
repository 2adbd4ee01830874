//! Analytic squeezing spectra of a below-threshold OPO.
//!
//! The output spectral density in absolute units is
//!
//! ```text
//! S_q(ω) = 1/2 ∓ 2εγη/((γ±ε)² + ω²) + K_q/((γ±ε)² + ω²)
//! ```
//!
//! with the upper signs for the squeezed quadrature. `K_q` carries the
//! technical noise of the seed beam leaked into the cavity and is estimated
//! from the unpumped spectrum as `K_q = (γ² + ω²)(S_q⁰(ω) − 1/2)`.
//!
//! Public functions return variances relative to shot noise (vacuum = 1)
//! unless stated otherwise; `omega` arguments are angular frequencies in
//! rad/s, `freq_hz` arguments plain frequencies in Hz.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::QuadratureVariancePair;
use crate::{SPEED_OF_LIGHT, V0};

/// Quadrature label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrature {
    X,
    P,
}

/// Passive cavity geometry of the squeezing resonator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityGeometry {
    /// Power transmissivity of the coupling mirror.
    pub coupling_transmissivity: f64,
    /// Fractional intracavity loss per round trip.
    pub intracavity_loss: f64,
    /// Round-trip length in meters.
    pub round_trip_length: f64,
}

impl CavityGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.coupling_transmissivity > 0.0 && self.coupling_transmissivity < 1.0) {
            return Err(Error::InvalidParameter {
                name: "coupling_transmissivity",
                reason: format!("must be in (0, 1), got {}", self.coupling_transmissivity),
            });
        }
        if !(0.0..1.0).contains(&self.intracavity_loss) {
            return Err(Error::InvalidParameter {
                name: "intracavity_loss",
                reason: format!("must be in [0, 1), got {}", self.intracavity_loss),
            });
        }
        if !(self.round_trip_length > 0.0) {
            return Err(Error::InvalidParameter {
                name: "round_trip_length",
                reason: format!("must be positive, got {}", self.round_trip_length),
            });
        }
        Ok(())
    }
}

/// Total cavity decay rate in rad/s,
/// `γ = [(1 − √(1−T_c)) + (1 − √(1−L))]/τ` with `τ` the round-trip time.
pub fn decay_rate(geom: &CavityGeometry) -> f64 {
    let tau = geom.round_trip_length / SPEED_OF_LIGHT;
    let coupling = 1.0 - (1.0 - geom.coupling_transmissivity).sqrt();
    let loss = 1.0 - (1.0 - geom.intracavity_loss).sqrt();
    (coupling + loss) / tau
}

/// Pump rate `ε = γ·√(P/P_th)` in rad/s for a below-threshold pump.
pub fn pump_rate(pump_power: f64, threshold_power: f64, gamma: f64) -> Result<f64> {
    if !(threshold_power > 0.0) || pump_power < 0.0 {
        return Err(Error::InvalidParameter {
            name: "pump_power",
            reason: format!(
                "powers must satisfy 0 ≤ P, 0 < P_th; got ({pump_power}, {threshold_power})"
            ),
        });
    }
    if pump_power >= threshold_power {
        return Err(Error::AboveThreshold {
            power_w: pump_power,
            threshold_w: threshold_power,
        });
    }
    Ok(gamma * (pump_power / threshold_power).sqrt())
}

/// OPO rate and efficiency bookkeeping.
///
/// `gamma_s` is retained for completeness but never enters predictions
/// separately: the seed-noise coupling is folded into `K_q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpoParams {
    /// Coupling-mirror decay rate, rad/s.
    pub gamma_c: f64,
    /// Intracavity-loss decay rate, rad/s.
    pub gamma_l: f64,
    /// Seed-mirror decay rate, rad/s (small compared to `gamma_c`).
    pub gamma_s: f64,
    /// Pump rate, rad/s; below threshold means `epsilon < gamma()`.
    pub epsilon: f64,
    /// Overall source-to-detector efficiency.
    pub eta: f64,
    /// Which quadrature the pump phase squeezes.
    pub squeezed: Quadrature,
}

impl OpoParams {
    pub fn new(
        gamma_c: f64,
        gamma_l: f64,
        gamma_s: f64,
        epsilon: f64,
        eta: f64,
        squeezed: Quadrature,
    ) -> Result<Self> {
        let p = Self {
            gamma_c,
            gamma_l,
            gamma_s,
            epsilon,
            eta,
            squeezed,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters with the whole decay rate attributed to the coupler.
    pub fn from_total_rates(gamma: f64, epsilon: f64, eta: f64) -> Result<Self> {
        Self::new(gamma, 0.0, 0.0, epsilon, eta, Quadrature::X)
    }

    /// Total decay rate `γ = γ_c + γ_l + γ_s`.
    pub fn gamma(&self) -> f64 {
        self.gamma_c + self.gamma_l + self.gamma_s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_c", self.gamma_c),
            ("gamma_l", self.gamma_l),
            ("gamma_s", self.gamma_s),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("rate must be non-negative, got {v}"),
                });
            }
        }
        if self.epsilon >= self.gamma() {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!(
                    "pump rate {} must stay below the decay rate {} (below threshold)",
                    self.epsilon,
                    self.gamma()
                ),
            });
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter {
                name: "eta",
                reason: format!("efficiency must be in [0, 1], got {}", self.eta),
            });
        }
        Ok(())
    }
}

/// One quadrature's seed-noise coefficient tabulated over frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KqTable {
    /// Angular frequencies, rad/s, ascending.
    pub omega: Vec<f64>,
    /// `K_q` values in absolute variance × (rad/s)².
    pub k: Vec<f64>,
    /// Number of grid points clipped at zero because the measured spectrum
    /// dipped below shot noise.
    pub clipped: usize,
}

/// Seed-noise coefficient `K_q(ω) = (γ² + ω²)(S_q⁰(ω) − 1/2)` from the
/// unpumped spectrum `s0_rel` (shot-normalized). Sub-shot points are clipped
/// to zero and counted.
pub fn kq_from_seed_spectrum(freq_hz: &[f64], s0_rel: &[f64], gamma: f64) -> Result<KqTable> {
    if freq_hz.is_empty() || freq_hz.len() != s0_rel.len() {
        return Err(Error::EmptyGrid);
    }
    if s0_rel.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter {
            name: "s0_rel",
            reason: "unpumped spectrum must be positive".into(),
        });
    }
    let mut clipped = 0;
    let mut omega = Vec::with_capacity(freq_hz.len());
    let mut k = Vec::with_capacity(freq_hz.len());
    for (&f, &s) in freq_hz.iter().zip(s0_rel) {
        let w = TAU * f;
        let value = (gamma * gamma + w * w) * (s - 1.0) * V0;
        omega.push(w);
        if value < 0.0 {
            clipped += 1;
            k.push(0.0);
        } else {
            k.push(value);
        }
    }
    Ok(KqTable { omega, k, clipped })
}

/// Seed-beam noise model: `K_x` and `K_p` tables with linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedNoiseModel {
    k_x: KqTable,
    k_p: KqTable,
}

impl SeedNoiseModel {
    /// Shot-noise-limited seed: `K_q ≡ 0`.
    pub fn shot_limited() -> Self {
        let empty = KqTable {
            omega: Vec::new(),
            k: Vec::new(),
            clipped: 0,
        };
        Self {
            k_x: empty.clone(),
            k_p: empty,
        }
    }

    pub fn from_tables(k_x: KqTable, k_p: KqTable) -> Self {
        Self { k_x, k_p }
    }

    /// Same unpumped spectrum applied to both quadratures.
    pub fn from_unpumped(freq_hz: &[f64], s0_rel: &[f64], gamma: f64) -> Result<Self> {
        let table = kq_from_seed_spectrum(freq_hz, s0_rel, gamma)?;
        Ok(Self {
            k_x: table.clone(),
            k_p: table,
        })
    }

    /// `K_q` at angular frequency `omega`, linearly interpolated and clamped
    /// to the table ends; zero for an empty table.
    pub fn k(&self, quadrature: Quadrature, omega: f64) -> f64 {
        let table = match quadrature {
            Quadrature::X => &self.k_x,
            Quadrature::P => &self.k_p,
        };
        interp_clamped(&table.omega, &table.k, omega)
    }

    pub fn clipped_points(&self) -> usize {
        self.k_x.clipped + self.k_p.clipped
    }
}

fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let idx = xs.partition_point(|&v| v < x);
    let (x0, x1) = (xs[idx - 1], xs[idx]);
    let (y0, y1) = (ys[idx - 1], ys[idx]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Output spectral density of one quadrature relative to shot noise
/// (vacuum = 1).
pub fn output_spectrum(
    params: &OpoParams,
    seed: &SeedNoiseModel,
    omega: f64,
    quadrature: Quadrature,
) -> f64 {
    let gamma = params.gamma();
    let squeezed = quadrature == params.squeezed;
    let pole = if squeezed {
        gamma + params.epsilon
    } else {
        gamma - params.epsilon
    };
    let denom = pole * pole + omega * omega;
    let vacuum_term = 2.0 * params.epsilon * gamma * params.eta / denom;
    let seed_term = seed.k(quadrature, omega) / denom;
    let s_abs = if squeezed {
        V0 - vacuum_term + seed_term
    } else {
        V0 + vacuum_term + seed_term
    };
    s_abs / V0
}

/// Complex coefficients mapping the noise-operator quadratures
/// `(x_Γ, p_Γ)` onto the intracavity quadratures `(x_a, p_a)` at sideband
/// `omega` for pump phase `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureTransfer {
    pub xx: Complex64,
    pub xp: Complex64,
    pub px: Complex64,
    pub pp: Complex64,
}

/// Intracavity quadrature transfer
///
/// ```text
/// x_a = [(iω − γ − ε·cos φ)·x_Γ − ε·sin φ·p_Γ] / (ε² − (iω − γ)²)
/// p_a = [(iω − γ + ε·cos φ)·p_Γ − ε·sin φ·x_Γ] / (ε² − (iω − γ)²)
/// ```
///
/// At `φ = 0` or `π` the cross terms vanish and the two quadratures decouple.
pub fn cavity_quadrature_transfer(phi: f64, omega: f64, params: &OpoParams) -> QuadratureTransfer {
    let gamma = params.gamma();
    let eps = params.epsilon;
    let a = Complex64::new(-gamma, omega); // iω − γ
    let denom = Complex64::new(eps * eps, 0.0) - a * a;
    let cross = Complex64::new(-eps * phi.sin(), 0.0) / denom;
    QuadratureTransfer {
        xx: (a - Complex64::new(eps * phi.cos(), 0.0)) / denom,
        xp: cross,
        px: cross,
        pp: (a + Complex64::new(eps * phi.cos(), 0.0)) / denom,
    }
}

/// How to average a quadrature variance over Gaussian phase fluctuations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterAverage {
    /// Small-σ shifted-angle form, evaluated symmetrically in ±σ:
    /// `v_x(1 + cos2σ·cos2θ)/2 + v_p(1 − cos2σ·cos2θ)/2`. At `θ = 0` or
    /// `π/2` this reduces to the usual `v_x cos²(θ+σ) + v_p sin²(θ+σ)`.
    Approximate,
    /// Closed form of the Gaussian-weighted integral:
    /// `v_x(1 + e^{−2σ²}cos2θ)/2 + v_p(1 − e^{−2σ²}cos2θ)/2`.
    Exact,
}

/// Variance of the quadrature at mean angle `theta` when the phase jitters
/// with standard deviation `sigma` (radians) around it. Linear in the input
/// variances, so any consistent units pass through.
pub fn phase_averaged_variance(
    pair: QuadratureVariancePair,
    theta: f64,
    sigma: f64,
    mode: JitterAverage,
) -> f64 {
    let damping = match mode {
        JitterAverage::Approximate => (2.0 * sigma).cos(),
        JitterAverage::Exact => (-2.0 * sigma * sigma).exp(),
    };
    let c = damping * (2.0 * theta).cos();
    pair.v_x * 0.5 * (1.0 + c) + pair.v_p * 0.5 * (1.0 - c)
}

/// Parametric excess-noise shape: a `1/f` tail plus a Lorentzian bump,
/// expressed relative to shot noise.
///
/// `excess_rel(f) = a·(1 MHz/f)^p + b·w²/((f − f₀)² + w²)`, with the `1/f`
/// term held flat below `low_freq_plateau_hz` to keep the DC bin finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseShape {
    pub one_over_f_amplitude: f64,
    pub one_over_f_exponent: f64,
    pub bump_amplitude: f64,
    pub bump_center_hz: f64,
    pub bump_width_hz: f64,
    pub low_freq_plateau_hz: f64,
}

impl NoiseShape {
    pub fn zero() -> Self {
        Self {
            one_over_f_amplitude: 0.0,
            one_over_f_exponent: 1.0,
            bump_amplitude: 0.0,
            bump_center_hz: 5.5e6,
            bump_width_hz: 1.0e6,
            low_freq_plateau_hz: 2.5e5,
        }
    }

    /// Excess spectral density above shot noise at `f_hz`, in shot units.
    pub fn excess_rel(&self, f_hz: f64) -> f64 {
        let f = f_hz.abs().max(self.low_freq_plateau_hz);
        let tail = self.one_over_f_amplitude * (1.0e6 / f).powf(self.one_over_f_exponent);
        let w = self.bump_width_hz;
        let df = f - self.bump_center_hz;
        let bump = self.bump_amplitude * w * w / (df * df + w * w);
        tail + bump
    }

    pub fn is_zero(&self) -> bool {
        self.one_over_f_amplitude == 0.0 && self.bump_amplitude == 0.0
    }
}
