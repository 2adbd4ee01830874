//! Partial tomography of the two-mode state, covariance reconstruction,
//! phase-fluctuation fitting and report generation.
//!
//! Two measurement sets cover the correlation structure: set 1 scans along
//! constant correlation with `(θ_A, θ_B) = (θ, −θ)`, set 2 across it with
//! `(θ_A, θ_B) = (θ, θ − π/2)`. Each angle produces a pair of station trace
//! sets which run through the full processing chain; sum/difference mode
//! variances are tabulated in vacuum units (two-mode vacuum = 2).

use std::fmt;
use std::io::Write as IoWrite;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{bound_scan, BoundScanResult, CovarianceTemplate, DEFAULT_PHYSICALITY_TOL};
use crate::network::{MeasurementAngles, PathState};
use crate::opo::{
    output_spectrum, JitterAverage, NoiseShape, OpoParams, Quadrature, SeedNoiseModel,
};
use crate::pipeline::{
    detrend_filter, filter_variance, mode_calibration, process, sine_mode_filter,
    variance_with_jackknife_se, CombineSign, ModeCalibration, SpectrumEstimate,
};
use crate::synth::{synthesize_calibration, synthesize_quadrature_traces, SynthJob};
use crate::trace::{ArtifactModel, SwitchTiming, TraceKind, TraceSet};

/// Which tomography angle set a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSet {
    Set1,
    Set2,
}

impl AngleSet {
    /// Station angles for scan parameter `theta`.
    pub fn angles(&self, theta: f64) -> MeasurementAngles {
        match self {
            AngleSet::Set1 => MeasurementAngles::new(theta, -theta),
            AngleSet::Set2 => MeasurementAngles::new(theta, theta - std::f64::consts::FRAC_PI_2),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AngleSet::Set1 => "set1",
            AngleSet::Set2 => "set2",
        }
    }
}

/// Angle grids and analysis frequencies for a tomography run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyPlan {
    /// Set-1 scan angles, radians in [0, π/2].
    pub set1_thetas: Vec<f64>,
    /// Set-2 scan angles, radians in [0, π/2].
    pub set2_thetas: Vec<f64>,
    /// Analysis mode frequencies, Hz.
    pub frequencies: Vec<f64>,
}

impl Default for TomographyPlan {
    fn default() -> Self {
        let grid = |n: usize| {
            (0..n)
                .map(|k| std::f64::consts::FRAC_PI_2 * k as f64 / (n - 1) as f64)
                .collect::<Vec<_>>()
        };
        Self {
            set1_thetas: grid(13),
            set2_thetas: grid(13),
            frequencies: vec![3.0e6, 10.0e6],
        }
    }
}

impl TomographyPlan {
    /// The minimal plan that still supports covariance reconstruction:
    /// both sets at θ = 0 and π/2.
    pub fn reconstruction_only(frequencies: Vec<f64>) -> Self {
        let ends = vec![0.0, std::f64::consts::FRAC_PI_2];
        Self {
            set1_thetas: ends.clone(),
            set2_thetas: ends,
            frequencies,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |thetas: &[f64]| {
            thetas
                .iter()
                .all(|&t| (-1e-12..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&t))
        };
        if self.set1_thetas.is_empty() || self.set2_thetas.is_empty() {
            return Err(Error::Config(
                "tomography angle grids must be nonempty".into(),
            ));
        }
        if !in_range(&self.set1_thetas) || !in_range(&self.set2_thetas) {
            return Err(Error::Config("tomography angles must lie in [0, π/2]".into()));
        }
        if self.frequencies.is_empty() {
            return Err(Error::Config("no analysis frequencies configured".into()));
        }
        Ok(())
    }

    pub fn datasets(&self) -> impl Iterator<Item = (AngleSet, f64)> + '_ {
        self.set1_thetas
            .iter()
            .map(|&t| (AngleSet::Set1, t))
            .chain(self.set2_thetas.iter().map(|&t| (AngleSet::Set2, t)))
    }
}

/// Provider of trace sets for tomography: simulated or loaded from disk.
pub trait TraceSource {
    fn signal(&self, set: AngleSet, theta: f64) -> Result<(TraceSet, TraceSet)>;
    fn shot(&self) -> Result<TraceSet>;
    fn electronic(&self) -> Result<TraceSet>;
}

/// Dataset id convention used for seeding and file naming.
pub fn dataset_id(set: AngleSet, theta: f64) -> u64 {
    let base = match set {
        AngleSet::Set1 => 1u64 << 32,
        AngleSet::Set2 => 2u64 << 32,
    };
    base + (theta.to_degrees() * 1000.0).round() as u64
}

/// Full physical description of the simulated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentModel {
    pub opo: OpoParams,
    pub seed_model: SeedNoiseModel,
    /// Direct (index 0) and delay (index 1) paths.
    pub paths: [PathState; 2],
    pub delay_excess: NoiseShape,
    pub timing: SwitchTiming,
    pub artifacts: ArtifactModel,
    pub sample_rate: f64,
    pub master_seed: u64,
}

impl ExperimentModel {
    pub fn synth_job(&self, set: AngleSet, theta: f64) -> SynthJob {
        SynthJob {
            opo: self.opo,
            seed_model: self.seed_model.clone(),
            paths: self.paths,
            delay_excess: self.delay_excess,
            angles: set.angles(theta),
            timing: self.timing,
            artifacts: self.artifacts.clone(),
            sample_rate: self.sample_rate,
            master_seed: self.master_seed,
            set_id: dataset_id(set, theta),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.timing.samples_per_trace(self.sample_rate)
    }

    /// One-sided DFT bin frequencies of the trace grid, Hz.
    pub fn bin_frequencies(&self) -> Vec<f64> {
        let n = self.n_samples();
        let df = self.sample_rate / n as f64;
        (0..=n / 2).map(|m| m as f64 * df).collect()
    }

    fn path_spectra(&self) -> [(Vec<f64>, Vec<f64>); 2] {
        self.synth_job(AngleSet::Set1, 0.0).path_bin_spectra()
    }

    /// Expected shot-normalized spectrum of `q_A ± q_B` on the analysis
    /// bins (DC omitted), folding loss, seed noise, delay excess, phase
    /// offsets and jitter.
    pub fn predicted_combined_spectrum(
        &self,
        set: AngleSet,
        theta: f64,
        sign: CombineSign,
    ) -> (Vec<f64>, Vec<f64>) {
        let weights = combination_weights(&self.paths, set.angles(theta), sign);
        let spectra = self.path_spectra();
        let freqs = self.bin_frequencies();
        let n_bins = freqs.len();
        let mut out_f = Vec::with_capacity(n_bins - 1);
        let mut out_v = Vec::with_capacity(n_bins - 1);
        for m in 1..n_bins {
            let v = weights.x1 * spectra[0].0[m]
                + weights.p1 * spectra[0].1[m]
                + weights.x2 * spectra[1].0[m]
                + weights.p2 * spectra[1].1[m];
            out_f.push(freqs[m]);
            out_v.push(v / 2.0);
        }
        (out_f, out_v)
    }

    /// Expected mode variance of `q_A ± q_B` at `f0` in vacuum units
    /// (two-mode vacuum = 2), for traces passed through slope removal.
    pub fn predicted_combined_mode_variance(
        &self,
        set: AngleSet,
        theta: f64,
        sign: CombineSign,
        f0: f64,
    ) -> f64 {
        let weights = combination_weights(&self.paths, set.angles(theta), sign);
        let n = self.n_samples();
        let filter = detrend_filter(&sine_mode_filter(n, self.sample_rate, f0));
        let spectra = self.path_spectra();
        let shot = filter_variance(&vec![1.0; n / 2 + 1], &filter);
        let raw = weights.x1 * filter_variance(&spectra[0].0, &filter)
            + weights.p1 * filter_variance(&spectra[0].1, &filter)
            + weights.x2 * filter_variance(&spectra[1].0, &filter)
            + weights.p2 * filter_variance(&spectra[1].1, &filter);
        raw / shot
    }

    /// Jitter-free effective path states at `f0` (mode-filtered variances,
    /// shot units), for the analytic network algebra. Loss and seed noise
    /// are already folded into the variances, so `eta = 1`.
    pub fn effective_paths_at(&self, f0: f64) -> [PathState; 2] {
        let n = self.n_samples();
        let filter = detrend_filter(&sine_mode_filter(n, self.sample_rate, f0));
        let shot = filter_variance(&vec![1.0; n / 2 + 1], &filter);
        let spectra = self.path_spectra();
        std::array::from_fn(|i| {
            let v_x = filter_variance(&spectra[i].0, &filter) / shot;
            let v_p = filter_variance(&spectra[i].1, &filter) / shot;
            PathState {
                v_x,
                v_p,
                eta: 1.0,
                phase_offset: self.paths[i].phase_offset,
                phase_jitter_sigma: self.paths[i].phase_jitter_sigma,
            }
        })
    }
}

/// Mean-square combination coefficients of the four path quadratures in
/// `q_A ± q_B`, averaged over the per-trace phase draws.
struct CombinationWeights {
    x1: f64,
    p1: f64,
    x2: f64,
    p2: f64,
}

fn combination_weights(
    paths: &[PathState; 2],
    angles: MeasurementAngles,
    sign: CombineSign,
) -> CombinationWeights {
    let (sa, ca) = angles.theta_a.sin_cos();
    let (sb, cb) = angles.theta_b.sin_cos();
    let s = match sign {
        CombineSign::Sum => 1.0,
        CombineSign::Diff => -1.0,
    };
    let sqrt_half = std::f64::consts::FRAC_1_SQRT_2;
    // Coefficients of the rotated path quadratures (x_i', p_i').
    let a1 = (ca + s * cb) * sqrt_half;
    let b1 = (sa + s * sb) * sqrt_half;
    let a2 = (sa - s * sb) * sqrt_half;
    let b2 = (s * cb - ca) * sqrt_half;

    let average = |a: f64, b: f64, path: &PathState| {
        let sigma = path.phase_jitter_sigma;
        let delta = path.phase_offset;
        let damping = (-2.0 * sigma * sigma).exp();
        let ec2 = 0.5 * (1.0 + damping * (2.0 * delta).cos());
        let es2 = 1.0 - ec2;
        let esc = 0.5 * damping * (2.0 * delta).sin();
        let wx = a * a * ec2 + b * b * es2 + 2.0 * a * b * esc;
        let wp = a * a * es2 + b * b * ec2 - 2.0 * a * b * esc;
        (wx, wp)
    };
    let (x1, p1) = average(a1, b1, &paths[0]);
    let (x2, p2) = average(a2, b2, &paths[1]);
    CombinationWeights { x1, p1, x2, p2 }
}

/// Simulation-backed trace source.
pub struct SimulatedSource {
    pub model: ExperimentModel,
}

impl TraceSource for SimulatedSource {
    fn signal(&self, set: AngleSet, theta: f64) -> Result<(TraceSet, TraceSet)> {
        synthesize_quadrature_traces(&self.model.synth_job(set, theta))
    }

    fn shot(&self) -> Result<TraceSet> {
        synthesize_calibration(
            TraceKind::ShotNoise,
            self.model.timing,
            &self.model.artifacts,
            self.model.sample_rate,
            self.model.master_seed,
        )
    }

    fn electronic(&self) -> Result<TraceSet> {
        synthesize_calibration(
            TraceKind::Electronic,
            self.model.timing,
            &self.model.artifacts,
            self.model.sample_rate,
            self.model.master_seed,
        )
    }
}

/// One tomography measurement: sum/difference mode variances at one angle
/// and frequency, plus the single-station variances, all in vacuum units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyRow {
    pub set: AngleSet,
    /// Scan angle, radians.
    pub theta: f64,
    pub freq_hz: f64,
    /// `Var(q_A + q_B)`, vacuum = 2.
    pub sum_var: f64,
    /// `Var(q_A − q_B)`, vacuum = 2.
    pub diff_var: f64,
    pub sum_stderr: f64,
    pub diff_stderr: f64,
    /// Station variances, vacuum = 1.
    pub var_a: f64,
    pub var_b: f64,
    pub var_a_stderr: f64,
    pub var_b_stderr: f64,
}

/// Runs the full pipeline over the plan: per dataset slope removal, ripple
/// removal and mode extraction at every analysis frequency.
pub fn run_tomography(
    plan: &TomographyPlan,
    source: &dyn TraceSource,
) -> Result<Vec<TomographyRow>> {
    plan.validate()?;
    // Calibrations run through the same processing once, then serve every
    // dataset and frequency.
    let shot = process(source.shot()?)?;
    let electronic = process(source.electronic()?)?;
    let calibrations: Vec<ModeCalibration> = plan
        .frequencies
        .iter()
        .map(|&f0| {
            mode_calibration(
                shot.trace_set(),
                electronic.trace_set(),
                f0,
                false,
                false,
            )
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (set, theta) in plan.datasets() {
        let (raw_a, raw_b) = source.signal(set, theta)?;
        let a = process(raw_a)?;
        let b = process(raw_b)?;
        for (&f0, cal) in plan.frequencies.iter().zip(&calibrations) {
            let denom = cal.shot_var - cal.electronic_var;
            let values_a = crate::pipeline::extract_mode_values(a.trace_set(), f0)?;
            let values_b = crate::pipeline::extract_mode_values(b.trace_set(), f0)?;
            let combined = |sgn: f64| -> Vec<f64> {
                values_a
                    .iter()
                    .zip(&values_b)
                    .map(|(x, y)| x + sgn * y)
                    .collect()
            };
            let (sum_raw, sum_se) = variance_with_jackknife_se(&combined(1.0));
            let (diff_raw, diff_se) = variance_with_jackknife_se(&combined(-1.0));
            let (a_raw, a_se) = variance_with_jackknife_se(&values_a);
            let (b_raw, b_se) = variance_with_jackknife_se(&values_b);
            rows.push(TomographyRow {
                set,
                theta,
                freq_hz: f0,
                sum_var: (sum_raw - 2.0 * cal.electronic_var) / denom,
                diff_var: (diff_raw - 2.0 * cal.electronic_var) / denom,
                sum_stderr: sum_se / denom,
                diff_stderr: diff_se / denom,
                var_a: (a_raw - cal.electronic_var) / denom,
                var_b: (b_raw - cal.electronic_var) / denom,
                var_a_stderr: a_se / denom,
                var_b_stderr: b_se / denom,
            });
        }
    }
    Ok(rows)
}

/// CSV of a tomography table.
pub fn rows_to_csv<W: IoWrite>(rows: &[TomographyRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "set,theta_deg,freq_mhz,sum_var_v0,diff_var_v0,sum_db,diff_db,sum_stderr_v0,diff_stderr_v0,var_a_v0,var_b_v0"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.6},{:.6},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}",
            r.set.label(),
            r.theta.to_degrees(),
            r.freq_hz / 1e6,
            r.sum_var,
            r.diff_var,
            10.0 * (r.sum_var / 2.0).log10(),
            10.0 * (r.diff_var / 2.0).log10(),
            r.sum_stderr,
            r.diff_stderr,
            r.var_a,
            r.var_b,
        )?;
    }
    Ok(())
}

/// Covariance matrix reconstructed from a tomography table, with the
/// never-measured intra-mode covariances left unknown.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub template: CovarianceTemplate,
    /// Standard errors for the measured entries (zero for `a`, `b`).
    pub entry_stderr: [[f64; 4]; 4],
}

fn find_row(
    rows: &[TomographyRow],
    set: AngleSet,
    theta: f64,
    freq_hz: f64,
) -> Result<&TomographyRow> {
    rows.iter()
        .find(|r| {
            r.set == set && (r.theta - theta).abs() < 1e-9 && (r.freq_hz - freq_hz).abs() < 1.0
        })
        .ok_or_else(|| {
            Error::MissingRows(format!(
                "{} θ = {:.2}° at {:.2} MHz",
                set.label(),
                theta.to_degrees(),
                freq_hz / 1e6
            ))
        })
}

/// Inverts `Var(q_A ± q_B) = Var(q_A) + Var(q_B) ± 2⟨q_A q_B⟩` on the
/// cardinal-angle rows of both sets to fill every measurable entry of the
/// covariance matrix at `freq_hz`; `⟨x_A p_A⟩` and `⟨x_B p_B⟩` stay null.
pub fn reconstruct_cov(rows: &[TomographyRow], freq_hz: f64) -> Result<Reconstruction> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let s1_0 = find_row(rows, AngleSet::Set1, 0.0, freq_hz)?;
    let s1_90 = find_row(rows, AngleSet::Set1, half_pi, freq_hz)?;
    let s2_0 = find_row(rows, AngleSet::Set2, 0.0, freq_hz)?;
    let s2_90 = find_row(rows, AngleSet::Set2, half_pi, freq_hz)?;

    // Station axes: set 1 measures (x_A, x_B) at θ=0 and (p_A, −p_B) at 90°.
    let var_x_a = s1_0.var_a;
    let var_x_b = s1_0.var_b;
    let var_p_a = s1_90.var_a;
    let var_p_b = s1_90.var_b;

    let quarter = |diff: f64, sum: f64| (diff - sum) / 4.0;
    // θ=0: sum = Var(x_A + x_B), diff = Var(x_A − x_B).
    let xx = quarter(s1_0.sum_var, s1_0.diff_var);
    // θ=90°: q_B(−π/2) = −p_B, so the sum combination is Var(p_A − p_B).
    let pp = quarter(s1_90.diff_var, s1_90.sum_var);
    // Set 2 θ=0: q_B(−π/2) = −p_B, so sum = Var(x_A − p_B).
    let xa_pb = quarter(s2_0.diff_var, s2_0.sum_var);
    // Set 2 θ=90°: q_A = p_A, q_B(0) = x_B, sum = Var(p_A + x_B).
    let xb_pa = quarter(s2_90.sum_var, s2_90.diff_var);

    let entries: [[Option<f64>; 4]; 4] = [
        [Some(var_x_a), None, Some(xx), Some(xa_pb)],
        [None, Some(var_p_a), Some(xb_pa), Some(pp)],
        [Some(xx), Some(xb_pa), Some(var_x_b), None],
        [Some(xa_pb), Some(pp), None, Some(var_p_b)],
    ];
    let template = CovarianceTemplate::from_entries(entries)?;

    let comb_se = |r: &TomographyRow| (r.sum_stderr.powi(2) + r.diff_stderr.powi(2)).sqrt() / 4.0;
    let xx_se = comb_se(s1_0);
    let pp_se = comb_se(s1_90);
    let xapb_se = comb_se(s2_0);
    let xbpa_se = comb_se(s2_90);
    let entry_stderr = [
        [s1_0.var_a_stderr, 0.0, xx_se, xapb_se],
        [0.0, s1_90.var_a_stderr, xbpa_se, pp_se],
        [xx_se, xbpa_se, s1_0.var_b_stderr, 0.0],
        [xapb_se, pp_se, 0.0, s1_90.var_b_stderr],
    ];
    Ok(Reconstruction {
        template,
        entry_stderr,
    })
}

/// Phase-fluctuation fit result, degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub sigma1_deg: f64,
    pub sigma2_deg: f64,
    /// 95% confidence intervals.
    pub ci1_deg: (f64, f64),
    pub ci2_deg: (f64, f64),
    pub residual_norm: f64,
    pub iterations: usize,
}

/// The four single-mode squeezing spectra extracted from the cardinal
/// tomography datasets, in dB relative to shot noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FourSpectra {
    pub freq_hz: Vec<f64>,
    pub direct_squeezed_db: Vec<f64>,
    pub direct_anti_db: Vec<f64>,
    pub delay_squeezed_db: Vec<f64>,
    pub delay_anti_db: Vec<f64>,
}

impl FourSpectra {
    pub fn from_estimates(
        direct_squeezed: &SpectrumEstimate,
        direct_anti: &SpectrumEstimate,
        delay_squeezed: &SpectrumEstimate,
        delay_anti: &SpectrumEstimate,
    ) -> Result<Self> {
        let f = &direct_squeezed.freq_hz;
        for other in [direct_anti, delay_squeezed, delay_anti] {
            if other.freq_hz != *f {
                return Err(Error::TraceMismatch(
                    "squeezing spectra live on different frequency grids".into(),
                ));
            }
        }
        Ok(Self {
            freq_hz: f.clone(),
            direct_squeezed_db: direct_squeezed.variance_db.clone(),
            direct_anti_db: direct_anti.variance_db.clone(),
            delay_squeezed_db: delay_squeezed.variance_db.clone(),
            delay_anti_db: delay_anti.variance_db.clone(),
        })
    }

    /// Restricts all spectra to `lo..=hi` Hz.
    pub fn band(&self, lo: f64, hi: f64) -> Self {
        let keep: Vec<usize> = (0..self.freq_hz.len())
            .filter(|&i| self.freq_hz[i] >= lo && self.freq_hz[i] <= hi)
            .collect();
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            freq_hz: pick(&self.freq_hz),
            direct_squeezed_db: pick(&self.direct_squeezed_db),
            direct_anti_db: pick(&self.direct_anti_db),
            delay_squeezed_db: pick(&self.delay_squeezed_db),
            delay_anti_db: pick(&self.delay_anti_db),
        }
    }
}

/// Unpumped (seed-only) spectra of the two lines, shot-normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnpumpedPair {
    pub freq_hz: Vec<f64>,
    pub direct_rel: Vec<f64>,
    pub delay_rel: Vec<f64>,
}

impl UnpumpedPair {
    /// Delay-line excess above the direct line, clipped at zero.
    pub fn excess_at(&self, f: f64) -> f64 {
        if self.freq_hz.is_empty() {
            return 0.0;
        }
        let interp = |ys: &[f64]| {
            let xs = &self.freq_hz;
            if f <= xs[0] {
                return ys[0];
            }
            if f >= xs[xs.len() - 1] {
                return ys[ys.len() - 1];
            }
            let idx = xs.partition_point(|&v| v < f);
            let (x0, x1) = (xs[idx - 1], xs[idx]);
            let (y0, y1) = (ys[idx - 1], ys[idx]);
            y0 + (y1 - y0) * (f - x0) / (x1 - x0)
        };
        (interp(&self.delay_rel) - interp(&self.direct_rel)).max(0.0)
    }

    pub fn none() -> Self {
        Self {
            freq_hz: Vec::new(),
            direct_rel: Vec::new(),
            delay_rel: Vec::new(),
        }
    }
}

fn jitter_weight(sigma: f64, mode: JitterAverage) -> f64 {
    let damping = match mode {
        JitterAverage::Approximate => (2.0 * sigma).cos(),
        JitterAverage::Exact => (-2.0 * sigma * sigma).exp(),
    };
    0.5 * (1.0 + damping)
}

/// Model of the four spectra (dB) for phase fluctuations `(σ₁, σ₂)`:
/// direct-squeezed, direct-anti, delay-squeezed, delay-anti blocks.
fn four_spectra_model(
    freq_hz: &[f64],
    opo: &OpoParams,
    seed: &SeedNoiseModel,
    unpumped: &UnpumpedPair,
    sigma1: f64,
    sigma2: f64,
    mode: JitterAverage,
) -> Vec<f64> {
    let weights = [jitter_weight(sigma1, mode), jitter_weight(sigma2, mode)];
    let mut out = Vec::with_capacity(4 * freq_hz.len());
    for (line, &w) in weights.iter().enumerate() {
        for anti in [false, true] {
            for &f in freq_hz {
                let omega = std::f64::consts::TAU * f;
                let excess = if line == 1 { unpumped.excess_at(f) } else { 0.0 };
                let sx = output_spectrum(opo, seed, omega, Quadrature::X) + excess;
                let sp = output_spectrum(opo, seed, omega, Quadrature::P) + excess;
                let v = if anti {
                    w * sp + (1.0 - w) * sx
                } else {
                    w * sx + (1.0 - w) * sp
                };
                out.push(10.0 * v.log10());
            }
        }
    }
    out
}

/// The model's four squeezing spectra at given phase-fluctuation widths
/// (radians), in the same layout as the measured [`FourSpectra`].
pub fn model_four_spectra(
    freq_hz: &[f64],
    opo: &OpoParams,
    seed: &SeedNoiseModel,
    unpumped: &UnpumpedPair,
    sigma1: f64,
    sigma2: f64,
    mode: JitterAverage,
) -> FourSpectra {
    let flat = four_spectra_model(freq_hz, opo, seed, unpumped, sigma1, sigma2, mode);
    let nb = freq_hz.len();
    FourSpectra {
        freq_hz: freq_hz.to_vec(),
        direct_squeezed_db: flat[..nb].to_vec(),
        direct_anti_db: flat[nb..2 * nb].to_vec(),
        delay_squeezed_db: flat[2 * nb..3 * nb].to_vec(),
        delay_anti_db: flat[3 * nb..].to_vec(),
    }
}

/// Parses a table previously written by [`rows_to_csv`].
pub fn rows_from_csv(text: &str) -> Result<Vec<TomographyRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 11 {
            return Err(Error::Data(format!(
                "tomography table line {}: expected 11 columns, got {}",
                lineno + 1,
                cols.len()
            )));
        }
        let set = match cols[0] {
            "set1" => AngleSet::Set1,
            "set2" => AngleSet::Set2,
            other => return Err(Error::Data(format!("unknown angle set `{other}`"))),
        };
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad number `{}`", lineno + 1, cols[i])))
        };
        rows.push(TomographyRow {
            set,
            theta: num(1)?.to_radians(),
            freq_hz: num(2)? * 1e6,
            sum_var: num(3)?,
            diff_var: num(4)?,
            sum_stderr: num(7)?,
            diff_stderr: num(8)?,
            var_a: num(9)?,
            var_b: num(10)?,
            var_a_stderr: 0.0,
            var_b_stderr: 0.0,
        });
    }
    Ok(rows)
}

fn measured_vector(spectra: &FourSpectra) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 * spectra.freq_hz.len());
    v.extend_from_slice(&spectra.direct_squeezed_db);
    v.extend_from_slice(&spectra.direct_anti_db);
    v.extend_from_slice(&spectra.delay_squeezed_db);
    v.extend_from_slice(&spectra.delay_anti_db);
    v
}

/// Least-squares fit of the phase-fluctuation widths `(σ₁, σ₂)` to the four
/// measured squeezing spectra, unweighted in dB space.
///
/// The fit runs in `u = σ²` space (the model stays smooth and
/// non-degenerate there even at σ = 0) with a Levenberg–Marquardt
/// iteration; 95% confidence intervals come from the linearized covariance
/// at the optimum, mapped back through σ = √u.
///
/// A deterministic phase offset δ is indistinguishable from jitter in
/// these spectra, so on data carrying both the fit returns the total
/// spread, `σ_fit ≈ √(σ² + δ²)`.
pub fn fit_phase_sigma(
    measured: &FourSpectra,
    opo: &OpoParams,
    seed: &SeedNoiseModel,
    unpumped: &UnpumpedPair,
    mode: JitterAverage,
) -> Result<FitResult> {
    let y = measured_vector(measured);
    let n = y.len();
    if n < 4 {
        return Err(Error::EmptyGrid);
    }
    let residuals = |u: [f64; 2]| -> Vec<f64> {
        four_spectra_model(
            &measured.freq_hz,
            opo,
            seed,
            unpumped,
            u[0].max(0.0).sqrt(),
            u[1].max(0.0).sqrt(),
            mode,
        )
        .iter()
        .zip(&y)
        .map(|(m, d)| m - d)
        .collect()
    };
    let ssr = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    // Start away from the σ = 0 stationary point of the σ-parametrization.
    let mut u = [(3.0_f64.to_radians()).powi(2); 2];
    let mut r = residuals(u);
    let mut cost = ssr(&r);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut jtj = [[0.0; 2]; 2];
    for _ in 0..200 {
        iterations += 1;
        let mut jac = vec![[0.0; 2]; n];
        for p in 0..2 {
            let h = 1e-8_f64.max(u[p].abs() * 1e-4);
            let mut up = u;
            up[p] += h;
            let rp = residuals(up);
            for i in 0..n {
                jac[i][p] = (rp[i] - r[i]) / h;
            }
        }
        jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for row in 0..n {
            for p in 0..2 {
                jtr[p] += jac[row][p] * r[row];
                for q in 0..2 {
                    jtj[p][q] += jac[row][p] * jac[row][q];
                }
            }
        }
        let mut improved = false;
        let mut converged = false;
        for _ in 0..30 {
            let a = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let step = [
                -(a[1][1] * jtr[0] - a[0][1] * jtr[1]) / det,
                -(-a[1][0] * jtr[0] + a[0][0] * jtr[1]) / det,
            ];
            let candidate = [(u[0] + step[0]).max(0.0), (u[1] + step[1]).max(0.0)];
            let rc = residuals(candidate);
            let cc = ssr(&rc);
            if cc <= cost {
                let delta = (candidate[0] - u[0]).abs() + (candidate[1] - u[1]).abs();
                u = candidate;
                r = rc;
                cost = cc;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                converged = delta < 1e-14;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !improved || converged {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(Error::FitDiverged {
            iterations,
            residual: cost,
        });
    }

    // Linearized 95% CI in u space, mapped through σ = √u. Coverage is
    // preserved by the monotone map.
    let dof = (n as f64 - 2.0).max(1.0);
    let s2 = cost / dof;
    let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
    let (se_u0, se_u1) = if det.abs() > 1e-300 {
        (
            (s2 * jtj[1][1] / det).abs().sqrt(),
            (s2 * jtj[0][0] / det).abs().sqrt(),
        )
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let interval = |ui: f64, se: f64| {
        let lo = (ui - 1.96 * se).max(0.0).sqrt().to_degrees();
        let hi = (ui + 1.96 * se).sqrt().to_degrees();
        (lo, hi)
    };
    Ok(FitResult {
        sigma1_deg: u[0].sqrt().to_degrees(),
        sigma2_deg: u[1].sqrt().to_degrees(),
        ci1_deg: interval(u[0], se_u0),
        ci2_deg: interval(u[1], se_u1),
        residual_norm: cost.sqrt(),
        iterations,
    })
}

/// Wald–Wolfowitz runs-test z statistic for sign randomness of residuals;
/// `|z| < 2.576` corresponds to p > 0.01 two-sided.
pub fn runs_test_z(values: &[f64]) -> f64 {
    let signs: Vec<bool> = values.iter().map(|&v| v >= 0.0).collect();
    let n_pos = signs.iter().filter(|&&s| s).count() as f64;
    let n_neg = signs.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::INFINITY;
    }
    let runs = 1 + signs.windows(2).filter(|w| w[0] != w[1]).count();
    let n = n_pos + n_neg;
    let mean = 2.0 * n_pos * n_neg / n + 1.0;
    let var = (mean - 1.0) * (mean - 2.0) / (n - 1.0);
    (runs as f64 - mean) / var.sqrt()
}

/// Summary record of the criteria evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    /// Duan combination in vacuum units; below 4 certifies inseparability.
    pub duan: f64,
    pub inseparable: bool,
    /// Reid conditional-variance products, vacuum² units.
    pub reid_a_given_b: f64,
    pub reid_b_given_a: f64,
    pub epr_a_given_b: bool,
    pub epr_b_given_a: bool,
    /// Largest shot-noise suppression of the squeezed combination, dB.
    pub max_two_mode_squeezing_db: Option<f64>,
    /// Physicality bounds of the unmeasured covariances.
    pub a_range: Option<(f64, f64)>,
    pub b_range: Option<(f64, f64)>,
    /// Phase-offset point estimate for the unmeasured covariances.
    pub ab_point_estimate: f64,
    pub physical_at_point_estimate: bool,
    pub physical_at_range_endpoints: bool,
    /// Stage efficiencies and their product.
    pub stage_efficiencies: Vec<f64>,
    pub eta_total: f64,
    pub fit: Option<FitResult>,
}

/// Evaluates every report-level criterion on a reconstructed covariance.
///
/// `ab_point_estimate` is the phase-offset prediction for the unmeasured
/// intra-mode covariances; physicality is checked there and at the scanned
/// range endpoints rather than silently assuming zero.
pub fn report(
    template: &CovarianceTemplate,
    squeezed_spectrum: Option<&SpectrumEstimate>,
    fit: Option<FitResult>,
    stage_efficiencies: &[f64],
    ab_point_estimate: f64,
) -> Result<Report> {
    let bounds: BoundScanResult = bound_scan(template, 0.005)?;
    // Duan and Reid do not involve the unknown entries.
    let concrete = template.resolve(ab_point_estimate, ab_point_estimate);
    let duan = concrete.duan_criterion();
    let (reid_ab, reid_ba) = concrete.reid_criterion()?;
    let physical_point = concrete.is_physical(DEFAULT_PHYSICALITY_TOL);

    // Each scanned endpoint must admit a physical completion with the
    // companion unknown optimized; the grid snap sets the tolerance.
    let grid_step = 0.005;
    let window = 3.0 * (0..4)
        .map(|i| template.resolve(0.0, 0.0).entry(i, i))
        .fold(0.0, f64::max);
    let physical_endpoints = match (bounds.a_range, bounds.b_range) {
        (Some((a_lo, a_hi)), Some((b_lo, b_hi))) => {
            [
                (Some(a_lo), None),
                (Some(a_hi), None),
                (None, Some(b_lo)),
                (None, Some(b_hi)),
            ]
            .iter()
            .all(|&(a, b)| template.best_min_eigenvalue(a, b, window) >= -grid_step)
        }
        _ => false,
    };

    let max_sq = squeezed_spectrum.map(|sp| {
        -sp.variance_db.iter().copied().fold(f64::MAX, f64::min)
    });

    let eta_total = stage_efficiencies.iter().product();
    Ok(Report {
        duan,
        inseparable: duan < 4.0,
        reid_a_given_b: reid_ab,
        reid_b_given_a: reid_ba,
        epr_a_given_b: reid_ab < 1.0,
        epr_b_given_a: reid_ba < 1.0,
        max_two_mode_squeezing_db: max_sq,
        a_range: bounds.a_range,
        b_range: bounds.b_range,
        ab_point_estimate,
        physical_at_point_estimate: physical_point,
        physical_at_range_endpoints: physical_endpoints,
        stage_efficiencies: stage_efficiencies.to_vec(),
        eta_total,
        fit,
    })
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Two-mode state report")?;
        writeln!(f, "---------------------")?;
        writeln!(
            f,
            "Duan combination:      {:.3} V0 (< 4: {})",
            self.duan,
            if self.inseparable {
                "inseparable"
            } else {
                "not certified"
            }
        )?;
        writeln!(
            f,
            "Reid products:         A|B {:.3} V0², B|A {:.3} V0² (EPR: {}, {})",
            self.reid_a_given_b, self.reid_b_given_a, self.epr_a_given_b, self.epr_b_given_a
        )?;
        if let Some(db) = self.max_two_mode_squeezing_db {
            writeln!(f, "Max two-mode squeezing: {db:.2} dB below shot noise")?;
        }
        match (self.a_range, self.b_range) {
            (Some((alo, ahi)), Some((blo, bhi))) => {
                writeln!(
                    f,
                    "Allowed ⟨xA pA⟩ ∈ [{alo:.3}, {ahi:.3}], ⟨xB pB⟩ ∈ [{blo:.3}, {bhi:.3}] V0"
                )?;
            }
            _ => writeln!(f, "No physical completion of the unmeasured covariances")?,
        }
        writeln!(
            f,
            "Point estimate a = b = {:.4} V0; physical: {} (range endpoints: {})",
            self.ab_point_estimate, self.physical_at_point_estimate, self.physical_at_range_endpoints
        )?;
        let stages = self
            .stage_efficiencies
            .iter()
            .map(|e| format!("{e:.2}"))
            .collect::<Vec<_>>()
            .join(" · ");
        writeln!(f, "Efficiency budget:     {stages} = {:.3}", self.eta_total)?;
        if let Some(fit) = &self.fit {
            writeln!(
                f,
                "Phase fluctuations:    σ1 = {:.2}° (95% CI {:.2}–{:.2}°), σ2 = {:.2}° (95% CI {:.2}–{:.2}°)",
                fit.sigma1_deg,
                fit.ci1_deg.0,
                fit.ci1_deg.1,
                fit.sigma2_deg,
                fit.ci2_deg.0,
                fit.ci2_deg.1
            )?;
        }
        Ok(())
    }
}
