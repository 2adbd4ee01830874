//! Temporal data processing of trigger-aligned homodyne traces.
//!
//! The chain mirrors the measurement practice: fit and subtract a regression
//! line per trace (removes the decaying detector response and its per-trace
//! variation), subtract the ensemble-average trace (removes the repeating
//! switch noise), then form shot-normalized statistics — ensemble-averaged
//! periodograms of the station sum/difference, and single-frequency temporal
//! modes obtained by mixing each trace with a sine and integrating.
//!
//! Ensemble reductions use fixed-order pairwise summation so results do not
//! depend on thread count.

use std::io::Write as IoWrite;

use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{TraceKind, TraceSet};

const LN10_OVER_10: f64 = std::f64::consts::LN_10 / 10.0;

/// Trace set with processing provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedTraceSet {
    set: TraceSet,
    pub slope_removed: bool,
    pub ripple_removed: bool,
}

impl ProcessedTraceSet {
    /// Wraps a raw set without applying anything.
    pub fn raw(set: TraceSet) -> Self {
        Self {
            set,
            slope_removed: false,
            ripple_removed: false,
        }
    }

    pub fn trace_set(&self) -> &TraceSet {
        &self.set
    }

    pub fn into_inner(self) -> TraceSet {
        self.set
    }
}

/// Subtracts the ordinary-least-squares line `a + b·t` from every trace.
/// Traces must hold at least 3 samples for the 2-parameter fit to leave
/// anything behind.
pub fn slope_remove(set: TraceSet) -> ProcessedTraceSet {
    let mut set = set;
    let n = set.n_samples();
    assert!(n >= 3, "slope removal needs at least 3 samples per trace");
    let u_mean = (n as f64 - 1.0) / 2.0;
    let denom: f64 = (0..n)
        .map(|i| {
            let u = i as f64 - u_mean;
            u * u
        })
        .sum();
    set.samples_mut().par_chunks_mut(n).for_each(|trace| {
        let mean = trace.iter().sum::<f64>() / n as f64;
        let slope = trace
            .iter()
            .enumerate()
            .map(|(i, &y)| (i as f64 - u_mean) * y)
            .sum::<f64>()
            / denom;
        for (i, y) in trace.iter_mut().enumerate() {
            *y -= mean + slope * (i as f64 - u_mean);
        }
    });
    ProcessedTraceSet {
        set,
        slope_removed: true,
        ripple_removed: false,
    }
}

/// Subtracts the ensemble-average trace from every trace. Requires slope
/// removal to have run first.
pub fn ripple_remove(processed: ProcessedTraceSet) -> Result<ProcessedTraceSet> {
    if !processed.slope_removed {
        return Err(Error::Data(
            "ripple removal requires slope-compensated traces".into(),
        ));
    }
    let mut set = processed.set;
    let mean = ensemble_mean_trace(&set);
    let n = set.n_samples();
    set.samples_mut().par_chunks_mut(n).for_each(|trace| {
        for (y, m) in trace.iter_mut().zip(&mean) {
            *y -= m;
        }
    });
    Ok(ProcessedTraceSet {
        set,
        slope_removed: true,
        ripple_removed: true,
    })
}

/// Runs the full processing chain.
pub fn process(set: TraceSet) -> Result<ProcessedTraceSet> {
    ripple_remove(slope_remove(set))
}

/// The ensemble-average trace, accumulated with pairwise summation.
pub fn ensemble_mean_trace(set: &TraceSet) -> Vec<f64> {
    let n = set.n_samples();
    let rows: Vec<&[f64]> = set.traces().collect();
    let mut sums = pairwise_sum_rows(&rows, n);
    let scale = 1.0 / set.n_traces() as f64;
    for s in sums.iter_mut() {
        *s *= scale;
    }
    sums
}

/// Fixed-order pairwise (cascade) sum.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

fn pairwise_sum_rows(rows: &[&[f64]], width: usize) -> Vec<f64> {
    match rows.len() {
        0 => vec![0.0; width],
        1 => rows[0].to_vec(),
        len => {
            let mid = len / 2;
            let left = pairwise_sum_rows(&rows[..mid], width);
            let right = pairwise_sum_rows(&rows[mid..], width);
            left.iter().zip(&right).map(|(a, b)| a + b).collect()
        }
    }
}

fn pairwise_sum_owned(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    pairwise_sum_rows(&refs, width)
}

/// Per-sample-index distribution summary for a trace ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalHistogram {
    pub quantile_levels: Vec<f64>,
    /// `quantiles[level_index][sample_index]`.
    pub quantiles: Vec<Vec<f64>>,
    /// Value-axis bin edges (length `n_bins + 1`) spanning the data range.
    pub value_edges: Vec<f64>,
    /// `counts[sample_index][bin]`.
    pub counts: Vec<Vec<u32>>,
}

pub const DEFAULT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Quantile bands and a 2-D histogram over (sample index, value).
pub fn temporal_histogram(
    set: &TraceSet,
    quantile_levels: &[f64],
    n_value_bins: usize,
) -> TemporalHistogram {
    let n = set.n_samples();
    let n_traces = set.n_traces();
    let (lo, hi) = set
        .samples()
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let edges: Vec<f64> = (0..=n_value_bins)
        .map(|k| lo + span * k as f64 / n_value_bins as f64)
        .collect();

    let per_index: Vec<(Vec<f64>, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut column: Vec<f64> = (0..n_traces).map(|k| set.trace(k)[i]).collect();
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            let quantiles = quantile_levels
                .iter()
                .map(|&q| sorted_quantile(&column, q))
                .collect();
            let mut counts = vec![0u32; n_value_bins];
            for &v in &column {
                let mut bin = ((v - lo) / span * n_value_bins as f64) as usize;
                if bin >= n_value_bins {
                    bin = n_value_bins - 1;
                }
                counts[bin] += 1;
            }
            (quantiles, counts)
        })
        .collect();

    let mut quantiles = vec![vec![0.0; n]; quantile_levels.len()];
    let mut counts = Vec::with_capacity(n);
    for (i, (qs, cs)) in per_index.into_iter().enumerate() {
        for (l, q) in qs.into_iter().enumerate() {
            quantiles[l][i] = q;
        }
        counts.push(cs);
    }
    TemporalHistogram {
        quantile_levels: quantile_levels.to_vec(),
        quantiles,
        value_edges: edges,
        counts,
    }
}

fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let idx = pos.floor() as usize;
    let frac = pos - idx as f64;
    if idx + 1 < sorted.len() {
        sorted[idx] * (1.0 - frac) + sorted[idx + 1] * frac
    } else {
        sorted[idx]
    }
}

impl TemporalHistogram {
    /// Quantile bands as CSV: `sample_index, time_ns, q<level>...`.
    pub fn quantiles_to_csv<W: IoWrite>(&self, sample_rate: f64, mut out: W) -> Result<()> {
        let header = self
            .quantile_levels
            .iter()
            .map(|q| format!("q{:02}", (q * 100.0).round() as u32))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "sample_index,time_ns,{header}")?;
        let n = self.quantiles.first().map_or(0, |q| q.len());
        for i in 0..n {
            let time_ns = i as f64 / sample_rate * 1e9;
            let row = self
                .quantiles
                .iter()
                .map(|q| format!("{:.6e}", q[i]))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{i},{time_ns:.3},{row}")?;
        }
        Ok(())
    }
}

/// One-sided periodogram `|DFT(trace)|²/n` of every trace, averaged with
/// pairwise summation; also returns the standard error of the mean per bin.
pub fn mean_periodogram(traces: &TraceSet) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = periodogram_rows(traces.traces().collect(), traces.n_samples());
    mean_and_se(&rows, traces.n_samples() / 2 + 1)
}

fn periodogram_rows(traces: Vec<&[f64]>, n: usize) -> Vec<Vec<f64>> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    traces
        .into_par_iter()
        .map(|trace| {
            let mut buf: Vec<Complex64> = trace.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            (0..=n / 2).map(|m| buf[m].norm_sqr() / n as f64).collect()
        })
        .collect()
}

fn mean_and_se(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = pairwise_sum_owned(rows, width)
        .into_iter()
        .map(|s| s / n)
        .collect();
    let dev_sq: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .collect()
        })
        .collect();
    let se = pairwise_sum_owned(&dev_sq, width)
        .into_iter()
        .map(|s| (s / (n - 1.0)).sqrt() / n.sqrt())
        .collect();
    (mean, se)
}

/// Mean periodograms of the calibration sets, processed with the same steps
/// as the signal they normalize.
#[derive(Debug, Clone)]
pub struct CalibrationSpectra {
    pub shot: Vec<f64>,
    pub electronic: Vec<f64>,
    pub n_samples: usize,
    pub sample_rate: f64,
}

pub fn calibration_spectra(
    shot: &TraceSet,
    electronic: &TraceSet,
    slope_removed: bool,
    ripple_removed: bool,
) -> Result<CalibrationSpectra> {
    if shot.kind != TraceKind::ShotNoise || electronic.kind != TraceKind::Electronic {
        return Err(Error::TraceMismatch(
            "calibration sets must be shot-noise and electronic kinds".into(),
        ));
    }
    let process = |set: &TraceSet| -> Result<TraceSet> {
        let mut p = ProcessedTraceSet::raw(set.clone());
        if slope_removed {
            p = slope_remove(p.into_inner());
        }
        if ripple_removed {
            p = ripple_remove(p)?;
        }
        Ok(p.into_inner())
    };
    let shot_p = process(shot)?;
    let elec_p = process(electronic)?;
    Ok(CalibrationSpectra {
        shot: mean_periodogram(&shot_p).0,
        electronic: mean_periodogram(&elec_p).0,
        n_samples: shot.n_samples(),
        sample_rate: shot.sample_rate,
    })
}

/// Which station combination to analyze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineSign {
    Sum,
    Diff,
}

/// Variance spectrum relative to shot noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub freq_hz: Vec<f64>,
    pub variance_rel_shot: Vec<f64>,
    pub variance_db: Vec<f64>,
    pub stderr_db: Vec<f64>,
}

impl SpectrumEstimate {
    /// CSV rows `freq_mhz,value_db,stderr_db`.
    pub fn to_csv<W: IoWrite>(&self, mut out: W) -> Result<()> {
        writeln!(out, "freq_mhz,value_db,stderr_db")?;
        for i in 0..self.freq_hz.len() {
            writeln!(
                out,
                "{:.6},{:.6},{:.6}",
                self.freq_hz[i] / 1e6,
                self.variance_db[i],
                self.stderr_db[i]
            )?;
        }
        Ok(())
    }

    /// Parses a spectrum previously written by [`SpectrumEstimate::to_csv`].
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut freq_hz = Vec::new();
        let mut variance_db = Vec::new();
        let mut stderr_db = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Data(format!(
                    "spectrum CSV line {}: expected 3 columns",
                    lineno + 1
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("spectrum CSV line {}: bad number", lineno + 1)))
            };
            freq_hz.push(num(cols[0])? * 1e6);
            variance_db.push(num(cols[1])?);
            stderr_db.push(num(cols[2])?);
        }
        if freq_hz.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let variance_rel_shot = variance_db.iter().map(|db| 10f64.powf(db / 10.0)).collect();
        Ok(Self {
            freq_hz,
            variance_rel_shot,
            variance_db,
            stderr_db,
        })
    }

    /// Value of the bin closest to `freq_hz`, relative to shot.
    pub fn value_at(&self, freq_hz: f64) -> Option<f64> {
        self.freq_hz
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - freq_hz)
                    .abs()
                    .partial_cmp(&(*b - freq_hz).abs())
                    .expect("finite frequencies")
            })
            .map(|(i, _)| self.variance_rel_shot[i])
    }
}

/// Shot-normalized spectrum of `q_A ± q_B`.
///
/// Per trace the two station rows are combined, periodograms are averaged
/// over the ensemble, twice the electronic periodogram is subtracted (two
/// detectors contribute), and the result is divided by `2·(shot −
/// electronic)` so that two vacuum inputs give 0 dB. The calibration sets
/// are pushed through the same processing steps as the signal sets. The DC
/// bin is omitted.
pub fn combined_spectrum(
    set_a: &ProcessedTraceSet,
    set_b: &ProcessedTraceSet,
    sign: CombineSign,
    shot: &TraceSet,
    electronic: &TraceSet,
) -> Result<SpectrumEstimate> {
    let cal = calibration_spectra(shot, electronic, set_a.slope_removed, set_a.ripple_removed)?;
    combined_spectrum_with(set_a, set_b, sign, &cal)
}

pub fn combined_spectrum_with(
    set_a: &ProcessedTraceSet,
    set_b: &ProcessedTraceSet,
    sign: CombineSign,
    cal: &CalibrationSpectra,
) -> Result<SpectrumEstimate> {
    let a = set_a.trace_set();
    let b = set_b.trace_set();
    if a.n_traces() != b.n_traces() || a.n_samples() != b.n_samples() {
        return Err(Error::TraceMismatch(format!(
            "station sets disagree: {}×{} vs {}×{}",
            a.n_traces(),
            a.n_samples(),
            b.n_traces(),
            b.n_samples()
        )));
    }
    if set_a.slope_removed != set_b.slope_removed || set_a.ripple_removed != set_b.ripple_removed {
        return Err(Error::TraceMismatch(
            "station sets were processed differently".into(),
        ));
    }
    if a.n_samples() != cal.n_samples {
        return Err(Error::TraceMismatch(
            "calibration spectra were computed for a different trace length".into(),
        ));
    }
    let n = a.n_samples();
    let combined: Vec<Vec<f64>> = {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        (0..a.n_traces())
            .into_par_iter()
            .map(|k| {
                let ta = a.trace(k);
                let tb = b.trace(k);
                let mut buf: Vec<Complex64> = ta
                    .iter()
                    .zip(tb)
                    .map(|(&x, &y)| {
                        let v = match sign {
                            CombineSign::Sum => x + y,
                            CombineSign::Diff => x - y,
                        };
                        Complex64::new(v, 0.0)
                    })
                    .collect();
                fft.process(&mut buf);
                (0..=n / 2).map(|m| buf[m].norm_sqr() / n as f64).collect()
            })
            .collect()
    };
    let (mean_ab, se_ab) = mean_and_se(&combined, n / 2 + 1);

    let df = cal.sample_rate / n as f64;
    let mut freq_hz = Vec::new();
    let mut rel = Vec::new();
    let mut db = Vec::new();
    let mut se_db = Vec::new();
    for m in 1..=n / 2 {
        let denom = 2.0 * (cal.shot[m] - cal.electronic[m]);
        if !(denom > 0.0) {
            return Err(Error::Data(format!(
                "non-positive shot-noise normalization at bin {m}"
            )));
        }
        let value = (mean_ab[m] - 2.0 * cal.electronic[m]) / denom;
        if !(value > 0.0) {
            return Err(Error::Data(format!(
                "non-positive spectrum after electronic subtraction at bin {m}"
            )));
        }
        freq_hz.push(m as f64 * df);
        rel.push(value);
        db.push(10.0 * value.log10());
        se_db.push(se_ab[m] / denom / value / LN10_OVER_10);
    }
    Ok(SpectrumEstimate {
        freq_hz,
        variance_rel_shot: rel,
        variance_db: db,
        stderr_db: se_db,
    })
}

/// The digital mixing filter `sin(2π f₀ t)·Δt` on the trace grid.
pub fn sine_mode_filter(n_samples: usize, sample_rate: f64, f0: f64) -> Vec<f64> {
    let dt = 1.0 / sample_rate;
    (0..n_samples)
        .map(|i| (std::f64::consts::TAU * f0 * i as f64 * dt).sin() * dt)
        .collect()
}

/// Applies the same projection as [`slope_remove`] to a filter, so that
/// predictions for processed traces can reuse the plain filter algebra.
pub fn detrend_filter(filter: &[f64]) -> Vec<f64> {
    let n = filter.len();
    let u_mean = (n as f64 - 1.0) / 2.0;
    let denom: f64 = (0..n)
        .map(|i| {
            let u = i as f64 - u_mean;
            u * u
        })
        .sum();
    let mean = filter.iter().sum::<f64>() / n as f64;
    let slope = filter
        .iter()
        .enumerate()
        .map(|(i, &y)| (i as f64 - u_mean) * y)
        .sum::<f64>()
        / denom;
    filter
        .iter()
        .enumerate()
        .map(|(i, &y)| y - mean - slope * (i as f64 - u_mean))
        .collect()
}

/// Expected variance of `Σ_t filter[t]·x[t]` for a circularly stationary
/// process with the given one-sided bin spectrum.
pub fn filter_variance(bins_one_sided: &[f64], filter: &[f64]) -> f64 {
    let n = filter.len();
    assert_eq!(bins_one_sided.len(), n / 2 + 1);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex64> = filter.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let mut acc = bins_one_sided[0] * buf[0].norm_sqr();
    for m in 1..=n / 2 {
        let weight = if n % 2 == 0 && m == n / 2 { 1.0 } else { 2.0 };
        acc += weight * bins_one_sided[m] * buf[m].norm_sqr();
    }
    acc / n as f64
}

/// Per-trace sine-mode values `Σ_t trace(t)·sin(2π f₀ t)·Δt`.
pub fn extract_mode_values(set: &TraceSet, f0: f64) -> Result<Vec<f64>> {
    let nyquist = set.sample_rate / 2.0;
    if f0 >= nyquist {
        return Err(Error::AboveNyquist { f0, nyquist });
    }
    let filter = sine_mode_filter(set.n_samples(), set.sample_rate, f0);
    Ok(set
        .traces()
        .map(|tr| tr.iter().zip(&filter).map(|(&y, &f)| y * f).sum())
        .collect())
}

/// Sample variance with a delete-one jackknife standard error.
pub fn variance_with_jackknife_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 3, "jackknife needs at least 3 values");
    let nf = n as f64;
    let s1 = pairwise_sum(values);
    let sq: Vec<f64> = values.iter().map(|&v| v * v).collect();
    let s2 = pairwise_sum(&sq);
    let variance = (s2 - s1 * s1 / nf) / (nf - 1.0);

    // Delete-one variances in closed form.
    let loo: Vec<f64> = values
        .iter()
        .map(|&x| {
            let s1i = s1 - x;
            let s2i = s2 - x * x;
            (s2i - s1i * s1i / (nf - 1.0)) / (nf - 2.0)
        })
        .collect();
    let loo_mean = pairwise_sum(&loo) / nf;
    let dev: Vec<f64> = loo
        .iter()
        .map(|&v| (v - loo_mean) * (v - loo_mean))
        .collect();
    let se = ((nf - 1.0) / nf * pairwise_sum(&dev)).sqrt();
    (variance, se)
}

/// Mode variances of the calibration sets, processed like the signal.
#[derive(Debug, Clone, Copy)]
pub struct ModeCalibration {
    pub shot_var: f64,
    pub electronic_var: f64,
}

pub fn mode_calibration(
    shot: &TraceSet,
    electronic: &TraceSet,
    f0: f64,
    slope_removed: bool,
    ripple_removed: bool,
) -> Result<ModeCalibration> {
    let process = |set: &TraceSet| -> Result<TraceSet> {
        let mut p = ProcessedTraceSet::raw(set.clone());
        if slope_removed {
            p = slope_remove(p.into_inner());
        }
        if ripple_removed {
            p = ripple_remove(p)?;
        }
        Ok(p.into_inner())
    };
    let shot_values = extract_mode_values(&process(shot)?, f0)?;
    let elec_values = extract_mode_values(&process(electronic)?, f0)?;
    let (shot_var, _) = variance_with_jackknife_se(&shot_values);
    let (electronic_var, _) = variance_with_jackknife_se(&elec_values);
    if !(shot_var - electronic_var > 0.0) {
        return Err(Error::Data(
            "shot-noise mode variance does not exceed the electronic floor".into(),
        ));
    }
    Ok(ModeCalibration {
        shot_var,
        electronic_var,
    })
}

/// Result of [`mode_extract`]: per-trace values and the shot-normalized
/// variance of the extracted temporal mode.
#[derive(Debug, Clone)]
pub struct ModeExtraction {
    pub values: Vec<f64>,
    /// Variance in vacuum units (electronic-subtracted, shot-normalized).
    pub variance: f64,
    /// Jackknife standard error of `variance`, same units.
    pub stderr: f64,
}

/// Extracts the `f₀` temporal mode of a processed single-station set and
/// normalizes its variance by identically extracted shot noise, giving
/// vacuum units (shot-noise input → 1).
pub fn mode_extract(
    set: &ProcessedTraceSet,
    f0: f64,
    shot: &TraceSet,
    electronic: &TraceSet,
) -> Result<ModeExtraction> {
    let values = extract_mode_values(set.trace_set(), f0)?;
    let cal = mode_calibration(shot, electronic, f0, set.slope_removed, set.ripple_removed)?;
    let (raw_var, raw_se) = variance_with_jackknife_se(&values);
    let denom = cal.shot_var - cal.electronic_var;
    Ok(ModeExtraction {
        values,
        variance: (raw_var - cal.electronic_var) / denom,
        stderr: raw_se / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ArtifactModel, SwitchTiming};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn set_from_rows(rows: Vec<Vec<f64>>, kind: TraceKind) -> TraceSet {
        let n_traces = rows.len();
        let n = rows[0].len();
        let samples: Vec<f64> = rows.into_iter().flatten().collect();
        let timing = SwitchTiming::for_trace(n, 250.0e6, n_traces);
        TraceSet::new(samples, n_traces, n, 250.0e6, timing, kind, 0).unwrap()
    }

    fn white_set(n_traces: usize, n: usize, sigma: f64, seed: u64, kind: TraceKind) -> TraceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n_traces)
            .map(|_| {
                (0..n)
                    .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        set_from_rows(rows, kind)
    }

    #[test]
    fn slope_remove_zeroes_a_pure_line() {
        let n = 225;
        let rows = vec![(0..n).map(|i| 3.0 + 5.0 * i as f64).collect::<Vec<_>>()];
        let processed = slope_remove(set_from_rows(rows, TraceKind::Signal));
        assert!(processed
            .trace_set()
            .trace(0)
            .iter()
            .all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn slope_remove_preserves_megahertz_content() {
        let n = 225;
        let fs = 250.0e6;
        let demod_change = |f0: f64| {
            let filter = sine_mode_filter(n, fs, f0);
            let sinusoid: Vec<f64> = (0..n)
                .map(|i| (std::f64::consts::TAU * f0 * i as f64 / fs).sin())
                .collect();
            let with_line: Vec<f64> = sinusoid
                .iter()
                .enumerate()
                .map(|(i, &v)| v + 4.0 - 2.0e7 * (i as f64 / fs))
                .collect();
            let clean_amp: f64 = sinusoid.iter().zip(&filter).map(|(a, b)| a * b).sum();
            let processed = slope_remove(set_from_rows(vec![with_line], TraceKind::Signal));
            let after: f64 = processed
                .trace_set()
                .trace(0)
                .iter()
                .zip(&filter)
                .map(|(a, b)| a * b)
                .sum();
            // The line itself must be fully gone: the detrended noisy trace
            // equals the detrended line-free one.
            let reference = slope_remove(set_from_rows(vec![sinusoid], TraceKind::Signal));
            let ref_amp: f64 = reference
                .trace_set()
                .trace(0)
                .iter()
                .zip(&filter)
                .map(|(a, b)| a * b)
                .sum();
            assert_relative_eq!(after, ref_amp, max_relative = 1e-9);
            (after - clean_amp).abs() / clean_amp.abs()
        };
        // Detrending nibbles at the demodulated amplitude through the
        // non-orthogonality of a partial-cycle sine and the fitted line:
        // 2.5 % at 3 MHz (2.7 cycles in the window), below 1 % from 10 MHz
        // (9 cycles) on. The shot normalization passes through the same
        // projection, so variance ratios are unaffected at first order.
        assert!(demod_change(3.0e6) < 0.03);
        assert!(demod_change(10.0e6) < 0.01);
    }

    #[test]
    fn slope_remove_variance_reduction_matches_ols_theory() {
        // Detrending with 2 fitted parameters removes 2/n of white-noise
        // variance in expectation.
        let n = 45;
        let n_traces = 4000;
        let set = white_set(n_traces, n, 1.0, 7, TraceKind::Signal);
        let before = set.total_variance();
        let after = slope_remove(set).into_inner().total_variance();
        let expected = before * (1.0 - 2.0 / n as f64);
        let se = before * (2.0 / ((n_traces * n) as f64)).sqrt();
        assert!(
            (after - expected).abs() < 4.0 * se,
            "after {after}, expected {expected}"
        );
    }

    #[test]
    fn slope_remove_is_idempotent() {
        let set = white_set(50, 225, 1.0, 11, TraceKind::Signal);
        let once = slope_remove(set);
        let twice = slope_remove(once.trace_set().clone());
        for (a, b) in once
            .trace_set()
            .samples()
            .iter()
            .zip(twice.trace_set().samples())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn per_trace_mean_vanishes_after_slope_removal() {
        let mut set = white_set(100, 225, 1.0, 13, TraceKind::Signal);
        for k in 0..set.n_traces() {
            let off = 2.0 + k as f64 * 0.01;
            for v in set.trace_mut(k) {
                *v += off;
            }
        }
        let processed = slope_remove(set);
        for tr in processed.trace_set().traces() {
            let mean = tr.iter().sum::<f64>() / tr.len() as f64;
            let rms = (tr.iter().map(|v| v * v).sum::<f64>() / tr.len() as f64).sqrt();
            assert!(mean.abs() < 1e-9 * rms.max(1e-30));
        }
    }

    #[test]
    fn ripple_remove_cancels_identical_traces() {
        let n = 64;
        let template: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let rows = vec![template.clone(); 10];
        let set = set_from_rows(rows, TraceKind::Signal);
        let processed = ripple_remove(ProcessedTraceSet {
            set,
            slope_removed: true,
            ripple_removed: false,
        })
        .unwrap();
        assert!(processed
            .trace_set()
            .samples()
            .iter()
            .all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ripple_remove_requires_slope_removal() {
        let set = white_set(4, 16, 1.0, 17, TraceKind::Signal);
        assert!(ripple_remove(ProcessedTraceSet::raw(set)).is_err());
    }

    #[test]
    fn ripple_remove_attenuates_common_waveform() {
        let n = 225;
        let n_traces = 4000;
        let mut set = white_set(n_traces, n, 1.0, 19, TraceKind::Signal);
        let ripple = ArtifactModel::default().ripple_waveform(n, 250.0e6);
        let ripple_power: f64 = ripple.iter().map(|v| v * v).sum();
        for k in 0..n_traces {
            for (v, r) in set.trace_mut(k).iter_mut().zip(&ripple) {
                *v += r;
            }
        }
        let processed = ripple_remove(ProcessedTraceSet {
            set,
            slope_removed: true,
            ripple_removed: false,
        })
        .unwrap();
        // Residual common component after subtracting the ensemble mean.
        let mean = ensemble_mean_trace(processed.trace_set());
        let residual_power: f64 = mean.iter().map(|v| v * v).sum();
        assert!(
            residual_power < ripple_power / n_traces as f64 * 50.0,
            "residual {residual_power} vs original {ripple_power}"
        );
    }

    #[test]
    fn ripple_then_slope_commutes_on_slope_free_data() {
        let set = white_set(200, 64, 1.0, 23, TraceKind::Signal);
        let a = ripple_remove(slope_remove(set.clone())).unwrap();
        // Reverse order: mean subtraction first, then detrend.
        let mean = ensemble_mean_trace(&set);
        let mut set2 = set;
        for k in 0..set2.n_traces() {
            for (v, m) in set2.trace_mut(k).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let b = slope_remove(set2);
        for (x, y) in a
            .trace_set()
            .samples()
            .iter()
            .zip(b.trace_set().samples())
        {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn histogram_of_white_noise_has_flat_bands() {
        let set = white_set(3000, 100, 1.0, 29, TraceKind::ShotNoise);
        let h = temporal_histogram(&set, &DEFAULT_QUANTILES, 40);
        let medians = &h.quantiles[2];
        let (lo, hi) = medians
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi - lo < 0.2, "median band spans {lo}..{hi}");
        let q95 = &h.quantiles[4];
        let mean_q95 = q95.iter().sum::<f64>() / q95.len() as f64;
        assert!((mean_q95 - 1.645).abs() < 0.15, "q95 ≈ {mean_q95}");
    }

    #[test]
    fn histogram_of_single_trace_is_the_trace() {
        let rows = vec![(0..50).map(|i| i as f64).collect::<Vec<_>>()];
        let set = set_from_rows(rows, TraceKind::Signal);
        let h = temporal_histogram(&set, &[0.5], 10);
        for (i, &q) in h.quantiles[0].iter().enumerate() {
            assert_relative_eq!(q, i as f64);
        }
    }

    #[test]
    fn vacuum_spectrum_is_flat_at_zero_db() {
        let n_traces = 3000;
        let a = ProcessedTraceSet::raw(white_set(n_traces, 225, 1.0, 31, TraceKind::Signal));
        let b = ProcessedTraceSet::raw(white_set(n_traces, 225, 1.0, 37, TraceKind::Signal));
        let shot = white_set(n_traces, 225, 1.0, 41, TraceKind::ShotNoise);
        let elec = white_set(n_traces, 225, 1e-10, 43, TraceKind::Electronic);
        let sp = combined_spectrum(&a, &b, CombineSign::Sum, &shot, &elec).unwrap();
        for (i, &db) in sp.variance_db.iter().enumerate() {
            assert!(
                db.abs() < 5.0 * sp.stderr_db[i].max(0.05),
                "bin {i}: {db} dB"
            );
        }
    }

    #[test]
    fn combined_spectrum_rejects_mismatched_sets() {
        let a = ProcessedTraceSet::raw(white_set(10, 225, 1.0, 47, TraceKind::Signal));
        let b = ProcessedTraceSet::raw(white_set(11, 225, 1.0, 53, TraceKind::Signal));
        let shot = white_set(10, 225, 1.0, 59, TraceKind::ShotNoise);
        let elec = white_set(10, 225, 0.1, 61, TraceKind::Electronic);
        assert!(combined_spectrum(&a, &b, CombineSign::Sum, &shot, &elec).is_err());
    }

    #[test]
    fn mode_value_of_pure_sine_is_deterministic() {
        let n = 225;
        let fs = 250.0e6;
        // 9 full cycles over 900 ns, exactly on the DFT grid.
        let f0 = 9.0 * fs / n as f64;
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                (0..n)
                    .map(|i| (std::f64::consts::TAU * f0 * i as f64 / fs).sin())
                    .collect()
            })
            .collect();
        let set = set_from_rows(rows, TraceKind::Signal);
        let values = extract_mode_values(&set, f0).unwrap();
        let expected = n as f64 / fs / 2.0; // T/2 with the Δt weight
        for v in &values {
            assert_relative_eq!(*v, expected, max_relative = 1e-9);
        }
        let (var, _) = variance_with_jackknife_se(&values);
        assert!(var.abs() < 1e-30);
    }

    #[test]
    fn mode_extract_rejects_super_nyquist_mixing() {
        let set = white_set(10, 225, 1.0, 67, TraceKind::Signal);
        assert!(extract_mode_values(&set, 130.0e6).is_err());
    }

    #[test]
    fn shot_noise_mode_variance_normalizes_to_one() {
        let n_traces = 6000;
        let shot = white_set(n_traces, 225, 1.0, 71, TraceKind::ShotNoise);
        let elec = white_set(n_traces, 225, 0.1, 73, TraceKind::Electronic);
        let probe = ProcessedTraceSet::raw(shot.clone());
        let got = mode_extract(&probe, 3.0e6, &shot, &elec).unwrap();
        assert_relative_eq!(got.variance, 1.0);
        // An independent shot-level set lands within a few standard errors.
        let other = ProcessedTraceSet::raw(white_set(n_traces, 225, 1.0, 79, TraceKind::Signal));
        let got = mode_extract(&other, 3.0e6, &shot, &elec).unwrap();
        assert!((got.variance - 1.0).abs() < 5.0 * got.stderr);
    }

    #[test]
    fn filter_variance_predicts_mode_variance_of_shaped_noise() {
        use crate::synth::{colored_noise, Psd};
        let n = 225;
        let fs = 250.0e6;
        let freqs: Vec<f64> = (0..=n / 2).map(|m| m as f64 * fs / n as f64).collect();
        let shape: Vec<f64> = freqs
            .iter()
            .map(|&f| 1.0 - 0.55 / (1.0 + (f / 9.0e6).powi(2)))
            .collect();
        let psd = Psd::new(freqs, shape.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let rows: Vec<Vec<f64>> = (0..20000)
            .map(|_| colored_noise(&psd, n, fs, &mut rng))
            .collect();
        let set = set_from_rows(rows, TraceKind::Signal);
        let values = extract_mode_values(&set, 3.0e6).unwrap();
        let (var, se) = variance_with_jackknife_se(&values);
        let filter = sine_mode_filter(n, fs, 3.0e6);
        let predicted = filter_variance(&shape, &filter);
        assert!(
            (var - predicted).abs() < 4.0 * se,
            "var {var} vs predicted {predicted} (se {se})"
        );
    }

    #[test]
    fn pairwise_sum_matches_sequential_on_smooth_data() {
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin()).collect();
        let seq: f64 = values.iter().sum();
        assert_relative_eq!(pairwise_sum(&values), seq, max_relative = 1e-12);
    }
}
