//! Trigger-aligned homodyne time traces and their on-disk format.
//!
//! A `TraceSet` is persisted as a little-endian `f64` blob (`<stem>.f64`)
//! plus a JSON sidecar header (`<stem>.json`) carrying kind, sample rate,
//! shape, switching metadata and the master seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switching and extraction timing of the multiplexed source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchTiming {
    /// Switch frequency, Hz.
    pub switch_frequency: f64,
    /// Length of one routed window, s; equals `1/(2·switch_frequency)`.
    pub window_length: f64,
    /// Extracted trace length within the window, s.
    pub extract_length: f64,
    /// Traces per measurement set.
    pub traces_per_set: usize,
}

impl Default for SwitchTiming {
    fn default() -> Self {
        Self {
            switch_frequency: 5.0e5,
            window_length: 1.0e-6,
            extract_length: 900.0e-9,
            traces_per_set: 16_000,
        }
    }
}

impl SwitchTiming {
    pub fn validate(&self) -> Result<()> {
        if !(self.switch_frequency > 0.0) {
            return Err(Error::InvalidParameter {
                name: "switch_frequency",
                reason: format!("must be positive, got {}", self.switch_frequency),
            });
        }
        let expected_window = 1.0 / (2.0 * self.switch_frequency);
        if (self.window_length - expected_window).abs() > 1e-15 * expected_window.max(1.0) {
            return Err(Error::InvalidParameter {
                name: "window_length",
                reason: format!(
                    "must equal 1/(2·switch_frequency) = {expected_window}, got {}",
                    self.window_length
                ),
            });
        }
        if !(self.extract_length > 0.0) || self.extract_length > self.window_length {
            return Err(Error::InvalidParameter {
                name: "extract_length",
                reason: format!(
                    "must lie in (0, window_length = {}], got {}",
                    self.window_length, self.extract_length
                ),
            });
        }
        if self.traces_per_set == 0 {
            return Err(Error::InvalidParameter {
                name: "traces_per_set",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Samples per extracted trace at the given rate.
    pub fn samples_per_trace(&self, sample_rate: f64) -> usize {
        (self.extract_length * sample_rate).round() as usize
    }

    /// Timing whose extraction window spans exactly `n_samples` at the
    /// given rate, for wrapping externally produced traces.
    pub fn for_trace(n_samples: usize, sample_rate: f64, traces_per_set: usize) -> Self {
        let extract = n_samples as f64 / sample_rate;
        Self {
            switch_frequency: 1.0 / (2.0 * extract),
            window_length: extract,
            extract_length: extract,
            traces_per_set,
        }
    }
}

/// One damped-sinusoid component of the switch-synchronized ripple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RippleComponent {
    /// Amplitude in shot-noise σ units.
    pub amplitude: f64,
    /// Oscillation frequency, Hz.
    pub frequency: f64,
    /// Exponential decay rate, 1/s.
    pub decay_rate: f64,
    /// Phase at the window start, radians.
    pub phase: f64,
}

/// Detector and switching artifacts riding on every trace.
///
/// Amplitudes are in units of the shot-noise standard deviation; the slope
/// is per second of trace time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactModel {
    /// Constant offset from the transmitted coherent seed.
    pub coherent_offset: f64,
    /// Mean slope of the decaying detector response, σ/s.
    pub slope_decay: f64,
    /// Per-trace slope spread from spurious interference, σ/s.
    pub slope_jitter_sigma: f64,
    /// Repeating waveform synchronized with the switching.
    pub ripple: Vec<RippleComponent>,
    /// Electronic noise floor relative to shot noise, dB (negative).
    pub electronic_noise_db: f64,
}

impl Default for ArtifactModel {
    fn default() -> Self {
        Self {
            coherent_offset: 5.0,
            slope_decay: -4.0e6,
            slope_jitter_sigma: 1.0e6,
            ripple: vec![
                RippleComponent {
                    amplitude: 0.7,
                    frequency: 2.3e6,
                    decay_rate: 2.5e6,
                    phase: 0.4,
                },
                RippleComponent {
                    amplitude: 0.35,
                    frequency: 5.6e6,
                    decay_rate: 1.2e6,
                    phase: 1.1,
                },
            ],
            electronic_noise_db: -20.0,
        }
    }
}

impl ArtifactModel {
    /// Artifact-free model with only the electronic floor kept.
    pub fn clean(electronic_noise_db: f64) -> Self {
        Self {
            coherent_offset: 0.0,
            slope_decay: 0.0,
            slope_jitter_sigma: 0.0,
            ripple: Vec::new(),
            electronic_noise_db,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.electronic_noise_db < 0.0) {
            return Err(Error::InvalidParameter {
                name: "electronic_noise_db",
                reason: format!("must be below 0 dB, got {}", self.electronic_noise_db),
            });
        }
        if self.slope_jitter_sigma < 0.0 {
            return Err(Error::InvalidParameter {
                name: "slope_jitter_sigma",
                reason: "must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Electronic-noise amplitude in shot-σ units.
    pub fn electronic_amplitude(&self) -> f64 {
        10.0_f64.powf(self.electronic_noise_db / 20.0)
    }

    /// The deterministic ripple waveform sampled on the trace grid.
    pub fn ripple_waveform(&self, n_samples: usize, sample_rate: f64) -> Vec<f64> {
        let dt = 1.0 / sample_rate;
        (0..n_samples)
            .map(|i| {
                let t = i as f64 * dt;
                self.ripple
                    .iter()
                    .map(|c| {
                        c.amplitude
                            * (-c.decay_rate * t).exp()
                            * (std::f64::consts::TAU * c.frequency * t + c.phase).sin()
                    })
                    .sum()
            })
            .collect()
    }
}

/// What a trace set contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Signal,
    ShotNoise,
    Electronic,
}

/// Ensemble of trigger-aligned traces, row-major `n_traces × n_samples`,
/// in detector units where the shot-noise standard deviation is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    samples: Vec<f64>,
    n_traces: usize,
    n_samples: usize,
    pub sample_rate: f64,
    pub timing: SwitchTiming,
    pub kind: TraceKind,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    kind: TraceKind,
    sample_rate: f64,
    n_traces: usize,
    n_samples: usize,
    timing: SwitchTiming,
    seed: u64,
}

impl TraceSet {
    pub fn new(
        samples: Vec<f64>,
        n_traces: usize,
        n_samples: usize,
        sample_rate: f64,
        timing: SwitchTiming,
        kind: TraceKind,
        seed: u64,
    ) -> Result<Self> {
        if samples.len() != n_traces * n_samples {
            return Err(Error::TraceMismatch(format!(
                "sample buffer holds {} values, expected {}×{}",
                samples.len(),
                n_traces,
                n_samples
            )));
        }
        if n_samples != timing.samples_per_trace(sample_rate) {
            return Err(Error::TraceMismatch(format!(
                "{} samples per trace, but the {} ns extraction window at {} MS/s implies {}",
                n_samples,
                timing.extract_length * 1e9,
                sample_rate / 1e6,
                timing.samples_per_trace(sample_rate)
            )));
        }
        Ok(Self {
            samples,
            n_traces,
            n_samples,
            sample_rate,
            timing,
            kind,
            seed,
        })
    }

    pub fn n_traces(&self) -> usize {
        self.n_traces
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn trace(&self, index: usize) -> &[f64] {
        let start = index * self.n_samples;
        &self.samples[start..start + self.n_samples]
    }

    pub fn trace_mut(&mut self, index: usize) -> &mut [f64] {
        let start = index * self.n_samples;
        &mut self.samples[start..start + self.n_samples]
    }

    pub fn traces(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.n_samples)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    /// Grand per-sample variance over the whole set (mean removed).
    pub fn total_variance(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        self.samples
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n
    }

    // Extensions are appended (not swapped in) because stems may contain
    // dots, e.g. `sig_set1_theta022.50_a`.
    fn blob_path(stem: &Path) -> PathBuf {
        let mut os = stem.as_os_str().to_owned();
        os.push(".f64");
        PathBuf::from(os)
    }

    fn sidecar_path(stem: &Path) -> PathBuf {
        let mut os = stem.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os)
    }

    /// Writes `<stem>.f64` (little-endian doubles) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        let header = SidecarHeader {
            kind: self.kind,
            sample_rate: self.sample_rate,
            n_traces: self.n_traces,
            n_samples: self.n_samples,
            timing: self.timing,
            seed: self.seed,
        };
        fs::write(
            Self::sidecar_path(stem),
            serde_json::to_string_pretty(&header)?,
        )?;
        let mut writer = BufWriter::new(fs::File::create(Self::blob_path(stem))?);
        for value in &self.samples {
            writer.write_all(&value.to_le_bytes())?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: SidecarHeader =
            serde_json::from_str(&fs::read_to_string(Self::sidecar_path(stem))?)?;
        let bytes = fs::read(Self::blob_path(stem))?;
        let expected = header.n_traces * header.n_samples * 8;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "{}: blob holds {} bytes, header implies {}",
                Self::blob_path(stem).display(),
                bytes.len(),
                expected
            )));
        }
        let samples = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
            .collect();
        Self::new(
            samples,
            header.n_traces,
            header.n_samples,
            header.sample_rate,
            header.timing,
            header.kind,
            header.seed,
        )
    }

    /// CSV export (one row per trace) for small sets.
    pub fn to_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for trace in self.traces() {
            let row = trace
                .iter()
                .map(|v| format!("{v:.9e}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}
