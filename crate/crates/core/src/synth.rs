//! Synthetic homodyne trace generation.
//!
//! Every trace row is generated from its own counter-based RNG substream
//! derived from `(master_seed, set_id, trace_index, channel)`, so parallel
//! generation is order-independent and bit-reproducible for a fixed
//! configuration.
//!
//! Quadrature noise is realized in the frequency domain: Hermitian complex
//! Gaussians shaped by the target spectral density on the trace's own DFT
//! grid, inverse-transformed to a real trace. Traces are expressed in
//! detector units with shot-noise standard deviation 1, so a flat target
//! density of 1 reproduces shot noise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::network::{interfere, measured_quadrature, MeasurementAngles, PathState};
use crate::opo::{output_spectrum, NoiseShape, OpoParams, Quadrature, SeedNoiseModel};
use crate::trace::{ArtifactModel, SwitchTiming, TraceKind, TraceSet};

/// Reserved dataset ids for the calibration sets.
pub const SET_ID_SHOT: u64 = u64::MAX - 1;
pub const SET_ID_ELECTRONIC: u64 = u64::MAX - 2;

// Per-trace RNG channels.
const CH_PATH1_X: u64 = 0;
const CH_PATH1_P: u64 = 1;
const CH_PATH2_X: u64 = 2;
const CH_PATH2_P: u64 = 3;
const CH_ANGLES: u64 = 4;
const CH_SLOPE: u64 = 5;
const CH_ELEC_A: u64 = 6;
const CH_ELEC_B: u64 = 7;
const N_CHANNELS: u64 = 8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one dataset within a master-seeded campaign.
pub fn dataset_seed(master_seed: u64, set_id: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(set_id))
}

/// Substream RNG for `(dataset seed, trace index, channel)`.
fn substream(set_seed: u64, trace: usize, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(set_seed);
    rng.set_stream((trace as u64) * N_CHANNELS + channel);
    rng
}

/// A spectral density tabulated over frequency, relative to shot noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    pub freq_hz: Vec<f64>,
    pub value: Vec<f64>,
}

impl Psd {
    pub fn new(freq_hz: Vec<f64>, value: Vec<f64>) -> Result<Self> {
        if freq_hz.is_empty() || freq_hz.len() != value.len() {
            return Err(Error::EmptyGrid);
        }
        if value.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter {
                name: "psd",
                reason: "spectral density must be non-negative".into(),
            });
        }
        Ok(Self { freq_hz, value })
    }

    pub fn flat(level: f64, f_max_hz: f64) -> Self {
        Self {
            freq_hz: vec![0.0, f_max_hz],
            value: vec![level, level],
        }
    }

    /// Linear interpolation onto the one-sided DFT grid of an `n`-sample
    /// trace (bins `0..=n/2`), clamped at the table ends.
    pub fn resample_to_bins(&self, n_samples: usize, sample_rate: f64) -> Vec<f64> {
        let df = sample_rate / n_samples as f64;
        (0..=n_samples / 2)
            .map(|m| interp_clamped(&self.freq_hz, &self.value, m as f64 * df))
            .collect()
    }
}

fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
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

/// Frequency-domain Gaussian noise shaper for a fixed trace length.
struct NoiseShaper {
    n: usize,
    /// √(n·S[m]) for the self-conjugate bins, √(n·S[m]/2) otherwise.
    amps: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
}

impl NoiseShaper {
    fn new(bins: &[f64], n: usize, planner: &mut FftPlanner<f64>) -> Self {
        assert_eq!(bins.len(), n / 2 + 1, "one-sided grid must have n/2+1 bins");
        let nf = n as f64;
        let amps = bins
            .iter()
            .enumerate()
            .map(|(m, &s)| {
                let self_conjugate = m == 0 || (n % 2 == 0 && m == n / 2);
                if self_conjugate {
                    (nf * s).sqrt()
                } else {
                    (nf * s / 2.0).sqrt()
                }
            })
            .collect();
        Self {
            n,
            amps,
            ifft: planner.plan_fft_inverse(n),
        }
    }

    /// Draws one real trace into `out`, consuming 2 normals per interior bin.
    fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let n = self.n;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[0] = Complex64::new(self.amps[0] * rng.sample::<f64, _>(StandardNormal), 0.0);
        for m in 1..=n / 2 {
            if n % 2 == 0 && m == n / 2 {
                buf[m] = Complex64::new(self.amps[m] * rng.sample::<f64, _>(StandardNormal), 0.0);
            } else {
                let z = Complex64::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ) * self.amps[m];
                buf[m] = z;
                buf[n - m] = z.conj();
            }
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
}

/// Real Gaussian trace whose ensemble periodogram converges to `target_psd`
/// (relative-to-shot units on an arbitrary frequency grid, linearly
/// resampled onto the trace's DFT bins).
pub fn colored_noise(
    target_psd: &Psd,
    n_samples: usize,
    sample_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let bins = target_psd.resample_to_bins(n_samples, sample_rate);
    let mut planner = FftPlanner::new();
    let shaper = NoiseShaper::new(&bins, n_samples, &mut planner);
    let mut out = vec![0.0; n_samples];
    shaper.sample(rng, &mut out);
    out
}

/// Everything needed to synthesize one matched pair of station trace sets.
#[derive(Debug, Clone)]
pub struct SynthJob {
    pub opo: OpoParams,
    pub seed_model: SeedNoiseModel,
    /// Direct and delay path parameters. Only `eta`, `phase_offset` and
    /// `phase_jitter_sigma` enter here; the quadrature spectra come from the
    /// OPO model with the path efficiency substituted.
    pub paths: [PathState; 2],
    /// Pump-independent technical noise added to both delay-path quadrature
    /// spectra.
    pub delay_excess: NoiseShape,
    pub angles: MeasurementAngles,
    pub timing: SwitchTiming,
    pub artifacts: ArtifactModel,
    pub sample_rate: f64,
    pub master_seed: u64,
    pub set_id: u64,
}

impl SynthJob {
    pub fn n_samples(&self) -> usize {
        self.timing.samples_per_trace(self.sample_rate)
    }

    /// One-sided DFT bin frequencies of the trace grid, Hz.
    pub fn bin_frequencies(&self) -> Vec<f64> {
        let n = self.n_samples();
        let df = self.sample_rate / n as f64;
        (0..=n / 2).map(|m| m as f64 * df).collect()
    }

    /// Per-path squeezed/anti-squeezed bin spectra `(s_x, s_p)`, shot units.
    pub fn path_bin_spectra(&self) -> [(Vec<f64>, Vec<f64>); 2] {
        let freqs = self.bin_frequencies();
        std::array::from_fn(|path| {
            let mut opo = self.opo;
            opo.eta = self.paths[path].eta;
            let excess = |f: f64| {
                if path == 1 {
                    self.delay_excess.excess_rel(f)
                } else {
                    0.0
                }
            };
            let sx = freqs
                .iter()
                .map(|&f| {
                    output_spectrum(
                        &opo,
                        &self.seed_model,
                        std::f64::consts::TAU * f,
                        Quadrature::X,
                    ) + excess(f)
                })
                .collect();
            let sp = freqs
                .iter()
                .map(|&f| {
                    output_spectrum(
                        &opo,
                        &self.seed_model,
                        std::f64::consts::TAU * f,
                        Quadrature::P,
                    ) + excess(f)
                })
                .collect();
            (sx, sp)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.opo.validate()?;
        self.timing.validate()?;
        self.artifacts.validate()?;
        for p in &self.paths {
            p.validate()?;
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::InvalidParameter {
                name: "sample_rate",
                reason: "must be positive".into(),
            });
        }
        let n = self.n_samples();
        if n < 3 {
            return Err(Error::InvalidParameter {
                name: "sample_rate",
                reason: format!("traces of {n} samples are too short"),
            });
        }
        Ok(())
    }
}

/// Synthesizes the matched pair of station trace sets for one dataset.
///
/// Per trace: path phases are drawn as `offset + N(0, σᵢ²)`, four quadrature
/// traces are shaped from the path spectra, rotated, interfered and
/// projected onto the station angles; then the coherent offset with its
/// per-trace slope, the switch ripple and the electronic floor are added.
pub fn synthesize_quadrature_traces(job: &SynthJob) -> Result<(TraceSet, TraceSet)> {
    job.validate()?;
    let n = job.n_samples();
    let n_traces = job.timing.traces_per_set;
    let dt = 1.0 / job.sample_rate;
    let set_seed = dataset_seed(job.master_seed, job.set_id);

    let mut planner = FftPlanner::new();
    let spectra = job.path_bin_spectra();
    let shapers: [[NoiseShaper; 2]; 2] = [
        [
            NoiseShaper::new(&spectra[0].0, n, &mut planner),
            NoiseShaper::new(&spectra[0].1, n, &mut planner),
        ],
        [
            NoiseShaper::new(&spectra[1].0, n, &mut planner),
            NoiseShaper::new(&spectra[1].1, n, &mut planner),
        ],
    ];
    let ripple = job.artifacts.ripple_waveform(n, job.sample_rate);
    let elec_amp = job.artifacts.electronic_amplitude();

    let mut a_samples = vec![0.0; n_traces * n];
    let mut b_samples = vec![0.0; n_traces * n];

    a_samples
        .par_chunks_mut(n)
        .zip(b_samples.par_chunks_mut(n))
        .enumerate()
        .for_each(|(k, (row_a, row_b))| {
            let mut quads = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let channels = [CH_PATH1_X, CH_PATH1_P, CH_PATH2_X, CH_PATH2_P];
            for (q, &ch) in quads.iter_mut().zip(&channels) {
                let mut rng = substream(set_seed, k, ch);
                let (path, quad) = ((ch / 2) as usize, (ch % 2) as usize);
                shapers[path][quad].sample(&mut rng, q);
            }

            let mut angle_rng = substream(set_seed, k, CH_ANGLES);
            let alpha: [f64; 2] = std::array::from_fn(|i| {
                job.paths[i].phase_offset
                    + job.paths[i].phase_jitter_sigma * angle_rng.sample::<f64, _>(StandardNormal)
            });
            let rot: [(f64, f64); 2] = [alpha[0].sin_cos(), alpha[1].sin_cos()];

            let mut slope_rng = substream(set_seed, k, CH_SLOPE);
            let slope: [f64; 2] = std::array::from_fn(|_| {
                job.artifacts.slope_decay
                    + job.artifacts.slope_jitter_sigma * slope_rng.sample::<f64, _>(StandardNormal)
            });

            let mut elec_a = substream(set_seed, k, CH_ELEC_A);
            let mut elec_b = substream(set_seed, k, CH_ELEC_B);

            for t in 0..n {
                let rotated = |path: usize, x: f64, p: f64| {
                    let (s, c) = rot[path];
                    (x * c - p * s, x * s + p * c)
                };
                let (x1, p1) = rotated(0, quads[0][t], quads[1][t]);
                let (x2, p2) = rotated(1, quads[2][t], quads[3][t]);
                let (qa, qb) = measured_quadrature(interfere([x1, p1, x2, p2]), job.angles);

                let time = t as f64 * dt;
                let base_a = job.artifacts.coherent_offset + slope[0] * time + ripple[t];
                let base_b = job.artifacts.coherent_offset + slope[1] * time + ripple[t];
                row_a[t] = qa + base_a + elec_amp * elec_a.sample::<f64, _>(StandardNormal);
                row_b[t] = qb + base_b + elec_amp * elec_b.sample::<f64, _>(StandardNormal);
            }
        });

    let mk = |samples: Vec<f64>| {
        TraceSet::new(
            samples,
            n_traces,
            n,
            job.sample_rate,
            job.timing,
            TraceKind::Signal,
            job.master_seed,
        )
    };
    Ok((mk(a_samples)?, mk(b_samples)?))
}

/// Synthesizes a calibration trace set: unit-variance white noise plus the
/// electronic floor for `ShotNoise`, the floor alone for `Electronic`.
pub fn synthesize_calibration(
    kind: TraceKind,
    timing: SwitchTiming,
    artifacts: &ArtifactModel,
    sample_rate: f64,
    master_seed: u64,
) -> Result<TraceSet> {
    timing.validate()?;
    artifacts.validate()?;
    let n = timing.samples_per_trace(sample_rate);
    let n_traces = timing.traces_per_set;
    let set_id = match kind {
        TraceKind::ShotNoise => SET_ID_SHOT,
        TraceKind::Electronic => SET_ID_ELECTRONIC,
        TraceKind::Signal => {
            return Err(Error::InvalidParameter {
                name: "kind",
                reason: "signal sets are produced by synthesize_quadrature_traces".into(),
            })
        }
    };
    let set_seed = dataset_seed(master_seed, set_id);
    let elec_amp = artifacts.electronic_amplitude();
    let with_shot = kind == TraceKind::ShotNoise;

    let mut samples = vec![0.0; n_traces * n];
    samples.par_chunks_mut(n).enumerate().for_each(|(k, row)| {
        let mut elec = substream(set_seed, k, CH_ELEC_A);
        if with_shot {
            let mut shot = substream(set_seed, k, CH_PATH1_X);
            for value in row.iter_mut() {
                *value = shot.sample::<f64, _>(StandardNormal)
                    + elec_amp * elec.sample::<f64, _>(StandardNormal);
            }
        } else {
            for value in row.iter_mut() {
                *value = elec_amp * elec.sample::<f64, _>(StandardNormal);
            }
        }
    });

    TraceSet::new(samples, n_traces, n, sample_rate, timing, kind, master_seed)
}
