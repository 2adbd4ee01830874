//! Command implementations and the run-directory file layout.
//!
//! Layout written by `simulate` and consumed downstream:
//!
//! ```text
//! profile.toml                      effective experiment profile
//! sig_set1_theta000.00_a.{f64,json} raw station traces per dataset
//! shot_noise.{f64,json}             shot-noise calibration
//! electronic.{f64,json}             electronic-noise calibration
//! proc_set1_theta000.00_a.*         processed traces (after `process`)
//! spec_set1_theta000.00_sum.csv     shot-normalized spectra
//! tomography.csv, covariance.json   analysis outputs
//! fit.json, report.{json,txt}       fit and consolidated report
//! fig_*.csv                         figure data
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use epr_core::config::{read_spectrum_csv, ExperimentConfig};
use epr_core::network::phase_offset_cross_covariance;
use epr_core::opo::JitterAverage;
use epr_core::pipeline::{
    combined_spectrum, process, temporal_histogram, CombineSign, SpectrumEstimate,
    DEFAULT_QUANTILES,
};
use epr_core::synth::synthesize_quadrature_traces;
use epr_core::tomography::{
    dataset_id, fit_phase_sigma, model_four_spectra, reconstruct_cov, rows_from_csv, rows_to_csv,
    run_tomography, AngleSet, ExperimentModel, FitResult, FourSpectra, TomographyRow, TraceSource,
    UnpumpedPair,
};
use epr_core::trace::TraceSet;
use epr_core::{Error, Result};

use crate::{AngleSetArg, Cli};

fn theta_token(theta: f64) -> String {
    format!("{:06.2}", theta.to_degrees())
}

fn signal_stem(set: AngleSet, theta: f64, station: char) -> String {
    format!("sig_{}_theta{}_{}", set.label(), theta_token(theta), station)
}

fn processed_stem(set: AngleSet, theta: f64, station: char) -> String {
    format!("proc_{}_theta{}_{}", set.label(), theta_token(theta), station)
}

fn spectrum_name(set: AngleSet, theta: f64, sign: CombineSign) -> String {
    let tag = match sign {
        CombineSign::Sum => "sum",
        CombineSign::Diff => "diff",
    };
    format!("spec_{}_theta{}_{tag}.csv", set.label(), theta_token(theta))
}

fn write_csv<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buffer = Vec::new();
    write(&mut buffer)?;
    fs::write(path, buffer)?;
    Ok(())
}

pub fn simulate(cli: &Cli, out: &Path, angle_set: AngleSetArg) -> Result<()> {
    let config = cli.load_config(None)?;
    let model = config.experiment_model()?;
    let plan = config.tomography_plan();
    fs::create_dir_all(out)?;
    fs::write(out.join("profile.toml"), config.to_toml_string()?)?;

    let keep = |set: AngleSet| match angle_set {
        AngleSetArg::Both => true,
        AngleSetArg::Set1 => set == AngleSet::Set1,
        AngleSetArg::Set2 => set == AngleSet::Set2,
    };
    let mut written = 0usize;
    for (set, theta) in plan.datasets().filter(|(s, _)| keep(*s)) {
        let (a, b) = synthesize_quadrature_traces(&model.synth_job(set, theta))?;
        a.save(&out.join(signal_stem(set, theta, 'a')))?;
        b.save(&out.join(signal_stem(set, theta, 'b')))?;
        written += 1;
        println!(
            "simulated {} θ = {:5.2}° ({} traces, dataset id {})",
            set.label(),
            theta.to_degrees(),
            a.n_traces(),
            dataset_id(set, theta)
        );
    }
    let source = epr_core::tomography::SimulatedSource { model };
    source.shot()?.save(&out.join("shot_noise"))?;
    source.electronic()?.save(&out.join("electronic"))?;
    println!("wrote {written} signal datasets plus calibrations to {}", out.display());
    Ok(())
}

/// Signal datasets present in a directory, `(set, theta, token)`.
fn discover_datasets(dir: &Path) -> Result<Vec<(AngleSet, f64, String)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(rest) = name
            .strip_prefix("sig_")
            .and_then(|r| r.strip_suffix("_a.json"))
        else {
            continue;
        };
        let Some((set_label, token)) = rest.split_once("_theta") else {
            continue;
        };
        let set = match set_label {
            "set1" => AngleSet::Set1,
            "set2" => AngleSet::Set2,
            _ => continue,
        };
        let theta_deg: f64 = token
            .parse()
            .map_err(|_| Error::Data(format!("cannot parse angle from `{name}`")))?;
        found.push((set, theta_deg.to_radians(), token.to_owned()));
    }
    if found.is_empty() {
        return Err(Error::Data(format!(
            "no signal datasets (sig_*_a.json) found in {}",
            dir.display()
        )));
    }
    found.sort_by(|a, b| (a.0 == AngleSet::Set2, a.1).partial_cmp(&(b.0 == AngleSet::Set2, b.1)).unwrap());
    Ok(found)
}

pub fn process_dir(data: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let shot = TraceSet::load(&data.join("shot_noise"))?;
    let electronic = TraceSet::load(&data.join("electronic"))?;

    for (set, theta, _) in discover_datasets(data)? {
        let a = process(TraceSet::load(&data.join(signal_stem(set, theta, 'a')))?)?;
        let b = process(TraceSet::load(&data.join(signal_stem(set, theta, 'b')))?)?;
        for sign in [CombineSign::Sum, CombineSign::Diff] {
            let spectrum = combined_spectrum(&a, &b, sign, &shot, &electronic)?;
            write_csv(&out.join(spectrum_name(set, theta, sign)), |w| {
                spectrum.to_csv(w)
            })?;
        }
        a.trace_set().save(&out.join(processed_stem(set, theta, 'a')))?;
        b.trace_set().save(&out.join(processed_stem(set, theta, 'b')))?;
        println!("processed {} θ = {:5.2}°", set.label(), theta.to_degrees());
    }

    // Calibrations pass through the same chain for downstream normalization.
    process(shot)?.trace_set().save(&out.join("proc_shot_noise"))?;
    process(electronic)?
        .trace_set()
        .save(&out.join("proc_electronic"))?;
    if data.join("profile.toml").exists() && !out.join("profile.toml").exists() {
        fs::copy(data.join("profile.toml"), out.join("profile.toml"))?;
    }
    Ok(())
}

/// Trace source over processed files. The pipeline steps are idempotent, so
/// re-running them downstream leaves the data unchanged.
struct FilesSource {
    dir: PathBuf,
}

impl TraceSource for FilesSource {
    fn signal(&self, set: AngleSet, theta: f64) -> Result<(TraceSet, TraceSet)> {
        let a = TraceSet::load(&self.dir.join(processed_stem(set, theta, 'a')))?;
        let b = TraceSet::load(&self.dir.join(processed_stem(set, theta, 'b')))?;
        Ok((a, b))
    }

    fn shot(&self) -> Result<TraceSet> {
        TraceSet::load(&self.dir.join("proc_shot_noise"))
    }

    fn electronic(&self) -> Result<TraceSet> {
        TraceSet::load(&self.dir.join("proc_electronic"))
    }
}

/// Plan restricted to the datasets actually present on disk.
fn plan_from_files(config: &ExperimentConfig, dir: &Path) -> Result<epr_core::tomography::TomographyPlan> {
    let mut plan = config.tomography_plan();
    let available = discover_datasets_processed(dir)?;
    plan.set1_thetas = available
        .iter()
        .filter(|(s, _)| *s == AngleSet::Set1)
        .map(|(_, t)| *t)
        .collect();
    plan.set2_thetas = available
        .iter()
        .filter(|(s, _)| *s == AngleSet::Set2)
        .map(|(_, t)| *t)
        .collect();
    Ok(plan)
}

fn discover_datasets_processed(dir: &Path) -> Result<Vec<(AngleSet, f64)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(rest) = name
            .strip_prefix("proc_")
            .and_then(|r| r.strip_suffix("_a.json"))
        else {
            continue;
        };
        let Some((set_label, token)) = rest.split_once("_theta") else {
            continue;
        };
        let set = match set_label {
            "set1" => AngleSet::Set1,
            "set2" => AngleSet::Set2,
            _ => continue,
        };
        let theta_deg: f64 = token
            .parse()
            .map_err(|_| Error::Data(format!("cannot parse angle from `{name}`")))?;
        found.push((set, theta_deg.to_radians()));
    }
    if found.is_empty() {
        return Err(Error::Data(format!(
            "no processed datasets (proc_*_a.json) found in {}",
            dir.display()
        )));
    }
    found.sort_by(|a, b| {
        (a.0 == AngleSet::Set2, a.1)
            .partial_cmp(&(b.0 == AngleSet::Set2, b.1))
            .unwrap()
    });
    Ok(found)
}

/// Phase-offset point estimate for the unmeasured covariances at `f0`.
fn ab_point_estimate(model: &ExperimentModel, f0: f64) -> f64 {
    let eff = model.effective_paths_at(f0);
    phase_offset_cross_covariance(&eff[0], &eff[1])
}

pub fn analyze(cli: &Cli, data: &Path, out: &Path, freq_mhz: Option<f64>) -> Result<()> {
    let config = cli.load_config(Some(data))?;
    let model = config.experiment_model()?;
    fs::create_dir_all(out)?;

    let plan = plan_from_files(&config, data)?;
    let source = FilesSource {
        dir: data.to_path_buf(),
    };
    let rows = run_tomography(&plan, &source)?;
    write_csv(&out.join("tomography.csv"), |w| rows_to_csv(&rows, w))?;

    let f0 = freq_mhz.map(|f| f * 1e6).unwrap_or(plan.frequencies[0]);
    let recon = reconstruct_cov(&rows, f0)?;
    fs::write(out.join("covariance.json"), recon.template.to_json())?;

    let squeezed = read_optional_spectrum(&data.join(spectrum_name(AngleSet::Set1, 0.0, CombineSign::Sum)))?;
    let report = epr_core::tomography::report(
        &recon.template,
        squeezed.as_ref(),
        None,
        &config.efficiency.stages,
        ab_point_estimate(&model, f0),
    )?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("report.txt"), report.to_string())?;
    println!("{report}");
    Ok(())
}

fn read_optional_spectrum(path: &Path) -> Result<Option<SpectrumEstimate>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(SpectrumEstimate::from_csv_str(&fs::read_to_string(
        path,
    )?)?))
}

fn require_spectrum(dir: &Path, set: AngleSet, theta: f64, sign: CombineSign) -> Result<SpectrumEstimate> {
    let path = dir.join(spectrum_name(set, theta, sign));
    read_optional_spectrum(&path)?.ok_or_else(|| {
        Error::Data(format!("missing spectrum file {}", path.display()))
    })
}

/// The four single-mode squeezing spectra live in the cardinal set-1
/// datasets: θ = 0 gives (direct squeezed, delay anti), θ = 90° gives
/// (delay squeezed, direct anti).
fn load_four_spectra(dir: &Path) -> Result<FourSpectra> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    FourSpectra::from_estimates(
        &require_spectrum(dir, AngleSet::Set1, 0.0, CombineSign::Sum)?,
        &require_spectrum(dir, AngleSet::Set1, half_pi, CombineSign::Diff)?,
        &require_spectrum(dir, AngleSet::Set1, half_pi, CombineSign::Sum)?,
        &require_spectrum(dir, AngleSet::Set1, 0.0, CombineSign::Diff)?,
    )
}

fn unpumped_from_config(config: &ExperimentConfig, freq_hz: &[f64]) -> UnpumpedPair {
    let seed_shape = config.seed_noise_shape();
    let excess_shape = config.delay_excess_shape();
    UnpumpedPair {
        freq_hz: freq_hz.to_vec(),
        direct_rel: freq_hz.iter().map(|&f| 1.0 + seed_shape.excess_rel(f)).collect(),
        delay_rel: freq_hz
            .iter()
            .map(|&f| 1.0 + seed_shape.excess_rel(f) + excess_shape.excess_rel(f))
            .collect(),
    }
}

pub fn fit(
    cli: &Cli,
    spectra_dir: &Path,
    out: &Path,
    unpumped_direct: Option<&Path>,
    unpumped_delay: Option<&Path>,
    fmin_mhz: f64,
    fmax_mhz: f64,
) -> Result<()> {
    let config = cli.load_config(Some(spectra_dir))?;
    let opo = config.opo_params()?;
    fs::create_dir_all(out)?;

    let four = load_four_spectra(spectra_dir)?.band(fmin_mhz * 1e6, fmax_mhz * 1e6);
    // With measured unpumped spectra, the seed-noise coefficient comes from
    // the direct line and the delay excess from the difference; otherwise
    // both come from the parametric profile shapes.
    let (seed, unpumped) = match (unpumped_direct, unpumped_delay) {
        (Some(direct), Some(delay)) => {
            let (fd, vd) = read_spectrum_csv(direct)?;
            let (fl, vl) = read_spectrum_csv(delay)?;
            if fd != fl {
                return Err(Error::Data(
                    "unpumped spectra must share a frequency grid".into(),
                ));
            }
            let seed = epr_core::opo::SeedNoiseModel::from_unpumped(&fd, &vd, opo.gamma())?;
            let unpumped = UnpumpedPair {
                freq_hz: fd,
                direct_rel: vd,
                delay_rel: vl,
            };
            (seed, unpumped)
        }
        (None, None) => (
            config.seed_noise_model()?,
            unpumped_from_config(&config, &four.freq_hz),
        ),
        _ => {
            return Err(Error::Config(
                "provide both --unpumped-direct and --unpumped-delay, or neither".into(),
            ))
        }
    };

    let result = fit_phase_sigma(&four, &opo, &seed, &unpumped, JitterAverage::Exact)?;
    fs::write(out.join("fit.json"), serde_json::to_string_pretty(&result)?)?;
    println!(
        "σ1 = {:.2}° (95% CI {:.2}–{:.2}°), σ2 = {:.2}° (95% CI {:.2}–{:.2}°), residual {:.3} dB",
        result.sigma1_deg,
        result.ci1_deg.0,
        result.ci1_deg.1,
        result.sigma2_deg,
        result.ci2_deg.0,
        result.ci2_deg.1,
        result.residual_norm,
    );
    Ok(())
}

pub fn report(cli: &Cli, artifacts: &Path, out: &Path) -> Result<()> {
    let config = cli.load_config(Some(artifacts))?;
    let model = config.experiment_model()?;
    fs::create_dir_all(out)?;

    let rows = rows_from_csv(&fs::read_to_string(artifacts.join("tomography.csv"))?)?;
    let template = epr_core::gaussian::CovarianceTemplate::from_json(&fs::read_to_string(
        artifacts.join("covariance.json"),
    )?)?;
    let fit: Option<FitResult> = match fs::read_to_string(artifacts.join("fit.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let squeezed =
        read_optional_spectrum(&artifacts.join(spectrum_name(AngleSet::Set1, 0.0, CombineSign::Sum)))?;

    let f0 = config.tomography_plan().frequencies[0];
    let report = epr_core::tomography::report(
        &template,
        squeezed.as_ref(),
        fit.clone(),
        &config.efficiency.stages,
        ab_point_estimate(&model, f0),
    )?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("report.txt"), report.to_string())?;

    write_angle_scan_figures(&model, &rows, out)?;
    write_spectra_figure(&config, &model, artifacts, out, fit.as_ref())?;
    write_histogram_figures(artifacts, out)?;
    println!("{report}");
    println!("figure data written to {}", out.display());
    Ok(())
}

/// Angle-scan figure data: measured and predicted sum/difference noise per
/// set and frequency.
fn write_angle_scan_figures(
    model: &ExperimentModel,
    rows: &[TomographyRow],
    out: &Path,
) -> Result<()> {
    let mut freqs: Vec<f64> = rows.iter().map(|r| r.freq_hz).collect();
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    freqs.dedup_by(|a, b| (*a - *b).abs() < 1.0);
    for f0 in freqs {
        let name = format!("fig_angle_scan_{:.0}mhz.csv", f0 / 1e6);
        write_csv(&out.join(name), |w| {
            use std::io::Write;
            writeln!(
                w,
                "set,theta_deg,sum_db,diff_db,pred_sum_db,pred_diff_db"
            )?;
            for r in rows.iter().filter(|r| (r.freq_hz - f0).abs() < 1.0) {
                let to_db = |v: f64| 10.0 * (v / 2.0).log10();
                let pred_sum = model.predicted_combined_mode_variance(
                    r.set,
                    r.theta,
                    CombineSign::Sum,
                    f0,
                );
                let pred_diff = model.predicted_combined_mode_variance(
                    r.set,
                    r.theta,
                    CombineSign::Diff,
                    f0,
                );
                writeln!(
                    w,
                    "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    r.set.label(),
                    r.theta.to_degrees(),
                    to_db(r.sum_var),
                    to_db(r.diff_var),
                    to_db(pred_sum),
                    to_db(pred_diff),
                )?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Squeezing-spectra figure data: the four measured spectra, the fitted
/// model, and the ideal no-fluctuation, shot-limited-seed curves.
fn write_spectra_figure(
    config: &ExperimentConfig,
    model: &ExperimentModel,
    artifacts: &Path,
    out: &Path,
    fit: Option<&FitResult>,
) -> Result<()> {
    let four = match load_four_spectra(artifacts) {
        Ok(four) => four,
        // Spectra may be absent when only cardinal analysis ran.
        Err(_) => return Ok(()),
    };
    let (sigma1, sigma2) = fit
        .map(|f| (f.sigma1_deg.to_radians(), f.sigma2_deg.to_radians()))
        .unwrap_or((
            model.paths[0].phase_jitter_sigma,
            model.paths[1].phase_jitter_sigma,
        ));
    let opo = config.opo_params()?;
    let seed = config.seed_noise_model()?;
    let unpumped = unpumped_from_config(config, &four.freq_hz);
    let fitted = model_four_spectra(
        &four.freq_hz,
        &opo,
        &seed,
        &unpumped,
        sigma1,
        sigma2,
        JitterAverage::Exact,
    );
    let ideal = model_four_spectra(
        &four.freq_hz,
        &opo,
        &epr_core::opo::SeedNoiseModel::shot_limited(),
        &UnpumpedPair::none(),
        0.0,
        0.0,
        JitterAverage::Exact,
    );
    write_csv(&out.join("fig_spectra.csv"), |w| {
        use std::io::Write;
        writeln!(
            w,
            "freq_mhz,direct_sq_db,direct_anti_db,delay_sq_db,delay_anti_db,\
             model_direct_sq_db,model_direct_anti_db,model_delay_sq_db,model_delay_anti_db,\
             ideal_sq_db,ideal_anti_db"
        )?;
        for i in 0..four.freq_hz.len() {
            writeln!(
                w,
                "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                four.freq_hz[i] / 1e6,
                four.direct_squeezed_db[i],
                four.direct_anti_db[i],
                four.delay_squeezed_db[i],
                four.delay_anti_db[i],
                fitted.direct_squeezed_db[i],
                fitted.direct_anti_db[i],
                fitted.delay_squeezed_db[i],
                fitted.delay_anti_db[i],
                ideal.direct_squeezed_db[i],
                ideal.direct_anti_db[i],
            )?;
        }
        Ok(())
    })
}

/// Temporal-histogram figure data from the θ = 0 set-1 dataset, before and
/// after processing.
fn write_histogram_figures(artifacts: &Path, out: &Path) -> Result<()> {
    for (stem, figure) in [
        (signal_stem(AngleSet::Set1, 0.0, 'a'), "fig_histogram_raw.csv"),
        (
            processed_stem(AngleSet::Set1, 0.0, 'a'),
            "fig_histogram_processed.csv",
        ),
    ] {
        let path = artifacts.join(&stem);
        let sidecar = artifacts.join(format!("{stem}.json"));
        if !sidecar.exists() {
            continue;
        }
        let set = TraceSet::load(&path)?;
        let histogram = temporal_histogram(&set, &DEFAULT_QUANTILES, 60);
        write_csv(&out.join(figure), |w| {
            histogram.quantiles_to_csv(set.sample_rate, w)
        })?;
    }
    Ok(())
}
