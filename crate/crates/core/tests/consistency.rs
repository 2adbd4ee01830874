//! Cross-module consistency checks on synthesized data: artifact
//! removability, uncertainty across the sum/difference pair, electronic
//! subtraction, and agreement between the two squeezing estimators.

use epr_core::config::ExperimentConfig;
use epr_core::pipeline::{
    combined_spectrum, detrend_filter, filter_variance, process, sine_mode_filter, CombineSign,
};
use epr_core::tomography::{
    reconstruct_cov, run_tomography, AngleSet, ExperimentModel, SimulatedSource, TomographyPlan,
    TraceSource,
};
use epr_core::trace::ArtifactModel;

fn reduced_model(n_traces: usize) -> ExperimentModel {
    let config = ExperimentConfig::paper_default();
    let mut model = config.experiment_model().unwrap();
    model.timing.traces_per_set = n_traces;
    model
}

#[test]
fn artifacts_are_removable_by_construction() {
    // Same seed, artifacts on and off: after processing, the spectra agree.
    let model_on = reduced_model(4000);
    let mut model_off = model_on.clone();
    model_off.artifacts = ArtifactModel::clean(model_on.artifacts.electronic_noise_db);

    let spectrum = |model: &ExperimentModel| {
        let source = SimulatedSource {
            model: model.clone(),
        };
        let (a, b) = source.signal(AngleSet::Set1, 0.0).unwrap();
        combined_spectrum(
            &process(a).unwrap(),
            &process(b).unwrap(),
            CombineSign::Sum,
            &source.shot().unwrap(),
            &source.electronic().unwrap(),
        )
        .unwrap()
    };
    let on = spectrum(&model_on);
    let off = spectrum(&model_off);
    for (i, &f) in on.freq_hz.iter().enumerate() {
        if !(2.0e6..=15.0e6).contains(&f) {
            continue;
        }
        let dev = (on.variance_db[i] - off.variance_db[i]).abs();
        assert!(
            dev < 0.3,
            "artifact residual {dev:.3} dB at {:.2} MHz",
            f / 1e6
        );
    }
}

#[test]
fn sum_and_diff_spectra_respect_uncertainty() {
    let model = reduced_model(4000);
    let source = SimulatedSource {
        model: model.clone(),
    };
    let (a, b) = source.signal(AngleSet::Set1, 0.0).unwrap();
    let a = process(a).unwrap();
    let b = process(b).unwrap();
    let shot = source.shot().unwrap();
    let electronic = source.electronic().unwrap();
    let plus = combined_spectrum(&a, &b, CombineSign::Sum, &shot, &electronic).unwrap();
    let minus = combined_spectrum(&a, &b, CombineSign::Diff, &shot, &electronic).unwrap();
    for i in 0..plus.freq_hz.len() {
        let total = plus.variance_rel_shot[i] + minus.variance_rel_shot[i];
        let se = 5.0
            * (plus.stderr_db[i] + minus.stderr_db[i])
            * std::f64::consts::LN_10
            / 10.0
            * total;
        assert!(
            total >= 2.0 - se,
            "bin {i}: sum + diff = {total} below the two-vacuum floor"
        );
    }
}

#[test]
fn electronic_subtraction_is_a_small_correction() {
    // With a −20 dB floor, switching the subtraction off moves the spectrum
    // by well under 0.05 dB.
    let model = reduced_model(3000);
    let source = SimulatedSource {
        model: model.clone(),
    };
    let (a, b) = source.signal(AngleSet::Set1, 0.0).unwrap();
    let a = process(a).unwrap();
    let b = process(b).unwrap();
    let shot = source.shot().unwrap();
    let electronic = source.electronic().unwrap();
    let with = combined_spectrum(&a, &b, CombineSign::Sum, &shot, &electronic).unwrap();

    // Degenerate electronic set: the floor is still in the data and in the
    // shot calibration, it just is not subtracted.
    let mut no_elec_model = model.clone();
    no_elec_model.artifacts.electronic_noise_db = -300.0;
    let zero_floor = SimulatedSource {
        model: no_elec_model,
    }
    .electronic()
    .unwrap();
    let without = combined_spectrum(&a, &b, CombineSign::Sum, &shot, &zero_floor).unwrap();
    for i in 0..with.freq_hz.len() {
        let dev = (with.variance_db[i] - without.variance_db[i]).abs();
        // Exact size of the correction: 10·log10[(1 + 2e/S)/(1 + e)] with
        // e = 0.01. Below −3 dB of squeezing it stays under 0.05 dB; at the
        // −4 dB dip it reaches 0.064 dB.
        assert!(dev < 0.08, "bin {i}: subtraction moved spectrum by {dev} dB");
        if with.variance_db[i] > -3.0 {
            assert!(dev < 0.05, "bin {i}: {dev} dB at {} dB", with.variance_db[i]);
        }
    }
}

#[test]
fn mode_variance_agrees_with_the_spectrum_estimator() {
    // Two estimators of the same squeezing level: the 3 MHz temporal-mode
    // variance and the mode-bandwidth-weighted average of the combined
    // spectrum.
    let model = reduced_model(16000);
    let source = SimulatedSource {
        model: model.clone(),
    };
    let plan = TomographyPlan {
        set1_thetas: vec![0.0],
        set2_thetas: vec![0.0],
        frequencies: vec![3.0e6],
    };
    let rows = run_tomography(&plan, &source).unwrap();
    let row = rows
        .iter()
        .find(|r| r.set == AngleSet::Set1)
        .expect("set-1 row");

    let (a, b) = source.signal(AngleSet::Set1, 0.0).unwrap();
    let spectrum = combined_spectrum(
        &process(a).unwrap(),
        &process(b).unwrap(),
        CombineSign::Sum,
        &source.shot().unwrap(),
        &source.electronic().unwrap(),
    )
    .unwrap();

    // Fold the measured spectrum with the sine mode's bin weights.
    let n = model.n_samples();
    let filter = detrend_filter(&sine_mode_filter(n, model.sample_rate, 3.0e6));
    let mut bins = vec![0.0; n / 2 + 1];
    for (i, &f) in spectrum.freq_hz.iter().enumerate() {
        let m = (f / (model.sample_rate / n as f64)).round() as usize;
        bins[m] = 2.0 * spectrum.variance_rel_shot[i];
    }
    let shot_bins = vec![1.0; n / 2 + 1];
    let spectral_estimate = filter_variance(&bins, &filter) / filter_variance(&shot_bins, &filter);

    let tol = 3.0 * row.sum_stderr.max(0.01);
    assert!(
        (row.sum_var - spectral_estimate).abs() < tol,
        "mode variance {} vs spectral estimate {} (tol {tol})",
        row.sum_var,
        spectral_estimate
    );

    // The squeezing level itself sits near the expected few-dB suppression.
    let db = 10.0 * (row.sum_var / 2.0).log10();
    assert!(
        (-4.2..=-3.2).contains(&db),
        "two-mode squeezing level {db:.2} dB"
    );
}

#[test]
fn reconstruction_is_physical_at_the_offset_point_estimate() {
    let model = reduced_model(8000);
    let source = SimulatedSource {
        model: model.clone(),
    };
    let plan = TomographyPlan::reconstruction_only(vec![3.0e6]);
    let rows = run_tomography(&plan, &source).unwrap();
    let recon = reconstruct_cov(&rows, 3.0e6).unwrap();
    let eff = model.effective_paths_at(3.0e6);
    let pe = epr_core::network::phase_offset_cross_covariance(&eff[0], &eff[1]);
    // Sampling noise can park the matrix marginally outside the exact
    // boundary; the check runs at a statistically sensible tolerance.
    assert!(
        recon.template.resolve(pe, pe).is_physical(0.05),
        "reconstructed state unphysical at a = b = {pe:.4}"
    );
}

#[test]
fn synthesized_ensembles_match_analytic_predictions() {
    // Demodulated-variance agreement between synthesis and the analytic
    // model across both sets and a non-cardinal angle.
    let model = reduced_model(16000);
    let source = SimulatedSource {
        model: model.clone(),
    };
    let theta = 0.6;
    let plan = TomographyPlan {
        set1_thetas: vec![theta],
        set2_thetas: vec![theta],
        frequencies: vec![3.0e6, 10.0e6],
    };
    let rows = run_tomography(&plan, &source).unwrap();
    for row in rows {
        for (sign, measured, se) in [
            (CombineSign::Sum, row.sum_var, row.sum_stderr),
            (CombineSign::Diff, row.diff_var, row.diff_stderr),
        ] {
            let predicted =
                model.predicted_combined_mode_variance(row.set, row.theta, sign, row.freq_hz);
            assert!(
                (measured - predicted).abs() < 3.0 * se.max(0.004 * predicted),
                "{} θ = {:.2} f = {:.1} MHz: measured {measured:.4} vs predicted {predicted:.4} (se {se:.4})",
                row.set.label(),
                row.theta,
                row.freq_hz / 1e6
            );
        }
    }
}
