use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use circe::diagnostics::{asymptotic_variances, fisher_information, nec, standardized_residuals, FactorForm};
use circe::hypothesis::{aic, ks_normality_test, n_params_multigroup, n_params_pooled, qq_plot_data, wald_all_pairs};
use circe::synthetic::{nec_curve_csv, replicate, replicate_sweep, simulate, violin_csv, SimulationSpec};
use circe::{fit_multigroup, fit_regular, Dataset, EcmeConfig, FitResult, ModelParams};

use crate::ingest::{dataset_csv, load_dataset, DataFormat};
use crate::report::*;
use crate::{Command, DiagnoseArgs, EcmeArgs, FitArgs, ModelKind, ReplicateArgs, SimulateArgs, TestArgs};

pub enum Status {
    Converged,
    NotConverged,
}

impl Status {
    fn from_flag(converged: bool) -> Self {
        if converged {
            Status::Converged
        } else {
            Status::NotConverged
        }
    }
}

pub fn run(command: Command) -> Result<Status> {
    match command {
        Command::Fit(args) => with_jobs(&args.ecme, || cmd_fit(&args)),
        Command::Diagnose(args) => cmd_diagnose(&args),
        Command::Test(args) => with_jobs(&args.ecme, || cmd_test(&args)),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Replicate(args) => with_jobs(&args.ecme, || cmd_replicate(&args)),
    }
}

fn with_jobs<T: Send>(ecme: &EcmeArgs, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match ecme.jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("cannot start worker pool")?
            .install(f),
        None => f(),
    }
}

fn checked_config(ecme: &EcmeArgs) -> Result<EcmeConfig> {
    let cfg = ecme.config();
    cfg.validate().context("invalid estimator settings")?;
    Ok(cfg)
}

fn fit_report(d: &Dataset, fit: &FitResult, model: ModelKind, form: FactorForm, cfg: &EcmeConfig) -> Result<FitReport> {
    let (model_name, n_params, labels) = match model {
        ModelKind::Pooled => ("pooled", n_params_pooled(d.p()), vec![1]),
        ModelKind::Multigroup => ("multigroup", n_params_multigroup(d.p(), d.q()), d.group_labels().to_vec()),
    };
    let group_sizes = match model {
        ModelKind::Pooled => vec![d.n()],
        ModelKind::Multigroup => d.group_sizes(),
    };
    let fitted = match model {
        ModelKind::Pooled => d.pooled(),
        ModelKind::Multigroup => d.clone(),
    };
    let (nec_matrix, var_of_mean, var_of_sigma2, diagnostics_error) = match fisher_information(&fitted, &fit.params) {
        Ok(f) => {
            let av = asymptotic_variances(&f);
            (Some(nec(&f, &fit.params)), Some(av.var_of_mean), Some(av.var_of_sigma2), None)
        }
        Err(e) => (None, None, None, Some(e.to_string())),
    };
    let trace = &fit.loglik_trace;
    Ok(FitReport {
        schema_version: SCHEMA_VERSION,
        command: "fit",
        model: model_name,
        form,
        n: d.n(),
        p: d.p(),
        q: labels.len(),
        group_labels: labels.clone(),
        group_sizes,
        noise_known: d.noise_known(),
        params: fit.params.clone(),
        raw_sigma2: fit.raw_sigma2.clone(),
        clamped: fit.clamped.clone(),
        unidentifiable_groups: fit.unidentifiable_groups.clone(),
        loglik: fit.loglik,
        n_params,
        aic: aic(fit.loglik, n_params),
        nec: nec_matrix,
        var_of_mean,
        var_of_sigma2,
        diagnostics_error,
        prediction_intervals: BothIntervals {
            gaussian: intervals(&fit.params, &labels, FactorForm::Gaussian)?,
            log_gaussian: intervals(&fit.params, &labels, FactorForm::LogGaussian)?,
        },
        convergence: Convergence {
            converged: fit.converged,
            iterations: fit.iterations,
            best_start: fit.best_start,
            start_logliks: fit.start_logliks.clone(),
            final_loglik_change: (trace.len() >= 2).then(|| trace[trace.len() - 1] - trace[trace.len() - 2]),
        },
        config: cfg.clone(),
    })
}

fn cmd_fit(args: &FitArgs) -> Result<Status> {
    let cfg = checked_config(&args.ecme)?;
    let d = load_dataset(&args.input, args.format)?;
    let fit = match args.model {
        ModelKind::Pooled => fit_regular(&d, &cfg),
        ModelKind::Multigroup => fit_multigroup(&d, &cfg),
    }
    .context("estimation failed")?;
    let report = fit_report(&d, &fit, args.model, args.form.into(), &cfg)?;
    emit(args.output.as_deref(), &to_json(&report)?)?;
    Ok(Status::from_flag(fit.converged))
}

/// Reads `params` from a fit report, or the whole file as parameters.
fn load_params(path: &Path, d: &Dataset) -> Result<ModelParams> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read parameter file {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    let params_value = value.get("params").cloned().unwrap_or_else(|| value.clone());
    let params: ModelParams = serde_json::from_value(params_value)
        .with_context(|| format!("{} does not hold parameters {{\"m\", \"sigma2\"}}", path.display()))?;
    if let Some(labels) = value.get("group_labels") {
        let labels: Vec<u32> = serde_json::from_value(labels.clone()).context("bad group_labels")?;
        if params.q() == d.q() && labels != d.group_labels() {
            bail!(
                "parameter file was fitted on groups {:?}, dataset has groups {:?}",
                labels,
                d.group_labels()
            );
        }
    }
    Ok(params)
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<Status> {
    let d = load_dataset(&args.input, args.format)?;
    let params = load_params(&args.params, &d)?;
    if params.p() != d.p() {
        bail!("parameters have p = {}, dataset has p = {}", params.p(), d.p());
    }
    let (d, labels) = if params.q() == 1 && d.q() > 1 {
        (d.pooled(), vec![1])
    } else if params.q() == d.q() {
        let labels = d.group_labels().to_vec();
        (d, labels)
    } else {
        bail!("parameters have q = {}, dataset has q = {}", params.q(), d.q());
    };
    if !params.is_nonnegative() {
        bail!("parameter file contains negative variances");
    }
    let form: FactorForm = args.form.into();

    let f = fisher_information(&d, &params).context("cannot compute the Fisher information")?;
    let av = asymptotic_variances(&f);
    let residuals = standardized_residuals(&d, &params).context("cannot compute residuals")?;
    let ks = ks_normality_test(&residuals).context("KS test")?;
    let qq = qq_plot_data(&residuals).context("Q-Q data")?;
    let spread = residuals.iter().copied().fold(f64::MIN, f64::max) - residuals.iter().copied().fold(f64::MAX, f64::min);

    fs::create_dir_all(&args.output).with_context(|| format!("cannot create {}", args.output.display()))?;
    let row_labels: Vec<u32> = d.groups().iter().map(|&s| labels[s]).collect();
    emit(Some(&args.output.join("residuals.csv")), &residuals_csv(&residuals, &row_labels))?;
    emit(Some(&args.output.join("qq.csv")), &qq_csv(&qq))?;
    emit(
        Some(&args.output.join("ks.json")),
        &to_json(&KsReport {
            schema_version: SCHEMA_VERSION,
            reject_at_5pct: ks.p_value < 0.05,
            degenerate: spread <= 1e-12,
            ks,
        })?,
    )?;
    emit(
        Some(&args.output.join("diagnostics.json")),
        &to_json(&DiagnosticsFile {
            schema_version: SCHEMA_VERSION,
            form,
            group_labels: labels.clone(),
            nec: nec(&f, &params),
            var_of_mean: av.var_of_mean,
            var_of_sigma2: av.var_of_sigma2,
            prediction_intervals: intervals(&params, &labels, form)?,
        })?,
    )?;
    Ok(Status::Converged)
}

fn cmd_test(args: &TestArgs) -> Result<Status> {
    let cfg = checked_config(&args.ecme)?;
    let d = load_dataset(&args.input, args.format)?;
    if d.q() < 2 {
        bail!("the dataset has a single group; nothing to test");
    }
    let multi = fit_multigroup(&d, &cfg).context("multi-group estimation failed")?;
    let pooled = fit_regular(&d, &cfg).context("pooled estimation failed")?;
    let f = fisher_information(&d, &multi.params).context("cannot compute the Fisher information")?;
    let labels = d.group_labels();
    let wald = wald_all_pairs(&f, &multi.params)?
        .into_iter()
        .map(|w| WaldEntry {
            group_a: labels[w.group_a],
            group_b: labels[w.group_b],
            factor: w.factor + 1,
            statistic: w.statistic,
            p_value: w.p_value,
            var_a: w.var_a,
            var_b: w.var_b,
            covariance: w.covariance,
            reject_at_5pct: w.reject_at_5pct,
            defined: w.defined,
        })
        .collect();
    let np_pooled = n_params_pooled(d.p());
    let np_multi = n_params_multigroup(d.p(), d.q());
    let aic_pooled = aic(pooled.loglik, np_pooled);
    let aic_multi = aic(multi.loglik, np_multi);
    let (preferred_model, preference) = if aic_multi < aic_pooled {
        ("multigroup", format!("multi-group model preferred: AIC {aic_multi:.6} < {aic_pooled:.6}"))
    } else {
        ("pooled", format!("pooled model preferred: AIC {aic_pooled:.6} <= {aic_multi:.6}"))
    };
    let report = TestReport {
        schema_version: SCHEMA_VERSION,
        command: "test",
        group_labels: labels.to_vec(),
        wald,
        aic: AicComparison {
            pooled: AicEntry {
                loglik: pooled.loglik,
                n_params: np_pooled,
                aic: aic_pooled,
                converged: pooled.converged,
            },
            multigroup: AicEntry {
                loglik: multi.loglik,
                n_params: np_multi,
                aic: aic_multi,
                converged: multi.converged,
            },
        },
        preferred_model,
        preference,
    };
    emit(args.output.as_deref(), &to_json(&report)?)?;
    Ok(Status::from_flag(multi.converged && pooled.converged))
}

fn load_spec(path: &Path) -> Result<SimulationSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
    let spec: SimulationSpec =
        serde_json::from_str(&text).with_context(|| format!("invalid simulation spec {}", path.display()))?;
    spec.validate().with_context(|| format!("invalid simulation spec {}", path.display()))?;
    Ok(spec)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Status> {
    let mut spec = load_spec(&args.input)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let d = simulate(&spec)?;
    let text = match args.format {
        DataFormat::Csv => dataset_csv(&d),
        DataFormat::Json => to_json(&d.to_raw())?,
    };
    emit(args.output.as_deref(), &text)?;
    Ok(Status::Converged)
}

fn cmd_replicate(args: &ReplicateArgs) -> Result<Status> {
    let mut spec = load_spec(&args.input)?;
    if let Some(seed) = args.ecme.seed {
        spec.seed = seed;
    }
    let cfg = checked_config(&args.ecme)?;
    let report = match &args.sizes {
        Some(sizes) => replicate_sweep(&spec, sizes, args.replications, &cfg)?,
        None => replicate(&spec, args.replications, &cfg)?,
    };
    fs::create_dir_all(&args.output).with_context(|| format!("cannot create {}", args.output.display()))?;
    emit(
        Some(&args.output.join("report.json")),
        &to_json(&ReplicateFile {
            schema_version: SCHEMA_VERSION,
            report: &report,
        })?,
    )?;
    emit(Some(&args.output.join("violin.csv")), &violin_csv(&report))?;
    emit(Some(&args.output.join("nec_curve.csv")), &nec_curve_csv(&report))?;
    let all_converged = report
        .blocks
        .iter()
        .flat_map(|b| &b.outcomes)
        .all(|o| o.estimate.as_ref().is_some_and(|e| e.converged));
    Ok(Status::from_flag(all_converged))
}
