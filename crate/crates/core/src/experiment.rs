//! Config-driven experiment pipelines.
//!
//! Each experiment builds its models from the configuration, runs the
//! requested (optionally paired) guided sampling, evaluates metrics,
//! and writes the artifacts: `samples.csv`, `metrics.json`,
//! `traces.json`, and a canonical `config_echo.txt`. A failing run
//! leaves a `FAILED` marker in the output directory.

use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, ExperimentKind, GuidanceMethodKind};
use crate::error::Result;
use crate::guidance::{characteristic_eps_at, classifier_free_eps, GuidanceSpec, SolverKind};
use crate::magnet::{
    fields_to_dataset, mean_magnetization, mh_ensemble, omega_for_temperature, LatticeField,
    MagnetParams, MhConfig,
};
use crate::metrics::{
    bimodality_check, fit_gaussian_kl, magnet_nll, mixing_error_report, mixture_kl, FdSteps,
    GaussianFit, KlResult,
};
use crate::output::{
    aggregate_traces, artifact_paths, atomic_write, run_key, traces_json, write_failure_marker,
    write_json, write_samples_csv, StepAggregate,
};
use crate::real::Real;
use crate::rng::{stream, StreamDomain};
use crate::sampler::{run_sampler, GuidanceMethod, RunOptions, SampleBatch};
use crate::schedule::NoiseSchedule;
use crate::score::{
    GaussianModel, KernelDataset, KernelModel, MixtureModel, NoiseLevel, ScoreModel,
    MIXTURE_COMPONENTS,
};

/// Condition used by the 2-D Gaussian experiment.
pub const GAUSSIAN_CONDITION: [f64; 2] = [-5.0, 5.0];

/// Outcome handed back to the caller (the CLI prints the paths).
#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Value,
    pub out_dir: std::path::PathBuf,
}

/// Detailed per-step traces stay affordable below this batch size;
/// larger runs keep only aggregate counters.
const TRACE_BATCH_LIMIT: usize = 2048;

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let out = config.run.out.clone();
    match run_inner(config) {
        Ok(report) => Ok(report),
        Err(err) => {
            write_failure_marker(&out, &err.to_string());
            Err(err)
        }
    }
}

fn run_inner(config: &ExperimentConfig) -> Result<RunReport> {
    let paths = artifact_paths(&config.run.out);
    atomic_write(
        &paths.config_echo,
        crate::config::render_config(config).as_bytes(),
    )?;
    let metrics = match config.experiment {
        ExperimentKind::Gaussian => gaussian_experiment(config)?,
        ExperimentKind::Mixture => mixture_experiment(config)?,
        ExperimentKind::Magnet => magnet_experiment(config)?,
        ExperimentKind::Diagnose => diagnose_experiment(config)?,
        ExperimentKind::IterStudy => iterstudy_experiment(config)?,
        ExperimentKind::Mh => mh_experiment(config)?,
    };
    write_json(&paths.metrics, &metrics)?;
    Ok(RunReport {
        metrics,
        out_dir: config.run.out.clone(),
    })
}

fn schedule_from(config: &ExperimentConfig) -> Result<Arc<NoiseSchedule<f64>>> {
    let s = NoiseSchedule::linear(config.schedule.n, config.schedule.b1, config.schedule.b2)?;
    if s.has_coarse_steps() {
        eprintln!(
            "warning: schedule has step sizes above 0.05; the small-step \
             approximation degrades"
        );
    }
    Ok(Arc::new(s))
}

/// The configured method and, under `--paired`, its counterpart with
/// identical scale. Pairs share schedule, sampler, and seed by
/// construction.
fn methods_for(config: &ExperimentConfig, omega: f64) -> Vec<GuidanceMethod<f64>> {
    let mut spec = config.guidance.to_spec();
    spec.omega = omega;
    let ch = GuidanceMethod::Characteristic { spec };
    let cf = GuidanceMethod::ClassifierFree { omega };
    let mut methods = match config.guidance.method {
        GuidanceMethodKind::Characteristic => vec![ch, cf],
        GuidanceMethodKind::ClassifierFree => vec![cf, ch],
    };
    if !config.run.paired {
        methods.truncate(1);
    }
    methods
}

fn method_tag(method: &GuidanceMethod<f64>) -> &'static str {
    match method {
        GuidanceMethod::Conditional => "conditional",
        GuidanceMethod::ClassifierFree { .. } => "cf",
        GuidanceMethod::Characteristic { .. } => "ch",
        GuidanceMethod::CharacteristicFixed { .. } => "ch_fixed",
    }
}

fn samples_path(config: &ExperimentConfig, primary: bool, tag: &str) -> std::path::PathBuf {
    if primary {
        config.run.out.join("samples.csv")
    } else {
        config.run.out.join(format!("samples_{tag}.csv"))
    }
}

fn insert_paired_comparison(metrics: &mut Map<String, Value>, kl_by_tag: &[(String, f64)]) {
    if kl_by_tag.len() < 2 {
        return;
    }
    let lookup = |tag: &str| {
        kl_by_tag
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, v)| *v)
    };
    if let (Some(ch), Some(cf)) = (lookup("ch"), lookup("cf")) {
        metrics.insert(
            "paired".to_string(),
            json!({ "kl_ch": ch, "kl_cf": cf, "ch_better": ch < cf }),
        );
    }
}

// ---------------------------------------------------------------------------
// Gaussian

fn gaussian_experiment(config: &ExperimentConfig) -> Result<Value> {
    let schedule = schedule_from(config)?;
    let model = GaussianModel::new(schedule);
    let c = GAUSSIAN_CONDITION;
    let omega = config.guidance.omega;
    let (target_mean, target_cov_scale) = GaussianModel::guided_target(&c, omega);
    let target_cov = vec![target_cov_scale, 0.0, 0.0, target_cov_scale];

    let mut metrics = Map::new();
    let mut kl_by_tag = Vec::new();
    let mut batches = Vec::new();
    for (idx, method) in methods_for(config, omega).into_iter().enumerate() {
        let record = config.run.batch <= TRACE_BATCH_LIMIT;
        let opts = RunOptions {
            batch: config.run.batch,
            seed: config.run.seed,
            record_traces: record,
            trajectory_offset: 0,
        };
        let batch = run_sampler(&model, Some(&c), &method, config.sampler, opts)?;
        let (kl, fit) = fit_gaussian_kl(&batch.samples, &target_mean, &target_cov)?;
        let tag = method_tag(&method).to_string();
        write_samples_csv(&samples_path(config, idx == 0, &tag), &batch)?;
        metrics.insert(
            run_key(&batch),
            gaussian_entry(&kl, &fit, &target_mean, target_cov_scale, &batch),
        );
        kl_by_tag.push((tag, kl.nats));
        batches.push(batch);
    }
    insert_paired_comparison(&mut metrics, &kl_by_tag);
    let refs: Vec<&SampleBatch<f64>> = batches.iter().collect();
    write_json(&config.run.out.join("traces.json"), &traces_json(&refs))?;
    Ok(Value::Object(metrics))
}

fn gaussian_entry(
    kl: &KlResult<f64>,
    fit: &GaussianFit<f64>,
    target_mean: &[f64; 2],
    target_cov_scale: f64,
    batch: &SampleBatch<f64>,
) -> Value {
    json!({
        "kl": kl.nats,
        "degenerate": kl.degenerate,
        "fit_mean": fit.mean,
        "fit_cov": fit.cov,
        "fit_cov_trace": fit.cov_trace(),
        "target_mean": target_mean,
        "target_cov_trace": 2.0 * target_cov_scale,
        "batch": batch.samples.len(),
        "stats": batch.stats,
    })
}

// ---------------------------------------------------------------------------
// Mixture

fn one_hot(idx: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    c[idx] = 1.0;
    c
}

/// Runs one guided batch per condition (equal weights) on disjoint
/// trajectory streams and merges the results.
pub fn run_mixture_batch(
    model: &MixtureModel<f64>,
    method: &GuidanceMethod<f64>,
    sampler: crate::sampler::SamplerKind,
    batch: usize,
    seed: u64,
    record_traces: bool,
) -> Result<SampleBatch<f64>> {
    let per_cond = batch.div_ceil(MIXTURE_COMPONENTS);
    let mut merged: Option<SampleBatch<f64>> = None;
    for cond_idx in 0..MIXTURE_COMPONENTS {
        let c = one_hot(cond_idx);
        let opts = RunOptions {
            batch: per_cond,
            seed,
            record_traces,
            trajectory_offset: cond_idx * per_cond,
        };
        let part = run_sampler(model, Some(&c), method, sampler, opts)?;
        merged = Some(match merged {
            None => part,
            Some(mut acc) => {
                acc.samples.extend(part.samples);
                acc.stats = {
                    let mut s = acc.stats;
                    s.solver_calls += part.stats.solver_calls;
                    s.nonconverged += part.stats.nonconverged;
                    s.total_iterations += part.stats.total_iterations;
                    s.total_model_evals += part.stats.total_model_evals;
                    s
                };
                if let (Some(t), Some(pt)) = (&mut acc.traces, part.traces) {
                    t.extend(pt);
                }
                acc
            }
        });
    }
    Ok(merged.expect("three conditions"))
}

fn mixture_experiment(config: &ExperimentConfig) -> Result<Value> {
    let schedule = schedule_from(config)?;
    let model = MixtureModel::new(schedule);
    let omega = config.guidance.omega;
    let mc_draws = 200_000;

    let mut metrics = Map::new();
    let mut kl_by_tag = Vec::new();
    let mut batches = Vec::new();
    for (idx, method) in methods_for(config, omega).into_iter().enumerate() {
        let record = config.run.batch <= TRACE_BATCH_LIMIT;
        let batch = run_mixture_batch(
            &model,
            &method,
            config.sampler,
            config.run.batch,
            config.run.seed,
            record,
        )?;
        let report = mixture_kl(&batch.samples, &model, omega, mc_draws, config.run.seed)?;
        let tag = method_tag(&method).to_string();
        write_samples_csv(&samples_path(config, idx == 0, &tag), &batch)?;
        metrics.insert(
            run_key(&batch),
            json!({
                "kl": report.kl,
                "mc_std_error": report.mc_std_error,
                "z": report.z,
                "z_std_error": report.z_std_error,
                "weights": report.weights,
                "empty_components": report.empty_components,
                "batch": batch.samples.len(),
                "stats": batch.stats,
            }),
        );
        kl_by_tag.push((tag, report.kl));
        batches.push(batch);
    }
    insert_paired_comparison(&mut metrics, &kl_by_tag);
    let refs: Vec<&SampleBatch<f64>> = batches.iter().collect();
    write_json(&config.run.out.join("traces.json"), &traces_json(&refs))?;
    Ok(Value::Object(metrics))
}

// ---------------------------------------------------------------------------
// Magnet

fn magnet_params(config: &ExperimentConfig) -> MagnetParams<f64> {
    MagnetParams {
        m2: config.magnet.m2,
        lambda: config.magnet.lambda,
        coupling: config.magnet.coupling,
        t_curie: config.magnet.t_curie,
    }
}

fn mh_config(config: &ExperimentConfig, n_samples: usize) -> MhConfig<f64> {
    MhConfig {
        n_samples,
        thin: config.magnet.thin,
        burn_in: config.magnet.burn_in,
        step_width: config.magnet.step_width,
        side: config.magnet.side,
    }
}

fn batch_to_fields(batch: &SampleBatch<f64>, side: usize, temp: f64) -> Result<Vec<LatticeField<f64>>> {
    batch
        .samples
        .iter()
        .map(|s| LatticeField::from_values(side, s.clone(), temp))
        .collect()
}

fn write_magnetization_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut text = String::from("mean_magnetization\n");
    for v in values {
        text.push_str(&format!("{v:?}\n"));
    }
    atomic_write(path, text.as_bytes())
}

/// Builds the coupled dataset pair for the two training temperatures:
/// one chain at `t1`, one shared atom set, and the `t0` ensemble as the
/// exact Boltzmann reweighting of those atoms. Shared support keeps
/// the conditional/unconditional prediction difference smooth at small
/// noise scales, which independent chains (whose nearest atoms differ
/// almost everywhere in 64 dimensions) destroy.
fn coupled_kernel_datasets(
    base_fields: &[LatticeField<f64>],
    params: &MagnetParams<f64>,
    t1: f64,
    t0: f64,
    kernel_points: usize,
    seed: u64,
) -> Result<(KernelDataset<f64>, KernelDataset<f64>)> {
    let mut sub_rng = stream(seed, StreamDomain::Subsample, 0);
    let ds_t1 = fields_to_dataset(base_fields)?.subsample(kernel_points, &mut sub_rng);
    let side = base_fields[0].side();
    let log_w: Vec<f64> = (0..ds_t1.len())
        .map(|j| {
            let field = LatticeField::from_values(side, ds_t1.point(j).to_vec(), t1)?;
            Ok(crate::magnet::hamiltonian(&field, t1, params)
                - crate::magnet::hamiltonian(&field, t0, params))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ds_t0 = ds_t1.reweighted(log_w)?;
    Ok((ds_t1, ds_t0))
}

fn magnet_experiment(config: &ExperimentConfig) -> Result<Value> {
    let schedule = schedule_from(config)?;
    let params = magnet_params(config);
    let m = &config.magnet;
    let omega = omega_for_temperature(m.temperature, m.t1, m.t0)?;

    // Reference chains: the t1 training ensemble, a warm chain at t0
    // for the unimodality oracle, and the target temperature for the
    // NLL baseline.
    let train_cfg = mh_config(config, m.mh_samples);
    let (run_t1, _) = mh_ensemble(m.t1, &params, &train_cfg, m.chains, config.run.seed, 0)?;
    let warm_cfg = mh_config(config, m.reference_samples);
    let (run_t0, _) = mh_ensemble(m.t0, &params, &warm_cfg, m.chains, config.run.seed, 10_000)?;
    let ref_cfg = mh_config(config, m.reference_samples);
    let (run_ref, ref_balance) =
        mh_ensemble(m.temperature, &params, &ref_cfg, m.chains, config.run.seed, 20_000)?;

    let (ds_t1, ds_t0) = coupled_kernel_datasets(
        &run_t1.fields,
        &params,
        m.t1,
        m.t0,
        m.kernel_points,
        config.run.seed,
    )?;
    let ess = ds_t0.effective_sample_size();
    let kernel = KernelModel::new(schedule, ds_t0, vec![(m.t1, ds_t1)])?;
    let model = crate::magnet::BlendedMagnetModel::new(
        kernel,
        params,
        m.side,
        m.t0,
        m.sigma_lo,
        m.sigma_hi,
    )?;

    let mut metrics = Map::new();
    let mut kl_by_tag = Vec::new();
    let mut batches = Vec::new();
    for (idx, method) in methods_for(config, omega).into_iter().enumerate() {
        let record = config.run.batch <= TRACE_BATCH_LIMIT;
        let opts = RunOptions {
            batch: config.run.batch,
            seed: config.run.seed,
            record_traces: record,
            trajectory_offset: 0,
        };
        let batch = run_sampler(&model, Some(&m.t1), &method, config.sampler, opts)?;
        let fields = batch_to_fields(&batch, m.side, m.temperature)?;
        let nll = magnet_nll(&fields, m.temperature, &run_ref.fields, &params)?;
        let magnetization = mean_magnetization(&fields);
        let peaks = bimodality_check(&magnetization, 80, 2.0)?;
        let tag = method_tag(&method).to_string();
        write_samples_csv(&samples_path(config, idx == 0, &tag), &batch)?;
        write_magnetization_csv(
            &config.run.out.join(format!("magnetization_{tag}.csv")),
            &magnetization,
        )?;
        metrics.insert(
            run_key(&batch),
            json!({
                "nll": nll,
                "omega": omega,
                "temperature": m.temperature,
                "peak_count": peaks.peak_count,
                "peak_to_valley_ratio": peaks.peak_to_valley_ratio,
                "peak_locations": peaks.peak_locations,
                "batch": batch.samples.len(),
                "stats": batch.stats,
            }),
        );
        kl_by_tag.push((tag, nll));
        batches.push(batch);
    }
    // For the magnet the paired comparison is on NLL, lower better.
    insert_paired_comparison(&mut metrics, &kl_by_tag);

    let ref_mag = mean_magnetization(&run_ref.fields);
    let ref_peaks = bimodality_check(&ref_mag, 80, 2.0)?;
    write_magnetization_csv(&config.run.out.join("magnetization_reference.csv"), &ref_mag)?;
    let warm_mag = mean_magnetization(&run_t0.fields);
    let warm_peaks = bimodality_check(&warm_mag, 80, 2.0)?;
    metrics.insert(
        "reference".to_string(),
        json!({
            "temperature": m.temperature,
            "peak_count": ref_peaks.peak_count,
            "peak_to_valley_ratio": ref_peaks.peak_to_valley_ratio,
            "mode_balance": ref_balance,
            "mh_acceptance": run_ref.acceptance_rate(),
            "warm_temperature": m.t0,
            "warm_peak_count": warm_peaks.peak_count,
            "t0_weight_ess": ess,
        }),
    );
    let refs: Vec<&SampleBatch<f64>> = batches.iter().collect();
    write_json(&config.run.out.join("traces.json"), &traces_json(&refs))?;
    Ok(Value::Object(metrics))
}

// ---------------------------------------------------------------------------
// MH dataset generation

fn mh_experiment(config: &ExperimentConfig) -> Result<Value> {
    let params = magnet_params(config);
    let m = &config.magnet;
    let mut report = Map::new();
    let runs: [(f64, usize, u64); 3] = [
        (m.t1, m.mh_samples, 0),
        (m.t0, m.mh_samples, 10_000),
        (m.temperature, m.reference_samples, 20_000),
    ];
    for (temp, n, offset) in runs {
        let cfg = mh_config(config, n);
        let (run, balance) = mh_ensemble(temp, &params, &cfg, m.chains, config.run.seed, offset)?;
        let dataset = fields_to_dataset(&run.fields)?;
        let tag = format!("T{temp}");
        dataset.save_csv(&config.run.out.join(format!("dataset_{tag}.csv")))?;
        write_magnetization_csv(
            &config.run.out.join(format!("magnetization_{tag}.csv")),
            &mean_magnetization(&run.fields),
        )?;
        report.insert(
            tag,
            json!({
                "samples": run.fields.len(),
                "acceptance_rate": run.acceptance_rate(),
                "mode_balance": balance,
            }),
        );
    }
    write_json(&config.run.out.join("traces.json"), &traces_json(&[]))?;
    Ok(Value::Object(report))
}

// ---------------------------------------------------------------------------
// Mixing-error diagnostics

/// Solver used to evaluate the corrected field inside finite
/// differences: tight tolerance so solver error stays far below the
/// truncation error of the stencils.
fn diagnostic_spec(omega: f64) -> GuidanceSpec<f64> {
    let mut spec = GuidanceSpec::new(omega);
    spec.solver = SolverKind::Anderson;
    spec.params.gamma = 1.0;
    spec.params.anderson_m = 2;
    spec.tolerance = 1e-12;
    spec.max_iters = 200;
    spec
}

fn diagnose_experiment(config: &ExperimentConfig) -> Result<Value> {
    let schedule = schedule_from(config)?;
    let model = GaussianModel::new(schedule);
    let c = GAUSSIAN_CONDITION;
    let d = &config.diagnose;
    let fd = FdSteps {
        space: d.fd,
        time: d.fd,
    };
    // Times with noise scales evenly spaced over the requested band.
    let times: Vec<f64> = (0..d.times)
        .map(|k| {
            let frac = if d.times == 1 {
                0.5
            } else {
                k as f64 / (d.times - 1) as f64
            };
            let sigma = d.sigma_min + frac * (d.sigma_max - d.sigma_min);
            -(1.0 - sigma * sigma).ln()
        })
        .collect();
    // Probes drawn from the guided reference distribution at the
    // largest scale in the list.
    let omega_ref = d.omega_list.iter().cloned().fold(0.0, f64::max);
    let (target_mean, target_var) = GaussianModel::guided_target(&c, omega_ref);
    let mut rng = stream(config.run.seed, StreamDomain::Metric, 300);
    let probes: Vec<Vec<f64>> = (0..d.probes)
        .map(|_| {
            vec![
                target_mean[0] + target_var.sqrt() * f64::standard_normal(&mut rng),
                target_mean[1] + target_var.sqrt() * f64::standard_normal(&mut rng),
            ]
        })
        .collect();

    let mut entries = Vec::new();
    for &t in &times {
        for &omega in &d.omega_list {
            let cf_field = |x: &[f64], tt: f64| {
                let level = NoiseLevel::at_time(tt)?;
                let e_c = model.eps_at(x, Some(&c), level)?;
                let e_u = model.eps_at(x, None, level)?;
                classifier_free_eps(&e_c, &e_u, omega)
            };
            let spec = diagnostic_spec(omega);
            let ch_field = |x: &[f64], tt: f64| {
                let level = NoiseLevel::at_time(tt)?;
                let (eps, _) = characteristic_eps_at(x, Some(&c), level, &model, &spec, None)?;
                Ok(eps)
            };
            let cf_norms = mixing_error_report(&cf_field, &probes, t, fd)?.e_m_norms;
            let ch_norms = mixing_error_report(&ch_field, &probes, t, fd)?.e_m_norms;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            entries.push(json!({
                "t": t,
                "sigma": crate::schedule::sigma_of_time(t)?,
                "omega": omega,
                "cf_mean_norm": mean(&cf_norms),
                "cf_max_norm": cf_norms.iter().cloned().fold(0.0, f64::max),
                "ch_mean_norm": mean(&ch_norms),
                "ch_max_norm": ch_norms.iter().cloned().fold(0.0, f64::max),
                "cf_norms": cf_norms,
                "ch_norms": ch_norms,
            }));
        }
    }
    let report = json!({
        "fd": d.fd,
        "probes": probes,
        "entries": entries,
    });
    write_json(&config.run.out.join("traces.json"), &traces_json(&[]))?;
    Ok(json!({ "diagnose": report }))
}

// ---------------------------------------------------------------------------
// Iteration study

/// Fraction of the top-decile iteration-count timesteps that fall
/// inside the middle half of the step range.
pub fn top_decile_middle_fraction(steps: &[StepAggregate], n: usize) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    let mut by_iters: Vec<&StepAggregate> = steps.iter().collect();
    by_iters.sort_by(|a, b| b.mean_iterations.partial_cmp(&a.mean_iterations).unwrap());
    let decile = (by_iters.len().div_ceil(10)).max(1);
    let top = &by_iters[..decile];
    let (lo, hi) = (n / 4, 3 * n / 4);
    let inside = top.iter().filter(|s| s.step >= lo && s.step <= hi).count();
    inside as f64 / decile as f64
}

fn iterstudy_experiment(config: &ExperimentConfig) -> Result<Value> {
    let schedule = schedule_from(config)?;
    let model = MixtureModel::new(schedule.clone());
    let omega = config.guidance.omega;
    let mut sweeps = Vec::new();
    let mut last_batch = None;
    for &tolerance in &config.iterstudy.tolerances {
        let mut spec = config.guidance.to_spec();
        spec.omega = omega;
        spec.tolerance = tolerance;
        let method = GuidanceMethod::Characteristic { spec };
        let batch = run_mixture_batch(
            &model,
            &method,
            config.sampler,
            config.run.batch,
            config.run.seed,
            true,
        )?;
        let aggregates = aggregate_traces(batch.traces.as_deref().unwrap_or(&[]));
        let concentration = top_decile_middle_fraction(&aggregates, schedule.n());
        sweeps.push(json!({
            "tolerance": tolerance,
            "total_iterations": batch.stats.total_iterations,
            "nonconverged": batch.stats.nonconverged,
            "top_decile_middle_fraction": concentration,
            "steps": aggregates,
        }));
        last_batch = Some(batch);
    }
    if let Some(batch) = &last_batch {
        write_samples_csv(&config.run.out.join("samples.csv"), batch)?;
        let refs = [batch];
        write_json(
            &config.run.out.join("traces.json"),
            &traces_json(&refs[..]),
        )?;
    }
    Ok(json!({ "iterstudy": { "omega": omega, "sweeps": sweeps } }))
}
