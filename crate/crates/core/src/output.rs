//! Run artifacts: samples CSV, metrics JSON, solver-trace JSON, config
//! echo. All writes are atomic (temp file + rename) so a crashed run
//! never leaves a torn file behind.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::sampler::{SampleBatch, SamplerMethod, TrajectoryTrace};

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "artifact".to_string())
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Metric(format!("json encoding failed: {e}")))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn sampler_name(method: SamplerMethod) -> &'static str {
    match method {
        SamplerMethod::Sde => "sde",
        SamplerMethod::Ode => "ode",
        SamplerMethod::Ddim => "ddim",
        SamplerMethod::DpmPp2M => "dpmpp2m",
    }
}

fn guidance_name(batch: &SampleBatch<f64>) -> (String, f64) {
    use crate::sampler::GuidanceMethod::*;
    match &batch.guidance {
        Conditional => ("conditional".to_string(), 0.0),
        ClassifierFree { omega } => ("cf".to_string(), *omega),
        Characteristic { spec } => ("ch".to_string(), spec.omega),
        CharacteristicFixed { omega, .. } => ("ch_fixed".to_string(), *omega),
    }
}

/// Flat key used by the metrics report: `<sampler><steps>/<guidance>/omega=<w>`.
pub fn run_key(batch: &SampleBatch<f64>) -> String {
    let (guidance, omega) = guidance_name(batch);
    format!(
        "{}{}/{}/omega={}",
        sampler_name(batch.sampler.method),
        batch.sampler.steps,
        guidance,
        omega
    )
}

/// Writes one sample per row. The header line carries the run metadata
/// as `key=value` pairs, starting with the dimension and seed.
pub fn write_samples_csv(path: &Path, batch: &SampleBatch<f64>) -> Result<()> {
    let dim = batch.samples.first().map(|s| s.len()).unwrap_or(0);
    let (guidance, omega) = guidance_name(batch);
    let mut text = format!(
        "dim={dim},seed={seed},sampler={sampler},steps={steps},guidance={guidance},omega={omega:?}\n",
        seed = batch.seed,
        sampler = sampler_name(batch.sampler.method),
        steps = batch.sampler.steps,
    );
    for sample in &batch.samples {
        let row: Vec<String> = sample.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Per-timestep aggregate of solver activity across a batch.
#[derive(Debug, Clone, Serialize)]
pub struct StepAggregate {
    pub step: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub nonconverged: usize,
    pub mean_final_residual: f64,
    pub trajectories: usize,
}

/// Collapses per-trajectory traces into per-timestep rows (noisiest
/// step first).
pub fn aggregate_traces(traces: &[TrajectoryTrace<f64>]) -> Vec<StepAggregate> {
    use std::collections::BTreeMap;
    let mut per_step: BTreeMap<usize, (usize, usize, usize, f64, usize)> = BTreeMap::new();
    for trace in traces {
        for s in &trace.steps {
            let e = per_step.entry(s.step).or_insert((0, 0, 0, 0.0, 0));
            e.0 += s.iterations;
            e.1 = e.1.max(s.iterations);
            e.2 += usize::from(!s.converged);
            e.3 += s.final_residual;
            e.4 += 1;
        }
    }
    per_step
        .into_iter()
        .rev()
        .map(
            |(step, (iter_sum, max_iterations, nonconverged, residual_sum, count))| {
                StepAggregate {
                    step,
                    mean_iterations: iter_sum as f64 / count as f64,
                    max_iterations,
                    nonconverged,
                    mean_final_residual: residual_sum / count as f64,
                    trajectories: count,
                }
            },
        )
        .collect()
}

/// Trace export: one entry per run, each with per-step arrays of
/// residual norms and iteration counts. Runs without solver traces
/// contribute an empty `steps` array.
pub fn traces_json(batches: &[&SampleBatch<f64>]) -> Value {
    let entries: Vec<Value> = batches
        .iter()
        .map(|batch| {
            let steps = batch
                .traces
                .as_deref()
                .map(aggregate_traces)
                .unwrap_or_default();
            json!({
                "run": run_key(batch),
                "seed": batch.seed,
                "sampler": batch.sampler,
                "guidance": batch.guidance,
                "stats": batch.stats,
                "steps": steps,
            })
        })
        .collect();
    Value::Array(entries)
}

/// Marks a partially completed run directory.
pub fn write_failure_marker(dir: &Path, message: &str) {
    let path = dir.join("FAILED");
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(&path, format!("{message}\n"));
}

pub fn artifact_paths(dir: &Path) -> ArtifactPaths {
    ArtifactPaths {
        samples: dir.join("samples.csv"),
        metrics: dir.join("metrics.json"),
        traces: dir.join("traces.json"),
        config_echo: dir.join("config_echo.txt"),
    }
}

#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub samples: PathBuf,
    pub metrics: PathBuf,
    pub traces: PathBuf,
    pub config_echo: PathBuf,
}
