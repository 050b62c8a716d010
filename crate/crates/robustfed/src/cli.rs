//! Command implementations behind the `robustfed` binary: `simulate`,
//! `resilience` and `sweep`.
//!
//! All outputs are written atomically (temp file + rename), so an
//! interrupted run never leaves a truncated CSV or JSON behind. Output
//! bytes are fully determined by the config: floats are printed in shortest
//! round-trip form and the measured wallclock column is suppressed (written
//! as 0), so re-running a config reproduces its files exactly.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::ExperimentFile;
use crate::data::{import_dataset, make_blobs_split};
use crate::error::Result;
use crate::learning::Dataset;
use crate::resilience::{estimate, layerwise_angle_check, LayerwiseAngleReport, ResilienceEstimate};
use crate::seeding::derive_seed;
use crate::simulator::{run, RoundMetrics, RunSummary};

/// Failure split by exit-code contract: usage/config problems exit 2,
/// runtime failures exit 1.
#[derive(Debug)]
pub enum CliFailure {
    Usage(String),
    Runtime(String),
}

impl CliFailure {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliFailure::Usage(_) => 2,
            CliFailure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliFailure::Usage(m) => m,
            CliFailure::Runtime(m) => m,
        }
    }
}

pub type CliResult = std::result::Result<(), CliFailure>;

fn usage<T>(r: Result<T>) -> std::result::Result<T, CliFailure> {
    r.map_err(|e| CliFailure::Usage(e.to_string()))
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, CliFailure> {
    r.map_err(|e| CliFailure::Runtime(e.to_string()))
}

// Seed stream tag for dataset generation.
const STREAM_DATA: u64 = 0xDA7A;

#[derive(Serialize)]
struct SummaryOut<'a> {
    final_loss: f64,
    avg_last10_loss: f64,
    min_loss: f64,
    avg_last10_accuracy: f64,
    max_accuracy: f64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct ResilienceReport<'a> {
    #[serde(flatten)]
    estimate: &'a ResilienceEstimate,
    condition_i_holds: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    layerwise_check: Option<&'a LayerwiseAngleReport>,
    config_hash: &'a str,
}

/// Run a federated experiment and persist `metrics.csv` + `summary.json`
/// under `out`.
pub fn cmd_simulate(config_path: &Path, out: &Path, sets: &[String]) -> CliResult {
    let file = usage(ExperimentFile::load(config_path, sets))?;
    let config = usage(file.federated_config())?;
    let (train, test) = usage(build_datasets(&file))?;
    let hash = usage(file.config_hash())?;

    let (metrics, summary) = runtime(run(&config, &train, &test))?;
    runtime(write_atomic(
        &out.join(&file.output.metrics_csv),
        metrics_csv(&metrics).as_bytes(),
    ))?;
    runtime(write_atomic(
        &out.join(&file.output.summary_json),
        summary_json(&summary, &hash).as_bytes(),
    ))?;
    Ok(())
}

/// Run the Monte-Carlo resilience estimator and persist `report.json`.
pub fn cmd_resilience(config_path: &Path, out: &Path, sets: &[String]) -> CliResult {
    let file = usage(ExperimentFile::load(config_path, sets))?;
    let (scenario, partition) = usage(file.resilience_scenario())?;
    let spec = usage(file.aggregator_spec())?;
    let hash = usage(file.config_hash())?;

    let est = runtime(estimate(&scenario, &spec, &partition, file.seed))?;
    let layerwise_report = if spec.layerwise && partition.num_blocks() > 1 {
        Some(runtime(layerwise_angle_check(
            &scenario, &spec, &partition, file.seed,
        ))?)
    } else {
        None
    };
    let report = ResilienceReport {
        condition_i_holds: est.condition_i_holds(&scenario.g),
        estimate: &est,
        layerwise_check: layerwise_report.as_ref(),
        config_hash: &hash,
    };
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| CliFailure::Runtime(e.to_string()))?;
    runtime(write_atomic(&out.join(&file.output.report_json), body.as_bytes()))?;
    Ok(())
}

/// Axes a sweep may vary.
const SWEEP_AXES: [(&str, &str); 5] = [
    ("operator", "aggregator.base"),
    ("variant", "aggregator.variant"),
    ("byzantine_fraction", "attack.byzantine_fraction"),
    ("d", "model.input_dim"),
    ("seed", "seed"),
];

#[derive(Serialize)]
struct IndexCell {
    name: String,
    params: Vec<(String, String)>,
    metrics_csv: String,
    summary_json: String,
    summary: RunSummary,
}

#[derive(Serialize)]
struct SweepIndex {
    base_config_hash: String,
    cells: Vec<IndexCell>,
}

/// Run the cross-product of the given axes, one `simulate` per cell, then
/// write an index of every cell and its summary.
pub fn cmd_sweep(
    config_path: &Path,
    out: &Path,
    sets: &[String],
    axes: &[String],
    jobs: usize,
) -> CliResult {
    let base = usage(ExperimentFile::load(config_path, sets))?;
    let base_hash = usage(base.config_hash())?;
    let parsed_axes = parse_axes(axes)?;
    if parsed_axes.is_empty() {
        return Err(CliFailure::Usage(
            "sweep requires at least one --axis name=v1,v2,...".into(),
        ));
    }

    // Cross product in axis order, first axis slowest.
    let mut cells: Vec<Vec<(String, String, String)>> = vec![Vec::new()];
    for (name, key, values) in &parsed_axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for value in values {
                let mut extended = cell.clone();
                extended.push((name.clone(), key.clone(), value.clone()));
                next.push(extended);
            }
        }
        cells = next;
    }

    let total = cells.len();
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CliFailure::Usage(format!("cannot read {}: {e}", config_path.display())))?;
    let results: Mutex<Vec<Option<std::result::Result<IndexCell, CliFailure>>>> =
        Mutex::new((0..total).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    let workers = jobs.max(1).min(total);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= total {
                    break;
                }
                let result = run_cell(&text, sets, &cells[i], i, out);
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });

    let collected = results.into_inner().unwrap();
    let mut index_cells = Vec::with_capacity(total);
    for slot in collected {
        match slot.expect("every cell ran") {
            Ok(cell) => index_cells.push(cell),
            Err(failure) => return Err(failure),
        }
    }
    let index = SweepIndex {
        base_config_hash: base_hash,
        cells: index_cells,
    };
    let body =
        serde_json::to_string_pretty(&index).map_err(|e| CliFailure::Runtime(e.to_string()))?;
    runtime(write_atomic(&out.join("index.json"), body.as_bytes()))?;
    Ok(())
}

fn parse_axes(axes: &[String]) -> std::result::Result<Vec<(String, String, Vec<String>)>, CliFailure> {
    axes.iter()
        .map(|axis| {
            let (name, values) = axis.split_once('=').ok_or_else(|| {
                CliFailure::Usage(format!("axis {axis:?} is not of the form name=v1,v2,..."))
            })?;
            let key = SWEEP_AXES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, k)| k.to_string())
                .ok_or_else(|| {
                    CliFailure::Usage(format!(
                        "unknown sweep axis {name:?}: expected one of {}",
                        SWEEP_AXES.map(|(n, _)| n).join(", ")
                    ))
                })?;
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::to_string)
                .collect();
            if values.is_empty() {
                return Err(CliFailure::Usage(format!("axis {name:?} has no values")));
            }
            Ok((name.to_string(), key, values))
        })
        .collect()
}

fn run_cell(
    base_text: &str,
    sets: &[String],
    cell: &[(String, String, String)],
    index: usize,
    out: &Path,
) -> std::result::Result<IndexCell, CliFailure> {
    let mut overrides: Vec<String> = sets.to_vec();
    let mut name = format!("{index:03}");
    let mut params = Vec::with_capacity(cell.len());
    for (axis, key, value) in cell {
        overrides.push(format!("{key}={value}"));
        name.push_str(&format!("_{axis}-{value}"));
        params.push((axis.clone(), value.clone()));
    }
    let file = usage(ExperimentFile::parse_with_overrides(base_text, &overrides))?;
    let config = usage(file.federated_config())?;
    let (train, test) = usage(build_datasets(&file))?;
    let hash = usage(file.config_hash())?;

    let (metrics, summary) = runtime(run(&config, &train, &test))?;
    let cell_dir = out.join("cells").join(&name);
    let csv_path = cell_dir.join(&file.output.metrics_csv);
    let json_path = cell_dir.join(&file.output.summary_json);
    runtime(write_atomic(&csv_path, metrics_csv(&metrics).as_bytes()))?;
    runtime(write_atomic(&json_path, summary_json(&summary, &hash).as_bytes()))?;
    Ok(IndexCell {
        name,
        params,
        metrics_csv: csv_path.to_string_lossy().into_owned(),
        summary_json: json_path.to_string_lossy().into_owned(),
        summary,
    })
}

/// Generate or import the train/test datasets named by the config. Generated
/// sets are split from one blob distribution, so train and test share class
/// centers.
fn build_datasets(file: &ExperimentFile) -> Result<(Dataset, Dataset)> {
    let arch = file.model_arch()?;
    match (&file.data.train_file, &file.data.test_file) {
        (Some(train_path), Some(test_path)) => {
            Ok((import_dataset(train_path)?, import_dataset(test_path)?))
        }
        (None, None) => make_blobs_split(
            arch.num_classes(),
            arch.input_dim(),
            file.data.per_class,
            file.data.test_per_class,
            file.data.spread,
            derive_seed(file.seed, STREAM_DATA, 0),
        ),
        _ => Err(crate::error::Error::Config(
            "data.train_file and data.test_file must be set together".into(),
        )),
    }
}

/// Render the per-round metrics stream. The wallclock column is fixed at 0
/// so outputs are byte-reproducible; measured timings stay on
/// [`RoundMetrics`] for library callers.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = String::from(
        "round,test_loss,test_accuracy,selected_indices,clip_threshold,wallclock_ms\n",
    );
    for m in metrics {
        let selected = m
            .selected_indices
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        let clip = m.clip_threshold.map(|t| t.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},0\n",
            m.round, m.test_loss, m.test_accuracy, selected, clip
        ));
    }
    s
}

fn summary_json(summary: &RunSummary, hash: &str) -> String {
    let out = SummaryOut {
        final_loss: summary.final_loss,
        avg_last10_loss: summary.avg_last10_loss,
        min_loss: summary.min_loss,
        avg_last10_accuracy: summary.avg_last10_accuracy,
        max_accuracy: summary.max_accuracy,
        config_hash: hash,
    };
    serde_json::to_string_pretty(&out).expect("summary serialization cannot fail")
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then
/// rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let mut tmp = PathBuf::from(path);
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
seed = 3

[model]
kind = "softmax"
input_dim = 4
num_classes = 2

[data]
per_class = 40
test_per_class = 20

[federation]
num_clients = 5
min_samples_per_client = 0

[aggregator]
base = "fedavg"

[run]
rounds = 2
clients_per_round = 3
"#;

    fn write_config(dir: &Path) -> PathBuf {
        let path = dir.join("experiment.toml");
        std::fs::write(&path, CONFIG).unwrap();
        path
    }

    #[test]
    fn simulate_writes_csv_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        cmd_simulate(&config, dir.path(), &[]).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3); // header + 2 rounds
        assert!(csv.starts_with(
            "round,test_loss,test_accuracy,selected_indices,clip_threshold,wallclock_ms"
        ));
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert!(summary["final_loss"].is_f64());
        assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn simulate_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        cmd_simulate(&config, &out_a, &["seed=7".into()]).unwrap();
        cmd_simulate(&config, &out_b, &["seed=7".into()]).unwrap();
        assert_eq!(
            std::fs::read(out_a.join("metrics.csv")).unwrap(),
            std::fs::read(out_b.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(out_a.join("summary.json")).unwrap(),
            std::fs::read(out_b.join("summary.json")).unwrap()
        );
    }

    #[test]
    fn missing_config_is_a_usage_failure() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_simulate(&dir.path().join("nope.toml"), dir.path(), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_override_is_a_usage_failure() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let err = cmd_simulate(&config, dir.path(), &["run.rnds=3".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn aggregation_failure_is_a_runtime_failure() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        // Krum with f = 2 needs 5 clients per round; only 3 are sampled.
        let err = cmd_simulate(
            &config,
            dir.path(),
            &["aggregator.base=krum".into(), "aggregator.f=2".into()],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 1, "{}", err.message());
    }

    #[test]
    fn resilience_report_has_the_estimate_fields() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        cmd_resilience(
            &config,
            dir.path(),
            &["resilience.trials=50".into(), "aggregator.base=krum".into(), "aggregator.f=5".into()],
        )
        .unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert!(report["alpha_hat"].is_f64());
        assert!(report["moment_ratios"]["r2"].is_f64());
        assert!(report["condition_i_holds"].is_boolean());
    }

    #[test]
    fn sweep_produces_one_cell_per_combination() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let out = dir.path().join("sweep");
        cmd_sweep(
            &config,
            &out,
            &[],
            &["variant=original,layerwise".into(), "seed=1,2".into()],
            2,
        )
        .unwrap();
        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("index.json")).unwrap())
                .unwrap();
        let cells = index["cells"].as_array().unwrap();
        assert_eq!(cells.len(), 4);
        for cell in cells {
            assert!(Path::new(cell["metrics_csv"].as_str().unwrap()).exists());
        }
    }

    #[test]
    fn sweep_rejects_unknown_axis() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let err = cmd_sweep(&config, dir.path(), &[], &["learning_rate=0.1,0.2".into()], 1)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested").join("file.txt");
        write_atomic(&target, b"payload").unwrap();
        assert_eq!(std::fs::read(&target).unwrap(), b"payload");
        let entries: Vec<_> = std::fs::read_dir(target.parent().unwrap())
            .unwrap()
            .collect();
        assert_eq!(entries.len(), 1);
    }
}
