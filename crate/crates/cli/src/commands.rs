use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hookmem_core::dataset::{
    duplicate_subjects, generate_synthetic, ingest_json, read_jsonl, write_jsonl, FactRecord, SchemaMapping,
};
use hookmem_core::eval::{
    analyze_scope, employment_stats, eval_generality, eval_locality, eval_reliability, memory_report, trace_rows,
    MemoryReport, MetricsReport, PromptSet, ScopeSummary,
};
use hookmem_core::network::ToyNetwork;
use hookmem_core::pipeline::{n_steps, run_consecutive, EditSession, UpdateTarget};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{Format, RunConfig};
use crate::error::{dataset_error, CliError};
use crate::report::{scope_svg, write_csv, write_json, EmploymentRow};
use crate::snapshot::{self, file_sha256, snapshot_dir, Manifest, Snapshot};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn load_records(path: &Path) -> Result<Vec<FactRecord>, CliError> {
    read_jsonl(path).map_err(|e| dataset_error(path, e))
}

/// Scheduled evaluation steps: every `every` steps plus the last one.
pub fn eval_schedule(total: usize, every: usize) -> Vec<usize> {
    let mut s: Vec<usize> = if every == 0 {
        Vec::new()
    } else {
        (every..=total).step_by(every).collect()
    };
    if total > 0 && s.last() != Some(&total) {
        s.push(total);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub n_records: usize,
    pub n_rejects: usize,
    pub n_duplicate_subjects: usize,
    pub sha256: String,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary, CliError> {
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let net = ToyNetwork::new(cfg.network.clone())?;
    let (records, n_rejects) = match cfg.schema() {
        None if cfg.dataset.n_records == 0 => {
            warn!("n_records = 0: writing an empty dataset");
            (Vec::new(), 0)
        }
        None => {
            let recs = generate_synthetic(&net, cfg.dataset.n_records, &cfg.synthetic())
                .map_err(|e| dataset_error(&path, e))?;
            (recs, 0)
        }
        Some(kind) => {
            let input = cfg.dataset.input.as_deref().expect("validated: ingested sources have an input");
            let ing = ingest_json(input, &SchemaMapping::defaults(kind), cfg.dataset.seed, &net)
                .map_err(|e| dataset_error(input, e))?;
            for (i, why) in &ing.rejects {
                warn!("record {i} rejected: {why}");
            }
            let mut recs = ing.records;
            if cfg.dataset.n_records > 0 {
                recs.truncate(cfg.dataset.n_records);
            }
            (recs, ing.rejects.len())
        }
    };
    write_jsonl(&path, &records).map_err(|e| dataset_error(&path, e))?;
    let summary = GenerateSummary {
        n_records: records.len(),
        n_rejects,
        n_duplicate_subjects: duplicate_subjects(&records).len(),
        sha256: file_sha256(&path)?,
        path,
    };
    info!(
        "wrote {} record(s) to {} ({} rejected)",
        summary.n_records,
        summary.path.display(),
        summary.n_rejects
    );
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct EditOptions {
    /// Snapshot directory to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in total (the snapshot can be resumed).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditSummary {
    pub steps_completed: usize,
    pub total_steps: usize,
    pub last_metrics: Option<MetricsReport>,
    pub snapshot: PathBuf,
    pub config_hash: String,
}

/// Log row for the step CSV.
#[derive(Debug, Clone, Serialize)]
struct StepCsvRow {
    step: usize,
    layer: usize,
    alpha: Option<f64>,
    delta_fro: f64,
    cond_estimate: f64,
}

pub fn write_edit_outputs(out: &Path, cfg: &RunConfig, snap: &Snapshot) -> Result<(), CliError> {
    let rows: Vec<StepCsvRow> = snap
        .session
        .step_log
        .iter()
        .map(|r| StepCsvRow {
            step: r.step,
            layer: r.layer,
            alpha: (!r.alpha.is_nan()).then_some(r.alpha),
            delta_fro: r.delta_fro,
            cond_estimate: r.cond_estimate,
        })
        .collect();
    if cfg.output.wants(Format::Csv) {
        write_csv(&out.join("step_log.csv"), &rows)?;
        write_csv(&out.join("metrics.csv"), &metrics_rows(&snap.metrics))?;
    }
    if cfg.output.wants(Format::Json) {
        write_json(&out.join("metrics.json"), &snap.metrics)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct MetricsCsvRow {
    step: usize,
    reliability: f64,
    generality: f64,
    locality: f64,
    average: f64,
    n_eval: usize,
}

fn metrics_rows(metrics: &[MetricsReport]) -> Vec<MetricsCsvRow> {
    metrics
        .iter()
        .map(|m| MetricsCsvRow {
            step: m.step,
            reliability: m.reliability,
            generality: m.generality,
            locality: m.locality,
            average: m.average,
            n_eval: m.n_eval.reliability,
        })
        .collect()
}

pub fn cmd_edit(cfg: &RunConfig, opts: &EditOptions) -> Result<EditSummary, CliError> {
    let data_path = cfg.dataset_path();
    let records = load_records(&data_path)?;
    if records.is_empty() {
        return Err(CliError::Config(format!("{} holds no records", data_path.display())));
    }
    let data_sha = file_sha256(&data_path)?;
    let mut snap = match &opts.resume {
        Some(dir) => {
            let (snap, manifest) = snapshot::load(dir)?;
            check_resume(&manifest, cfg, &data_sha)?;
            info!("resuming from step {}", snap.session.steps_completed);
            snap
        }
        None => {
            let net = ToyNetwork::new(cfg.network.clone())?;
            Snapshot {
                session: EditSession::new(net, cfg.editing.clone())?,
                metrics: Vec::new(),
            }
        }
    };
    let b = cfg.editing.batch_size;
    let total = n_steps(records.len(), b);
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let end = (stop * b).min(records.len());
    let schedule: Vec<usize> = eval_schedule(total, cfg.output.eval_every)
        .into_iter()
        .filter(|&s| s <= stop)
        .collect();
    let new_metrics = run_consecutive(&mut snap.session, &records[..end], b, &schedule)?;
    snap.metrics.extend(new_metrics);

    let out = &cfg.output.directory;
    create_dir(out)?;
    let dir = snapshot_dir(out);
    let manifest = snapshot::save(&dir, &snap, cfg, &data_sha)?;
    write_edit_outputs(out, cfg, &snap)?;
    Ok(EditSummary {
        steps_completed: snap.session.steps_completed,
        total_steps: total,
        last_metrics: snap.metrics.last().cloned(),
        snapshot: dir,
        config_hash: manifest.config_hash,
    })
}

fn check_resume(manifest: &Manifest, cfg: &RunConfig, data_sha: &str) -> Result<(), CliError> {
    if manifest.config_hash != cfg.hash() {
        return Err(CliError::Config(
            "the snapshot was produced with a different config".into(),
        ));
    }
    if manifest.dataset_sha256 != data_sha {
        return Err(CliError::Config("the snapshot was produced from a different dataset".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Reliability,
    Generality,
    Locality,
    All,
    Scope,
    Employment,
    Memory,
}

impl Which {
    pub const ALL: [Which; 7] = [
        Which::Reliability,
        Which::Generality,
        Which::Locality,
        Which::All,
        Which::Scope,
        Which::Employment,
        Which::Memory,
    ];

    fn includes(self, other: Which) -> bool {
        self == other || self == Which::All
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("enum serializes");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

impl FromStr for Which {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Which::ALL
            .into_iter()
            .find(|w| w.to_string() == s)
            .ok_or_else(|| format!("unknown report `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub snapshot: PathBuf,
    /// Defaults to the dataset named in the snapshot's config.
    pub dataset: Option<PathBuf>,
    pub which: Which,
    /// Defaults to the snapshot's parent directory.
    pub out: Option<PathBuf>,
    /// Also dump per-token routing traces.
    pub traces: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOutput {
    pub step: usize,
    pub n_records: usize,
    pub reliability: Option<f64>,
    pub generality: Option<f64>,
    pub locality: Option<f64>,
    pub scope: Option<ScopeSummary>,
    pub employment: Option<Vec<EmploymentRow>>,
    pub memory: Option<MemoryReport>,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<EvalOutput, CliError> {
    let (snap, manifest) = snapshot::load(&opts.snapshot)?;
    let cfg = &manifest.config;
    let session = &snap.session;
    let out = match &opts.out {
        Some(o) => o.clone(),
        None => opts
            .snapshot
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    create_dir(&out)?;
    let which = opts.which;
    let mut result = EvalOutput {
        step: session.steps_completed,
        ..EvalOutput::default()
    };
    let needs_records = which != Which::Memory || opts.traces;
    let records = if needs_records {
        let path = opts.dataset.clone().unwrap_or_else(|| cfg.dataset_path());
        let all = load_records(&path)?;
        if opts.dataset.is_none() && file_sha256(&path)? != manifest.dataset_sha256 {
            warn!("{} changed since the snapshot was written", path.display());
        }
        // the records edited so far; an unedited snapshot is scored on all
        let edited = (session.steps_completed * session.config.batch_size).min(all.len());
        let n = if edited == 0 { all.len() } else { edited };
        all[..n].to_vec()
    } else {
        Vec::new()
    };
    result.n_records = records.len();

    if which.includes(Which::Reliability) {
        result.reliability = Some(eval_reliability(session, &records)?);
    }
    if which.includes(Which::Generality) {
        result.generality = Some(eval_generality(session, &records)?);
    }
    if which.includes(Which::Locality) {
        result.locality = Some(eval_locality(session, &records)?);
    }
    if which.includes(Which::Scope) {
        let analysis = analyze_scope(session, &records, None)?;
        if cfg.output.wants(Format::Csv) {
            write_csv(&out.join("scope.csv"), &analysis.rows)?;
        }
        if cfg.output.wants(Format::Svg) {
            let path = out.join("scope.svg");
            fs::write(&path, scope_svg(&analysis)).map_err(CliError::io(&path))?;
        }
        result.scope = Some(analysis.summary);
    }
    if which.includes(Which::Employment) {
        let rows = [PromptSet::Reliability, PromptSet::Generality, PromptSet::Locality]
            .into_iter()
            .map(|set| employment_stats(session, &records, set).map(|e| EmploymentRow::from(&e)))
            .collect::<Result<Vec<_>, _>>()?;
        if cfg.output.wants(Format::Csv) {
            write_csv(&out.join("employment.csv"), &rows)?;
        }
        result.employment = Some(rows);
    }
    if which.includes(Which::Memory) {
        result.memory = Some(memory_report(session));
    }
    if opts.traces {
        for set in [PromptSet::Reliability, PromptSet::Generality, PromptSet::Locality] {
            let rows = trace_rows(session, &records, set)?;
            let name = serde_json::to_value(set).expect("enum serializes");
            write_csv(
                &out.join(format!("traces_{}.csv", name.as_str().expect("unit variant"))),
                &rows,
            )?;
        }
    }
    if cfg.output.wants(Format::Json) {
        write_json(&out.join(format!("eval_{which}.json")), &result)?;
    }
    Ok(result)
}

/// One ablated parameter and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<String>,
}

pub const SWEEP_PARAMS: [&str; 7] = ["lambda", "alpha_z", "fixed_alpha", "batch_size", "n_layers", "hook", "reg_beta"];

impl FromStr for Sweep {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (param, values) = s.split_once('=').ok_or_else(|| format!("sweep `{s}` is not param=v1,v2,..."))?;
        let param = param.trim().to_string();
        if !SWEEP_PARAMS.contains(&param.as_str()) {
            return Err(format!("unknown sweep parameter `{param}` (known: {})", SWEEP_PARAMS.join(", ")));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(format!("sweep `{param}` has no values"));
        }
        Ok(Sweep { param, values })
    }
}

fn parse_num<T: FromStr>(param: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{param}: `{v}` is not a valid value")))
}

/// `base` with one parameter replaced.
pub fn apply_cell(base: &RunConfig, param: &str, value: &str) -> Result<RunConfig, CliError> {
    let mut c = base.clone();
    let e = &mut c.editing;
    match param {
        "lambda" => e.lambda = parse_num(param, value)?,
        "alpha_z" => e.alpha_z = parse_num(param, value)?,
        "fixed_alpha" => {
            e.fixed_alpha = match value {
                "none" | "dynamic" => None,
                v => Some(parse_num(param, v)?),
            }
        }
        "batch_size" => e.batch_size = parse_num(param, value)?,
        "reg_beta" => e.reg_beta = parse_num(param, value)?,
        "n_layers" => {
            let k: usize = parse_num(param, value)?;
            let last = e.last_edit_layer();
            if k == 0 || k > last + 1 {
                return Err(CliError::Config(format!("n_layers = {k} does not fit below layer {last}")));
            }
            e.edit_layers = (last + 1 - k..=last).collect();
        }
        "hook" => {
            e.update_target = match value {
                "on" | "true" => UpdateTarget::Hooked,
                "off" | "false" => UpdateTarget::Direct,
                v => return Err(CliError::Config(format!("hook: `{v}` is not on/off"))),
            }
        }
        other => return Err(CliError::Config(format!("unknown sweep parameter `{other}`"))),
    }
    c.validate()?;
    Ok(c)
}

/// Long-format ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: String,
    pub value: String,
    pub step: usize,
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub param: String,
    pub value: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub csv: PathBuf,
    pub n_cells: usize,
    pub n_rows: usize,
    pub failures: Vec<CellFailure>,
}

fn run_cell(
    cfg: &RunConfig,
    net: &ToyNetwork,
    records: &[FactRecord],
    param: &str,
    value: &str,
) -> Result<Vec<AblationRow>, CliError> {
    let mut session = EditSession::new(net.clone(), cfg.editing.clone())?;
    let b = cfg.editing.batch_size;
    let total = n_steps(records.len(), b);
    let metrics = run_consecutive(&mut session, records, b, &eval_schedule(total, cfg.output.eval_every))?;
    let row = |step, metric: &str, score| AblationRow {
        param: param.to_string(),
        value: value.to_string(),
        step,
        metric: metric.to_string(),
        score,
    };
    let mut rows = Vec::new();
    for m in &metrics {
        rows.push(row(m.step, "reliability", m.reliability));
        rows.push(row(m.step, "generality", m.generality));
        rows.push(row(m.step, "locality", m.locality));
        rows.push(row(m.step, "average", m.average));
    }
    let changed = session.network.proj_fingerprint() != net.proj_fingerprint();
    rows.push(row(total, "proj_weights_changed", f64::from(u8::from(changed))));
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, sweeps: &[Sweep]) -> Result<AblationSummary, CliError> {
    if sweeps.iter().all(|s| s.values.is_empty()) {
        return Err(CliError::Config("the ablation grid is empty".into()));
    }
    let records = load_records(&cfg.dataset_path())?;
    if records.is_empty() {
        return Err(CliError::Config("the dataset holds no records".into()));
    }
    let net = ToyNetwork::new(cfg.network.clone())?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut n_cells = 0;
    for sweep in sweeps {
        for value in &sweep.values {
            n_cells += 1;
            info!("ablation cell {}={}", sweep.param, value);
            let result = apply_cell(cfg, &sweep.param, value)
                .and_then(|c| run_cell(&c, &net, &records, &sweep.param, value));
            match result {
                Ok(r) => rows.extend(r),
                Err(e) => {
                    warn!("cell {}={} failed: {e}", sweep.param, value);
                    failures.push(CellFailure {
                        param: sweep.param.clone(),
                        value: value.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let out = &cfg.output.directory;
    create_dir(out)?;
    let csv = out.join("ablation.csv");
    write_csv(&csv, &rows)?;
    if !failures.is_empty() {
        write_json(&out.join("ablation_failures.json"), &failures)?;
    }
    Ok(AblationSummary {
        csv,
        n_cells,
        n_rows: rows.len(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_always_ends_with_the_last_step() {
        assert_eq!(eval_schedule(100, 10).len(), 10);
        assert_eq!(eval_schedule(25, 10), vec![10, 20, 25]);
        assert_eq!(eval_schedule(3, 0), vec![3]);
        assert!(eval_schedule(0, 5).is_empty());
    }

    #[test]
    fn sweep_parsing() {
        let s: Sweep = "lambda=1000, 5000,10000".parse().unwrap();
        assert_eq!(s.values, vec!["1000", "5000", "10000"]);
        assert!("lambda=".parse::<Sweep>().is_err());
        assert!("gamma=1".parse::<Sweep>().is_err());
    }

    #[test]
    fn cells_change_one_parameter() {
        let base = RunConfig::default();
        let c = apply_cell(&base, "n_layers", "2").unwrap();
        assert_eq!(c.editing.edit_layers, vec![3, 4]);
        let c = apply_cell(&base, "hook", "off").unwrap();
        assert_eq!(c.editing.update_target, UpdateTarget::Direct);
        let c = apply_cell(&base, "fixed_alpha", "3").unwrap();
        assert_eq!(c.editing.fixed_alpha, Some(3.0));
        assert_eq!(apply_cell(&base, "lambda", "-1").unwrap_err().exit_code(), 2);
        assert!(apply_cell(&base, "n_layers", "6").is_err());
    }

    #[test]
    fn which_round_trips_through_strings() {
        for w in Which::ALL {
            assert_eq!(w.to_string().parse::<Which>().unwrap(), w);
        }
    }
}
