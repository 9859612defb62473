//! On-disk session state.
//!
//! Every matrix is its own file of row-major little-endian f64s. `index.json`
//! lists the files with shapes and sha256 checksums next to the scalar state,
//! and `manifest.json` pins the index checksum, the run config and its hash.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use hookmem_core::eval::MetricsReport;
use hookmem_core::hook::{HookLayerState, HookMode, ModeTransition};
use hookmem_core::linalg::Matrix;
use hookmem_core::memory::CovarianceAccumulator;
use hookmem_core::network::{Block, HookSet, ToyNetwork};
use hookmem_core::pipeline::{EditSession, LayerHistory, StepLogRow, StepReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HookMeta {
    layer: usize,
    alpha: f64,
    alpha_initial: f64,
    mode: HookMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CovarianceMeta {
    layer: usize,
    lambda: f64,
    n_pretrain_samples: usize,
    n_accumulated: usize,
}

/// A step report without its rows, which live in the `step_log` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportMeta {
    step: usize,
    n_instances: usize,
    n_unconverged: usize,
    mean_final_loss: f64,
    duplicate_subjects: Vec<u32>,
    wallclock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionState {
    hooks: Vec<HookMeta>,
    covariances: Vec<CovarianceMeta>,
    has_history: bool,
    transitions: Vec<(usize, ModeTransition)>,
    steps_completed: usize,
    edited_subjects: Vec<u32>,
    reports: Vec<ReportMeta>,
    metrics: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    blocks: Vec<BlockEntry>,
    state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    /// sha256 of the JSON-lines dataset the run read.
    pub dataset_sha256: String,
    pub steps_completed: usize,
    pub index_sha256: String,
}

/// A session together with the metrics gathered so far.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub session: EditSession,
    pub metrics: Vec<MetricsReport>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(CliError::io(path))?))
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8], rows: usize, cols: usize) -> Option<Matrix> {
    if bytes.len() != rows * cols * 8 {
        return None;
    }
    let mut it = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = it.next().expect("length checked");
        }
    }
    Some(m)
}

fn step_log_matrix(rows: &[StepLogRow]) -> Matrix {
    let mut m = Matrix::zeros(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        m[(i, 0)] = r.step as f64;
        m[(i, 1)] = r.layer as f64;
        m[(i, 2)] = r.alpha;
        m[(i, 3)] = r.delta_fro;
        m[(i, 4)] = r.cond_estimate;
    }
    m
}

fn step_log_rows(m: &Matrix) -> Vec<StepLogRow> {
    (0..m.nrows())
        .map(|i| StepLogRow {
            step: m[(i, 0)] as usize,
            layer: m[(i, 1)] as usize,
            alpha: m[(i, 2)],
            delta_fro: m[(i, 3)],
            cond_estimate: m[(i, 4)],
        })
        .collect()
}

struct Writer<'a> {
    dir: &'a Path,
    blocks: Vec<BlockEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, m: &Matrix) -> Result<(), CliError> {
        let file = format!("{name}.bin");
        let bytes = encode_matrix(m);
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).map_err(CliError::io(&path))?;
        self.blocks.push(BlockEntry {
            name,
            file,
            rows: m.nrows(),
            cols: m.ncols(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }
}

/// Writes `snap` into `dir` (created if missing) and returns the manifest.
pub fn save(dir: &Path, snap: &Snapshot, config: &RunConfig, dataset_sha256: &str) -> Result<Manifest, CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let s = &snap.session;
    let mut w = Writer { dir, blocks: Vec::new() };
    w.put("network.embedding".into(), &s.network.embedding)?;
    for (b, block) in s.network.blocks.iter().enumerate() {
        w.put(format!("network.block{b}.w_fc"), &block.w_fc)?;
        w.put(format!("network.block{b}.w_proj"), &block.w_proj)?;
    }
    w.put("network.readout".into(), &s.network.readout)?;
    for (l, h) in &s.hooks {
        w.put(format!("hook{l}.w_original"), h.w_original())?;
        w.put(format!("hook{l}.w_hook"), h.w_hook())?;
    }
    for (l, c) in &s.covariances {
        w.put(format!("covariance{l}"), &c.matrix)?;
    }
    if let Some(history) = &s.history {
        for (l, h) in history {
            w.put(format!("history{l}.keys"), &h.keys)?;
            w.put(format!("history{l}.values"), &h.values)?;
        }
    }
    w.put("step_log".into(), &step_log_matrix(&s.step_log))?;

    let mut edited_subjects: Vec<u32> = s.edited_subjects.iter().copied().collect();
    edited_subjects.sort_unstable();
    let state = SessionState {
        hooks: s
            .hooks
            .iter()
            .map(|(&layer, h)| HookMeta {
                layer,
                alpha: h.alpha(),
                alpha_initial: h.alpha_initial(),
                mode: h.mode(),
            })
            .collect(),
        covariances: s
            .covariances
            .iter()
            .map(|(&layer, c)| CovarianceMeta {
                layer,
                lambda: c.lambda,
                n_pretrain_samples: c.n_pretrain_samples,
                n_accumulated: c.n_accumulated,
            })
            .collect(),
        has_history: s.history.is_some(),
        transitions: s.transitions.clone(),
        steps_completed: s.steps_completed,
        edited_subjects,
        reports: s
            .reports
            .iter()
            .map(|r| ReportMeta {
                step: r.step,
                n_instances: r.n_instances,
                n_unconverged: r.n_unconverged,
                mean_final_loss: r.mean_final_loss,
                duplicate_subjects: r.duplicate_subjects.clone(),
                wallclock_ms: r.wallclock_ms,
            })
            .collect(),
        metrics: snap.metrics.clone(),
    };
    let index = Index { blocks: w.blocks, state };
    let index_bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, &index_bytes).map_err(CliError::io(&index_path))?;

    let mut run_config = config.clone();
    run_config.editing = s.config.clone();
    run_config.network = s.network.config.clone();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: run_config.hash(),
        seed: run_config.editing.seed,
        config: run_config,
        dataset_sha256: dataset_sha256.to_string(),
        steps_completed: s.steps_completed,
        index_sha256: sha256_hex(&index_bytes),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, bytes).map_err(CliError::io(&manifest_path))?;
    Ok(manifest)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T, CliError> {
    serde_json::from_slice(bytes).map_err(|e| CliError::SnapshotCorrupt(format!("{}: {e}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    read_json(&path, &bytes)
}

/// Loads and checks a snapshot: the index must match the manifest checksum
/// and every block its own.
pub fn load(dir: &Path) -> Result<(Snapshot, Manifest), CliError> {
    let manifest = read_manifest(dir)?;
    let index_path = dir.join(INDEX_FILE);
    let index_bytes = fs::read(&index_path).map_err(CliError::io(&index_path))?;
    if sha256_hex(&index_bytes) != manifest.index_sha256 {
        return Err(CliError::SnapshotCorrupt(format!(
            "{} does not match the manifest checksum",
            index_path.display()
        )));
    }
    let index: Index = read_json(&index_path, &index_bytes)?;
    let mut blocks: BTreeMap<String, Matrix> = BTreeMap::new();
    for e in &index.blocks {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(CliError::io(&path))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(CliError::SnapshotCorrupt(format!("checksum mismatch in {}", path.display())));
        }
        let m = decode_matrix(&bytes, e.rows, e.cols)
            .ok_or_else(|| CliError::SnapshotCorrupt(format!("{} has the wrong length", path.display())))?;
        blocks.insert(e.name.clone(), m);
    }
    let mut take = |name: String| {
        blocks
            .remove(&name)
            .ok_or_else(|| CliError::SnapshotCorrupt(format!("block `{name}` missing from the index")))
    };

    let net_cfg = manifest.config.network.clone();
    let embedding = take("network.embedding".into())?;
    let mut net_blocks = Vec::with_capacity(net_cfg.n_blocks);
    for b in 0..net_cfg.n_blocks {
        net_blocks.push(Block {
            w_fc: take(format!("network.block{b}.w_fc"))?,
            w_proj: take(format!("network.block{b}.w_proj"))?,
        });
    }
    let readout = take("network.readout".into())?;
    let network = ToyNetwork {
        config: net_cfg,
        embedding,
        blocks: net_blocks,
        readout,
    };

    let st = index.state;
    let mut hooks = HookSet::new();
    for h in &st.hooks {
        let w_original = take(format!("hook{}.w_original", h.layer))?;
        let w_hook = take(format!("hook{}.w_hook", h.layer))?;
        hooks.insert(
            h.layer,
            HookLayerState::from_parts(h.layer, w_original, w_hook, h.alpha, h.alpha_initial, h.mode),
        );
    }
    let mut covariances = BTreeMap::new();
    for c in &st.covariances {
        covariances.insert(
            c.layer,
            CovarianceAccumulator {
                matrix: take(format!("covariance{}", c.layer))?,
                lambda: c.lambda,
                n_pretrain_samples: c.n_pretrain_samples,
                n_accumulated: c.n_accumulated,
            },
        );
    }
    let history = if st.has_history {
        let mut h = BTreeMap::new();
        for &l in covariances.keys() {
            h.insert(
                l,
                LayerHistory {
                    keys: take(format!("history{l}.keys"))?,
                    values: take(format!("history{l}.values"))?,
                },
            );
        }
        Some(h)
    } else {
        None
    };
    let step_log = step_log_rows(&take("step_log".into())?);
    let reports = st
        .reports
        .iter()
        .map(|r| StepReport {
            step: r.step,
            rows: step_log.iter().filter(|row| row.step == r.step).copied().collect(),
            n_instances: r.n_instances,
            n_unconverged: r.n_unconverged,
            mean_final_loss: r.mean_final_loss,
            duplicate_subjects: r.duplicate_subjects.clone(),
            wallclock_ms: r.wallclock_ms,
        })
        .collect();

    let session = EditSession {
        network,
        hooks,
        covariances,
        history,
        config: manifest.config.editing.clone(),
        step_log,
        reports,
        transitions: st.transitions,
        steps_completed: st.steps_completed,
        edited_subjects: st.edited_subjects.into_iter().collect::<HashSet<u32>>(),
    };
    Ok((
        Snapshot {
            session,
            metrics: st.metrics,
        },
        manifest,
    ))
}

/// Default snapshot location inside an output directory.
pub fn snapshot_dir(out: &Path) -> PathBuf {
    out.join("snapshot")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_bytes_are_row_major_little_endian() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, f64::NAN]);
        let b = encode_matrix(&m);
        assert_eq!(&b[..8], &1.0f64.to_le_bytes());
        assert_eq!(&b[8..16], &2.0f64.to_le_bytes());
        assert_eq!(&b[16..24], &(-0.5f64).to_le_bytes());
        let back = decode_matrix(&b, 2, 2).unwrap();
        assert_eq!(back[(0, 1)], 2.0);
        assert!(back[(1, 1)].is_nan());
        assert!(decode_matrix(&b, 2, 3).is_none());
    }
}
