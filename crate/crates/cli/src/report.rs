use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hookmem_core::eval::{EmploymentStats, PromptSet, ScopeAnalysis};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Malformed {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// Employment table row, one per prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmploymentRow {
    pub prompt: PromptSet,
    pub instances: usize,
    pub instances_hooked: usize,
    pub tokens: usize,
    pub tokens_hooked: usize,
    /// Empty for locality.
    pub instance_rate: Option<f64>,
    pub overall_token_rate: f64,
    pub unwanted_token_rate: f64,
}

impl From<&EmploymentStats> for EmploymentRow {
    fn from(e: &EmploymentStats) -> Self {
        Self {
            prompt: e.prompt,
            instances: e.n_instances,
            instances_hooked: e.n_instances_hooked,
            tokens: e.n_tokens,
            tokens_hooked: e.n_tokens_hooked,
            instance_rate: e.instance_rate,
            overall_token_rate: e.overall_token_rate,
            unwanted_token_rate: e.unwanted_token_rate,
        }
    }
}

/// Scatter of subject-token z-scores per record: reliability prompts in
/// blue, paraphrases in orange, with the mean z of each record in grey.
pub fn scope_svg(analysis: &ScopeAnalysis) -> String {
    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let rows = &analysis.rows;
    let n = rows.iter().map(|r| r.record_index + 1).max().unwrap_or(1).max(2);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for r in rows {
        lo = lo.min(r.subject_z).min(r.mean_z);
        hi = hi.max(r.subject_z).max(r.mean_z);
    }
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |z: f64| H - PAD - (H - 2.0 * PAD) * (z - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black" stroke-width="0.5"/>"#,
        y0 = y(0.0),
        x1 = W - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b:.2}" stroke="black"/>"#,
        b = H - PAD
    );
    for tick in [lo, 0.0, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{tx:.2}" y="{ty:.2}" font-size="10" text-anchor="end">{tick:.2}</text>"#,
            tx = PAD - 4.0,
            ty = y(tick) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{cx:.2}" y="{by:.2}" font-size="11" text-anchor="middle">record</text>"#,
        cx = W / 2.0,
        by = H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{cy:.2}" font-size="11" transform="rotate(-90 14 {cy:.2})" text-anchor="middle">z at layer {l}</text>"#,
        cy = H / 2.0,
        l = analysis.summary.layer
    );
    for r in rows {
        let (fill, dx) = match r.prompt {
            PromptSet::Reliability => ("#1f77b4", -1.5),
            _ => ("#ff7f0e", 1.5),
        };
        let cx = x(r.record_index) + dx;
        let _ = writeln!(
            s,
            r##"<circle cx="{cx:.2}" cy="{my:.2}" r="1.5" fill="#999999"/>"##,
            my = y(r.mean_z)
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{zy:.2}" r="2.5" fill="{fill}"/>"#,
            zy = y(r.subject_z)
        );
    }
    s.push_str("</svg>\n");
    s
}
