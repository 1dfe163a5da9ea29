//! Report JSON and CSV emission. Floats are rounded to nine significant
//! digits so outputs diff cleanly across platforms.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::evalgen::DriftRow;
use crate::io::config::RunConfig;
use crate::model::LayerKind;
use crate::mot::{GridCell, IouRow, IouSummary};
use crate::pruner::{LayerReport, PruneReport};

pub const SIGNIFICANT_DIGITS: usize = 9;

pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().expect("formatted float")
}

/// Rounds every non-integer number in a JSON tree.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig(n.as_f64().expect("f64"));
            *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with rounded floats and a trailing newline.
pub fn to_report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
    pub total: usize,
}

impl BudgetSummary {
    pub fn of(ks: &[usize]) -> Self {
        let total: usize = ks.iter().sum();
        Self {
            min: ks.iter().copied().min().unwrap_or(0),
            mean: if ks.is_empty() { 0.0 } else { total as f64 / ks.len() as f64 },
            max: ks.iter().copied().max().unwrap_or(0),
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub mean_saliency: f64,
    pub budget: BudgetSummary,
    pub selected_visual: usize,
    pub text_rows: usize,
    pub calibration_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRunReport {
    pub config: RunConfig,
    pub n_samples: usize,
    pub global_sparsity: f64,
    pub blocks: Vec<BlockSummary>,
    pub layers: Vec<LayerReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
}

impl PruneRunReport {
    pub fn new(config: RunConfig, report: &PruneReport, elapsed_seconds: Option<f64>) -> Self {
        Self {
            config,
            n_samples: report.n_samples,
            global_sparsity: report.global_sparsity,
            blocks: report
                .blocks
                .iter()
                .map(|b| BlockSummary {
                    block: b.block,
                    mean_saliency: b.mean_saliency,
                    budget: BudgetSummary::of(&b.budget_per_sample),
                    selected_visual: b.selected_visual_total,
                    text_rows: b.text_rows,
                    calibration_rows: b.calibration_rows,
                })
                .collect(),
            layers: report.layers.clone(),
            elapsed_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRunReport {
    pub cells: Vec<GridCell>,
    pub iou: Vec<IouSummary>,
}

#[derive(Serialize)]
struct DriftCsv {
    block: usize,
    mean_saliency: f64,
    mean_budget: f64,
    selected_visual: usize,
}

#[derive(Serialize)]
struct SensitivityCsv<'a> {
    sparsity: f64,
    pathway: &'a str,
    pool: &'a str,
    error_text: f64,
    error_visual: f64,
    error_all: f64,
    retention_text: f64,
    retention_visual: f64,
    retention_all: f64,
}

#[derive(Serialize)]
struct IouCsv<'a> {
    sparsity: f64,
    pathway: &'a str,
    block: usize,
    layer: &'a str,
    iou: f64,
}

fn write_rows<W: Write, R: Serialize>(w: W, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::AtvError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e.into(),
        other => std::io::Error::new(std::io::ErrorKind::Other, format!("{other:?}")).into(),
    }
}

pub fn write_drift_csv(w: impl Write, rows: &[DriftRow]) -> Result<()> {
    write_rows(
        w,
        rows.iter().map(|r| DriftCsv {
            block: r.block,
            mean_saliency: round_sig(r.mean_saliency),
            mean_budget: round_sig(r.mean_budget),
            selected_visual: r.selected_visual,
        }),
    )
}

pub fn write_sensitivity_csv(w: impl Write, cells: &[GridCell]) -> Result<()> {
    write_rows(
        w,
        cells.iter().map(|c| {
            let r = c.error.retention();
            SensitivityCsv {
                sparsity: round_sig(c.sparsity),
                pathway: c.pathway.name(),
                pool: c.pool.name(),
                error_text: round_sig(c.error.text),
                error_visual: round_sig(c.error.visual),
                error_all: round_sig(c.error.all),
                retention_text: round_sig(r.text),
                retention_visual: round_sig(r.visual),
                retention_all: round_sig(r.all),
            }
        }),
    )
}

pub fn write_iou_csv(w: impl Write, rows: &[IouRow]) -> Result<()> {
    write_rows(
        w,
        rows.iter().map(|r| IouCsv {
            sparsity: round_sig(r.sparsity),
            pathway: r.pathway.name(),
            block: r.block,
            layer: LayerKind::name(r.layer),
            iou: round_sig(r.iou),
        }),
    )
}
