//! Fixed-layout result tables: scores against the ground-truth stimuli,
//! scores against the intermediate decoded images (with the change from
//! ground truth), and full-versus-direct ablation blocks.
//!
//! Text format:
//!
//! ```text
//! layout: ablation
//! columns: 2way-top1 10way-top1 10way-top2 50way-top1 50way-top2 clipscore is fid lpips
//! [GWIT]
//! Full architecture 0.946 0.854 0.906 0.763 0.822 0.648 17.195 153.295 0.783
//! Direct image-to-3D 0.946 0.836 0.893 0.733 0.801 0.627 14.567 183.566 0.808
//! Gain/loss 0.000 +0.018 +0.013 +0.030 +0.021 +0.021 +2.628 -30.271 -0.025
//! ```
//!
//! Every value has three decimals. Difference rows are computed from the
//! rounded values and carry an explicit `+` when positive.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{names, MetricReport};

pub const COLUMN_COUNT: usize = 9;

/// Metric names in table column order.
pub const COLUMN_METRICS: [&str; COLUMN_COUNT] = [
    names::NWAY_2_TOP1,
    names::NWAY_10_TOP1,
    names::NWAY_10_TOP2,
    names::NWAY_50_TOP1,
    names::NWAY_50_TOP2,
    names::CLIP_SCORE,
    names::INCEPTION_SCORE,
    names::FID,
    names::LPIPS,
];

pub const COLUMN_HEADER: &str = "2way-top1 10way-top1 10way-top2 50way-top1 50way-top2 clipscore is fid lpips";

pub const FULL_LABEL: &str = "Full architecture";
pub const DIRECT_LABEL: &str = "Direct image-to-3D";
pub const GAIN_LOSS_LABEL: &str = "Gain/loss";
pub const GAIN_VS_GT_LABEL: &str = "Gain vs ground truth";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ReportError {
    #[error("report has no rows")]
    Empty,
    #[error("report {0} is incomplete: missing {1}")]
    Incomplete(String, String),
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Gt,
    Intermediate,
    Ablation,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Gt => "gt",
            Layout::Intermediate => "intermediate",
            Layout::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gt" => Ok(Layout::Gt),
            "intermediate" => Ok(Layout::Intermediate),
            "ablation" => Ok(Layout::Ablation),
            other => Err(format!("unknown layout {other:?} (expected gt, intermediate or ablation)")),
        }
    }
}

/// Values are stored in thousandths so that rendering and parsing are exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub milli: [i64; COLUMN_COUNT],
    pub signed: bool,
}

impl TableRow {
    pub fn from_values(label: impl Into<String>, values: [f64; COLUMN_COUNT]) -> Result<Self, ReportError> {
        let mut milli = [0i64; COLUMN_COUNT];
        for (m, v) in milli.iter_mut().zip(values) {
            if !v.is_finite() {
                return Err(ReportError::NonFinite(v));
            }
            *m = (v * 1000.0).round() as i64;
        }
        Ok(Self { label: label.into(), milli, signed: false })
    }

    /// `self - other` on the rounded values.
    pub fn delta(label: impl Into<String>, minuend: &TableRow, subtrahend: &TableRow) -> Self {
        let mut milli = [0i64; COLUMN_COUNT];
        for i in 0..COLUMN_COUNT {
            milli[i] = minuend.milli[i] - subtrahend.milli[i];
        }
        Self { label: label.into(), milli, signed: true }
    }

    pub fn values(&self) -> [f64; COLUMN_COUNT] {
        self.milli.map(|m| m as f64 / 1000.0)
    }

    pub fn formatted_values(&self) -> String {
        self.milli.iter().map(|&m| format_milli(m, self.signed)).collect::<Vec<_>>().join(" ")
    }
}

pub fn format_milli(m: i64, signed: bool) -> String {
    let sign = if m < 0 {
        "-"
    } else if signed && m > 0 {
        "+"
    } else {
        ""
    };
    let a = m.unsigned_abs();
    format!("{sign}{}.{:03}", a / 1000, a % 1000)
}

fn parse_milli(token: &str) -> Option<(i64, bool)> {
    let (neg, explicit, body) = match token.as_bytes().first()? {
        b'-' => (true, true, &token[1..]),
        b'+' => (false, true, &token[1..]),
        _ => (false, false, token),
    };
    let (whole, frac) = body.split_once('.')?;
    if whole.is_empty() || frac.len() != 3 || !whole.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v = whole.parse::<i64>().ok()? * 1000 + frac.parse::<i64>().ok()?;
    Some((if neg { -v } else { v }, explicit))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableBlock {
    pub backbone: String,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTable {
    pub layout: Layout,
    pub blocks: Vec<TableBlock>,
}

/// Global means of the table metrics, in column order.
pub fn report_values(name: &str, report: &MetricReport) -> Result<[f64; COLUMN_COUNT], ReportError> {
    if report.per_object.is_empty() {
        return Err(ReportError::Incomplete(name.to_string(), "per-object scores".into()));
    }
    let mut out = [0.0; COLUMN_COUNT];
    for (o, metric) in out.iter_mut().zip(COLUMN_METRICS) {
        *o = report
            .global
            .get(metric)
            .ok_or_else(|| ReportError::Incomplete(name.to_string(), metric.to_string()))?
            .mean;
    }
    Ok(out)
}

pub fn gt_block(backbone: &str, values: [f64; COLUMN_COUNT]) -> Result<TableBlock, ReportError> {
    Ok(TableBlock { backbone: backbone.to_string(), rows: vec![TableRow::from_values(backbone, values)?] })
}

/// Scores against the intermediate images and their change from the
/// ground-truth scores.
pub fn intermediate_block(
    backbone: &str,
    gt: [f64; COLUMN_COUNT],
    intermediate: [f64; COLUMN_COUNT],
) -> Result<TableBlock, ReportError> {
    let gt = TableRow::from_values(backbone, gt)?;
    let inter = TableRow::from_values(backbone, intermediate)?;
    let delta = TableRow::delta(GAIN_VS_GT_LABEL, &inter, &gt);
    Ok(TableBlock { backbone: backbone.to_string(), rows: vec![inter, delta] })
}

/// Full, direct and their difference (full minus direct).
pub fn ablation_block(
    backbone: &str,
    full: [f64; COLUMN_COUNT],
    direct: [f64; COLUMN_COUNT],
) -> Result<TableBlock, ReportError> {
    let full = TableRow::from_values(FULL_LABEL, full)?;
    let direct = TableRow::from_values(DIRECT_LABEL, direct)?;
    let delta = TableRow::delta(GAIN_LOSS_LABEL, &full, &direct);
    Ok(TableBlock { backbone: backbone.to_string(), rows: vec![full, direct, delta] })
}

pub fn render_table(table: &ReportTable) -> Result<String, ReportError> {
    if table.blocks.is_empty() || table.blocks.iter().any(|b| b.rows.is_empty()) {
        return Err(ReportError::Empty);
    }
    let mut out = format!("layout: {}\ncolumns: {COLUMN_HEADER}\n", table.layout);
    for block in &table.blocks {
        out.push_str(&format!("[{}]\n", block.backbone));
        for row in &block.rows {
            out.push_str(&format!("{} {}\n", row.label, row.formatted_values()));
        }
    }
    Ok(out)
}

pub fn parse_table(text: &str) -> Result<ReportTable, ReportError> {
    let err = |line: usize, message: &str| ReportError::Parse { line, message: message.to_string() };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, first) = lines.next().ok_or(ReportError::Empty)?;
    let layout = first
        .strip_prefix("layout: ")
        .ok_or_else(|| err(n, "expected layout line"))?
        .parse::<Layout>()
        .map_err(|m| err(n, &m))?;
    let (n, cols) = lines.next().ok_or_else(|| err(n + 1, "missing columns line"))?;
    if cols.strip_prefix("columns: ") != Some(COLUMN_HEADER) {
        return Err(err(n, "unexpected column header"));
    }
    let mut blocks: Vec<TableBlock> = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            blocks.push(TableBlock { backbone: name.to_string(), rows: Vec::new() });
            continue;
        }
        let block = blocks.last_mut().ok_or_else(|| err(n, "row before any block header"))?;
        let tokens: Vec<&str> = line.split(' ').collect();
        if tokens.len() <= COLUMN_COUNT {
            return Err(err(n, "row needs a label and nine values"));
        }
        let split = tokens.len() - COLUMN_COUNT;
        let mut milli = [0i64; COLUMN_COUNT];
        let mut signed = false;
        for (m, tok) in milli.iter_mut().zip(&tokens[split..]) {
            let (v, explicit) = parse_milli(tok).ok_or_else(|| err(n, &format!("bad value {tok:?}")))?;
            *m = v;
            signed |= explicit && v > 0;
        }
        // a difference row with no positive entry is recognised by its label
        let label = tokens[..split].join(" ");
        signed |= label == GAIN_LOSS_LABEL || label == GAIN_VS_GT_LABEL;
        block.rows.push(TableRow { label, milli, signed });
    }
    if blocks.is_empty() || blocks.iter().any(|b| b.rows.is_empty()) {
        return Err(ReportError::Empty);
    }
    Ok(ReportTable { layout, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{aggregate, ReportSettings, Scores, Summary, ViewScore};
    use crate::renderer::ViewLabel;

    const GWIT_GT: [f64; 9] = [0.946, 0.854, 0.906, 0.763, 0.822, 0.648, 17.195, 153.295, 0.783];
    const GWIT_DIRECT: [f64; 9] = [0.946, 0.836, 0.893, 0.733, 0.801, 0.627, 14.567, 183.566, 0.808];

    #[test]
    fn gt_row_renders_fixture_values() {
        let table = ReportTable { layout: Layout::Gt, blocks: vec![gt_block("GWIT", GWIT_GT).unwrap()] };
        let text = render_table(&table).unwrap();
        assert!(text.contains("\nGWIT 0.946 0.854 0.906 0.763 0.822 0.648 17.195 153.295 0.783\n"), "{text}");
    }

    #[test]
    fn ablation_block_deltas() {
        let table = ReportTable {
            layout: Layout::Ablation,
            blocks: vec![ablation_block("GWIT", GWIT_GT, GWIT_DIRECT).unwrap()],
        };
        let text = render_table(&table).unwrap();
        assert_eq!(
            text,
            "layout: ablation\n\
             columns: 2way-top1 10way-top1 10way-top2 50way-top1 50way-top2 clipscore is fid lpips\n\
             [GWIT]\n\
             Full architecture 0.946 0.854 0.906 0.763 0.822 0.648 17.195 153.295 0.783\n\
             Direct image-to-3D 0.946 0.836 0.893 0.733 0.801 0.627 14.567 183.566 0.808\n\
             Gain/loss 0.000 +0.018 +0.013 +0.030 +0.021 +0.021 +2.628 -30.271 -0.025\n"
        );
    }

    #[test]
    fn intermediate_delta_is_intermediate_minus_gt() {
        let inter = [0.950, 0.860, 0.900, 0.763, 0.830, 0.700, 17.0, 150.0, 0.700];
        let block = intermediate_block("X", GWIT_GT, inter).unwrap();
        assert_eq!(block.rows[1].formatted_values(), "+0.004 +0.006 -0.006 0.000 +0.008 +0.052 -0.195 -3.295 -0.083");
    }

    #[test]
    fn empty_report_is_an_error() {
        assert_eq!(render_table(&ReportTable { layout: Layout::Gt, blocks: vec![] }), Err(ReportError::Empty));
        assert!(parse_table("").is_err());
        assert!(parse_table(&format!("layout: gt\ncolumns: {COLUMN_HEADER}\n")).is_err());
        let empty = aggregate(&[], ReportSettings::default()).unwrap();
        assert!(matches!(report_values("gt", &empty), Err(ReportError::Incomplete(..))));
    }

    #[test]
    fn round_trip() {
        let table = ReportTable {
            layout: Layout::Ablation,
            blocks: vec![
                ablation_block("GWIT", GWIT_GT, GWIT_DIRECT).unwrap(),
                ablation_block("Same", GWIT_GT, GWIT_GT).unwrap(),
                ablation_block("Neg", [-0.5, 0.0, 1.0, 2.0, 3.0, -0.001, 0.0, 1e3, 0.1], GWIT_DIRECT).unwrap(),
            ],
        };
        let text = render_table(&table).unwrap();
        assert_eq!(parse_table(&text).unwrap(), table);
        let gt = ReportTable {
            layout: Layout::Intermediate,
            blocks: vec![intermediate_block("a b", GWIT_GT, GWIT_DIRECT).unwrap()],
        };
        assert_eq!(parse_table(&render_table(&gt).unwrap()).unwrap(), gt);
    }

    #[test]
    fn values_from_metric_report() {
        let rows: Vec<ViewScore> = ViewLabel::ALL
            .iter()
            .map(|&v| ViewScore {
                object_id: "o".into(),
                view: v,
                scores: COLUMN_METRICS
                    .iter()
                    .filter(|m| **m != names::FID && **m != names::INCEPTION_SCORE)
                    .map(|m| (m.to_string(), 0.5))
                    .collect::<Scores>(),
            })
            .collect();
        let mut report = aggregate(&rows, ReportSettings::default()).unwrap();
        assert!(report_values("r", &report).is_err());
        report.global.insert(names::FID.into(), Summary { mean: 12.0, std: 0.0 });
        report.global.insert(names::INCEPTION_SCORE.into(), Summary { mean: 1.5, std: 0.1 });
        assert_eq!(report_values("r", &report).unwrap(), [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.5, 12.0, 0.5]);
    }
}
