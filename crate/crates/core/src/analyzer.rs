//! Static parameter and multiply-accumulate accounting.
//!
//! Every layer describes its own cost for a given input shape, walking the
//! same structure as its forward pass. Normalizations and activations cost
//! zero MACs and are tallied separately as elementwise operations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod kind {
    pub const CONV: &str = "conv2d";
    pub const CONV_TRANSPOSE: &str = "conv_transpose2d";
    pub const BATCH_NORM: &str = "batch_norm2d";
    pub const LAYER_NORM: &str = "layer_norm";
    pub const LINEAR: &str = "linear";
    pub const ATTENTION: &str = "attention";
    pub const ACTIVATION: &str = "activation";
    pub const ELEMENTWISE: &str = "elementwise";
}

/// One accounted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    /// Elementwise operations (normalization, activation, residual adds).
    #[serde(default)]
    pub elementwise: u64,
}

/// Accumulates rows while a model walks its structure.
#[derive(Debug, Default)]
pub struct CostSink {
    rows: Vec<CostRow>,
}

impl CostSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, kind: &str, params: u64, macs: u64, elementwise: u64) {
        self.rows.push(CostRow {
            name: name.to_string(),
            kind: kind.to_string(),
            params,
            macs,
            elementwise,
        });
    }

    pub fn into_rows(self) -> Vec<CostRow> {
        self.rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub elementwise: u64,
}

/// Per-layer and aggregate cost at one input resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub resolution: usize,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn from_rows(resolution: usize, rows: Vec<CostRow>) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let macs = rows.iter().map(|r| r.macs).sum();
        let elementwise = rows.iter().map(|r| r.elementwise).sum();
        Self {
            resolution,
            rows,
            totals: CostTotals {
                params,
                macs,
                flops: 2 * macs,
                elementwise,
            },
        }
    }

    /// Totals restricted to rows whose name starts with `prefix`.
    pub fn subtree(&self, prefix: &str) -> CostTotals {
        let rows = self.rows.iter().filter(|r| {
            r.name == prefix || r.name.starts_with(prefix) && r.name[prefix.len()..].starts_with('.')
        });
        let (mut params, mut macs, mut elementwise) = (0, 0, 0);
        for r in rows {
            params += r.params;
            macs += r.macs;
            elementwise += r.elementwise;
        }
        CostTotals {
            params,
            macs,
            flops: 2 * macs,
            elementwise,
        }
    }

    pub fn gmacs(&self) -> f64 {
        self.totals.macs as f64 / 1e9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// Renders a report; rows keep construction order and the totals come last.
pub fn render_report(report: &CostReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("name,kind,params,macs,elementwise\n");
            for r in &report.rows {
                let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, r.params, r.macs, r.elementwise);
            }
            let t = &report.totals;
            let _ = writeln!(s, "TOTAL,total,{},{},{}", t.params, t.macs, t.elementwise);
            s
        }
        ReportFormat::Table => {
            let width = report.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
            let mut s = String::new();
            let _ = writeln!(
                s,
                "resolution {r}x{r}; MACs count one multiply-add, FLOPs = 2 x MACs",
                r = report.resolution
            );
            let _ = writeln!(
                s,
                "{:<width$}  {:<16}  {:>10}  {:>14}  {:>12}",
                "layer", "kind", "params", "macs", "elementwise"
            );
            for r in &report.rows {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:<16}  {:>10}  {:>14}  {:>12}",
                    r.name, r.kind, r.params, r.macs, r.elementwise
                );
            }
            let t = &report.totals;
            let _ = writeln!(
                s,
                "{:<width$}  {:<16}  {:>10}  {:>14}  {:>12}",
                "TOTAL", "", t.params, t.macs, t.elementwise
            );
            let _ = writeln!(
                s,
                "params {:.3} M | {:.3} GMACs | {:.3} GFLOPs",
                t.params as f64 / 1e6,
                t.macs as f64 / 1e9,
                t.flops as f64 / 1e9
            );
            s
        }
    }
}
