use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::reproduce::{ReproduceConfig, SeparationGate};
use super::EvalReport;
use crate::error::{Result, SfbcError};
use crate::io;
use crate::learner::Method;
use crate::sfo::FilterStats;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SEEDS_FILE: &str = "seeds.csv";
pub const SEPARATION_FILE: &str = "separation.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub method: Method,
    pub segment_length: usize,
    pub stats: Option<FilterStats>,
    /// Trajectories excluded because an annotation failed.
    pub skipped_trajectories: usize,
    /// Error text when a stage failed for this preset.
    pub result: std::result::Result<EvalReport, String>,
}

impl ReportRow {
    pub fn failed(method: Method, segment_length: usize, diagnostic: String) -> Self {
        ReportRow {
            method,
            segment_length,
            stats: None,
            skipped_trajectories: 0,
            result: Err(diagnostic),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeparationRow {
    pub segment_length: usize,
    pub gate: SeparationGate,
}

/// Results of a reproduction run. Rows are sorted by preset.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: ReproduceConfig,
    pub dataset_checksum: String,
    pub backend: String,
    pub separation: Vec<SeparationRow>,
    pub rows: Vec<ReportRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Report {
    pub fn row(&self, method: Method) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| r.result.as_ref().ok())
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "method,label,n_seeds,success_rate,success_rate_se,mean_return,mean_return_se,\
             segment_length,segments_retained,segments_total,samples,skipped_trajectories,status\n",
        );
        for row in &self.rows {
            let (seg_kept, seg_total, samples) = row
                .stats
                .map(|s| (s.segments_retained.to_string(), s.segments_total.to_string(), s.samples_out.to_string()))
                .unwrap_or_default();
            let (metrics, status) = match &row.result {
                Ok(r) => (
                    format!(
                        "{},{},{},{},{}",
                        r.n_seeds, r.success_rate, r.success_rate_se, r.mean_return, r.mean_return_se
                    ),
                    "ok".to_string(),
                ),
                Err(e) => (",,,,".to_string(), csv_field(&format!("error: {e}"))),
            };
            let _ = writeln!(
                out,
                "{},{},{metrics},{},{seg_kept},{seg_total},{samples},{},{status}",
                row.method,
                csv_field(row.method.label()),
                row.segment_length,
                row.skipped_trajectories,
            );
        }
        out
    }

    pub fn seeds_csv(&self) -> String {
        let mut out =
            String::from("method,seed_index,mean_return,successful_episodes,n_episodes,success\n");
        for row in &self.rows {
            if let Ok(r) = &row.result {
                for s in &r.seeds {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        row.method, s.seed_index, s.mean_return, s.successful_episodes, s.n_episodes, s.success
                    );
                }
            }
        }
        out
    }

    pub fn separation_csv(&self) -> String {
        let mut out = String::from(
            "segment_length,expert_mean,failure_mean,expert_segments,failure_segments,passed\n",
        );
        for s in &self.separation {
            let g = &s.gate;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.segment_length, g.expert_mean, g.failure_mean, g.expert_segments, g.failure_segments, g.passed()
            );
        }
        out
    }

    /// Aligned text table of the headline columns.
    pub fn table(&self) -> String {
        let header = ["Method", "Success Rate (%)", "Std. Error", "Mean Return", "Std. Error", "Seeds"];
        let mut cells: Vec<[String; 6]> = vec![header.map(String::from)];
        for row in &self.rows {
            cells.push(match &row.result {
                Ok(r) => [
                    row.method.label().to_string(),
                    format!("{:.1}", r.success_rate),
                    format!("{:.1}", r.success_rate_se),
                    format!("{:.1}", r.mean_return),
                    format!("{:.1}", r.mean_return_se),
                    r.n_seeds.to_string(),
                ],
                Err(e) => [
                    row.method.label().to_string(),
                    format!("failed: {e}"),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ],
            });
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in cells.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }

    /// Writes the CSVs and a provenance record into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SfbcError::io(dir, e))?;
        for (name, body) in [
            (SUMMARY_FILE, self.summary_csv()),
            (SEEDS_FILE, self.seeds_csv()),
            (SEPARATION_FILE, self.separation_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| SfbcError::io(&path, e))?;
        }
        io::write_json(&dir.join(PROVENANCE_FILE), self)
    }
}
