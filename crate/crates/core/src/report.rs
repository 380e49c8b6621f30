//! Aggregation of run records into the benchmark comparison report:
//! per (dataset, sub-network count) blocks of AVG/MAX/STD rows per model
//! variant, a Kruskal-Wallis H test across the selected variants, and
//! per-class accuracy tables. Emitted as markdown plus a JSON twin that
//! renders back to the identical markdown.

use serde::{Deserialize, Serialize};

use crate::ensemble::Family;
use crate::error::{Error, Result};
use crate::stats::{
    kruskal_wallis, significance_flag, summarize_with, GroupSample, Significance, StdKind,
};
use crate::train::RunRecord;

pub const REPORT_SCHEMA: u32 = 1;

/// Canonical column key of a model variant: the kWTA family is split by
/// competition delay, the baselines are plain family tags.
pub fn variant_key(family: Family, d: usize) -> String {
    match family {
        Family::KwtaEnn => format!("kwta-d{d}"),
        other => other.tag().to_string(),
    }
}

/// The default six-variant grouping for the H test.
pub fn default_groups() -> Vec<String> {
    vec![
        "kwta-d0".into(),
        "kwta-d3".into(),
        "kwta-d5".into(),
        "kwta-d7".into(),
        "moe".into(),
        "cooperative".into(),
    ]
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    /// Variant keys entering the H test (order is display order).
    pub groups: Vec<String>,
    pub std_kind: StdKind,
    pub alpha: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            groups: default_groups(),
            std_kind: StdKind::Population,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub key: String,
    pub runs: usize,
    /// Test accuracies in percent, full precision, seed-sorted.
    pub values: Vec<f64>,
    pub avg: f64,
    pub max: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTestSummary {
    pub groups: Vec<String>,
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
    pub tie_correction: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassTable {
    /// Variant the table belongs to (best run of the block).
    pub key: String,
    pub seed: u64,
    pub test_accuracy: f64,
    /// classes x (m+1) percentages; None marks classes without samples.
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MBlock {
    pub m: usize,
    pub variants: Vec<VariantSummary>,
    pub h_test: Option<HTestSummary>,
    /// Variant keys requested for the H test but absent from the records.
    pub missing_groups: Vec<String>,
    pub per_class: Option<PerClassTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub blocks: Vec<MBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub alpha: f64,
    pub std_kind: StdKind,
    pub datasets: Vec<DatasetReport>,
}

fn variant_order(key: &str) -> (usize, String) {
    // kwta delays first (ascending), then moe, cooperative, independent.
    if let Some(d) = key.strip_prefix("kwta-d") {
        (0, format!("{:>8}", d))
    } else {
        let rank = match key {
            "moe" => 1,
            "cooperative" => 2,
            _ => 3,
        };
        (rank, key.to_string())
    }
}

/// Aggregate records into the report structure. Cells absent from the
/// records stay absent; nothing is interpolated.
pub fn build_report(records: &[RunRecord], opts: &ReportOptions) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Domain("no records to report on".into()));
    }

    // dataset -> m -> variant -> (seed, accuracy%)
    type VariantCells = std::collections::BTreeMap<String, Vec<(u64, f64)>>;
    let mut tree: std::collections::BTreeMap<String, std::collections::BTreeMap<usize, VariantCells>> =
        Default::default();
    // Track the best kwta run per (dataset, m) for the per-class table.
    let mut best_kwta: std::collections::BTreeMap<(String, usize), &RunRecord> = Default::default();

    for record in records {
        let dataset = record.config.dataset.tag().to_string();
        let key = variant_key(record.config.family, record.config.d);
        tree.entry(dataset.clone())
            .or_default()
            .entry(record.config.m)
            .or_default()
            .entry(key)
            .or_default()
            .push((record.config.seed, record.test_accuracy * 100.0));
        if record.config.family == Family::KwtaEnn {
            best_kwta
                .entry((dataset, record.config.m))
                .and_modify(|cur| {
                    if record.test_accuracy > cur.test_accuracy {
                        *cur = record;
                    }
                })
                .or_insert(record);
        }
    }

    let mut datasets = Vec::new();
    for (dataset, blocks) in tree {
        let mut out_blocks = Vec::new();
        for (m, variants) in blocks {
            let mut summaries: Vec<VariantSummary> = Vec::new();
            for (key, mut pairs) in variants {
                pairs.sort_by_key(|&(seed, _)| seed);
                let values: Vec<f64> = pairs.iter().map(|&(_, v)| v).collect();
                let s = summarize_with(&values, opts.std_kind)?;
                summaries.push(VariantSummary {
                    key,
                    runs: values.len(),
                    values,
                    avg: s.avg,
                    max: s.max,
                    std: s.std,
                });
            }
            summaries.sort_by_key(|v| variant_order(&v.key));

            let mut groups = Vec::new();
            let mut missing = Vec::new();
            for key in &opts.groups {
                match summaries.iter().find(|v| &v.key == key) {
                    Some(v) => groups.push(GroupSample::new(key.clone(), v.values.clone())),
                    None => missing.push(key.clone()),
                }
            }
            let h_test = if missing.is_empty() && groups.len() >= 2 {
                let r = kruskal_wallis(&groups)?;
                Some(HTestSummary {
                    groups: opts.groups.clone(),
                    h: r.h,
                    df: r.df,
                    p_value: r.p_value,
                    tie_correction: r.tie_correction,
                    significant: significance_flag(&r, opts.alpha) == Significance::Significant,
                })
            } else {
                None
            };

            let per_class = best_kwta.get(&(dataset.clone(), m)).map(|record| PerClassTable {
                key: variant_key(record.config.family, record.config.d),
                seed: record.config.seed,
                test_accuracy: record.test_accuracy * 100.0,
                rows: record
                    .per_class_accuracy
                    .iter()
                    .map(|row| row.iter().map(|c| c.map(|v| v * 100.0)).collect())
                    .collect(),
            });

            out_blocks.push(MBlock {
                m,
                variants: summaries,
                h_test,
                missing_groups: missing,
                per_class,
            });
        }
        datasets.push(DatasetReport {
            dataset,
            blocks: out_blocks,
        });
    }

    Ok(Report {
        schema: REPORT_SCHEMA,
        alpha: opts.alpha,
        std_kind: opts.std_kind,
        datasets,
    })
}

fn fmt_cell(v: f64) -> String {
    format!("{v:.2}")
}

/// Render the markdown mirror of the report. Pure function of the report
/// value, so the JSON twin reproduces the identical document.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("# Benchmark comparison\n");
    for ds in &report.datasets {
        out.push_str(&format!("\n## {}\n", ds.dataset));
        for block in &ds.blocks {
            out.push_str(&format!("\n### {} sub-networks\n\n", block.m));
            let keys: Vec<&str> = block.variants.iter().map(|v| v.key.as_str()).collect();
            out.push_str(&format!("| Acc | {} |\n", keys.join(" | ")));
            out.push_str(&format!("|---|{}\n", "---|".repeat(keys.len())));
            for (label, pick) in [
                ("AVG", 0usize),
                ("MAX", 1),
                ("STD", 2),
                ("runs", 3),
            ] {
                let cells: Vec<String> = block
                    .variants
                    .iter()
                    .map(|v| match pick {
                        0 => fmt_cell(v.avg),
                        1 => fmt_cell(v.max),
                        2 => fmt_cell(v.std),
                        _ => v.runs.to_string(),
                    })
                    .collect();
                out.push_str(&format!("| {} | {} |\n", label, cells.join(" | ")));
            }
            match (&block.h_test, block.missing_groups.is_empty()) {
                (Some(h), _) => {
                    let flag = if h.significant { "*" } else { "ns" };
                    out.push_str(&format!(
                        "\n({flag}) H = {:.2}, p = {:.2e}, df = {} over {}\n",
                        h.h,
                        h.p_value,
                        h.df,
                        h.groups.join(", ")
                    ));
                }
                (None, false) => {
                    out.push_str(&format!(
                        "\nH test not computed; missing groups: {}\n",
                        block.missing_groups.join(", ")
                    ));
                }
                (None, true) => {
                    out.push_str("\nH test not computed (fewer than two groups requested)\n");
                }
            }
            if let Some(pc) = &block.per_class {
                out.push_str(&format!(
                    "\nPer-class accuracy of the best {} run (seed {}, test {:.2}%):\n\n",
                    pc.key, pc.seed, pc.test_accuracy
                ));
                let nets = pc.rows.first().map_or(0, |r| r.len().saturating_sub(1));
                let mut header: Vec<String> =
                    (1..=nets).map(|i| format!("Net-{i}")).collect();
                header.push("Final".into());
                out.push_str(&format!("| class | {} |\n", header.join(" | ")));
                out.push_str(&format!("|---|{}\n", "---|".repeat(header.len())));
                for (c, row) in pc.rows.iter().enumerate() {
                    let cells: Vec<String> = row
                        .iter()
                        .map(|cell| match cell {
                            Some(v) => fmt_cell(*v),
                            None => "NaN".into(),
                        })
                        .collect();
                    out.push_str(&format!("| {} | {} |\n", c, cells.join(" | ")));
                }
            }
        }
    }
    out
}
