//! Farm capacity aggregation and throughput prediction.
//!
//! A farm is a list of node specifications (clock, CPUs per node, node
//! count); capacity is the plain clock sum in GHz, treating heterogeneous
//! processors as interchangeable per-GHz — the same simplification the
//! inventory totals themselves make. Throughput prediction is linear: one
//! measured (or published) anchor point calibrates a cost in GHz·days per
//! unit of data, and any other farm's rate follows by capacity ratio.
//!
//! Clocks are held in integer MHz so capacity sums, calibration and the
//! calibration fixed point are exact: predicting the anchor's own rate
//! returns the anchor rate bit for bit, and doubling a farm exactly doubles
//! its predicted rate.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FarmError {
    #[error("farm has no capacity")]
    EmptyConfig,
    #[error("inventory line {line}: {message}")]
    InvalidInventory { line: usize, message: String },
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("invalid campaign log line {line}: {message}")]
    InvalidCampaign { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reference inventory fixtures shipped with the crate.
pub const TABLE1_TSV: &str = include_str!("../fixtures/table1.tsv");
pub const TABLE2_TSV: &str = include_str!("../fixtures/table2.tsv");

/// Reference beam-data reprocessing history fixture.
pub const REPROCESSING_LOG: &str = include_str!("../fixtures/reprocessing.log");

/// One homogeneous block of nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub vendor: String,
    pub processor: String,
    clock_mhz: u32,
    pub cpus_per_node: u32,
    pub node_count: u32,
}

impl NodeSpec {
    pub fn new(
        vendor: impl Into<String>,
        processor: impl Into<String>,
        clock_ghz: f64,
        cpus_per_node: u32,
        node_count: u32,
    ) -> Result<Self, FarmError> {
        if !(clock_ghz > 0.0) {
            return Err(FarmError::InvalidRate(format!(
                "clock must be positive, got {clock_ghz}"
            )));
        }
        if cpus_per_node == 0 || node_count == 0 {
            return Err(FarmError::InvalidRate(
                "cpu and node counts must be at least 1".into(),
            ));
        }
        Ok(Self {
            vendor: vendor.into(),
            processor: processor.into(),
            clock_mhz: (clock_ghz * 1000.0).round() as u32,
            cpus_per_node,
            node_count,
        })
    }

    pub fn clock_ghz(&self) -> f64 {
        f64::from(self.clock_mhz) / 1000.0
    }

    /// Exact capacity of this block in MHz.
    pub fn capacity_mhz(&self) -> u64 {
        u64::from(self.clock_mhz) * u64::from(self.cpus_per_node) * u64::from(self.node_count)
    }

    /// Exact capacity of this block in GHz.
    pub fn capacity_ghz(&self) -> f64 {
        self.capacity_mhz() as f64 / 1000.0
    }

    /// Block capacity rounded to whole GHz, the way inventory tables are
    /// usually published.
    pub fn reported_ghz(&self) -> u64 {
        self.capacity_ghz().round() as u64
    }
}

/// A whole farm.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FarmConfig {
    pub label: String,
    pub nodes: Vec<NodeSpec>,
}

impl FarmConfig {
    pub fn new(label: impl Into<String>, nodes: Vec<NodeSpec>) -> Self {
        Self {
            label: label.into(),
            nodes,
        }
    }

    /// The published calibration point: 40 nodes of quad 0.7 GHz CPUs.
    pub fn reference_anchor() -> Self {
        Self::new(
            "anchor",
            vec![NodeSpec::new("reference", "quad-xeon", 0.7, 4, 40).expect("static spec")],
        )
    }

    pub fn total_nodes(&self) -> u64 {
        self.nodes.iter().map(|n| u64::from(n.node_count)).sum()
    }

    pub fn total_cpus(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| u64::from(n.node_count) * u64::from(n.cpus_per_node))
            .sum()
    }

    pub fn capacity_mhz(&self) -> u64 {
        self.nodes.iter().map(NodeSpec::capacity_mhz).sum()
    }

    /// Sum of block capacities rounded per row, matching how published
    /// tables total their own rounded entries.
    pub fn reported_total_ghz(&self) -> u64 {
        self.nodes.iter().map(NodeSpec::reported_ghz).sum()
    }

    /// A copy with every node count scaled by an integer factor.
    pub fn scaled(&self, factor: u32) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeSpec {
                node_count: n.node_count * factor,
                ..n.clone()
            })
            .collect();
        Self::new(format!("{}x{factor}", self.label), nodes)
    }
}

/// Aggregate farm capacity: Σ clock × cpus × nodes, in GHz.
pub fn aggregate_capacity(config: &FarmConfig) -> f64 {
    config.capacity_mhz() as f64 / 1000.0
}

/// Calibrated processing cost, anchored at one (farm, rate) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    anchor_capacity_mhz: u64,
    anchor_rate_invfb_per_day: f64,
}

impl CostModel {
    /// Aggregate GHz·days needed per unit of data.
    pub fn ghz_days_per_invfb(&self) -> f64 {
        (self.anchor_capacity_mhz as f64 / 1000.0) / self.anchor_rate_invfb_per_day
    }
}

/// Fixes the cost model from a farm known to sustain `anchor_rate`.
pub fn calibrate(anchor: &FarmConfig, anchor_rate: f64) -> Result<CostModel, FarmError> {
    if !(anchor_rate > 0.0) {
        return Err(FarmError::InvalidRate(format!(
            "anchor rate must be positive, got {anchor_rate}"
        )));
    }
    let capacity = anchor.capacity_mhz();
    if capacity == 0 {
        return Err(FarmError::EmptyConfig);
    }
    Ok(CostModel {
        anchor_capacity_mhz: capacity,
        anchor_rate_invfb_per_day: anchor_rate,
    })
}

/// Predicted rate for a farm under a calibrated cost model; linear in
/// capacity, exact on the anchor itself and under integer scaling.
pub fn predict_rate(config: &FarmConfig, cost: &CostModel) -> Result<f64, FarmError> {
    let capacity = config.capacity_mhz();
    if capacity == 0 {
        return Err(FarmError::EmptyConfig);
    }
    let ratio = capacity as f64 / cost.anchor_capacity_mhz as f64;
    Ok(ratio * cost.anchor_rate_invfb_per_day)
}

/// Parses a farm inventory in TSV form.
///
/// The first line must be the header
/// `vendor processor clock_ghz cpus_per_node node_count` (tab-separated);
/// `#` comments and blank lines are ignored.
pub fn parse_inventory(label: &str, text: &str) -> Result<FarmConfig, FarmError> {
    const HEADER: [&str; 5] = ["vendor", "processor", "clock_ghz", "cpus_per_node", "node_count"];
    let mut nodes = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.split('#').next().unwrap_or("").trim_end();
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if !saw_header {
            if fields != HEADER {
                return Err(FarmError::InvalidInventory {
                    line,
                    message: format!("expected header {:?}", HEADER.join("\t")),
                });
            }
            saw_header = true;
            continue;
        }
        if fields.len() != 5 {
            return Err(FarmError::InvalidInventory {
                line,
                message: format!("expected 5 columns, got {}", fields.len()),
            });
        }
        let bad = |message: String| FarmError::InvalidInventory { line, message };
        let clock_ghz: f64 = fields[2]
            .parse()
            .map_err(|e| bad(format!("bad clock: {e}")))?;
        let cpus: u32 = fields[3]
            .parse()
            .map_err(|e| bad(format!("bad cpu count: {e}")))?;
        let count: u32 = fields[4]
            .parse()
            .map_err(|e| bad(format!("bad node count: {e}")))?;
        nodes.push(
            NodeSpec::new(fields[0], fields[1], clock_ghz, cpus, count)
                .map_err(|e| bad(e.to_string()))?,
        );
    }
    if !saw_header {
        return Err(FarmError::InvalidInventory {
            line: 1,
            message: "empty inventory".into(),
        });
    }
    Ok(FarmConfig::new(label, nodes))
}

/// Reads an inventory file; the file stem becomes the label.
pub fn load_inventory(path: impl AsRef<Path>) -> Result<FarmConfig, FarmError> {
    let path = path.as_ref();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "farm".to_owned());
    parse_inventory(&label, &std::fs::read_to_string(path)?)
}

/// Renders an inventory back to its TSV form.
pub fn inventory_to_tsv(config: &FarmConfig) -> String {
    let mut out = String::from("vendor\tprocessor\tclock_ghz\tcpus_per_node\tnode_count\n");
    for n in &config.nodes {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            n.vendor,
            n.processor,
            n.clock_ghz(),
            n.cpus_per_node,
            n.node_count
        ));
    }
    out
}

/// How a campaign entry combines with the running total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CampaignKind {
    /// New data on top of what exists.
    Add,
    /// A full pass over everything: the amount is the total dataset the
    /// campaign produced, replacing earlier coverage.
    Reprocess,
}

impl CampaignKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "add" => Some(CampaignKind::Add),
            "reprocess" => Some(CampaignKind::Reprocess),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CampaignKind::Add => "add",
            CampaignKind::Reprocess => "reprocess",
        }
    }
}

impl fmt::Display for CampaignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One processing-log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignEntry {
    pub date: String,
    pub kind: CampaignKind,
    pub amount: f64,
    pub label: String,
}

/// Cumulative table over a processing log, CSV-ready.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampaignReport {
    pub rows: Vec<(CampaignEntry, f64)>,
}

impl CampaignReport {
    pub fn final_cumulative(&self) -> f64 {
        self.rows.last().map(|(_, c)| *c).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,label,kind,amount,cumulative\n");
        for (entry, cumulative) in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                entry.date, entry.label, entry.kind, entry.amount, cumulative
            ));
        }
        out
    }
}

/// Folds a processing log into a cumulative report: additions accumulate,
/// reprocessings restate the total.
pub fn campaign_report(entries: &[CampaignEntry]) -> CampaignReport {
    let mut cumulative = 0.0;
    let rows = entries
        .iter()
        .map(|entry| {
            cumulative = match entry.kind {
                CampaignKind::Add => cumulative + entry.amount,
                CampaignKind::Reprocess => entry.amount,
            };
            (entry.clone(), cumulative)
        })
        .collect();
    CampaignReport { rows }
}

/// Parses a campaign log: one `date kind amount [label…]` entry per line.
pub fn parse_campaign_log(text: &str) -> Result<Vec<CampaignEntry>, FarmError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.split('#').next().unwrap_or("").trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let bad = |message: String| FarmError::InvalidCampaign { line, message };
        let date = fields
            .next()
            .ok_or_else(|| bad("missing date".into()))?
            .to_owned();
        let kind = fields
            .next()
            .and_then(CampaignKind::parse)
            .ok_or_else(|| bad("kind must be add or reprocess".into()))?;
        let amount: f64 = fields
            .next()
            .ok_or_else(|| bad("missing amount".into()))?
            .parse()
            .map_err(|e| bad(format!("bad amount: {e}")))?;
        let label = fields.collect::<Vec<_>>().join(" ");
        entries.push(CampaignEntry {
            date,
            kind,
            amount,
            label,
        });
    }
    Ok(entries)
}
