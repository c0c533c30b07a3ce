use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::memorization::Evaluation;
use crate::error::{Error, Result};

/// One long-format metrics record. `std_err` is empty for exact quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub band: String,
    pub metric: String,
    pub value: f64,
    pub std_err: Option<f64>,
}

impl MetricRow {
    pub fn exact(run_id: &str, band: &str, metric: &str, value: f64) -> Self {
        Self { run_id: run_id.into(), band: band.into(), metric: metric.into(), value, std_err: None }
    }
}

/// AMS and UMS for every band, followed by the 95th-percentile best-match similarity.
pub fn evaluation_rows(run_id: &str, eval: &Evaluation) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(2 * eval.bands.len() + 1);
    for b in &eval.bands {
        rows.push(MetricRow::exact(run_id, &b.name, "ams", b.ams));
        rows.push(MetricRow::exact(run_id, &b.name, "ums", b.ums));
    }
    rows.push(MetricRow::exact(run_id, "all", "p95_similarity", super::percentile(&eval.max_similarity, 95.0)?));
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

pub fn write_metric_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_rows<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(csv_err)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPair {
    pub ams: f64,
    pub ums: f64,
}

/// `method -> band -> {ams, ums}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub methods: BTreeMap<String, BTreeMap<String, BandPair>>,
}

impl MetricsSummary {
    pub fn insert(&mut self, method: &str, eval: &Evaluation) {
        let entry = self.methods.entry(method.to_string()).or_default();
        for b in &eval.bands {
            entry.insert(b.name.clone(), BandPair { ams: b.ams, ums: b.ums });
        }
    }
}
