//! Per-epoch search metrics and indicator snapshots, written as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Search,
}

/// One row per epoch. Validation columns are empty during warmup, when no
/// architecture steps run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub temperature: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Active-op count of each normal-cell edge, space separated.
    pub active_normal: String,
    pub active_reduce: String,
    pub pruned: usize,
    /// True when `snapshots.csv` holds rows for this epoch.
    pub snapshot: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotStage {
    /// Values an epoch's pruning decision was based on.
    Prune,
    /// State at the end of the search, used for decoding.
    Final,
}

/// Long format: one row per (epoch, cell type, edge, active op).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub epoch: usize,
    pub stage: SnapshotStage,
    pub cell: String,
    pub edge: usize,
    pub op: String,
    pub alpha: f64,
    pub beta: f64,
    pub train_iters: u64,
    pub val_accuracy: f64,
    pub c_norm: f64,
    pub indicator: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub cell: String,
    pub edge: usize,
    pub op: String,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "csv output",
            reason: format!("{other:?}"),
        },
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        what: "csv input",
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format {
            what: "csv input",
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_with_empty_optionals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            epoch: 1,
            phase: Phase::Warmup,
            lr: 0.025,
            temperature: 5.0,
            train_loss: 2.25,
            train_acc: 0.125,
            val_loss: None,
            val_acc: None,
            active_normal: "8 8".into(),
            active_reduce: "8 7".into(),
            pruned: 0,
            snapshot: false,
        }];
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,phase,lr,temperature,"));
        assert!(!text.contains('\r'));
        assert!(text.contains("warmup"));
        let back: Vec<MetricsRow> = read_csv(&path).unwrap();
        assert_eq!(back, rows);
    }
}
