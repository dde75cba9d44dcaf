//! Per-step metrics CSV.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "epoch",
    "loss_total",
    "loss_instance",
    "loss_local_group",
    "loss_group",
    "lr",
    "tau_g",
    "ema_momentum",
    "grad_norm",
];

/// One row of the metrics file. `loss_total` is the weighted sum of the
/// three component columns, evaluated in f64.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_instance: f32,
    pub loss_local_group: f32,
    pub loss_group: f32,
    pub lr: f32,
    pub tau_g: f32,
    pub ema_momentum: f32,
    pub grad_norm: f32,
}

pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

impl MetricsWriter {
    /// Opens `path` for rows from `first_step` on. Existing rows with a
    /// smaller step are kept, later ones dropped, so a resumed run rewrites
    /// exactly the rows it recomputes.
    pub fn create(path: &Path, first_step: u64) -> Result<Self> {
        let kept: Vec<StepMetrics> = if first_step > 0 && path.exists() {
            read_metrics(path)?.into_iter().filter(|m| m.step < first_step).collect()
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(METRICS_HEADER).map_err(|e| csv_io(path, e))?;
        let mut w = MetricsWriter { path: path.to_path_buf(), writer };
        for m in &kept {
            w.write(m)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.serialize(m).map_err(|e| csv_io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

/// Writes `rows` to `path` with the standard header.
pub fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut w = MetricsWriter::create(path, 0)?;
    for r in rows {
        w.write(r)?;
    }
    w.flush()
}

/// Strict read: the header must match exactly and every field must parse.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| csv_io(path, e))?;
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format { offset: 0, msg: format!("{}: unexpected metrics header", path.display()) });
    }
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Format {
                offset: e.position().map_or(0, |p| p.byte()),
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> StepMetrics {
        StepMetrics {
            step,
            epoch: 0,
            loss_total: (0.1 + 0.2 + 0.3) / 3.0,
            loss_instance: 0.1,
            loss_local_group: 0.2,
            loss_group: 0.3,
            lr: 1e-4,
            tau_g: 0.04,
            ema_momentum: 0.996,
            grad_norm: 1.5,
        }
    }

    #[test]
    fn round_trip_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows: Vec<_> = (0..3).map(row).collect();
        write_metrics(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn resume_keeps_earlier_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &(0..5).map(row).collect::<Vec<_>>()).unwrap();
        let mut w = MetricsWriter::create(&p, 3).unwrap();
        w.write(&row(3)).unwrap();
        drop(w);
        let steps: Vec<u64> = read_metrics(&p).unwrap().iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
    }
}
