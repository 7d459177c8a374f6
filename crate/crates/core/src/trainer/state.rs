use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::datasets::BatchCursor;
use crate::error::{Error, Result};
use crate::network::checkpoint::{read_tensor, write_tensor};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str = "iteration,lr,chief_loss,aux_loss,total_loss";

/// Losses recorded for one iteration. `aux_loss` is unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub lr: f64,
    pub chief_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.lr, self.chief_loss, self.aux_loss, self.total_loss
        )
    }
}

/// Everything beyond the weights needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Iterations completed.
    pub iteration: u64,
    /// Momentum buffers, model parameters first, then head parameters.
    pub velocities: Vec<Tensor<T>>,
    /// State of the generator used for DSA candidate sampling.
    pub loss_rng: u64,
    pub cursor: BatchCursor,
    pub metrics: Vec<MetricRow>,
}

impl<T: Scalar> TrainState<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(self.iteration);
        w.u64(self.loss_rng);
        w.u64(self.cursor.epoch);
        w.u64(self.cursor.cursors[0]);
        w.u64(self.cursor.cursors[1]);
        w.u64(self.cursor.batch_in_epoch);
        w.u64(self.cursor.rng_state);
        w.u32(self.velocities.len());
        for v in &self.velocities {
            write_tensor(&mut w, v);
        }
        w.u64(self.metrics.len() as u64);
        for m in &self.metrics {
            w.u64(m.iteration);
            for v in [m.lr, m.chief_loss, m.aux_loss, m.total_loss] {
                w.f64(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let iteration = r.u64()?;
        let loss_rng = r.u64()?;
        let cursor = BatchCursor {
            epoch: r.u64()?,
            cursors: [r.u64()?, r.u64()?],
            batch_in_epoch: r.u64()?,
            rng_state: r.u64()?,
        };
        let n = r.u32()?;
        let velocities = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        let rows = r.u64()?;
        if rows.saturating_mul(40) > r.remaining() as u64 {
            return Err(Error::Format("metric history longer than the record".into()));
        }
        let mut metrics = Vec::with_capacity(rows as usize);
        for _ in 0..rows {
            metrics.push(MetricRow {
                iteration: r.u64()?,
                lr: r.f64()?,
                chief_loss: r.f64()?,
                aux_loss: r.f64()?,
                total_loss: r.f64()?,
            });
        }
        r.finish()?;
        Ok(TrainState {
            iteration,
            velocities,
            loss_rng,
            cursor,
            metrics,
        })
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}
