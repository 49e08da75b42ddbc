use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Diagnostics of one iteration, measured on the states entering it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub alpha: f64,
    pub consensus_residual: f64,
    pub fixed_point_residual: f64,
    pub perturbation_pnorm: f64,
    pub constraint_violation: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub(crate) fn push(&mut self, record: IterationRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.k < record.k));
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn consensus(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.consensus_residual).collect()
    }

    /// Records are strictly increasing in `k` with a constant stride.
    pub fn is_well_formed(&self) -> bool {
        let ks: Vec<usize> = self.records.iter().map(|r| r.k).collect();
        if ks.len() < 2 {
            return true;
        }
        let stride = ks[1] as isize - ks[0] as isize;
        stride > 0 && ks.windows(2).all(|w| w[1] as isize - w[0] as isize == stride)
    }

    /// Partial sums of `alpha_k |E^k|_P` over the whole trace and over its
    /// second half.
    pub fn perturbation_sums(&self) -> (f64, f64) {
        let terms: Vec<f64> = self.records.iter().map(|r| r.alpha * r.perturbation_pnorm).collect();
        let total: f64 = terms.iter().sum();
        let tail: f64 = terms[terms.len() / 2..].iter().sum();
        (total, tail)
    }

    /// CSV with header
    /// `k,alpha,consensus_residual,fixed_point_residual,perturbation_pnorm,constraint_violation,elapsed_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        // An empty trace still gets its header.
        if self.records.is_empty() {
            w.write_record([
                "k",
                "alpha",
                "consensus_residual",
                "fixed_point_residual",
                "perturbation_pnorm",
                "constraint_violation",
                "elapsed_ms",
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<IterationRecord>, _>>()
            .map_err(csv_err)?;
        Ok(IterationTrace { records })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Io(std::io::Error::other(e))
}
