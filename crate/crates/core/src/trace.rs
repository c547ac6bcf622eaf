//! Per-round optimizer traces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 1-based round number.
    pub round: usize,
    pub grid_index: usize,
    pub observed_kpi: f64,
    /// Best observation up to and including this round.
    pub incumbent_kpi: f64,
    /// `incumbent_kpi / oracle`, once an oracle value is attached.
    pub fraction_of_oracle: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Index of the best observation, lowest round on ties.
    pub best_index: Option<usize>,
    pub best_value: f64,
}

impl Trace {
    pub fn new() -> Self {
        Self { rows: Vec::new(), best_index: None, best_value: f64::NEG_INFINITY }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, grid_index: usize, observed: f64) {
        if self.best_index.is_none() || observed > self.best_value {
            self.best_index = Some(grid_index);
            self.best_value = observed;
        }
        self.rows.push(TraceRow {
            round: self.rows.len() + 1,
            grid_index,
            observed_kpi: observed,
            incumbent_kpi: self.best_value,
            fraction_of_oracle: None,
        });
    }

    pub fn set_oracle(&mut self, oracle: f64) {
        for r in &mut self.rows {
            r.fraction_of_oracle = Some(r.incumbent_kpi / oracle);
        }
    }

    /// Fraction at 1-based `round`; past the end the last row is used.
    pub fn fraction_at(&self, round: usize) -> Option<f64> {
        if self.rows.is_empty() || round == 0 {
            return None;
        }
        self.rows[round.min(self.rows.len()) - 1].fraction_of_oracle
    }

    /// First 1-based round whose fraction reaches `level`.
    pub fn first_round_reaching(&self, level: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.fraction_of_oracle.is_some_and(|f| f >= level)).map(|r| r.round)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "round,grid_index,observed_kpi,incumbent_kpi,fraction_of_oracle")?;
        for r in &self.rows {
            let frac = r.fraction_of_oracle.map(|f| f.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.round, r.grid_index, r.observed_kpi, r.incumbent_kpi, frac)?;
        }
        Ok(())
    }
}
