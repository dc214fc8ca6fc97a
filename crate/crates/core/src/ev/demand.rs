//! External demand: CSV ingestion or the built-in daily profile.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;

use super::config::{DemandSource, SyntheticDemand};
use crate::error::{Error, Result};

/// Demand in kWh per step (already scaled), long enough for the run plus a
/// forecast window.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    pub values: Vec<f64>,
}

impl DemandProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::NegativeDemand { index, value });
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `values[start..start + len]` as a vector.
    pub fn window(&self, start: usize, len: usize) -> Result<DVector<f64>> {
        if start + len > self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "demand window {start}..{} exceeds profile length {}",
                start + len,
                self.values.len()
            )));
        }
        Ok(DVector::from_column_slice(&self.values[start..start + len]))
    }

    /// Repeats the profile periodically up to `len` entries.
    pub fn tiled(&self, len: usize) -> Result<Self> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument("cannot tile an empty demand profile".into()));
        }
        Ok(Self { values: (0..len).map(|i| self.values[i % self.values.len()]).collect() })
    }
}

/// Raw (unscaled) value of the built-in profile at hour `h`.
pub fn synthetic_value(p: &SyntheticDemand, h: f64) -> f64 {
    let up = (p.peak_hour - p.trough_hour).rem_euclid(24.0);
    let since = (h - p.trough_hour).rem_euclid(24.0);
    let frac = if since <= up {
        // 0 at the trough, 1 at the peak
        0.5 * (1.0 - (PI * since / up).cos())
    } else {
        0.5 * (1.0 + (PI * (since - up) / (24.0 - up)).cos())
    };
    p.low_kwh + (p.high_kwh - p.low_kwh) * frac
}

/// Hourly built-in profile of `len` steps starting at hour 0, scaled.
pub fn synthetic_profile(p: &SyntheticDemand, len: usize) -> Result<DemandProfile> {
    DemandProfile::new((0..len).map(|k| synthetic_value(p, (k % 24) as f64) / p.scale_divisor).collect())
}

/// Parses a two-column `hour,kwh` CSV. A header row is allowed.
pub fn parse_demand_csv(text: &str, scale_divisor: f64) -> Result<DemandProfile> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != 2 {
            return Err(Error::Parse { line, message: format!("expected 2 columns, found {}", rec.len()) });
        }
        let parsed = rec[0].parse::<f64>().and_then(|_| rec[1].parse::<f64>());
        let v = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 && values.is_empty() && rec[1].parse::<f64>().is_err() => continue,
            Err(e) => return Err(Error::Parse { line, message: format!("{e}: {:?}", rec.as_slice()) }),
        };
        if v < 0.0 {
            return Err(Error::NegativeDemand { index: values.len(), value: v });
        }
        values.push(v / scale_divisor);
    }
    if values.is_empty() {
        return Err(Error::Parse { line: 0, message: "no demand rows".into() });
    }
    DemandProfile::new(values)
}

/// Loads the configured source and extends it to `len` steps.
pub fn ingest_demand(source: &DemandSource, len: usize) -> Result<DemandProfile> {
    match source {
        DemandSource::Synthetic(p) => synthetic_profile(p, len),
        DemandSource::File { path, scale_divisor } => read_demand_file(path, *scale_divisor)?.tiled(len),
    }
}

pub fn read_demand_file(path: &Path, scale_divisor: f64) -> Result<DemandProfile> {
    parse_demand_csv(&std::fs::read_to_string(path)?, scale_divisor)
}
