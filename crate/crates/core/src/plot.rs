//! Tidy CSV tables for plotting, normalized by the fleet capacity `B`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::StepRecord;
use crate::verify::{BoundReport, DecreaseReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    ErrorBound,
    DualDecrease,
    AggregateConsumption,
    Generation,
    Storage,
}

impl Figure {
    pub const ALL: [Figure; 5] =
        [Figure::ErrorBound, Figure::DualDecrease, Figure::AggregateConsumption, Figure::Generation, Figure::Storage];

    pub fn id(&self) -> &'static str {
        match self {
            Figure::ErrorBound => "error-bound",
            Figure::DualDecrease => "dual-decrease",
            Figure::AggregateConsumption => "aggregate-consumption",
            Figure::Generation => "generation",
            Figure::Storage => "storage",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown figure `{s}`")))
    }
}

/// Column indices `(lower, center, upper)` of a shaded region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Band {
    pub lower: usize,
    pub center: usize,
    pub upper: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub figure: Figure,
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub bands: Vec<Band>,
}

impl PlotSeries {
    pub fn new(figure: Figure, names: &[&str]) -> Self {
        Self { figure, names: names.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), bands: Vec::new() }
    }

    fn with_band(mut self, lower: &str, center: &str, upper: &str) -> Self {
        let at = |n: &str| self.names.iter().position(|c| c == n).expect("band column exists");
        let band = Band { lower: at(lower), center: at(center), upper: at(upper) };
        self.bands.push(band);
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.names.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// First row whose band does not contain its center.
    pub fn band_violation(&self) -> Option<usize> {
        self.rows
            .iter()
            .position(|r| self.bands.iter().any(|b| !(r[b.lower] <= r[b.center] && r[b.center] <= r[b.upper])))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        if let Some(i) = self.band_violation() {
            return Err(Error::InvalidArgument(format!("{} row {i}: band does not contain its center", self.figure)));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(&self.names)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scatter of sampled errors with the bound line.
pub fn error_bound_series(report: &BoundReport) -> PlotSeries {
    let mut s = PlotSeries::new(Figure::ErrorBound, &["dy0", "trial", "error", "bound"]);
    for p in &report.samples {
        s.push(vec![p.dy0, p.trial as f64, p.error, p.bound]);
    }
    s
}

pub fn dual_decrease_series(report: &DecreaseReport) -> PlotSeries {
    let mut s = PlotSeries::new(Figure::DualDecrease, &["trial", "iteration", "actual", "surrogate"]);
    for p in &report.samples {
        s.push(vec![p.trial as f64, p.iteration as f64, p.actual, p.surrogate]);
    }
    s
}

/// Builds a figure table from trace rows. Trace quantities are already in
/// units of `B`.
///
/// `error-bound` lists the closed-loop first-step errors per group; the
/// dual-decrease data are not kept in traces.
pub fn trace_series(figure: Figure, steps: &[StepRecord]) -> Result<PlotSeries> {
    let t = |s: &StepRecord| s.t as f64;
    let mut out = match figure {
        Figure::Storage => PlotSeries::new(figure, &["t", "x_pred/B", "x_real/B", "band_lo", "band_hi"])
            .with_band("band_lo", "x_pred/B", "band_hi"),
        Figure::Generation => PlotSeries::new(figure, &["t", "u_g/B", "demand/B"]),
        Figure::AggregateConsumption => {
            PlotSeries::new(figure, &["t", "plan/B", "realized/B", "delivered/B", "band_lo", "band_hi", "demand/B"])
                .with_band("band_lo", "plan/B", "band_hi")
        }
        Figure::ErrorBound => PlotSeries::new(figure, &["t", "group", "dy0", "error", "bound"]),
        Figure::DualDecrease => {
            return Err(Error::InvalidArgument("traces do not record audits; use `verify-dual-decrease --out`".into()))
        }
    };
    for s in steps {
        match figure {
            Figure::Storage => {
                let pred = s.x_pred.get(1).copied().unwrap_or(s.x);
                out.push(vec![t(s), pred, s.x_real, pred - s.delta, pred + s.delta]);
            }
            Figure::Generation => out.push(vec![t(s), s.u_g, s.demand]),
            Figure::AggregateConsumption => {
                let (mut plan, mut real, mut got, mut band) = (0.0, 0.0, 0.0, 0.0);
                for g in &s.groups {
                    plan += g.energy_weight * g.w_plan.first().copied().unwrap_or(0.0);
                    real += g.energy_weight * g.w_real.first().copied().unwrap_or(0.0);
                    got += g.energy_weight * g.delivered;
                    band += g.energy_weight * g.radius;
                }
                out.push(vec![t(s), plan, real, got, plan - band, plan + band, s.demand]);
            }
            Figure::ErrorBound => {
                for (gi, g) in s.groups.iter().enumerate() {
                    out.push(vec![t(s), gi as f64, g.dy0, g.first_err, g.bound]);
                }
            }
            Figure::DualDecrease => unreachable!(),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_ids_round_trip() {
        for f in Figure::ALL {
            assert_eq!(f.id().parse::<Figure>().unwrap(), f);
        }
        assert!("histogram".parse::<Figure>().is_err());
    }

    #[test]
    fn empty_trace_is_header_only() {
        let s = trace_series(Figure::Storage, &[]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,x_pred/B,x_real/B,band_lo,band_hi\n");
    }

    #[test]
    fn inverted_band_is_refused() {
        let mut s = PlotSeries::new(Figure::Storage, &["t", "x_pred/B", "x_real/B", "band_lo", "band_hi"])
            .with_band("band_lo", "x_pred/B", "band_hi");
        s.push(vec![0.0, 0.5, 0.5, 0.6, 0.7]);
        assert_eq!(s.band_violation(), Some(0));
        assert!(s.write_csv(Vec::new()).is_err());
    }
}
