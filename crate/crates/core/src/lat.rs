//! Local activation times and conduction velocity.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_LAT_THRESHOLD: f64 = -30.0;

/// First upward threshold crossing per point, with linear interpolation in
/// time between consecutive records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatRecorder {
    pub threshold: f64,
    last: Option<(f64, Vec<f64>)>,
    pub lat: Vec<Option<f64>>,
    records: usize,
}

impl LatRecorder {
    pub fn new(n_points: usize, threshold: f64) -> Self {
        Self {
            threshold,
            last: None,
            lat: vec![None; n_points],
            records: 0,
        }
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn record(&mut self, t: f64, values: &[f64]) -> Result<()> {
        if values.len() != self.lat.len() {
            return Err(Error::Layout(format!("{} values for {} points", values.len(), self.lat.len())));
        }
        if let Some((t0, prev)) = &self.last {
            if !(t > *t0) {
                return Err(Error::ContractViolation(format!("record time {t} not after {t0}")));
            }
            for (i, (&a, &b)) in prev.iter().zip(values).enumerate() {
                if self.lat[i].is_none() && a <= self.threshold && b > self.threshold {
                    self.lat[i] = Some(t0 + (self.threshold - a) / (b - a) * (t - t0));
                }
            }
        }
        self.last = Some((t, values.to_vec()));
        self.records += 1;
        Ok(())
    }

    /// LATs, or an error if fewer than two records were taken.
    pub fn finish(&self) -> Result<Vec<Option<f64>>> {
        if self.records < 2 {
            return Err(Error::InsufficientData(format!(
                "activation times need at least two snapshots, got {}",
                self.records
            )));
        }
        Ok(self.lat.clone())
    }
}

/// LAT per point from `series[k][i]` = value of point `i` at `times[k]`.
pub fn compute_lat(times: &[f64], series: &[Vec<f64>], threshold: f64) -> Result<Vec<Option<f64>>> {
    if times.len() != series.len() {
        return Err(Error::Layout(format!("{} times for {} snapshots", times.len(), series.len())));
    }
    let n = series.first().map_or(0, |s| s.len());
    let mut rec = LatRecorder::new(n, threshold);
    for (t, v) in times.iter().zip(series) {
        rec.record(*t, v)?;
    }
    rec.finish()
}

/// Least-squares conduction velocity from LAT at positions along a line,
/// using only points in the central half of the line.
pub fn conduction_velocity(positions: &[f64], lat: &[Option<f64>]) -> Result<f64> {
    if positions.len() != lat.len() || positions.is_empty() {
        return Err(Error::Layout("positions and activation times differ in length".into()));
    }
    let lo = positions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = (lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo));
    let pts: Vec<(f64, f64)> = positions
        .iter()
        .zip(lat)
        .filter(|(x, _)| **x >= a - 1e-12 && **x <= b + 1e-12)
        .filter_map(|(x, t)| t.map(|t| (*x, t)))
        .collect();
    let inside = positions.iter().filter(|x| **x >= a - 1e-12 && **x <= b + 1e-12).count();
    if pts.len() < 3 || pts.len() < inside {
        return Err(Error::InsufficientData(format!(
            "wave activated {} of {inside} central points",
            pts.len()
        )));
    }
    // fit t = t0 + x / cv
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mt = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxt: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - mt)).sum();
    let slowness = sxt / sxx;
    if !(slowness > 0.0) {
        return Err(Error::Benchmark(format!("activation does not travel forward (slope {slowness})")));
    }
    Ok(1.0 / slowness)
}
