use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// z for a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Configuration the value belongs to, e.g. a map name.
    pub label: String,
    pub metric: String,
    pub value: f64,
    /// Half-width of the 95% interval over seeds.
    pub ci95: f64,
    /// Number of seeds.
    pub n: usize,
}

/// Mean of per-seed values with a normal-approximation interval. One seed
/// gives a zero-width interval.
pub fn aggregate(label: &str, metric: &str, per_seed: &[f64]) -> Result<MetricReport, EvalError> {
    let n = per_seed.len();
    if n == 0 {
        return Err(EvalError::Contract(format!("{label}/{metric}: no samples")));
    }
    let mean = per_seed.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z95 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MetricReport { label: label.into(), metric: metric.into(), value: mean, ci95, n })
}

/// Columns: label, metric, value, ci95, n.
pub fn write_reports_csv<W: Write>(w: W, reports: &[MetricReport]) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        if !r.value.is_finite() || !r.ci95.is_finite() {
            return Err(EvalError::Contract(format!("{}/{}: non-finite value", r.label, r.metric)));
        }
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricReport>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<Vec<MetricReport>, _>>()?)
}
