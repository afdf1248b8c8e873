//! Per-sample metric series with the box-plot aggregate statistics used by
//! the comparison reports.

use serde::{Deserialize, Serialize};

/// Box-plot statistics: mean, median, quartiles, extremes. Quantiles use
/// linear interpolation between order statistics (index p * (n - 1)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

pub fn aggregates(values: &[f64]) -> Aggregates {
    assert!(!values.is_empty(), "aggregates of empty series");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let quantile = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    Aggregates {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile(0.5),
        q25: quantile(0.25),
        q75: quantile(0.75),
        min: sorted[0],
        max: *sorted.last().expect("non-empty"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub per_sample: Vec<f64>,
    pub aggregates: Aggregates,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, per_sample: Vec<f64>) -> Self {
        let aggregates = aggregates(&per_sample);
        MetricSeries { name: name.into(), per_sample, aggregates }
    }
}

/// Per-sample and aggregate metric values for one evaluated model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<MetricSeries>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&MetricSeries> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn push(&mut self, series: MetricSeries) {
        self.metrics.push(series);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregates_of_known_series() {
        let a = aggregates(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(a.min, 1.0);
        assert_eq!(a.max, 4.0);
        assert_eq!(a.mean, 2.5);
        assert_eq!(a.median, 2.5);
        assert_eq!(a.q25, 1.75);
        assert_eq!(a.q75, 3.25);
    }

    #[test]
    fn aggregates_match_recomputation() {
        let vals: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        let a = aggregates(&vals);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((a.mean - mean).abs() < 1e-12);
        let mut sorted = vals.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a.min, sorted[0]);
        assert_eq!(a.max, sorted[36]);
        assert_eq!(a.median, sorted[18]);
    }

    #[test]
    fn singleton_series() {
        let a = aggregates(&[0.7]);
        assert_eq!(a.mean, 0.7);
        assert_eq!(a.median, 0.7);
        assert_eq!(a.q25, 0.7);
        assert_eq!(a.q75, 0.7);
    }
}
