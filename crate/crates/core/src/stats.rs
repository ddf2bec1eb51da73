//! Small descriptive-statistics helpers shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Population (divide-by-n) standard deviation.
pub fn population_std(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

/// A mean with its population standard deviation, printed as
/// `mean_{std}` the way result tables show it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self { mean: mean(values)?, std: population_std(values)? })
    }

    pub fn formatted(&self, decimals: usize) -> String {
        format!("{:.*}_{{{:.*}}}", decimals, self.mean, decimals, self.std)
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.formatted(3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values() {
        let ms = MeanStd::of(&[0.7, 0.8]).unwrap();
        assert!((ms.mean - 0.75).abs() < 1e-15);
        assert!((ms.std - 0.05).abs() < 1e-15);
        assert_eq!(ms.to_string(), "0.750_{0.050}");
    }

    #[test]
    fn empty_has_no_mean() {
        assert!(mean(&[]).is_none());
        assert!(MeanStd::of(&[]).is_none());
    }
}
