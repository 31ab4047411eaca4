use std::fmt;

use super::layers::Recorder;
use super::{Msfin, NetworkConfig, Result};

/// Per-layer parameter counts of a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterReport {
    /// (layer name, weight + bias elements), in construction order.
    pub layers: Vec<(String, usize)>,
    pub total: usize,
}

impl ParameterReport {
    pub fn total_k(&self) -> f64 {
        self.total as f64 / 1000.0
    }

    pub fn layer(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.layers
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|&(_, c)| c)
            .sum()
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.layers.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        for (name, count) in &self.layers {
            writeln!(f, "{name:<width$}  {count:>9}")?;
        }
        writeln!(f, "{:-<1$}", "", width + 11)?;
        write!(f, "{:<width$}  {:>9}  ({:.1}K)", "total", self.total, self.total_k())
    }
}

/// Counts every parameter the configuration would allocate, per layer.
pub fn count_parameters(cfg: &NetworkConfig) -> Result<ParameterReport> {
    let mut rec = Recorder::default();
    Msfin::build(cfg.clone(), &mut rec)?;
    let mut layers: Vec<(String, usize)> = Vec::new();
    for (name, shape) in rec.entries {
        let layer = name
            .strip_suffix(".weight")
            .or_else(|| name.strip_suffix(".bias"))
            .unwrap_or(&name)
            .to_string();
        match layers.last_mut() {
            Some((last, n)) if *last == layer => *n += shape.numel(),
            _ => layers.push((layer, shape.numel())),
        }
    }
    let total = layers.iter().map(|(_, c)| c).sum();
    Ok(ParameterReport { layers, total })
}
