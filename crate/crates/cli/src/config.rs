//! Run configuration: one JSON file plus command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spanproto::{GeneratorConfig, TrainConfig};

/// Everything a run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    /// Dev and test episodes written by `generate`.
    pub eval_episodes: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            eval_episodes: 20,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        Ok(config)
    }

    /// Sets the field at a dotted path such as `train.optimizer.learning_rate`.
    pub fn set(&mut self, path: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for key in path.split('.') {
            node = match node.get_mut(key) {
                Some(child) => child,
                None => bail!("unknown config key `{path}`"),
            };
        }
        *node = value;
        *self = serde_json::from_value(tree).with_context(|| format!("bad value for `{path}`"))?;
        Ok(())
    }

    /// Applies a `key=value` override; the value is JSON, or a bare string.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let Some((key, raw)) = assignment.split_once('=') else {
            bail!("override `{assignment}` is not of the form key=value");
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Ok(())
    }
}

/// Cartesian product of a grid file mapping dotted keys to value lists, in
/// key order then value order.
pub fn grid_points(path: &Path) -> Result<Vec<Vec<(String, Value)>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let grid: serde_json::Map<String, Value> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in grid {
        let Value::Array(values) = values else {
            bail!("grid entry `{key}` must be a list");
        };
        if values.is_empty() {
            bail!("grid entry `{key}` is empty");
        }
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in &values {
                let mut q = p.clone();
                q.push((key.clone(), v.clone()));
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set_str("train.optimizer.learning_rate=0.01").unwrap();
        c.set_str("train.margin.margin_loss=false").unwrap();
        c.set("generator.mode", json!("intra")).unwrap();
        assert_eq!(c.train.optimizer.learning_rate, 0.01);
        assert!(!c.train.margin.margin_loss);
        assert!(c.set_str("train.nope=1").is_err());
        assert!(c.set_str("train.total_steps=\"many\"").is_err());
    }

    #[test]
    fn grid_is_a_product() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        std::fs::write(&path, r#"{"train.batch_size": [1, 2], "train.optimizer.learning_rate": [0.001, 0.003, 0.01]}"#)
            .unwrap();
        let points = grid_points(&path).unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!(points[1], vec![("train.batch_size".to_string(), json!(1)), ("train.optimizer.learning_rate".to_string(), json!(0.003))]);
    }
}
