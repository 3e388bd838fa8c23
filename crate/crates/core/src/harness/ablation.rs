//! Ablation grids: a base optimizer spec plus axes of overrides, expanded
//! into the cartesian product of arms.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::optimizers::OptimizerSpec;
use crate::pathway::RoutingConfig;
use crate::plant::PlantSpec;

use super::{Arm, ExperimentConfig, Format};

/// One swept field. `path` is a dotted path into the JSON form of
/// [`OptimizerSpec`], e.g. `mask.layers` or `neighborhood.k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub plant: PlantSpec,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub base: OptimizerSpec,
    pub axes: Vec<Axis>,
    /// Extra arms run alongside the grid, e.g. a `none` baseline.
    #[serde(default)]
    pub extra_arms: Vec<Arm>,
    #[serde(default = "super::default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "super::default_formats")]
    pub formats: Vec<Format>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidSpec(format!("{path}: {part} is not inside an object")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::InvalidSpec(format!("{path}: no field {part}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::InvalidSpec("empty override path".into()))
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Applies `overrides` to `base` and re-validates the result.
pub fn apply_overrides(base: &OptimizerSpec, overrides: &[(&str, &Value)]) -> Result<OptimizerSpec> {
    let mut json = serde_json::to_value(base)?;
    for (path, value) in overrides {
        set_path(&mut json, path, (*value).clone())?;
    }
    let spec: OptimizerSpec = serde_json::from_value(json)?;
    spec.validate()?;
    Ok(spec)
}

impl AblationGrid {
    /// Grid arms in row-major order over the axes (last axis fastest),
    /// named `path=value;path=value`, followed by the extra arms.
    pub fn arms(&self) -> Result<Vec<Arm>> {
        if self.axes.iter().any(|a| a.values.is_empty()) {
            return Err(Error::InvalidSpec("ablation axis without values".into()));
        }
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for axis in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    (0..axis.values.len()).map(move |i| {
                        let mut next = c.clone();
                        next.push(i);
                        next
                    })
                })
                .collect();
        }
        let mut arms = Vec::with_capacity(combos.len() + self.extra_arms.len());
        for combo in combos {
            let overrides: Vec<(&str, &Value)> = self
                .axes
                .iter()
                .zip(&combo)
                .map(|(a, &i)| (a.path.as_str(), &a.values[i]))
                .collect();
            let name = if overrides.is_empty() {
                "base".to_string()
            } else {
                overrides
                    .iter()
                    .map(|(p, v)| format!("{p}={}", render(v)))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            arms.push(Arm {
                name,
                spec: apply_overrides(&self.base, &overrides)?,
            });
        }
        arms.extend(self.extra_arms.iter().cloned());
        Ok(arms)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig {
            seeds: self.seeds.clone(),
            plant: self.plant.clone(),
            routing: self.routing,
            arms: self.arms()?,
            output_dir: self.output_dir.clone(),
            formats: self.formats.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
