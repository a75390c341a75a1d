//! Scenario and plant files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use super::HarnessError;
use crate::cps::{PlantModel, ScanCycleConfig};
use crate::instrument::Mode;
use crate::shadow::FaultKind;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    /// Program to build, relative to the scenario file.
    pub source: Option<String>,
    #[serde(default = "all_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub input_tape: Vec<i64>,
    pub max_steps: Option<u64>,
    pub loop_exit_budget: Option<u32>,
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub expected: BTreeMap<Mode, Expected>,
    #[serde(default)]
    pub resiliency_case: Vec<ResiliencyCase>,
    #[serde(skip)]
    pub dir: PathBuf,
}

fn all_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_restart_us() -> f64 {
    5_000_000.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub cycle_time_us: f64,
    pub cost_to_time_scale: f64,
    pub plant_file: Option<String>,
    /// Downtime charged when the controller aborts or hangs.
    #[serde(default = "default_restart_us")]
    pub restart_us: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            cycle_time_us: 10_000.0,
            cost_to_time_scale: 1.0,
            plant_file: None,
            restart_us: default_restart_us(),
        }
    }
}

impl ScanSection {
    pub fn cycle(&self) -> Result<ScanCycleConfig, HarnessError> {
        ScanCycleConfig::new(self.cycle_time_us, self.cost_to_time_scale).map_err(|e| HarnessError::Stage {
            stage: "scan",
            message: e.to_string(),
        })
    }
}

/// Checks applied to one mode's run. Absent fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub status: Option<String>,
    pub skips: Option<usize>,
    /// Inclusive range every skipped index must fill exactly, in order.
    pub skipped_indices: Option<[i64; 2]>,
    pub abort_index: Option<i64>,
    pub abort_array: Option<String>,
    pub abort_fault: Option<FaultKind>,
    pub outputs: Option<Vec<[i64; 2]>>,
    pub outputs_equal_to: Option<Mode>,
    pub leaks: Option<usize>,
    /// Distinct fault kinds observed, in any order.
    pub fault_kinds: Option<Vec<FaultKind>>,
    pub resilient: Option<bool>,
    /// Non-synthetic instructions in the built program.
    pub instructions: Option<usize>,
    pub max_skips_per_loop: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResiliencyCase {
    pub name: String,
    pub plant_file: String,
    pub tau_us: Option<f64>,
    pub delta_us: Option<f64>,
    pub fail_safe: Option<Vec<f64>>,
    pub violated_at: Option<usize>,
    pub component: Option<usize>,
    pub resilient: Option<bool>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut s: Scenario = toml::from_str(&text).map_err(|e| HarnessError::Scenario {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        s.dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantFile {
    pub name: String,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Vec<f64>,
    /// Command the actuators keep applying while the controller is down.
    pub u_hold: Vec<f64>,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("matrix {name} has ragged rows"));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

impl PlantFile {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| HarnessError::Scenario {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn model(&self) -> Result<(PlantModel, DVector<f64>), HarnessError> {
        let err = |message: String| HarnessError::Stage {
            stage: "plant",
            message,
        };
        let m = PlantModel::new(
            matrix("a", &self.a).map_err(err)?,
            matrix("b", &self.b).map_err(err)?,
            matrix("c", &self.c).map_err(err)?,
            DVector::from_vec(self.lower.clone()),
            DVector::from_vec(self.upper.clone()),
            DVector::from_vec(self.x0.clone()),
        )
        .map_err(|e| err(e.to_string()))?;
        let u = DVector::from_vec(self.u_hold.clone());
        if u.len() != m.inputs() {
            return Err(err(format!(
                "u_hold has {} entries, B has {} columns",
                u.len(),
                m.inputs()
            )));
        }
        Ok((m, u))
    }
}
