//! Scan-cycle accounting and plant-level resiliency for a controller whose
//! commands may stall.
//!
//! Times are in microseconds throughout. Plants are linear time-invariant:
//! `x[t+1] = A x[t] + B u[t]`, `y[t] = C x[t]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CpsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("lower bound exceeds upper bound in component {0}")]
    InvertedBounds(usize),
    #[error("invalid scan record: {0}")]
    InvalidRecord(String),
    #[error("invalid cycle configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanCycleConfig {
    /// Cycle time: the upper bound a scan must fit in.
    pub cycle_time_us: f64,
    /// Microseconds per VM cost unit.
    pub cost_to_time_scale: f64,
}

impl ScanCycleConfig {
    pub fn new(cycle_time_us: f64, cost_to_time_scale: f64) -> Result<Self, CpsError> {
        if cycle_time_us.is_nan() || cycle_time_us <= 0.0 || cost_to_time_scale.is_nan() || cost_to_time_scale < 0.0 {
            return Err(CpsError::InvalidConfig(format!(
                "cycle time {cycle_time_us} and scale {cost_to_time_scale}"
            )));
        }
        Ok(ScanCycleConfig {
            cycle_time_us,
            cost_to_time_scale,
        })
    }

    /// Whole cycles spent without a fresh command for a stall of `t_us`.
    /// Partial cycles round up.
    pub fn held_cycles(&self, t_us: f64) -> usize {
        if t_us <= 0.0 {
            return 0;
        }
        (t_us / self.cycle_time_us).ceil() as usize
    }
}

/// Paired scan-time samples without (`baseline`) and with (`hardened`)
/// memory-safety instrumentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    baseline: Vec<f64>,
    hardened: Vec<f64>,
}

impl ScanRecord {
    pub fn new(baseline: Vec<f64>, hardened: Vec<f64>) -> Result<Self, CpsError> {
        if baseline.is_empty() || baseline.len() != hardened.len() {
            return Err(CpsError::InvalidRecord(format!(
                "{} baseline vs {} hardened samples",
                baseline.len(),
                hardened.len()
            )));
        }
        if baseline.iter().chain(&hardened).any(|v| v.is_nan() || *v <= 0.0) {
            return Err(CpsError::InvalidRecord("samples must be positive".into()));
        }
        Ok(ScanRecord { baseline, hardened })
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    pub fn hardened(&self) -> &[f64] {
        &self.hardened
    }

    pub fn n(&self) -> usize {
        self.baseline.len()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Memory-safety overhead: difference of mean scan times, absolute and as a
/// percentage of the baseline mean.
pub fn mso(rec: &ScanRecord) -> (f64, f64) {
    let base = mean(&rec.baseline);
    let diff = mean(&rec.hardened) - base;
    (diff, diff / base * 100.0)
}

pub fn tolerable_avg(rec: &ScanRecord, cfg: &ScanCycleConfig) -> bool {
    mean(&rec.hardened) <= cfg.cycle_time_us
}

pub fn tolerable_worst(rec: &ScanRecord, cfg: &ScanCycleConfig) -> bool {
    max(&rec.hardened) <= cfg.cycle_time_us
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    AbortRestart,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DowntimeModel {
    /// Downtime assumed whenever the controller aborts and restarts.
    pub restart_us: f64,
}

/// Time the controller goes without issuing a fresh command.
pub fn downtime(policy: Policy, scan_us: f64, cfg: &ScanCycleConfig, dtm: &DowntimeModel) -> f64 {
    match policy {
        Policy::AbortRestart => dtm.restart_us,
        Policy::Continue if scan_us <= cfg.cycle_time_us => 0.0,
        Policy::Continue => scan_us - cfg.cycle_time_us,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub x0: DVector<f64>,
    /// Command applied during downtime instead of holding the last one.
    pub fail_safe: Option<DVector<f64>>,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        x0: DVector<f64>,
    ) -> Result<Self, CpsError> {
        let m = PlantModel {
            a,
            b,
            c,
            lower,
            upper,
            x0,
            fail_safe: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<(), CpsError> {
        let k = self.a.nrows();
        let dims = [
            ("A", self.a.shape(), (k, k)),
            ("B", (self.b.nrows(), 0), (k, 0)),
            ("C", (0, self.c.ncols()), (0, k)),
            ("lower bound", self.lower.shape(), (k, 1)),
            ("upper bound", self.upper.shape(), (k, 1)),
            ("x0", self.x0.shape(), (k, 1)),
        ];
        for (what, got, want) in dims {
            if got != want {
                return Err(CpsError::DimensionMismatch(format!(
                    "{what} is {got:?}, expected {want:?}"
                )));
            }
        }
        if let Some(u) = &self.fail_safe {
            if u.len() != self.b.ncols() {
                return Err(CpsError::DimensionMismatch(format!(
                    "fail-safe command has {} entries, B has {} columns",
                    u.len(),
                    self.b.ncols()
                )));
            }
        }
        if let Some(i) = (0..k).find(|&i| self.lower[i] > self.upper[i]) {
            return Err(CpsError::InvertedBounds(i));
        }
        Ok(())
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<(), CpsError> {
        if x.len() != self.states() {
            return Err(CpsError::DimensionMismatch(format!(
                "state has {} entries, expected {}",
                x.len(),
                self.states()
            )));
        }
        Ok(())
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<(), CpsError> {
        if u.len() != self.inputs() {
            return Err(CpsError::DimensionMismatch(format!(
                "command has {} entries, expected {}",
                u.len(),
                self.inputs()
            )));
        }
        Ok(())
    }
}

/// One plant update: the next state and the current output.
pub fn plant_step(
    m: &PlantModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), CpsError> {
    m.check_state(x)?;
    m.check_input(u)?;
    Ok((&m.a * x + &m.b * u, &m.c * x))
}

/// States `x[t], x[t+1], ..., x[t+hold]` while the controller is down and
/// the actuators keep applying `u_last` (or the fail-safe command, if one
/// is configured).
pub fn estimate_under_downtime(
    m: &PlantModel,
    x: &DVector<f64>,
    u_last: &DVector<f64>,
    hold_cycles: usize,
) -> Result<Vec<DVector<f64>>, CpsError> {
    m.check_state(x)?;
    m.check_input(u_last)?;
    let u = m.fail_safe.as_ref().unwrap_or(u_last);
    let bu = &m.b * u;
    let mut out = Vec::with_capacity(hold_cycles + 1);
    out.push(x.clone());
    for _ in 0..hold_cycles {
        let next = &m.a * out.last().expect("nonempty") + &bu;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Resiliency {
    Resilient,
    Violated { step: usize, component: usize, bound: f64 },
}

impl Resiliency {
    pub fn is_resilient(&self) -> bool {
        matches!(self, Resiliency::Resilient)
    }
}

fn first_violation(m: &PlantModel, traj: &[DVector<f64>]) -> Resiliency {
    for (step, x) in traj.iter().enumerate() {
        for i in 0..x.len() {
            if x[i] < m.lower[i] {
                return Resiliency::Violated {
                    step,
                    component: i,
                    bound: m.lower[i],
                };
            }
            if x[i] > m.upper[i] {
                return Resiliency::Violated {
                    step,
                    component: i,
                    bound: m.upper[i],
                };
            }
        }
    }
    Resiliency::Resilient
}

/// Whether the plant stays within bounds for a controller downtime of
/// `tau_us`.
pub fn check_resiliency(
    m: &PlantModel,
    x: &DVector<f64>,
    u_last: &DVector<f64>,
    tau_us: f64,
    cfg: &ScanCycleConfig,
) -> Result<Resiliency, CpsError> {
    check_held(m, x, u_last, cfg.held_cycles(tau_us))
}

/// Same verdict for the delay `delta_us` spent skipping illegal accesses.
pub fn check_skip_delay(
    m: &PlantModel,
    x: &DVector<f64>,
    u_last: &DVector<f64>,
    delta_us: f64,
    cfg: &ScanCycleConfig,
) -> Result<Resiliency, CpsError> {
    check_held(m, x, u_last, cfg.held_cycles(delta_us))
}

/// Verdict for an explicit number of held cycles.
pub fn check_held(
    m: &PlantModel,
    x: &DVector<f64>,
    u_last: &DVector<f64>,
    hold: usize,
) -> Result<Resiliency, CpsError> {
    let traj = estimate_under_downtime(m, x, u_last, hold)?;
    Ok(first_violation(m, &traj))
}

/// Skip delay from a skip-attributable cost.
pub fn skip_delay_us(skip_cost: u64, cfg: &ScanCycleConfig) -> f64 {
    skip_cost as f64 * cfg.cost_to_time_scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tank(q: f64, x0: f64, hi: f64) -> PlantModel {
        PlantModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, hi),
            DVector::from_element(1, x0),
        )
        .unwrap()
    }

    fn rec(base: &[f64], hard: &[f64]) -> ScanRecord {
        ScanRecord::new(base.to_vec(), hard.to_vec()).unwrap()
    }

    #[test]
    fn overhead_of_published_means() {
        let (us, pct) = mso(&rec(&[273.48], &[441.72]));
        assert!((us - 168.24).abs() < 0.01 && (pct - 61.52).abs() < 0.01, "{us} {pct}");
        let (us, pct) = mso(&rec(&[253.87], &[398.39]));
        assert!((us - 144.52).abs() < 0.01 && (pct - 56.93).abs() < 0.01, "{us} {pct}");
        assert_eq!(mso(&rec(&[3.0, 5.0], &[5.0, 3.0])), (0.0, 0.0));
    }

    #[test]
    fn tolerability_bounds_are_inclusive() {
        let cfg = ScanCycleConfig::new(10.0, 1.0).unwrap();
        let r = rec(&[1.0, 1.0], &[10.0, 10.0]);
        assert!(tolerable_avg(&r, &cfg) && tolerable_worst(&r, &cfg));
        let r = rec(&[1.0, 1.0], &[4.0, 10.5]);
        assert!(tolerable_avg(&r, &cfg));
        assert!(!tolerable_worst(&r, &cfg));
    }

    #[test]
    fn downtime_cases() {
        let cfg = ScanCycleConfig::new(10_000.0, 1.0).unwrap();
        let dtm = DowntimeModel { restart_us: 5e6 };
        assert_eq!(downtime(Policy::Continue, 441.72, &cfg, &dtm), 0.0);
        assert_eq!(downtime(Policy::AbortRestart, 441.72, &cfg, &dtm), 5e6);
        assert_eq!(downtime(Policy::Continue, 12_000.0, &cfg, &dtm), 2_000.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(ScanRecord::new(vec![], vec![]).is_err());
        assert!(ScanRecord::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(ScanRecord::new(vec![0.0], vec![1.0]).is_err());
        assert!(ScanCycleConfig::new(0.0, 1.0).is_err());
        let m = tank(1.0, 0.0, 10.0);
        let bad = DVector::from_element(2, 0.0);
        let u = DVector::from_element(1, 1.0);
        assert!(matches!(plant_step(&m, &bad, &u), Err(CpsError::DimensionMismatch(_))));
        assert!(matches!(
            plant_step(&m, &m.x0, &bad),
            Err(CpsError::DimensionMismatch(_))
        ));
        assert!(PlantModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::zeros(3),
            DVector::zeros(2),
        )
        .is_err());
    }

    #[test]
    fn tank_level_rises_linearly_while_on() {
        let m = tank(0.5, 2.0, 100.0);
        let pattern = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let mut x = m.x0.clone();
        for u in pattern {
            let (next, y) = plant_step(&m, &x, &DVector::from_element(1, u)).unwrap();
            assert_eq!(y, x);
            x = next;
        }
        let on = pattern.iter().filter(|u| **u == 1.0).count() as f64;
        assert_eq!(x[0], 2.0 + 0.5 * on);

        let traj = estimate_under_downtime(&m, &m.x0, &DVector::from_element(1, 1.0), 10).unwrap();
        assert_eq!(traj.len(), 11);
        assert_eq!(traj[10][0], 2.0 + 10.0 * 0.5);
        let still = estimate_under_downtime(&m, &m.x0, &DVector::from_element(1, 1.0), 0).unwrap();
        assert_eq!(still, vec![m.x0.clone()]);
    }

    #[test]
    fn identity_dynamics_hold_state() {
        let m = PlantModel::new(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 2),
            DMatrix::identity(3, 3),
            DVector::from_element(3, -1.0),
            DVector::from_element(3, 1.0),
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
        )
        .unwrap();
        let traj = estimate_under_downtime(&m, &m.x0, &DVector::from_element(2, 7.0), 25).unwrap();
        assert!(traj.iter().all(|x| *x == m.x0));
    }

    #[test]
    fn tank_overflows_on_the_third_held_cycle() {
        let m = tank(5.0, 90.0, 100.0);
        let cfg = ScanCycleConfig::new(10_000.0, 1.0).unwrap();
        let on = DVector::from_element(1, 1.0);
        let v = check_resiliency(&m, &m.x0, &on, 30_000.0, &cfg).unwrap();
        assert_eq!(
            v,
            Resiliency::Violated {
                step: 3,
                component: 0,
                bound: 100.0
            }
        );
        assert!(check_resiliency(&m, &m.x0, &on, 20_000.0, &cfg).unwrap().is_resilient());
        assert!(check_resiliency(&m, &m.x0, &on, 0.0, &cfg).unwrap().is_resilient());
        // 20.5 ms of stall rounds up to three missed commands.
        assert_eq!(check_skip_delay(&m, &m.x0, &on, 20_500.0, &cfg).unwrap(), v);
    }

    #[test]
    fn fail_safe_command_replaces_held_one() {
        let mut m = tank(5.0, 90.0, 100.0);
        m.fail_safe = Some(DVector::from_element(1, 0.0));
        m.validate().unwrap();
        let cfg = ScanCycleConfig::new(1.0, 1.0).unwrap();
        let on = DVector::from_element(1, 1.0);
        assert!(check_resiliency(&m, &m.x0, &on, 50.0, &cfg).unwrap().is_resilient());
    }

    #[test]
    fn skip_delay_from_cost() {
        let cfg = ScanCycleConfig::new(10_000.0, 0.25).unwrap();
        assert_eq!(skip_delay_us(1024, &cfg), 256.0);
        assert_eq!(cfg.held_cycles(256.0), 1);
        assert_eq!(cfg.held_cycles(0.0), 0);
        assert_eq!(cfg.held_cycles(20_000.0), 2);
    }
}
