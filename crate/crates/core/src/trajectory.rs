use alloc::vec::Vec;

use crate::dp::vavg_update_raw;

/// Position-indexed state/input history: `P + 1` states and `P` inputs.
///
/// `fuel[k]` is the space-domain fuel rate (kg/m) over segment `k`, and
/// `vavg` is the running distance-over-time average.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ds: f64,
    pub v: Vec<f64>,
    pub vavg: Vec<f64>,
    pub te: Vec<f64>,
    pub fuel: Vec<f64>,
}

impl Trajectory {
    pub fn start(ds: f64, v0: f64) -> Self {
        Self { ds, v: alloc::vec![v0], vavg: alloc::vec![v0], te: Vec::new(), fuel: Vec::new() }
    }

    /// Append one segment driven with `te` at fuel rate `fuel` ending at `v_next`.
    pub fn push(&mut self, te: f64, fuel: f64, v_next: f64) {
        let k = self.te.len();
        let v = self.v[k];
        let va = self.vavg[k];
        self.vavg.push(vavg_update_raw(k as f64 * self.ds, va, v, self.ds));
        self.v.push(v_next);
        self.te.push(te);
        self.fuel.push(fuel);
    }

    pub fn steps(&self) -> usize {
        self.te.len()
    }

    pub fn position(&self, index: usize) -> f64 {
        index as f64 * self.ds
    }

    pub fn total_fuel(&self) -> f64 {
        self.fuel.iter().sum::<f64>() * self.ds
    }

    pub fn elapsed_time(&self) -> f64 {
        self.v[..self.steps()].iter().map(|v| self.ds / v).sum()
    }
}
