//! Temperature-scheduled multi-task sampling.
//!
//! Task weights are the dataset-size shares raised to `1/T` and then
//! renormalized. `T = 1` reproduces size-proportional sampling; as `T`
//! grows the distribution flattens toward task-uniform. The temperature
//! steps up by a fixed increment at each epoch boundary.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::CoreError;
use crate::scalar;
use crate::Result;

/// Task names, sizes and the temperature schedule state.
#[derive(Debug, Clone)]
pub struct TaskInventory {
    names: Vec<String>,
    sizes: Vec<u64>,
    t0: f64,
    delta_t: f64,
    epoch: usize,
    exposures: Vec<u64>,
}

impl TaskInventory {
    /// Builds an inventory; sizes must be positive and names unique.
    pub fn new(tasks: &[(&str, u64)], t0: f64, delta_t: f64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(CoreError::InvalidArgument {
                op: "mixture",
                detail: format!("no tasks"),
            });
        }
        if t0 < 1.0 {
            return Err(CoreError::TemperatureOutOfRange { t: t0 });
        }
        if delta_t < 0.0 {
            return Err(CoreError::InvalidArgument {
                op: "mixture",
                detail: format!("temperature increment {delta_t} is negative"),
            });
        }
        let mut names = Vec::with_capacity(tasks.len());
        let mut sizes = Vec::with_capacity(tasks.len());
        for (name, size) in tasks {
            if *size == 0 {
                return Err(CoreError::InvalidArgument {
                    op: "mixture",
                    detail: format!("task {name} has zero records"),
                });
            }
            if names.iter().any(|n| n == name) {
                return Err(CoreError::InvalidArgument {
                    op: "mixture",
                    detail: format!("duplicate task name {name}"),
                });
            }
            names.push(String::from(*name));
            sizes.push(*size);
        }
        let n = names.len();
        Ok(TaskInventory {
            names,
            sizes,
            t0,
            delta_t,
            epoch: 0,
            exposures: alloc::vec![0; n],
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn temperature(&self) -> f64 {
        self.t0 + self.delta_t * self.epoch as f64
    }

    /// Steps to the next epoch and returns the new temperature.
    pub fn advance_epoch(&mut self) -> f64 {
        self.epoch += 1;
        self.temperature()
    }

    /// Probability vector for the current temperature.
    pub fn probs(&self) -> Vec<f64> {
        task_probs(&self.sizes, self.temperature()).expect("temperature stays >= 1")
    }

    /// Draws a task under the current temperature and counts the exposure.
    pub fn draw_task<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let probs = self.probs();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.exposures[pick] += 1;
        pick
    }

    pub fn exposures(&self) -> &[u64] {
        &self.exposures
    }
}

/// Normalized sampling probabilities at temperature `T >= 1`.
pub fn task_probs(sizes: &[u64], temperature: f64) -> Result<Vec<f64>> {
    if temperature < 1.0 || !temperature.is_finite() {
        return Err(CoreError::TemperatureOutOfRange { t: temperature });
    }
    let total: u64 = sizes.iter().sum();
    let mut weights: Vec<f64> = sizes
        .iter()
        .map(|&s| scalar::powf(s as f64 / total as f64, 1.0 / temperature))
        .collect();
    let z: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= z;
    }
    Ok(weights)
}

/// Per-epoch probability rows, used for the schedule trace report.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSchedule {
    pub rows: Vec<ScheduleRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub temperature: f64,
    pub probs: Vec<f64>,
}

/// Evaluates the schedule over `epochs` epoch boundaries without touching
/// the live inventory state.
pub fn schedule_trace(inventory: &TaskInventory, epochs: usize) -> Result<MixtureSchedule> {
    let mut rows = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let t = inventory.t0 + inventory.delta_t * e as f64;
        rows.push(ScheduleRow {
            epoch: e,
            temperature: t,
            probs: task_probs(&inventory.sizes, t)?,
        });
    }
    Ok(MixtureSchedule { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn proportional_at_unit_temperature() {
        let p = task_probs(&[9, 1], 1.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        assert!((p[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let p = task_probs(&[9, 1], 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!((p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn halved_exponent_hand_case() {
        // shares (0.8, 0.2) at T=2: sqrt(0.8)/sqrt(0.2) = 2, so (2/3, 1/3)
        let p = task_probs(&[4, 1], 2.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cold_temperature_is_rejected() {
        assert!(matches!(
            task_probs(&[1, 1], 0.5),
            Err(CoreError::TemperatureOutOfRange { .. })
        ));
    }

    #[test]
    fn default_schedule_steps_by_five() {
        let mut inv = TaskInventory::new(&[("asr", 10), ("sound", 2)], 1.0, 5.0).unwrap();
        assert_eq!(inv.temperature(), 1.0);
        assert_eq!(inv.advance_epoch(), 6.0);
        assert_eq!(inv.advance_epoch(), 11.0);
    }

    #[test]
    fn zero_increment_keeps_mixing_static() {
        let mut inv = TaskInventory::new(&[("a", 3), ("b", 1)], 1.0, 0.0).unwrap();
        let before = inv.probs();
        inv.advance_epoch();
        assert_eq!(before, inv.probs());
    }

    #[test]
    fn smallest_task_share_grows_with_epochs() {
        let inv = TaskInventory::new(&[("big", 3012), ("mid", 460), ("small", 25)], 1.0, 5.0)
            .unwrap();
        let trace = schedule_trace(&inv, 6).unwrap();
        for w in trace.rows.windows(2) {
            assert!(w[1].probs[2] >= w[0].probs[2]);
        }
    }

    #[test]
    fn ranking_follows_sizes_at_every_temperature() {
        for t in [1.0, 2.0, 7.5, 100.0] {
            let p = task_probs(&[100, 10, 1000], t).unwrap();
            assert!(p[2] > p[0] && p[0] > p[1]);
        }
    }

    #[test]
    fn single_task_always_drawn() {
        let mut inv = TaskInventory::new(&[("only", 5)], 1.0, 5.0).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(inv.draw_task(&mut rng), 0);
        }
        assert_eq!(inv.exposures(), &[100]);
    }

    #[test]
    fn draws_are_reproducible_under_seed() {
        let mut a = TaskInventory::new(&[("x", 9), ("y", 1)], 1.0, 5.0).unwrap();
        let mut b = a.clone();
        let mut ra = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let mut rb = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let da: Vec<usize> = (0..500).map(|_| a.draw_task(&mut ra)).collect();
        let db: Vec<usize> = (0..500).map(|_| b.draw_task(&mut rb)).collect();
        assert_eq!(da, db);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for t in [1.0, 3.5, 11.0, 1e6] {
            let p = task_probs(&[78, 3012, 460, 25], t).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v > 0.0));
        }
    }
}
