//! Plateau LR schedule and early stopping on a monitored loss.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MonitorSplit {
    /// Mean training loss of the epoch (no extra forward pass).
    Train,
    /// Held-out fraction carved deterministically from the training list.
    Val,
    /// The test split (selectable for protocol-faithful replication; note
    /// that scheduling on the test set leaks it into model selection).
    Test,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Multiplier applied to the learning rate on plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement before the LR is reduced.
    pub patience_epochs: usize,
    pub monitor: MonitorSplit,
    /// Fraction of the training list held out when monitoring `val`.
    pub val_fraction: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            plateau_factor: 0.5,
            patience_epochs: 25,
            monitor: MonitorSplit::Val,
            val_fraction: 0.1,
        }
    }
}

/// What the trainer should do after observing one epoch's monitored loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleAction {
    pub improved: bool,
    pub reduce_lr: bool,
    pub stop: bool,
}

/// Tracks the best monitored loss; reduces the LR after `patience` epochs
/// without improvement (the plateau counter restarts after each reduction)
/// and stops after `early_stop` epochs without improvement.
pub struct PlateauSchedule {
    patience: usize,
    early_stop: usize,
    best: f64,
    pub best_epoch: usize,
    since_best: usize,
    since_reduce: usize,
    epoch: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, early_stop: usize) -> Self {
        Self {
            patience,
            early_stop,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            since_reduce: 0,
            epoch: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, monitored: f64) -> ScheduleAction {
        self.epoch += 1;
        if monitored < self.best {
            self.best = monitored;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            self.since_reduce = 0;
            return ScheduleAction { improved: true, reduce_lr: false, stop: false };
        }
        self.since_best += 1;
        self.since_reduce += 1;
        let mut action = ScheduleAction { improved: false, reduce_lr: false, stop: false };
        if self.since_reduce >= self.patience {
            action.reduce_lr = true;
            self.since_reduce = 0;
        }
        if self.since_best >= self.early_stop {
            action.stop = true;
        }
        action
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduces_after_patience_and_stops_after_early_stop() {
        // patience 2, early stop 5; scripted losses never improve after epoch 1
        let mut s = PlateauSchedule::new(2, 5);
        assert!(s.observe(1.0).improved);
        let a2 = s.observe(1.5);
        assert!(!a2.improved && !a2.reduce_lr && !a2.stop);
        let a3 = s.observe(1.4); // 2 epochs since best -> reduce
        assert!(a3.reduce_lr && !a3.stop);
        let a4 = s.observe(1.3);
        assert!(!a4.reduce_lr);
        let a5 = s.observe(1.2); // 2 since last reduce -> reduce again
        assert!(a5.reduce_lr);
        let a6 = s.observe(1.1); // 5 epochs since best -> stop
        assert!(a6.stop);
        assert_eq!(s.best_epoch, 1);
        assert_eq!(s.best(), 1.0);
    }

    #[test]
    fn improvement_resets_counters() {
        let mut s = PlateauSchedule::new(3, 4);
        s.observe(2.0);
        s.observe(2.5);
        s.observe(2.4);
        let a = s.observe(1.9);
        assert!(a.improved);
        // counters restart: three more bad epochs until the next reduction
        assert!(!s.observe(2.0).reduce_lr);
        assert!(!s.observe(2.0).reduce_lr);
        let a = s.observe(2.0);
        assert!(a.reduce_lr && !a.stop);
        let a = s.observe(2.0);
        assert!(a.stop);
    }
}
