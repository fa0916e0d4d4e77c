//! Learning-rate reduction and early stopping on a maximized metric.
//!
//! Both policies compare against the best value seen so far, seeded with the
//! metric of the untrained model when one is available: an epoch improves
//! only if it beats that best by more than `threshold`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub enabled: bool,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            factor: 0.5,
            patience: 5,
            threshold: 1e-4,
            min_lr: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub patience: usize,
    pub threshold: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: 15,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauPolicy {
    pub config: PlateauConfig,
    pub best: Option<f64>,
    /// Consecutive epochs without improvement.
    pub wait: usize,
}

impl PlateauPolicy {
    pub fn new(config: PlateauConfig, baseline: Option<f64>) -> Self {
        Self {
            config,
            best: baseline,
            wait: 0,
        }
    }

    /// Learning rate to use after an epoch that scored `metric`.
    pub fn update(&mut self, metric: f64, lr: f64) -> f64 {
        if improves(self.best, metric, self.config.threshold) {
            self.best = Some(metric);
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.config.enabled && self.wait >= self.config.patience {
            self.wait = 0;
            return (lr * self.config.factor).max(self.config.min_lr).min(lr);
        }
        lr
    }
}

fn improves(best: Option<f64>, metric: f64, threshold: f64) -> bool {
    best.is_none_or(|b| metric > b + threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopPolicy {
    pub config: EarlyStopConfig,
    pub best_value: Option<f64>,
    /// 0 stands for the baseline before training.
    pub best_epoch: usize,
    pub wait: usize,
}

impl EarlyStopPolicy {
    pub fn new(config: EarlyStopConfig, baseline: Option<f64>) -> Self {
        Self {
            config,
            best_value: baseline,
            best_epoch: 0,
            wait: 0,
        }
    }

    pub fn check(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if improves(self.best_value, metric, self.config.threshold) {
            self.best_value = Some(metric);
            self.best_epoch = epoch;
            self.wait = 0;
            return StopDecision::Continue;
        }
        self.wait += 1;
        if self.config.enabled && self.wait >= self.config.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
