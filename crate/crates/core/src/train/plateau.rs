use serde::{Deserialize, Serialize};

/// Learning-rate decay on a stalled, maximized metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub decays: usize,
}

impl PlateauState {
    pub fn new(lr0: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            best_metric: None,
            epochs_since_improvement: 0,
            current_lr: lr0,
            factor,
            patience,
            min_delta,
            decays: 0,
        }
    }

    /// Records one epoch's metric; returns `true` when the rate decayed.
    pub fn step(&mut self, metric: f64) -> bool {
        let improved = match self.best_metric {
            None => true,
            Some(best) => metric > best + self.min_delta,
        };
        if improved {
            self.best_metric = Some(metric);
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.patience {
            self.current_lr *= self.factor;
            self.epochs_since_improvement = 0;
            self.decays += 1;
            return true;
        }
        false
    }
}
