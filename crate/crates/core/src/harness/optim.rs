use serde::{Deserialize, Serialize};

use crate::model::{to_storage, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &Parameters) -> f64 {
    grads
        .iter()
        .map(|(_, p)| p.value.iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns
/// the norm before and after.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return (norm, norm);
    }
    let factor = max_norm / norm;
    for (_, p) in grads.iter_mut() {
        p.value.mapv_inplace(|g| g * factor);
    }
    (norm, global_norm(grads))
}

/// One decoupled-weight-decay Adam update. `step` is the 1-based count
/// after this update. Parameters and moments are kept at storage
/// precision.
pub fn adamw_update(
    params: &mut Parameters,
    first: &mut Parameters,
    second: &mut Parameters,
    grads: &Parameters,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, p) in params.iter_mut() {
        let g = &grads.get(name).expect("gradient for every parameter").value;
        let m = &mut first
            .get_mut(name)
            .expect("first moment for every parameter")
            .value;
        let v = &mut second
            .get_mut(name)
            .expect("second moment for every parameter")
            .value;
        ndarray::Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|w, m, v, &g| {
                let m_new = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                let v_new = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (m_new / bias1) / ((v_new / bias2).sqrt() + cfg.eps);
                *w = to_storage(*w - lr * cfg.weight_decay * *w - lr * update);
                *m = to_storage(m_new);
                *v = to_storage(v_new);
            });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    /// Stop after this many consecutive plateaus once the rate sits at
    /// `min_lr`.
    pub plateaus_at_floor: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            min_delta: 1e-4,
            min_lr: 1e-6,
            plateaus_at_floor: 5,
        }
    }
}

/// Schedule bookkeeping carried in the training state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub learning_rate: f64,
    pub best_val_miou: Option<f64>,
    pub epochs_since_improvement: usize,
    pub floor_plateaus: usize,
}

impl Schedule {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            best_val_miou: None,
            epochs_since_improvement: 0,
            floor_plateaus: 0,
        }
    }

    /// Records one validation result. Returns `true` when it improved on
    /// the best by at least `min_delta`; after `patience` epochs without
    /// improvement the rate is multiplied by `factor`.
    pub fn observe(&mut self, miou: f64, cfg: &PlateauConfig) -> bool {
        let improved = match self.best_val_miou {
            None => true,
            Some(best) => miou >= best + cfg.min_delta,
        };
        if improved {
            self.best_val_miou = Some(miou);
            self.epochs_since_improvement = 0;
            self.floor_plateaus = 0;
            return true;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= cfg.patience {
            self.epochs_since_improvement = 0;
            if self.learning_rate <= cfg.min_lr {
                self.floor_plateaus += 1;
            }
            self.learning_rate = (self.learning_rate * cfg.factor).max(cfg.min_lr);
        }
        false
    }

    pub fn exhausted(&self, cfg: &PlateauConfig) -> bool {
        self.floor_plateaus >= cfg.plateaus_at_floor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(v: ndarray::Array2<f64>) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", vec![v.nrows(), v.ncols()], v);
        p
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = single(array![[1.0, -2.0]]);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        let g = p.zeros_like();
        adamw_update(&mut p, &mut m, &mut v, &g, 1, 0.1, &AdamWConfig::default());
        let w = &p.get("w").unwrap().value;
        assert_eq!(w[[0, 0]], to_storage(1.0 - 0.1 * 0.01));
        assert_eq!(w[[0, 1]], to_storage(-2.0 + 0.1 * 0.01 * 2.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(array![[0.0, 0.0]]);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        let g = single(array![[3.0, -0.5]]);
        adamw_update(&mut p, &mut m, &mut v, &g, 1, 0.01, &AdamWConfig::default());
        let w = &p.get("w").unwrap().value;
        assert!((w[[0, 0]] + 0.01).abs() < 1e-8);
        assert!((w[[0, 1]] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = single(array![[3.0, 4.0]]);
        let (before, after) = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!(after <= 1.0 + 1e-12);
        assert!((g.get("w").unwrap().value[[0, 0]] - 0.6).abs() < 1e-12);
        let mut small = single(array![[0.1]]);
        assert_eq!(clip_global_norm(&mut small, 1.0), (0.1, 0.1));
    }

    #[test]
    fn plateau_rules() {
        let cfg = PlateauConfig::default();
        let mut s = Schedule::new(1e-3);
        for i in 0..6 {
            assert!(s.observe(10.0 + i as f64, &cfg));
        }
        assert_eq!(s.learning_rate, 1e-3);
        for _ in 0..3 {
            s.observe(10.0, &cfg);
        }
        assert_eq!(s.learning_rate, 5e-4);
        for _ in 0..3 {
            s.observe(10.0, &cfg);
        }
        assert_eq!(s.learning_rate, 2.5e-4);
        let mut tiny = Schedule::new(1e-3);
        tiny.observe(5.0, &cfg);
        for _ in 0..3 {
            tiny.observe(5.0 + 0.5e-4, &cfg);
        }
        assert_eq!(tiny.learning_rate, 5e-4);
    }

    #[test]
    fn floor_plateaus_stop_training() {
        let cfg = PlateauConfig {
            min_lr: 1e-3,
            ..Default::default()
        };
        let mut s = Schedule::new(1e-3);
        s.observe(1.0, &cfg);
        for _ in 0..(3 * 5) {
            s.observe(1.0, &cfg);
        }
        assert!(s.exhausted(&cfg));
        assert_eq!(s.learning_rate, 1e-3);

        let mut interrupted = Schedule::new(1e-3);
        interrupted.observe(1.0, &cfg);
        for _ in 0..(3 * 4) {
            interrupted.observe(1.0, &cfg);
        }
        assert_eq!(interrupted.floor_plateaus, 4);
        interrupted.observe(2.0, &cfg);
        for _ in 0..3 {
            interrupted.observe(2.0, &cfg);
        }
        assert!(!interrupted.exhausted(&cfg));
    }
}
