//! Learning-rate schedules and the decoupled-weight-decay Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Params;

/// Linear warmup followed by half-cosine decay, parameterized in epochs.
///
/// * On `[0, warmup]` the rate rises linearly from 0 to `peak`.
/// * On `(warmup, total]` it follows
///   `floor + 0.5·(peak − floor)·(1 + cos(pi·t))` with
///   `t = (e − warmup)/(total − warmup)`.
///
/// `peak == floor` yields a constant schedule. Endpoints are returned
/// exactly (no floating-point drift at the warmup peak or the final floor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub peak: f64,
    pub floor: f64,
}

impl LrSchedule {
    pub fn new(warmup_epochs: f64, total_epochs: f64, peak: f64, floor: f64) -> Result<Self> {
        if !(total_epochs > 0.0) {
            return Err(Error::Invalid(format!("schedule: total_epochs {total_epochs} must be > 0")));
        }
        if !(0.0..).contains(&warmup_epochs) || warmup_epochs >= total_epochs {
            return Err(Error::Invalid(format!(
                "schedule: warmup {warmup_epochs} must satisfy 0 <= warmup < total {total_epochs}"
            )));
        }
        if !(peak >= floor && floor >= 0.0) {
            return Err(Error::Invalid(format!(
                "schedule: need peak {peak} >= floor {floor} >= 0"
            )));
        }
        Ok(LrSchedule { warmup_epochs, total_epochs, peak, floor })
    }

    /// Pretraining: 50 epochs, 15-epoch warmup to 1e-3, cosine to 0.
    pub fn pretrain() -> Self {
        LrSchedule { warmup_epochs: 15.0, total_epochs: 50.0, peak: 1e-3, floor: 0.0 }
    }

    /// Single-label fine-tuning: 50 epochs, 10-epoch warmup to 5e-4,
    /// cosine to 1e-6.
    pub fn single_label() -> Self {
        LrSchedule { warmup_epochs: 10.0, total_epochs: 50.0, peak: 5e-4, floor: 1e-6 }
    }

    /// Multi-label fine-tuning: 30 epochs at a constant 0.01.
    pub fn multi_label() -> Self {
        LrSchedule { warmup_epochs: 0.0, total_epochs: 30.0, peak: 0.01, floor: 0.01 }
    }

    /// VQA adaptation: 3 epochs, cosine from 2e-5 to 0, no warmup.
    pub fn vqa() -> Self {
        LrSchedule { warmup_epochs: 0.0, total_epochs: 3.0, peak: 2e-5, floor: 0.0 }
    }

    /// Learning rate at a fractional epoch position (clamped to
    /// `[0, total_epochs]`).
    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        let e = epoch_fraction.clamp(0.0, self.total_epochs);
        if self.warmup_epochs > 0.0 && e <= self.warmup_epochs {
            return self.peak * (e / self.warmup_epochs);
        }
        let t = (e - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs);
        if t <= 0.0 {
            return self.peak;
        }
        if t >= 1.0 {
            return self.floor;
        }
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
///
/// Decay applies only to parameters with 2 or more dimensions (weight
/// matrices), never to biases, norm parameters, or learned tokens — the
/// usual transformer convention.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    /// First/second moment per trainable parameter name.
    state: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    /// Pretraining/MAE convention: betas (0.9, 0.95), weight decay 0.05.
    pub fn pretrain() -> Self {
        Self::new(0.9, 0.95, 0.05)
    }

    /// Fine-tuning convention: betas (0.9, 0.999), weight decay 0.05.
    pub fn finetune() -> Self {
        Self::new(0.9, 0.999, 0.05)
    }

    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps: 1e-8, weight_decay, step_count: 0, state: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `grads` must hold an entry of matching length for
    /// every trainable parameter.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr32 = lr as f32;
        let eps = self.eps as f32;
        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("optimizer: missing gradient for {name}")))?;
            let p = params.get_mut(&name)?;
            if g.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "optimizer: gradient length {} != parameter {} length {}",
                    g.len(),
                    name,
                    p.data.len()
                )));
            }
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = if p.shape.len() >= 2 { self.weight_decay as f32 } else { 0.0 };
            let (ibc1, ibc2) = (1.0 / bc1 as f32, 1.0 / bc2 as f32);
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] * ibc1;
                let vhat = v[i] * ibc2;
                let mut x = p.data[i];
                x -= lr32 * decay * x;
                x -= lr32 * mhat / (vhat.sqrt() + eps);
                p.data[i] = x;
            }
        }
        Ok(())
    }

    /// Flattened optimizer state for checkpointing: sorted by name,
    /// first moment then second moment per parameter.
    pub fn export_state(&self) -> (u64, Vec<(String, Vec<f32>, Vec<f32>)>) {
        let entries = self
            .state
            .iter()
            .map(|(n, (m, v))| (n.clone(), m.clone(), v.clone()))
            .collect();
        (self.step_count, entries)
    }

    pub fn import_state(&mut self, step_count: u64, entries: Vec<(String, Vec<f32>, Vec<f32>)>) {
        self.step_count = step_count;
        self.state = entries.into_iter().map(|(n, m, v)| (n, (m, v))).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn pretrain_anchors_exact() {
        let s = LrSchedule::pretrain();
        assert_eq!(s.lr_at(0.0), 0.0);
        assert_eq!(s.lr_at(7.5), 5e-4);
        assert_eq!(s.lr_at(15.0), 1e-3);
        assert_eq!(s.lr_at(50.0), 0.0);
    }

    #[test]
    fn single_label_anchors_exact() {
        let s = LrSchedule::single_label();
        assert_eq!(s.lr_at(0.0), 0.0);
        assert_eq!(s.lr_at(10.0), 5e-4);
        assert_eq!(s.lr_at(50.0), 1e-6);
        // Midpoint of the decay: cos(pi/2) = 0 analytically.
        assert!((s.lr_at(30.0) - 2.505e-4).abs() < 1e-12);
    }

    #[test]
    fn multi_label_constant() {
        let s = LrSchedule::multi_label();
        for e in [0.0, 0.1, 7.0, 13.5, 29.0, 30.0] {
            assert_eq!(s.lr_at(e), 0.01);
        }
    }

    #[test]
    fn vqa_anchors() {
        let s = LrSchedule::vqa();
        assert_eq!(s.lr_at(0.0), 2e-5);
        assert_eq!(s.lr_at(3.0), 0.0);
        assert!(s.lr_at(1.5) > 0.0 && s.lr_at(1.5) < 2e-5);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(10.0, 10.0, 1e-3, 0.0).is_err());
        assert!(LrSchedule::new(-1.0, 10.0, 1e-3, 0.0).is_err());
        assert!(LrSchedule::new(0.0, 0.0, 1e-3, 0.0).is_err());
        assert!(LrSchedule::new(0.0, 10.0, 1e-5, 1e-3).is_err());
        assert!(LrSchedule::new(5.0, 10.0, 1e-3, 1e-6).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn schedule_monotone_piecewise(e1 in 0.0f64..50.0, e2 in 0.0f64..50.0) {
            let s = LrSchedule::pretrain();
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            if hi <= s.warmup_epochs {
                proptest::prop_assert!(s.lr_at(lo) <= s.lr_at(hi));
            } else if lo >= s.warmup_epochs {
                proptest::prop_assert!(s.lr_at(lo) >= s.lr_at(hi));
            }
            let v = s.lr_at(e1);
            proptest::prop_assert!(v >= s.floor - 1e-18 && v <= s.peak + 1e-18);
        }
    }

    fn one_param(value: Vec<f32>, shape: Vec<usize>) -> Params {
        let mut p = Params::new();
        p.insert("w", Param { data: value, shape, trainable: true }).unwrap();
        p
    }

    #[test]
    fn first_step_is_signed_unit_step_times_lr() {
        let mut params = one_param(vec![0.0], vec![1]);
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![2.0f32]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        // mhat = g, vhat = g^2 -> update = lr * g/(|g| + eps) ~ lr * sign(g)
        let got = params.get("w").unwrap().data[0];
        assert!((got + 0.1).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn quadratic_converges() {
        let mut params = one_param(vec![0.0], vec![1]);
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let x = params.get("w").unwrap().data[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![2.0 * (x - 3.0)]);
            opt.step(&mut params, &grads, 0.01).unwrap();
        }
        let x = params.get("w").unwrap().data[0];
        assert!((x - 3.0).abs() < 1e-2, "converged to {x}");
    }

    #[test]
    fn decay_hits_matrices_only() {
        let mut params = Params::new();
        params
            .insert("mat", Param { data: vec![1.0; 4], shape: vec![2, 2], trainable: true })
            .unwrap();
        params
            .insert("bias", Param { data: vec![1.0; 2], shape: vec![2], trainable: true })
            .unwrap();
        let mut opt = AdamW::new(0.9, 0.999, 0.05);
        let mut grads = BTreeMap::new();
        grads.insert("mat".to_string(), vec![0.0; 4]);
        grads.insert("bias".to_string(), vec![0.0; 2]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        // Zero gradient: the only change comes from decoupled decay.
        let mat = params.get("mat").unwrap().data[0];
        let bias = params.get("bias").unwrap().data[0];
        assert!((mat - (1.0 - 0.1 * 0.05)).abs() < 1e-7, "mat {mat}");
        assert_eq!(bias, 1.0);
    }

    #[test]
    fn untrainable_params_untouched() {
        let mut params = Params::new();
        params
            .insert("frozen", Param { data: vec![1.5; 2], shape: vec![2, 1], trainable: false })
            .unwrap();
        let mut opt = AdamW::new(0.9, 0.999, 0.05);
        opt.step(&mut params, &BTreeMap::new(), 0.1).unwrap();
        assert_eq!(params.get("frozen").unwrap().data, vec![1.5; 2]);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut params = one_param(vec![0.3, -0.7], vec![2, 1]);
            let mut opt = AdamW::pretrain();
            for i in 0..50 {
                let x: Vec<f32> = params.get("w").unwrap().data.clone();
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), x.iter().map(|v| v.sin() + i as f32 * 0.01).collect());
                opt.step(&mut params, &grads, 1e-3).unwrap();
            }
            params.get("w").unwrap().data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
