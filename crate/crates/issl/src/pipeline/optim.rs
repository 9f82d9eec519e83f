//! Learning-rate schedule and the adaptive-moment optimizer used for
//! pretraining.

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Optimizer hyperparameters. Fixed defaults, recorded in the run manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; applied only to matrices (rows > 1), never to
    /// bias/gain rows.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Linear warmup to `peak` over the first `warmup_frac` of updates, then
/// linear decay to 0 at `step == total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_frac: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule needs at least one update".into()));
    }
    if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
        return Err(Error::Config(format!("warmup fraction must be in (0,1), got {warmup_frac}")));
    }
    if step > total {
        return Err(Error::Contract(format!("step {step} past schedule end {total}")));
    }
    let s = step as f64;
    let t = total as f64;
    let w = warmup_frac * t;
    Ok(if s <= w { peak * (s / w) } else { peak * (t - s) / (t - w) })
}

/// First and second moment estimates, one pair per parameter, in `ParamSet`
/// order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |i: usize| {
            let (r, c) = params.value(i).shape();
            Matrix::zeros(r, c)
        };
        AdamState {
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update. `grads` must follow `params` order.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Matrix],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} grads / {} moments for {} params",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let p = params.value_mut(i);
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "grad {:?} vs param {:?} for {i}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = if p.rows() > 1 { cfg.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (k, &gk) in g.data().iter().enumerate() {
                m.data_mut()[k] = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * gk;
                v.data_mut()[k] = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                let pk = p.data()[k];
                p.data_mut()[k] = pk - lr * decay * pk - lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_peak() {
        for &total in &[100usize, 1000, 5000] {
            assert_eq!(lr_at(0, total, 5e-4, 0.08).unwrap(), 0.0);
            assert_eq!(lr_at(total, total, 5e-4, 0.08).unwrap(), 0.0);
            let warm = (0.08 * total as f64) as usize;
            assert_eq!(lr_at(warm, total, 5e-4, 0.08).unwrap(), 5e-4);
        }
    }

    #[test]
    fn schedule_is_piecewise_linear() {
        let total = 1000;
        // ramp: lr(40) should be half of lr(80)
        let a = lr_at(40, total, 5e-4, 0.08).unwrap();
        let b = lr_at(80, total, 5e-4, 0.08).unwrap();
        assert!((2.0 * a - b).abs() < 1e-18);
        // decay: halfway between warmup end and total
        let mid = lr_at(540, total, 5e-4, 0.08).unwrap();
        assert!((mid - 2.5e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_args() {
        assert!(lr_at(11, 10, 5e-4, 0.08).is_err());
        assert!(lr_at(0, 0, 5e-4, 0.08).is_err());
        assert!(lr_at(0, 10, 5e-4, 0.0).is_err());
        assert!(lr_at(0, 10, 5e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_never_exceeds_peak() {
        for step in 0..=500 {
            let lr = lr_at(step, 500, 5e-4, 0.08).unwrap();
            assert!((0.0..=5e-4 + 1e-18).contains(&lr), "step {step} lr {lr}");
        }
    }

    /// Two hand-computed updates against the textbook recurrences.
    #[test]
    fn adam_matches_hand_computation() {
        let mut params = ParamSet::new();
        params.push("w", Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap());
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 };
        let mut st = AdamState::new(&params);
        let g1 = Matrix::from_vec(2, 1, vec![0.5, -1.0]).unwrap();
        st.step(&mut params, std::slice::from_ref(&g1), 0.01, &cfg).unwrap();

        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut p = [1.0f64, -2.0];
        for (t, g) in [[0.5, -1.0], [0.25, 0.75]].iter().enumerate() {
            for k in 0..2 {
                m[k] = 0.9 * m[k] + 0.1 * g[k];
                v[k] = 0.98 * v[k] + 0.02 * g[k] * g[k];
                let mhat = m[k] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vhat = v[k] / (1.0 - 0.98f64.powi(t as i32 + 1));
                p[k] -= 0.01 * mhat / (vhat.sqrt() + 1e-8);
            }
        }
        let g2 = Matrix::from_vec(2, 1, vec![0.25, 0.75]).unwrap();
        st.step(&mut params, std::slice::from_ref(&g2), 0.01, &cfg).unwrap();
        for k in 0..2 {
            assert!((params.value(0).data()[k] - p[k]).abs() < 1e-15);
        }
        assert_eq!(st.t, 2);
    }

    /// With zero gradients, decay shrinks matrices but leaves single-row
    /// parameters (biases, gains) untouched.
    #[test]
    fn weight_decay_skips_single_row_params() {
        let mut params = ParamSet::new();
        params.push("w", Matrix::filled(3, 2, 2.0));
        params.push("b", Matrix::filled(1, 2, 2.0));
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&params);
        let grads = vec![Matrix::zeros(3, 2), Matrix::zeros(1, 2)];
        st.step(&mut params, &grads, 0.1, &cfg).unwrap();
        let expect = 2.0 - 0.1 * 0.01 * 2.0;
        for &x in params.value(0).data() {
            assert!((x - expect).abs() < 1e-15);
        }
        for &x in params.value(1).data() {
            assert_eq!(x, 2.0);
        }
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut params = ParamSet::new();
        params.push("w", Matrix::zeros(2, 2));
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig::default();
        assert!(st.step(&mut params, &[], 0.01, &cfg).is_err());
        let bad = vec![Matrix::zeros(3, 2)];
        assert!(st.step(&mut params, &bad, 0.01, &cfg).is_err());
    }
}
