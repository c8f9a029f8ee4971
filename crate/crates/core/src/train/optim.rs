use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adafactor,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Adafactor: second-moment decay exponent, `β2_t = 1 − t^(−decay_rate)`.
    pub decay_rate: f64,
    /// Adafactor: added to squared gradients.
    pub eps1: f64,
    /// Adafactor: updates are scaled down to at most this RMS.
    pub clip_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adafactor,
            decay_rate: 0.8,
            eps1: 1e-30,
            clip_threshold: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: step count and named slot tensors
/// (`{param}/row`, `{param}/col`, `{param}/v`, `{param}/exp_avg`, `{param}/exp_avg_sq`).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<F> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub slots: BTreeMap<String, Tensor<F>>,
}

fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

impl<F: Float> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    fn slot(&mut self, name: String, shape: Vec<usize>) -> &mut Tensor<F> {
        self.slots.entry(name).or_insert_with(|| Tensor::zeros(shape))
    }

    /// One update of every parameter with a gradient. Parameters are visited
    /// independently, so the result does not depend on gradient order.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[(String, Tensor<F>)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            match self.config.kind {
                OptimizerKind::Adafactor => self.adafactor(name, p, g, lr),
                OptimizerKind::Adamw => self.adamw(name, p, g, lr),
            }
        }
        Ok(())
    }

    fn adafactor(&mut self, name: &str, p: &mut Tensor<F>, g: &Tensor<F>, lr: f64) {
        let c = self.config.clone();
        let beta2 = 1.0 - (self.step as f64).powf(-c.decay_rate);
        let gd = g.data();
        let sq: Vec<f64> = gd.iter().map(|x| x.as_f64() * x.as_f64() + c.eps1).collect();
        let mut update: Vec<f64>;
        if g.rank() == 2 {
            let (rows, cols) = (g.shape()[0], g.shape()[1]);
            let row = self.slot(format!("{name}/row"), vec![rows]);
            for i in 0..rows {
                let mean = sq[i * cols..(i + 1) * cols].iter().sum::<f64>() / cols as f64;
                let r = &mut row.data_mut()[i];
                *r = F::of(beta2 * r.as_f64() + (1.0 - beta2) * mean);
            }
            let row: Vec<f64> = row.data().iter().map(|x| x.as_f64()).collect();
            let col = self.slot(format!("{name}/col"), vec![cols]);
            for j in 0..cols {
                let mean = (0..rows).map(|i| sq[i * cols + j]).sum::<f64>() / rows as f64;
                let r = &mut col.data_mut()[j];
                *r = F::of(beta2 * r.as_f64() + (1.0 - beta2) * mean);
            }
            let col: Vec<f64> = col.data().iter().map(|x| x.as_f64()).collect();
            let row_mean = row.iter().sum::<f64>() / rows as f64;
            update = Vec::with_capacity(gd.len());
            for i in 0..rows {
                let rf = (row[i] / row_mean).sqrt();
                for j in 0..cols {
                    update.push(gd[i * cols + j].as_f64() / (rf * col[j].sqrt()));
                }
            }
        } else {
            let v = self.slot(format!("{name}/v"), g.shape().to_vec());
            update = Vec::with_capacity(gd.len());
            for (k, x) in v.data_mut().iter_mut().enumerate() {
                let nv = beta2 * x.as_f64() + (1.0 - beta2) * sq[k];
                *x = F::of(nv);
                update.push(gd[k].as_f64() / nv.sqrt());
            }
        }
        let denom = (rms(&update) / c.clip_threshold).max(1.0);
        for (w, u) in p.data_mut().iter_mut().zip(update) {
            let mut nw = w.as_f64();
            if c.weight_decay != 0.0 {
                nw -= lr * c.weight_decay * nw;
            }
            *w = F::of(nw - lr * u / denom);
        }
    }

    fn adamw(&mut self, name: &str, p: &mut Tensor<F>, g: &Tensor<F>, lr: f64) {
        let c = self.config.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let shape = g.shape().to_vec();
        let mut m = std::mem::replace(self.slot(format!("{name}/exp_avg"), shape.clone()), Tensor::zeros(vec![0]));
        let v = self.slot(format!("{name}/exp_avg_sq"), shape);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k].as_f64();
            let mk = c.beta1 * m.data()[k].as_f64() + (1.0 - c.beta1) * gk;
            let vk = c.beta2 * v.data()[k].as_f64() + (1.0 - c.beta2) * gk * gk;
            m.data_mut()[k] = F::of(mk);
            v.data_mut()[k] = F::of(vk);
            let mut nw = w.as_f64();
            nw -= lr * c.weight_decay * nw;
            nw -= lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
            *w = F::of(nw);
        }
        self.slots.insert(format!("{name}/exp_avg"), m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    fn cfg(kind: OptimizerKind) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            ..Default::default()
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        for kind in [OptimizerKind::Adafactor, OptimizerKind::Adamw] {
            let w = Tensor::from_f64(vec![2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap();
            let b = Tensor::from_f64(vec![2], &[0.1, 0.2]).unwrap();
            let mut s = store("w", w.clone());
            s.insert("b", b.clone());
            let mut o = Optimizer::new(cfg(kind));
            let grads = vec![("w".into(), Tensor::zeros(vec![2, 2])), ("b".into(), Tensor::zeros(vec![2]))];
            o.step(&mut s, &grads, 0.1).unwrap();
            assert_eq!(o.step, 1);
            assert_eq!(s.get("w").unwrap(), &w);
            assert_eq!(s.get("b").unwrap(), &b);
        }
    }

    #[test]
    fn adafactor_scalar_recurrence() {
        // Constant gradient g on a single scalar: v_t = g² (for every t, since
        // v_1 = g² and the running average of a constant stays constant), so
        // each update is lr · g / |g| and the RMS clip at 1.0 is inactive.
        let mut s = store("x", Tensor::from_f64(vec![1], &[0.0]).unwrap());
        let mut o = Optimizer::new(cfg(OptimizerKind::Adafactor));
        let mut expect = 0.0;
        for _ in 0..5 {
            let g = vec![("x".to_string(), Tensor::from_f64(vec![1], &[0.3]).unwrap())];
            o.step(&mut s, &g, 0.01).unwrap();
            expect -= 0.01;
        }
        assert!((s.get("x").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adafactor_update_is_rms_clipped() {
        // A tiny first gradient then a large one: at t=2, β2 = 1 − 2^−0.8, the
        // raw update 5 / sqrt(β2·1e-6 + (1 − β2)·25) ≈ 1.32 exceeds the RMS
        // threshold and is scaled back to exactly 1.
        let mut s = store("x", Tensor::from_f64(vec![1], &[0.0]).unwrap());
        let mut o = Optimizer::new(cfg(OptimizerKind::Adafactor));
        let g = |v: f64| vec![("x".to_string(), Tensor::from_f64(vec![1], &[v]).unwrap())];
        o.step(&mut s, &g(1e-3), 0.0).unwrap();
        o.step(&mut s, &g(5.0), 1.0).unwrap();
        let beta2 = 1.0 - 2f64.powf(-0.8);
        let raw = 5.0 / (beta2 * (1e-6 + 1e-30) + (1.0 - beta2) * (25.0 + 1e-30)).sqrt();
        assert!(raw > 1.3);
        assert!((s.get("x").unwrap().data()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn factored_matches_full_for_rank_one_gradient() {
        let a = [0.5, -1.0, 2.0];
        let b = [1.0, 3.0];
        let gdata: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let g = Tensor::from_f64(vec![3, 2], &gdata).unwrap();
        let mut s = store("w", Tensor::zeros(vec![3, 2]));
        let mut o = Optimizer::new(cfg(OptimizerKind::Adafactor));
        o.step(&mut s, &[("w".into(), g.clone())], 1.0).unwrap();
        // Full second moment at t=1 is g², so the unclipped update is sign(g).
        let upd: Vec<f64> = s.get("w").unwrap().data().iter().map(|x| -x).collect();
        let r = (upd.iter().map(|x| x * x).sum::<f64>() / 6.0).sqrt();
        for (u, gv) in upd.iter().zip(&gdata) {
            assert!((u * r.max(1.0) - gv.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut s = store("x", Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap());
        let mut o = Optimizer::new(cfg(OptimizerKind::Adamw));
        let g = Tensor::from_f64(vec![3], &[0.2, -3.0, 1e-3]).unwrap();
        o.step(&mut s, &[("x".into(), g)], 0.01).unwrap();
        let d = s.get("x").unwrap().data();
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] - 1.01).abs() < 1e-6);
        assert!((d[2] - 0.99).abs() < 1e-4);
    }

    #[test]
    fn groups_are_independent_and_order_free() {
        let t = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let g = Tensor::from_f64(vec![2], &[0.3, -0.1]).unwrap();
        for kind in [OptimizerKind::Adafactor, OptimizerKind::Adamw] {
            let mut s = store("a", t.clone());
            s.insert("b", t.clone());
            let mut o1 = Optimizer::new(cfg(kind));
            o1.step(&mut s, &[("a".into(), g.clone()), ("b".into(), g.clone())], 0.1).unwrap();
            assert_eq!(s.get("a").unwrap(), s.get("b").unwrap());
            let mut s2 = store("b", t.clone());
            s2.insert("a", t.clone());
            let mut o2 = Optimizer::new(cfg(kind));
            o2.step(&mut s2, &[("b".into(), g.clone()), ("a".into(), g.clone())], 0.1).unwrap();
            assert_eq!(s, s2);
            assert_eq!(o1.slots, o2.slots);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut s = store("x", Tensor::from_f64(vec![1], &[1.0]).unwrap());
        let mut o = Optimizer::new(cfg(OptimizerKind::Adafactor));
        let g = vec![("x".to_string(), Tensor::from_f64(vec![1], &[f64::NAN]).unwrap())];
        assert!(matches!(o.step(&mut s, &g, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(o.step, 0);
        assert_eq!(s.get("x").unwrap().data()[0], 1.0);
    }
}
