use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum with the buffer initialised to the first gradient;
    /// `weight_decay` is added to the gradient (L2).
    Sgd { momentum: f64, weight_decay: f64 },
    /// Adam with weight decay applied directly to the parameters.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd {
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Optimizer with its per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Applies one update. `params` and `grads` are matched by position and
    /// must keep the same order and shapes across calls.
    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer", format!("param {k}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {k} at step {}", self.step)));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(b, g)| b.shape() != g.shape()) {
            return Err(Error::dim("optimizer", "parameter list changed between steps"));
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.first) {
                    let first_step = self.step == 1;
                    let pd = p.data_mut();
                    for ((w, &gi), b) in pd.iter_mut().zip(g.data()).zip(buf.data_mut()) {
                        let d = gi + weight_decay * *w;
                        *b = if first_step { d } else { momentum * *b + d };
                        *w -= lr * *b;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let pd = p.data_mut();
                    for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *w -= lr * weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One optimizer update.
pub fn optimizer_step(state: &mut OptimizerState, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
    state.apply(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Constant,
    /// `lr₀·factor^⌊epoch/period⌋`.
    Step { period: usize, factor: f64 },
    /// `lr₀·gamma^epoch`.
    Exp { gamma: f64 },
    /// Cosine from `lr₀` to `lr_min` over periods `t0, t0·mult, …`, restarting at `lr₀`.
    CosineRestarts { t0: usize, mult: usize, lr_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        lr_schedule(self, epoch)
    }
}

pub fn lr_schedule(s: &LrSchedule, epoch: usize) -> f64 {
    match s.kind {
        ScheduleKind::Constant => s.lr0,
        ScheduleKind::Step { period, factor } => s.lr0 * factor.powi((epoch / period.max(1)) as i32),
        ScheduleKind::Exp { gamma } => s.lr0 * gamma.powi(epoch as i32),
        ScheduleKind::CosineRestarts { t0, mult, lr_min } => {
            let (mut start, mut len) = (0, t0.max(1));
            while epoch >= start + len {
                start += len;
                len *= mult.max(1);
            }
            let frac = (epoch - start) as f64 / len as f64;
            lr_min + 0.5 * (s.lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.0), 0.1).unwrap();
        optimizer_step(&mut opt, vec![&mut w], &[Tensor::scalar(2.0)]).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = Tensor::scalar(0.0);
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.9), 1.0).unwrap();
        opt.apply(vec![&mut w], &[Tensor::scalar(1.0)]).unwrap();
        opt.apply(vec![&mut w], &[Tensor::scalar(1.0)]).unwrap();
        // buffers 1, then 1.9
        assert!((w.item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient() {
        let mut w = Tensor::vector(vec![1.0, -2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.9), 0.1).unwrap();
        opt.apply(vec![&mut w], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);

        let mut opt = OptimizerState::new(OptimizerKind::adamw(0.01), 0.1).unwrap();
        opt.apply(vec![&mut w], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(w.data(), &[1.0 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn adamw_hand_computed() {
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let (w0, g1, g2) = (0.5, 0.3, -0.2);
        let mut w = Tensor::scalar(w0);
        let mut opt = OptimizerState::new(
            OptimizerKind::AdamW {
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: wd,
            },
            lr,
        )
        .unwrap();
        opt.apply(vec![&mut w], &[Tensor::scalar(g1)]).unwrap();
        // first step: m̂ = g, v̂ = g², so the Adam term is g/(|g| + eps)
        let w1 = w0 - lr * wd * w0 - lr * g1 / (g1.abs() + eps);
        assert!((w.item() - w1).abs() <= 1e-12);
        opt.apply(vec![&mut w], &[Tensor::scalar(g2)]).unwrap();
        let m = b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2;
        let v = b2 * (1.0 - b2) * g1 * g1 + (1.0 - b2) * g2 * g2;
        let mh = m / (1.0 - b1 * b1);
        let vh = v / (1.0 - b2 * b2);
        let w2 = w1 - lr * wd * w1 - lr * mh / (vh.sqrt() + eps);
        assert!((w.item() - w2).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(OptimizerState::new(OptimizerKind::sgd(0.0), 0.0).is_err());
        let mut w = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.0), 0.1).unwrap();
        assert!(matches!(
            opt.apply(vec![&mut w], &[Tensor::scalar(f64::NAN)]),
            Err(Error::Divergence(_))
        ));
        assert!(opt.apply(vec![&mut w], &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn schedules() {
        let exp = LrSchedule {
            lr0: 1e-4,
            kind: ScheduleKind::Exp { gamma: 0.95 },
        };
        assert_eq!(exp.at(0), 1e-4);
        assert!((exp.at(2) - 9.025e-5).abs() < 1e-18);
        let step = LrSchedule {
            lr0: 1.0,
            kind: ScheduleKind::Step { period: 3, factor: 0.5 },
        };
        assert_eq!([step.at(0), step.at(2), step.at(3), step.at(7)], [1.0, 1.0, 0.5, 0.25]);
        let cos = LrSchedule {
            lr0: 1.0,
            kind: ScheduleKind::CosineRestarts {
                t0: 3,
                mult: 2,
                lr_min: 0.0,
            },
        };
        // restarts at epochs 3 and 3 + 6 = 9
        assert_eq!(cos.at(0), 1.0);
        assert_eq!(cos.at(3), 1.0);
        assert_eq!(cos.at(9), 1.0);
        assert!(cos.at(2) < cos.at(1) && cos.at(1) < 1.0);
        assert!((cos.at(6) - 0.5).abs() < 1e-12);
    }
}
