//! SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    /// Velocity (sgd) or first moment (adam), one buffer per parameter.
    first: Vec<Vec<f64>>,
    /// Second moment (adam only).
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(b, p)| b.len() != p.numel())
        {
            return Err(Error::contract(
                "parameter set changed between optimizer steps",
            ));
        }
        self.steps += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(p: &Tensor) -> Tensor {
        // f(p) = Σ a_i p_i², a = (1, 10)
        let a = [1.0, 10.0];
        Tensor::new(
            p.shape(),
            p.data().iter().zip(a).map(|(x, a)| 2.0 * a * x).collect(),
        )
        .unwrap()
    }

    fn quad(p: &Tensor) -> f64 {
        p.data()[0].powi(2) + 10.0 * p.data()[1].powi(2)
    }

    #[test]
    fn zero_lr_leaves_params() {
        for kind in [OptimizerKind::sgd(0.9), OptimizerKind::adam()] {
            let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
            let before = p.clone();
            let mut opt = Optimizer::new(kind, 0.0).unwrap();
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g]).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0), 0.1).unwrap();
        let g = Tensor::scalar(2.0 * p.data()[0]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.5), 1.0).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.data()[0], -2.5);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.05).unwrap();
        let mut reached = None;
        for step in 1..=500 {
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g]).unwrap();
            let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "final {:?}", p.data());
    }

    #[test]
    fn adam_first_step_matches_reference() {
        // After one step with bias correction the update is lr·g/(|g|+eps).
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        let g = quad_grad(&p);
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for (i, x0) in [1.0f64, -1.0].iter().enumerate() {
            let gi = g.data()[i];
            let expect = x0 - 0.1 * gi / (gi.abs() + 1e-8);
            assert!((p.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_decreases_convex_loss() {
        for kind in [
            OptimizerKind::sgd(0.0),
            OptimizerKind::sgd(0.9),
            OptimizerKind::adam(),
        ] {
            let mut p = Tensor::new(&[2], vec![0.7, -0.3]).unwrap();
            let before = quad(&p);
            let mut opt = Optimizer::new(kind, 1e-3).unwrap();
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g]).unwrap();
            assert!(quad(&p) < before);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        assert!(opt
            .step(&mut [&mut p], &[Tensor::zeros(&[3]).unwrap()])
            .is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }

    #[test]
    fn kind_json_defaults() {
        let k: OptimizerKind = serde_json::from_str(r#"{"kind":"adam"}"#).unwrap();
        assert_eq!(k, OptimizerKind::adam());
        let k: OptimizerKind = serde_json::from_str(r#"{"kind":"sgd","momentum":0.9}"#).unwrap();
        assert_eq!(k, OptimizerKind::sgd(0.9));
        assert!(serde_json::from_str::<OptimizerKind>(r#"{"kind":"rmsprop"}"#).is_err());
    }
}
