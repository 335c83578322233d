//! First-order optimizers over lists of `Array2` tensors.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("optimizer must be sgd|adam, got {other}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state for a fixed list of tensors. Tensors with a zero
/// learning rate are never touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Momentum for SGD, first-moment decay for Adam.
    momentum: f64,
    first: Vec<Option<Array2<f64>>>,
    second: Vec<Option<Array2<f64>>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, tensors: usize) -> Self {
        Self { kind, momentum, first: vec![None; tensors], second: vec![None; tensors], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::Dimension("optimizer got a different number of tensors".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let mu = self.momentum;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = lrs[i];
            if lr == 0.0 {
                continue;
            }
            if p.dim() != g.dim() {
                return Err(Error::Dimension(format!("gradient {i} has shape {:?}, parameter {:?}", g.dim(), p.dim())));
            }
            let m = self.first[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            match self.kind {
                OptimizerKind::Sgd => {
                    Zip::from(&mut *m).and(g).for_each(|m, &g| *m = mu * *m + g);
                    Zip::from(&mut **p).and(&*m).for_each(|p, &m| *p -= lr * m);
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    let c1 = 1.0 - mu.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    Zip::from(&mut **p).and(&mut *m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = mu * *m + (1.0 - mu) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sgd_momentum_steps() {
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.5, 1.0]];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.9, 1);
        opt.step(&mut [&mut p], &[g.clone()], &[0.1]).unwrap();
        assert_eq!(p, array![[0.95, -2.1]]);
        opt.step(&mut [&mut p], &[g], &[0.1]).unwrap();
        // velocity 1.9 g
        assert!((p[[0, 0]] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_untouched() {
        let mut p = array![[1.0, f64::MIN_POSITIVE]];
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.9, 1);
        opt.step(&mut [&mut p], &[array![[3.0, -4.0]]], &[0.0]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_has_size_lr() {
        let mut p = array![[0.0, 0.0]];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.9, 1);
        opt.step(&mut [&mut p], &[array![[1e-6, -30.0]]], &[0.01]).unwrap();
        assert!((p[[0, 0]] + 0.01).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = array![[3.0, -1.0]];
            let mut opt = Optimizer::new(kind, 0.9, 1);
            for _ in 0..500 {
                let g = p.mapv(|x| 2.0 * x);
                opt.step(&mut [&mut p], &[g], &[0.02]).unwrap();
            }
            assert!(p.iter().all(|x| x.abs() < 1e-2), "{kind}: {p}");
        }
    }
}
