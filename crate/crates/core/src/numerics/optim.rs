use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a flat list of parameter tensors.
#[derive(Clone, Debug)]
pub struct OptimState {
    kind: Optimizer,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimState {
    pub fn new(kind: Optimizer, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        OptimState {
            kind,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                Optimizer::Sgd { momentum } => {
                    for ((pj, gj), mj) in p.data_mut().iter_mut().zip(g.data()).zip(&mut self.m[k])
                    {
                        *mj = momentum * *mj + gj;
                        *pj -= lr * *mj;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        *pj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Xavier-uniform initialization.
pub fn xavier(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut crate::numerics::Rng,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_in(-a, a)).collect(),
    )
    .expect("initializer shape")
}
