use serde::{Deserialize, Serialize};

use super::graph::{Backward, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

struct BnVjp {
    // normalized input, or (x - mean) * inv_std in eval mode
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    plane: usize,
    batch_stats: bool,
}

impl Backward for BnVjp {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let (c, plane) = (self.channels, self.plane);
        let n = g.len() / (c * plane);
        let m = (n * plane) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * self.xhat[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in base..base + plane {
                        dx[i] = if self.batch_stats {
                            k / m * (m * g[i] - sum_g[ch] - self.xhat[i] * sum_gx[ch])
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

impl Graph {
    /// Per-channel batch normalization of `[N,C,H,W]`.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Invalid(format!(
                "batchnorm2d expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm2d",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let stats_channels = match &mode {
            BnMode::Train(r) => r.channels(),
            BnMode::Eval(r) => r.channels(),
        };
        if stats_channels != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d running stats",
                lhs: s.clone(),
                rhs: vec![stats_channels],
            });
        }
        let src = self.value(x).data();
        let m = (n * plane) as f64;
        let (mean, inv_std, batch_stats) = match mode {
            BnMode::Train(running) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for sidx in 0..n {
                    for ch in 0..c {
                        let base = (sidx * c + ch) * plane;
                        mean[ch] += src[base..base + plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for sidx in 0..n {
                    for ch in 0..c {
                        let base = (sidx * c + ch) * plane;
                        var[ch] += src[base..base + plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    running.mean[ch] =
                        (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
                    running.var[ch] =
                        (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv, true)
            }
            BnMode::Eval(running) => {
                let inv = running
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                (running.mean.clone(), inv, false)
            }
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for sidx in 0..n {
            for ch in 0..c {
                let base = (sidx * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let vjp = BnVjp {
            xhat,
            inv_std,
            channels: c,
            plane,
            batch_stats,
        };
        Ok(self.custom(&[x, gamma, beta], value, Box::new(vjp)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor, gamma: &[f64], beta: &[f64], running: &mut RunningStats) -> Vec<f64> {
        let c = gamma.len();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gv = g.constant(Tensor::new(vec![c], gamma.to_vec()).unwrap());
        let bv = g.constant(Tensor::new(vec![c], beta.to_vec()).unwrap());
        let y = g.batchnorm2d(xv, gv, bv, BnMode::Train(running)).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::filled(&[2, 1, 2, 2], 7.0);
        let mut r = RunningStats::new(1);
        let y = run(x, &[3.0], &[0.25], &mut r);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!((r.mean[0] - 0.7).abs() < 1e-12);
        assert!((r.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn standardized_input_is_nearly_fixed() {
        let data = vec![-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::new(vec![2, 1, 1, 2], data.clone()).unwrap();
        let y = run(x, &[1.0], &[0.0], &mut RunningStats::new(1));
        for (a, b) in y.iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn two_sample_batch_matches_scalar_loop() {
        // [N=2, C=2, 1x2]
        let data = vec![1.0, 2.0, 10.0, -4.0, 3.0, 5.0, 0.5, 6.0];
        let x = Tensor::new(vec![2, 2, 1, 2], data.clone()).unwrap();
        let y = run(x, &[1.5, -0.5], &[0.1, 0.2], &mut RunningStats::new(2));
        let (gamma, beta) = ([1.5, -0.5], [0.1, 0.2]);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| [data[n * 4 + ch * 2], data[n * 4 + ch * 2 + 1]])
                .collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for n in 0..2 {
                for j in 0..2 {
                    let i = n * 4 + ch * 2 + j;
                    let expect = gamma[ch] * (data[i] - mean) / (var + BN_EPS).sqrt() + beta[ch];
                    assert!((y[i] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let r = RunningStats {
            mean: vec![2.0],
            var: vec![4.0 - BN_EPS],
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![2.0, 6.0]).unwrap());
        let gm = g.constant(Tensor::ones(&[1]));
        let bt = g.constant(Tensor::zeros(&[1]));
        let y = g.batchnorm2d(x, gm, bt, BnMode::Eval(&r)).unwrap();
        let out = g.value(y).data();
        assert!(out[0].abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
    }
}
