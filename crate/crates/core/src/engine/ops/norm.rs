//! Per-channel batch normalisation over the N, H, W axes.

use crate::engine::tape::{GradAcc, Op};
use crate::engine::{nchw_of, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Batch mean and (biased) variance per channel, returned by a training-mode
/// forward so the caller can update running statistics.
#[derive(Clone, Debug)]
pub struct BatchMoments<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check<T: Scalar>(tape: &Tape<T>, input: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
    let dims @ [_, c, _, _] = nchw_of(tape.shape(input), "batch_norm")?;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(v) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{name} shape {:?} does not match {c} channels of {:?}",
                    tape.shape(v),
                    tape.shape(input)
                ),
            ));
        }
    }
    Ok(dims)
}

impl<T: Scalar> Tape<T> {
    /// Normalise with the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>)> {
        let [n, c, h, w] = check(self, input, gamma, beta)?;
        let x = self.value(input).data();
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for k in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let start = (b * c + k) * plane;
                s += x[start..start + plane].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut q = T::zero();
            for b in 0..n {
                let start = (b * c + k) * plane;
                q += x[start..start + plane]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
            mean[k] = m;
            var[k] = q / count;
        }
        let out = self.normalize(input, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchMoments { mean, var }))
    }

    /// Normalise with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let [_, c, _, _] = check(self, input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics have {} / {} entries for {c} channels", mean.len(), var.len()),
            ));
        }
        self.normalize(input, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        batch_stats: bool,
    ) -> Result<Var> {
        let [n, c, h, w] = nchw_of(self.shape(input), "batch_norm")?;
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for k in 0..c {
                let start = (b * c + k) * plane;
                for p in start..start + plane {
                    let xn = (x[p] - mean[k]) * inv_std[k];
                    normalized[p] = xn;
                    out[p] = g[k] * xn + bt[k];
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let value = Tensor::from_vec(&shape, out)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized: Tensor::from_vec(&shape, normalized)?,
            inv_std,
            batch_stats,
        };
        Ok(self.push(value, op, &[input, gamma, beta]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    normalized: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let [n, c, h, w] = nchw_of(tape.shape(input), "batch_norm").expect("validated");
    let plane = h * w;
    let g = gout.data();
    let xn = normalized.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for k in 0..c {
            let start = (b * c + k) * plane;
            for p in start..start + plane {
                sum_g[k] += g[p];
                sum_gx[k] += g[p] * xn[p];
            }
        }
    }
    if acc.wants(gamma) {
        acc.accumulate_owned(gamma, Tensor::from_vec(&[c], sum_gx.clone()).expect("shape"));
    }
    if acc.wants(beta) {
        acc.accumulate_owned(beta, Tensor::from_vec(&[c], sum_g.clone()).expect("shape"));
    }
    if acc.wants(input) {
        let gm = tape.value(gamma).data();
        let count = T::from_usize(n * plane).unwrap();
        acc.accumulate_map(input, tape.shape(input), |dx| {
            for b in 0..n {
                for k in 0..c {
                    let start = (b * c + k) * plane;
                    let scale = gm[k] * inv_std[k];
                    for p in start..start + plane {
                        dx[p] += if batch_stats {
                            scale * (g[p] - sum_g[k] / count - xn[p] * sum_gx[k] / count)
                        } else {
                            scale * g[p]
                        };
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_has_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[3, 2, 2, 2], |i| (i * i) as f64 * 0.1));
        let g = tape.input(Tensor::ones(&[2]));
        let b = tape.input(Tensor::zeros(&[2]));
        let (y, m) = tape.batch_norm_train(x, g, b, 0.0).unwrap();
        assert_eq!(m.mean.len(), 2);
        let v = tape.value(y).data();
        for k in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).map(move |p| (n * 2 + k) * 4 + p))
                .map(|i| v[i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
