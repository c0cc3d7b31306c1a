//! Per-pixel local filtering: each output pixel is a weighted sum over a
//! `size x size` neighbourhood of the frame, with its own weights.

use rayon::prelude::*;

use crate::engine::tape::{GradAcc, Op};
use crate::engine::{nchw_of, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn dims<T: Scalar>(
    tape: &Tape<T>,
    weights: Var,
    frame: Var,
    size: usize,
) -> Result<([usize; 4], usize)> {
    const OP: &str = "local_filter";
    if size == 0 || size % 2 == 0 {
        return Err(Error::shape(OP, format!("filter size must be odd, got {size}")));
    }
    let [n, c, h, w] = nchw_of(tape.shape(frame), OP)?;
    let [wn, wc, wh, ww] = nchw_of(tape.shape(weights), OP)?;
    if (wn, wc, wh, ww) != (n, size * size, h, w) {
        return Err(Error::shape(
            OP,
            format!(
                "weights {:?} must be N x {} x H x W for frame {:?}",
                tape.shape(weights),
                size * size,
                tape.shape(frame)
            ),
        ));
    }
    Ok(([n, c, h, w], size / 2))
}

impl<T: Scalar> Tape<T> {
    /// `out[c,i,j] = sum_k weights[k,i,j] * frame[c, i+di_k, j+dj_k]`, with the
    /// offsets `(di, dj)` enumerated row-major over the window and zero outside
    /// the frame.
    pub fn local_filter(&mut self, weights: Var, frame: Var, size: usize) -> Result<Var> {
        let ([n, c, h, w], r) = dims(self, weights, frame, size)?;
        let wt = self.value(weights).data();
        let fr = self.value(frame).data();
        let plane = h * w;
        let kk = size * size;
        let mut out = vec![T::zero(); n * c * plane];
        out.par_chunks_mut(c * plane).enumerate().for_each(|(b, dst)| {
            let wb = &wt[b * kk * plane..(b + 1) * kk * plane];
            let fb = &fr[b * c * plane..(b + 1) * c * plane];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut s = T::zero();
                        for di in 0..size {
                            let Some(y) = (i + di).checked_sub(r).filter(|&y| y < h) else {
                                continue;
                            };
                            for dj in 0..size {
                                let Some(x) = (j + dj).checked_sub(r).filter(|&x| x < w) else {
                                    continue;
                                };
                                let k = di * size + dj;
                                s += wb[k * plane + i * w + j] * fb[ch * plane + y * w + x];
                            }
                        }
                        dst[ch * plane + i * w + j] = s;
                    }
                }
            }
        });
        let value = Tensor::from_vec(self.shape(frame), out)?;
        let op = Op::LocalFilter {
            weights,
            frame,
            size,
        };
        Ok(self.push(value, op, &[weights, frame]))
    }
}

pub(crate) fn local_filter_backward<T: Scalar>(
    tape: &Tape<T>,
    weights: Var,
    frame: Var,
    size: usize,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let ([n, c, h, w], r) = dims(tape, weights, frame, size).expect("validated");
    let wt = tape.value(weights).data();
    let fr = tape.value(frame).data();
    let g = gout.data();
    let plane = h * w;
    let kk = size * size;
    let want_w = acc.wants(weights);
    let want_f = acc.wants(frame);
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let wb = &wt[b * kk * plane..(b + 1) * kk * plane];
            let fb = &fr[b * c * plane..(b + 1) * c * plane];
            let gb = &g[b * c * plane..(b + 1) * c * plane];
            let mut dw = vec![T::zero(); if want_w { kk * plane } else { 0 }];
            let mut df = vec![T::zero(); if want_f { c * plane } else { 0 }];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let go = gb[ch * plane + i * w + j];
                        for di in 0..size {
                            let Some(y) = (i + di).checked_sub(r).filter(|&y| y < h) else {
                                continue;
                            };
                            for dj in 0..size {
                                let Some(x) = (j + dj).checked_sub(r).filter(|&x| x < w) else {
                                    continue;
                                };
                                let k = di * size + dj;
                                let q = ch * plane + y * w + x;
                                if want_w {
                                    dw[k * plane + i * w + j] += go * fb[q];
                                }
                                if want_f {
                                    df[q] += go * wb[k * plane + i * w + j];
                                }
                            }
                        }
                    }
                }
            }
            (dw, df)
        })
        .collect();
    let (dws, dfs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    if want_w {
        let dw: Vec<T> = dws.into_iter().flatten().collect();
        acc.accumulate_owned(weights, Tensor::from_vec(tape.shape(weights), dw).expect("shape"));
    }
    if want_f {
        let df: Vec<T> = dfs.into_iter().flatten().collect();
        acc.accumulate_owned(frame, Tensor::from_vec(tape.shape(frame), df).expect("shape"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_tap_is_identity() {
        let mut tape = Tape::new();
        let mut wt = Tensor::zeros(&[1, 9, 2, 2]);
        for p in 0..4 {
            wt.data_mut()[4 * 4 + p] = 1.0;
        }
        let frame = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = tape.input(wt);
        let f = tape.input(frame.clone());
        let y = tape.local_filter(w, f, 3).unwrap();
        assert_eq!(tape.value(y), &frame);
    }

    #[test]
    fn first_tap_reads_upper_left_neighbour() {
        let mut tape = Tape::new();
        let mut wt = Tensor::zeros(&[1, 9, 2, 2]);
        wt.data_mut()[3] = 1.0; // tap 0 at pixel (1, 1)
        let w = tape.input(wt);
        let f = tape.input(Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.local_filter(w, f, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 5.0]);
    }
}
