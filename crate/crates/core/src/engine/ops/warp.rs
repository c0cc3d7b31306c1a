//! Bilinear warping with the tent kernel `max(0, 1 - |d|)`.
//!
//! Output pixel `(i, j)` samples the input at row `i + V[i, j]` and column
//! `j + U[i, j]`. Samples outside the frame contribute zero.

use rayon::prelude::*;

use crate::engine::tape::{GradAcc, Op};
use crate::engine::{nchw_of, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The two cell corners along one axis: lower index and fractional offset.
#[inline]
fn cell<T: Scalar>(pos: T) -> (isize, T) {
    let base = pos.floor();
    (base.to_isize().unwrap_or(isize::MIN / 2), pos - base)
}

#[inline]
fn in_range(idx: isize, limit: usize) -> Option<usize> {
    (idx >= 0 && (idx as usize) < limit).then_some(idx as usize)
}

/// Warp every channel of `src` (`C x H x W`) with one flow field, writing
/// `C x H x W` into `dst`.
fn warp_plane<T: Scalar>(src: &[T], u: &[T], v: &[T], c: usize, h: usize, w: usize, dst: &mut [T]) {
    let plane = h * w;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let (m0, fy) = cell(T::from_usize(i).unwrap() + v[p]);
            let (n0, fx) = cell(T::from_usize(j).unwrap() + u[p]);
            let taps = [
                (m0, n0, (T::one() - fy) * (T::one() - fx)),
                (m0, n0 + 1, (T::one() - fy) * fx),
                (m0 + 1, n0, fy * (T::one() - fx)),
                (m0 + 1, n0 + 1, fy * fx),
            ];
            for ch in 0..c {
                let img = &src[ch * plane..(ch + 1) * plane];
                // Zero-weight taps are skipped so an integer shift copies values
                // exactly (including signed zeros).
                let mut acc: Option<T> = None;
                for &(m, n, wgt) in &taps {
                    if wgt == T::zero() {
                        continue;
                    }
                    if let (Some(m), Some(n)) = (in_range(m, h), in_range(n, w)) {
                        let term = wgt * img[m * w + n];
                        acc = Some(match acc {
                            Some(a) => a + term,
                            None => term,
                        });
                    }
                }
                dst[ch * plane + p] = acc.unwrap_or_else(T::zero);
            }
        }
    }
}

fn flow_dims<T: Scalar>(tape: &Tape<T>, x: Var, u: Var, v: Var) -> Result<([usize; 4], usize)> {
    const OP: &str = "bilinear_warp";
    let [n, c, h, w] = nchw_of(tape.shape(x), OP)?;
    if tape.shape(u) != tape.shape(v) {
        return Err(Error::shape(
            OP,
            format!(
                "flow shapes differ: U {:?} vs V {:?}",
                tape.shape(u),
                tape.shape(v)
            ),
        ));
    }
    let links = match *tape.shape(u) {
        [fh, fw] if n == 1 && (fh, fw) == (h, w) => 1,
        [l, fh, fw] if n == 1 && (fh, fw) == (h, w) => l,
        [fn_, l, fh, fw] if fn_ == n && (fh, fw) == (h, w) => l,
        _ => {
            return Err(Error::shape(
                OP,
                format!(
                    "flow shape {:?} does not match input {:?}",
                    tape.shape(u),
                    tape.shape(x)
                ),
            ))
        }
    };
    Ok(([n, c, h, w], links))
}

impl<T: Scalar> Tape<T> {
    /// Warp `input` (`[N x] C x H x W`) by `L` flow fields `u`, `v`
    /// (`[N x] L x H x W`, or `H x W` for a single field). The result stacks the
    /// `L` warped copies link-major along the channel axis: `[N x] L*C x H x W`.
    pub fn bilinear_warp(&mut self, input: Var, u: Var, v: Var) -> Result<Var> {
        let ([n, c, h, w], links) = flow_dims(self, input, u, v)?;
        let x = self.value(input).data();
        let ud = self.value(u).data();
        let vd = self.value(v).data();
        let plane = h * w;
        let in_len = c * plane;
        let mut out = vec![T::zero(); n * links * in_len];
        out.par_chunks_mut(in_len).enumerate().for_each(|(k, dst)| {
            let b = k / links;
            let flow = &ud[k * plane..(k + 1) * plane];
            let vflow = &vd[k * plane..(k + 1) * plane];
            warp_plane(&x[b * in_len..(b + 1) * in_len], flow, vflow, c, h, w, dst);
        });
        let shape = if self.shape(input).len() == 3 {
            vec![links * c, h, w]
        } else {
            vec![n, links * c, h, w]
        };
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Warp { input, u, v }, &[input, u, v]))
    }
}

pub(crate) fn warp_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    u: Var,
    v: Var,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let ([n, c, h, w], links) = flow_dims(tape, input, u, v).expect("validated");
    let x = tape.value(input).data();
    let ud = tape.value(u).data();
    let vd = tape.value(v).data();
    let g = gout.data();
    let plane = h * w;
    let in_len = c * plane;
    let flow_len = links * plane;
    let want_x = acc.wants(input);
    let want_u = acc.wants(u);
    let want_v = acc.wants(v);

    type Parts<T> = (Vec<T>, Vec<T>, Vec<T>);
    let parts: Vec<Parts<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let src = &x[b * in_len..(b + 1) * in_len];
            let mut dx = vec![T::zero(); if want_x { in_len } else { 0 }];
            let mut du = vec![T::zero(); flow_len];
            let mut dv = vec![T::zero(); flow_len];
            for l in 0..links {
                let k = b * links + l;
                let gk = &g[k * in_len..(k + 1) * in_len];
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        let (m0, fy) = cell(T::from_usize(i).unwrap() + vd[k * plane + p]);
                        let (n0, fx) = cell(T::from_usize(j).unwrap() + ud[k * plane + p]);
                        let wy = [T::one() - fy, fy];
                        let wx = [T::one() - fx, fx];
                        // d(weight)/d(position) for the lower and upper corner.
                        let sign = [-T::one(), T::one()];
                        let mut gu = T::zero();
                        let mut gv = T::zero();
                        for (a, &wya) in wy.iter().enumerate() {
                            let Some(m) = in_range(m0 + a as isize, h) else {
                                continue;
                            };
                            for (e, &wxe) in wx.iter().enumerate() {
                                let Some(nn) = in_range(n0 + e as isize, w) else {
                                    continue;
                                };
                                let q = m * w + nn;
                                for ch in 0..c {
                                    let go = gk[ch * plane + p];
                                    let val = src[ch * plane + q];
                                    if want_x {
                                        dx[ch * plane + q] += go * wya * wxe;
                                    }
                                    gv += go * val * sign[a] * wxe;
                                    gu += go * val * wya * sign[e];
                                }
                            }
                        }
                        du[l * plane + p] = gu;
                        dv[l * plane + p] = gv;
                    }
                }
            }
            (dx, du, dv)
        })
        .collect();

    let mut dx_all = Vec::with_capacity(if want_x { n * in_len } else { 0 });
    let mut du_all = Vec::with_capacity(n * flow_len);
    let mut dv_all = Vec::with_capacity(n * flow_len);
    for (dx, du, dv) in parts {
        dx_all.extend(dx);
        du_all.extend(du);
        dv_all.extend(dv);
    }
    if want_x {
        acc.accumulate_owned(input, Tensor::from_vec(tape.shape(input), dx_all).expect("shape"));
    }
    if want_u {
        acc.accumulate_owned(u, Tensor::from_vec(tape.shape(u), du_all).expect("shape"));
    }
    if want_v {
        acc.accumulate_owned(v, Tensor::from_vec(tape.shape(v), dv_all).expect("shape"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warp(img: &Tensor<f64>, u: f64, v: f64) -> Tensor<f64> {
        let [_, _, h, w] = img.nchw("t").unwrap();
        let mut tape = Tape::new();
        let x = tape.input(img.clone());
        let uu = tape.input(Tensor::full(&[h, w], u));
        let vv = tape.input(Tensor::full(&[h, w], v));
        let y = tape.bilinear_warp(x, uu, vv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn half_pixel_horizontal_shift() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = warp(&img, 0.5, 0.0);
        assert_eq!(out.data()[0], 1.5);
        // Right column samples half outside the frame.
        assert_eq!(out.data()[1], 1.0);
    }

    #[test]
    fn unit_vertical_shift_moves_rows_up() {
        let img = Tensor::from_fn(&[1, 3, 2], |i| i as f64 + 1.0);
        let out = warp(&img, 0.0, 1.0);
        assert_eq!(out.data(), &[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_flow_copies_signed_zero() {
        let img = Tensor::from_vec(&[1, 1, 3], vec![-0.0, 1.0, -2.5]).unwrap();
        let out = warp(&img, 0.0, 0.0);
        let bits: Vec<u64> = out.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn links_stack_link_major() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let u = tape.input(Tensor::from_vec(&[2, 1, 3], vec![0., 0., 0., 1., 1., 1.]).unwrap());
        let v = tape.input(Tensor::zeros(&[2, 1, 3]));
        let y = tape.bilinear_warp(x, u, v).unwrap();
        assert_eq!(tape.shape(y), &[4, 1, 3]);
        assert_eq!(
            tape.value(y).data(),
            &[0., 1., 2., 3., 4., 5., 1., 2., 0., 4., 5., 0.]
        );
    }

    #[test]
    fn mismatched_flow_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[1, 4, 4]));
        let u = tape.input(Tensor::zeros(&[4, 3]));
        assert!(tape.bilinear_warp(x, u, u).is_err());
    }
}
