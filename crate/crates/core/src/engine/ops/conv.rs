//! 2-D convolution (cross-correlation) and its adjoint, lowered to GEMM via
//! im2col. Batch elements are processed in parallel; weight gradients are
//! reduced over the batch in a fixed order so results do not depend on
//! scheduling.

use rayon::prelude::*;

use crate::engine::scalar::{gemm, Layout};
use crate::engine::tape::{GradAcc, Op};
use crate::engine::{nchw_of, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Stride, zero padding and dilation, each as (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: [usize; 2],
    pub pad: [usize; 2],
    pub dilation: [usize; 2],
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry {
            stride: [1, 1],
            pad: [0, 0],
            dilation: [1, 1],
        }
    }
}

impl Conv2dGeometry {
    pub fn new(stride: [usize; 2], pad: [usize; 2]) -> Self {
        Conv2dGeometry {
            stride,
            pad,
            dilation: [1, 1],
        }
    }

    pub fn with_dilation(mut self, dilation: [usize; 2]) -> Self {
        self.dilation = dilation;
        self
    }

    /// Padding that keeps a stride-1 convolution size-preserving.
    pub fn same(kernel: [usize; 2], dilation: [usize; 2]) -> Self {
        Conv2dGeometry {
            stride: [1, 1],
            pad: [
                dilation[0] * (kernel[0] - 1) / 2,
                dilation[1] * (kernel[1] - 1) / 2,
            ],
            dilation,
        }
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` if non-positive.
    pub fn conv_extent(&self, axis: usize, n: usize, k: usize) -> Option<usize> {
        let span = self.dilation[axis] * (k - 1) + 1;
        let padded = n + 2 * self.pad[axis];
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride[axis] + 1)
    }

    /// `(n - 1)s - 2p + d(k-1) + 1`, or `None` if non-positive.
    pub fn transposed_extent(&self, axis: usize, n: usize, k: usize) -> Option<usize> {
        let full = (n - 1) * self.stride[axis] + self.dilation[axis] * (k - 1) + 1;
        full.checked_sub(2 * self.pad[axis]).filter(|&e| e >= 1)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(Error::shape(
                op,
                format!("stride and dilation must be >= 1, got {self:?}"),
            ));
        }
        Ok(())
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == [1, 1] && self.pad == [0, 0]
    }
}

/// Spatial extents of one im2col lowering.
#[derive(Clone, Copy)]
struct Lowering {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: Conv2dGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// For each kernel tap and output row/col, the source index or `None`.
    fn source(&self, axis: usize, out: usize, tap: usize) -> Option<usize> {
        let pos = (out * self.geom.stride[axis] + tap * self.geom.dilation[axis]) as isize
            - self.geom.pad[axis] as isize;
        let limit = if axis == 0 { self.h } else { self.w };
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.h * self.w;
        let ncols = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.source(0, oy, ky) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &x[c * plane + iy * self.w..c * plane + (iy + 1) * self.w];
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = match self.source(1, ox, kx) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let plane = self.h * self.w;
        let ncols = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(0, oy, ky) else {
                            continue;
                        };
                        let dst = &mut x[c * plane + iy * self.w..c * plane + (iy + 1) * self.w];
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(1, ox, kx) {
                                dst[ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(tape: &Tape<T>, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if tape.shape(b) != [channels] {
            return Err(Error::shape(
                op,
                format!(
                    "bias shape {:?} does not match {channels} output channels",
                    tape.shape(b)
                ),
            ));
        }
    }
    Ok(())
}

fn weight_dims(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [a, b, kh, kw] => Ok([a, b, kh, kw]),
        _ => Err(Error::shape(
            op,
            format!("weight must be rank 4, got {shape:?}"),
        )),
    }
}

fn output_shape(input_rank: usize, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if input_rank == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (k, d) in db.iter_mut().enumerate() {
            let start = (b * c + k) * plane;
            *d += g[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Sum per-sample partial results in batch order.
fn reduce_ordered<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Plain-slice convolution over an `N x Ci x H x W` batch; returns the output
/// buffer and its spatial extents.
pub fn conv2d_raw<T: Scalar>(
    x: &[T],
    [n, ci, h, w]: [usize; 4],
    weight: &[T],
    [co, _, kh, kw]: [usize; 4],
    bias: Option<&[T]>,
    geom: Conv2dGeometry,
) -> (Vec<T>, usize, usize) {
    let ho = geom.conv_extent(0, h, kh).expect("validated extent");
    let wo = geom.conv_extent(1, w, kw).expect("validated extent");
    let low = Lowering {
        channels: ci,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        geom,
    };
    let in_len = ci * h * w;
    let out_len = co * ho * wo;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each_init(Vec::new, |cols, (dst, src)| {
            let lowered: &[T] = if geom.is_pointwise(kh, kw) {
                src
            } else {
                cols.resize(low.rows() * low.cols(), T::zero());
                low.im2col(src, cols);
                cols
            };
            gemm(
                co,
                low.rows(),
                low.cols(),
                weight,
                Layout::Normal,
                lowered,
                Layout::Normal,
                T::zero(),
                dst,
            );
        });
    if let Some(b) = bias {
        add_bias(&mut out, b, ho * wo);
    }
    (out, ho, wo)
}

/// Plain-slice transposed convolution; `weight` is `Cin x Cout x kh x kw`.
pub fn conv_transpose2d_raw<T: Scalar>(
    x: &[T],
    [n, ci, h, w]: [usize; 4],
    weight: &[T],
    [_, co, kh, kw]: [usize; 4],
    bias: Option<&[T]>,
    geom: Conv2dGeometry,
) -> (Vec<T>, usize, usize) {
    let ho = geom.transposed_extent(0, h, kh).expect("validated extent");
    let wo = geom.transposed_extent(1, w, kw).expect("validated extent");
    let low = Lowering {
        channels: co,
        h: ho,
        w: wo,
        kh,
        kw,
        ho: h,
        wo: w,
        geom,
    };
    let in_len = ci * h * w;
    let out_len = co * ho * wo;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each_init(Vec::new, |cols, (dst, src)| {
            cols.resize(low.rows() * low.cols(), T::zero());
            gemm(
                low.rows(),
                ci,
                low.cols(),
                weight,
                Layout::Transposed,
                src,
                Layout::Normal,
                T::zero(),
                cols,
            );
            low.col2im(cols, dst);
        });
    if let Some(b) = bias {
        add_bias(&mut out, b, ho * wo);
    }
    (out, ho, wo)
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `input` (`[N x] Ci x H x W`) with `weight`
    /// (`Co x Ci x kh x kw`) plus an optional per-channel `bias`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        geom.validate(OP)?;
        let [n, ci, h, w] = nchw_of(self.shape(input), OP)?;
        let wdims @ [co, wci, kh, kw] = weight_dims(self.shape(weight), OP)?;
        if wci != ci {
            return Err(Error::shape(
                OP,
                format!(
                    "input {:?} has {ci} channels but weight {:?} expects {wci}",
                    self.shape(input),
                    self.shape(weight)
                ),
            ));
        }
        check_bias(self, OP, bias, co)?;
        let (Some(ho), Some(wo)) = (geom.conv_extent(0, h, kh), geom.conv_extent(1, w, kw)) else {
            return Err(Error::shape(
                OP,
                format!(
                    "non-positive output extent for input {:?}, kernel {kh}x{kw}, {geom:?}",
                    self.shape(input)
                ),
            ));
        };
        let (out, _, _) = conv2d_raw(
            self.value(input).data(),
            [n, ci, h, w],
            self.value(weight).data(),
            wdims,
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let shape = output_shape(self.shape(input).len(), n, co, ho, wo);
        let value = Tensor::from_vec(&shape, out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        };
        Ok(self.push(value, op, &parents))
    }

    /// Adjoint of [`Tape::conv2d`] with the same geometry; `weight` is
    /// `Cin x Cout x kh x kw`. Output extent is `(H-1)s - 2p + d(k-1) + 1`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        geom.validate(OP)?;
        let [n, ci, h, w] = nchw_of(self.shape(input), OP)?;
        let wdims @ [wci, co, kh, kw] = weight_dims(self.shape(weight), OP)?;
        if wci != ci {
            return Err(Error::shape(
                OP,
                format!(
                    "input {:?} has {ci} channels but weight {:?} expects {wci}",
                    self.shape(input),
                    self.shape(weight)
                ),
            ));
        }
        check_bias(self, OP, bias, co)?;
        let (Some(ho), Some(wo)) = (
            geom.transposed_extent(0, h, kh),
            geom.transposed_extent(1, w, kw),
        ) else {
            return Err(Error::shape(
                OP,
                format!(
                    "non-positive output extent for input {:?}, kernel {kh}x{kw}, {geom:?}",
                    self.shape(input)
                ),
            ));
        };
        let (out, _, _) = conv_transpose2d_raw(
            self.value(input).data(),
            [n, ci, h, w],
            self.value(weight).data(),
            wdims,
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let shape = output_shape(self.shape(input).len(), n, co, ho, wo);
        let value = Tensor::from_vec(&shape, out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let op = Op::ConvTranspose2d {
            input,
            weight,
            bias,
            geom,
        };
        Ok(self.push(value, op, &parents))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Conv2dGeometry,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let [n, ci, h, w] = nchw_of(tape.shape(input), "conv2d").expect("validated");
    let [co, _, kh, kw] = weight_dims(tape.shape(weight), "conv2d").expect("validated");
    let [_, _, ho, wo] = nchw_of(gout.shape(), "conv2d").expect("validated");
    let low = Lowering {
        channels: ci,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        geom,
    };
    let g = gout.data();
    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let in_len = ci * h * w;
    let out_len = co * ho * wo;
    let pointwise = geom.is_pointwise(kh, kw);

    if let Some(b) = bias.filter(|&b| acc.wants(b)) {
        let db = bias_grad(g, n, co, ho * wo);
        acc.accumulate_owned(b, Tensor::from_vec(&[co], db).expect("bias shape"));
    }

    if acc.wants(weight) {
        let wlen = co * low.rows();
        let parts: Vec<Vec<T>> = x
            .par_chunks(in_len)
            .zip(g.par_chunks(out_len))
            .map(|(src, gs)| {
                let mut cols = Vec::new();
                let lowered: &[T] = if pointwise {
                    src
                } else {
                    cols.resize(low.rows() * low.cols(), T::zero());
                    low.im2col(src, &mut cols);
                    &cols
                };
                let mut dw = vec![T::zero(); wlen];
                gemm(
                    co,
                    low.cols(),
                    low.rows(),
                    gs,
                    Layout::Normal,
                    lowered,
                    Layout::Transposed,
                    T::zero(),
                    &mut dw,
                );
                dw
            })
            .collect();
        let dw = reduce_ordered(parts, wlen);
        acc.accumulate_owned(
            weight,
            Tensor::from_vec(tape.shape(weight), dw).expect("weight shape"),
        );
    }

    if acc.wants(input) {
        let mut dx = vec![T::zero(); n * in_len];
        dx.par_chunks_mut(in_len)
            .zip(g.par_chunks(out_len))
            .for_each(|(dst, gs)| {
                if pointwise {
                    gemm(
                        ci,
                        co,
                        low.cols(),
                        wt,
                        Layout::Transposed,
                        gs,
                        Layout::Normal,
                        T::zero(),
                        dst,
                    );
                } else {
                    let mut cols = vec![T::zero(); low.rows() * low.cols()];
                    gemm(
                        low.rows(),
                        co,
                        low.cols(),
                        wt,
                        Layout::Transposed,
                        gs,
                        Layout::Normal,
                        T::zero(),
                        &mut cols,
                    );
                    low.col2im(&cols, dst);
                }
            });
        acc.accumulate_owned(
            input,
            Tensor::from_vec(tape.shape(input), dx).expect("input shape"),
        );
    }
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Conv2dGeometry,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let [n, ci, h, w] = nchw_of(tape.shape(input), "conv_transpose2d").expect("validated");
    let [_, co, kh, kw] = weight_dims(tape.shape(weight), "conv_transpose2d").expect("validated");
    let [_, _, ho, wo] = nchw_of(gout.shape(), "conv_transpose2d").expect("validated");
    // The output plays the role of a convolution input here.
    let low = Lowering {
        channels: co,
        h: ho,
        w: wo,
        kh,
        kw,
        ho: h,
        wo: w,
        geom,
    };
    let g = gout.data();
    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let in_len = ci * h * w;
    let out_len = co * ho * wo;

    if let Some(b) = bias.filter(|&b| acc.wants(b)) {
        let db = bias_grad(g, n, co, ho * wo);
        acc.accumulate_owned(b, Tensor::from_vec(&[co], db).expect("bias shape"));
    }

    let want_w = acc.wants(weight);
    let want_x = acc.wants(input);
    if !want_w && !want_x {
        return;
    }
    let wlen = ci * low.rows();
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .par_chunks(in_len)
        .zip(g.par_chunks(out_len))
        .map(|(src, gs)| {
            let mut gcols = vec![T::zero(); low.rows() * low.cols()];
            low.im2col(gs, &mut gcols);
            let dw = want_w.then(|| {
                let mut dw = vec![T::zero(); wlen];
                gemm(
                    ci,
                    low.cols(),
                    low.rows(),
                    src,
                    Layout::Normal,
                    &gcols,
                    Layout::Transposed,
                    T::zero(),
                    &mut dw,
                );
                dw
            });
            let dx = want_x.then(|| {
                let mut dx = vec![T::zero(); in_len];
                gemm(
                    ci,
                    low.rows(),
                    low.cols(),
                    wt,
                    Layout::Normal,
                    &gcols,
                    Layout::Normal,
                    T::zero(),
                    &mut dx,
                );
                dx
            });
            (dw, dx)
        })
        .collect();
    let (dws, dxs): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    if want_w {
        let dw = reduce_ordered(dws.into_iter().flatten().collect(), wlen);
        acc.accumulate_owned(
            weight,
            Tensor::from_vec(tape.shape(weight), dw).expect("weight shape"),
        );
    }
    if want_x {
        let dx: Vec<T> = dxs.into_iter().flatten().flatten().collect();
        acc.accumulate_owned(
            input,
            Tensor::from_vec(tape.shape(input), dx).expect("input shape"),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_box_filter_sums_windows() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.input(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = tape.input(t(&[1, 3, 4], &data));
        let w = tape.input(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), Conv2dGeometry::default()).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let z = tape.conv_transpose2d(x, w, Some(b), Conv2dGeometry::default()).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn table_row_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[4, 64, 64]));
        let w = tape.input(Tensor::zeros(&[16, 4, 3, 3]));
        let y = tape
            .conv2d(x, w, None, Conv2dGeometry::new([1, 1], [1, 1]))
            .unwrap();
        assert_eq!(tape.shape(y), &[16, 64, 64]);

        let x = tape.input(Tensor::zeros(&[96, 16, 16]));
        let w = tape.input(Tensor::zeros(&[96, 96, 4, 4]));
        let y = tape
            .conv_transpose2d(x, w, None, Conv2dGeometry::new([2, 2], [1, 1]))
            .unwrap();
        assert_eq!(tape.shape(y), &[96, 32, 32]);
    }

    #[test]
    fn strided_transpose_spreads_single_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1, 1, 1], &[2.0]));
        let w = tape.input(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape
            .conv_transpose2d(x, w, None, Conv2dGeometry::new([2, 2], [0, 0]))
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0; 4]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[3, 5, 5]));
        let w = tape.input(Tensor::zeros(&[2, 4, 3, 3]));
        let err = tape
            .conv2d(x, w, None, Conv2dGeometry::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("[3, 5, 5]") && err.contains("[2, 4, 3, 3]"), "{err}");
    }

    #[test]
    fn non_positive_output_extent_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 2]));
        let w = tape.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, Conv2dGeometry::default()).is_err());
        let dilated = Conv2dGeometry::default().with_dilation([2, 2]);
        let x = tape.input(Tensor::zeros(&[1, 4, 4]));
        assert!(tape.conv2d(x, w, None, dilated).is_err());
    }

    #[test]
    fn dilated_output_extent_formula() {
        let g = Conv2dGeometry::same([3, 3], [2, 2]);
        assert_eq!(g.pad, [2, 2]);
        assert_eq!(g.conv_extent(0, 16, 3), Some(16));
        let strided = Conv2dGeometry::new([5, 5], [1, 1]);
        assert_eq!(strided.conv_extent(0, 480, 7), Some(96));
        assert_eq!(strided.transposed_extent(0, 96, 7), Some(480));
    }
}
