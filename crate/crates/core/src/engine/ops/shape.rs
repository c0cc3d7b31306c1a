use crate::engine::tape::{GradAcc, Op};
use crate::engine::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// (outer, axis extent, inner) decomposition of a row-major shape.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    /// Concatenate along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("cannot concatenate {base:?} with {s:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(value, op, inputs))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(value, Op::Slice { input, axis, start }, &[input]))
    }

    /// Split along `axis` into `parts` equal pieces.
    pub fn chunk(&mut self, input: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let extent = self.shape(input).get(axis).copied().unwrap_or(0);
        if parts == 0 || extent % parts != 0 {
            return Err(Error::shape(
                "chunk",
                format!("extent {extent} on axis {axis} does not split into {parts}"),
            ));
        }
        let len = extent / parts;
        (0..parts)
            .map(|p| self.slice(input, axis, p * len, len))
            .collect()
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    tape: &Tape<T>,
    inputs: &[Var],
    axis: usize,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let (outer, total, inner) = split_at_axis(gout.shape(), axis);
    let g = gout.data();
    let mut offset = 0;
    for &v in inputs {
        let extent = tape.shape(v)[axis];
        if acc.wants(v) {
            acc.accumulate_map(v, tape.shape(v), |dst| {
                let chunk = extent * inner;
                for o in 0..outer {
                    let from = (o * total + offset) * inner;
                    for (d, &s) in dst[o * chunk..(o + 1) * chunk]
                        .iter_mut()
                        .zip(&g[from..from + chunk])
                    {
                        *d += s;
                    }
                }
            });
        }
        offset += extent;
    }
}

pub(crate) fn slice_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    axis: usize,
    start: usize,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let shape = tape.shape(input);
    let (outer, extent, inner) = split_at_axis(shape, axis);
    let len = gout.shape()[axis];
    let g = gout.data();
    acc.accumulate_map(input, shape, |dst| {
        for o in 0..outer {
            let to = (o * extent + start) * inner;
            let from = o * len * inner;
            for (d, &s) in dst[to..to + len * inner]
                .iter_mut()
                .zip(&g[from..from + len * inner])
            {
                *d += s;
            }
        }
    });
}
