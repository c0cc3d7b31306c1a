use crate::engine::tape::{check_same_shape, GradAcc, Node, Op};
use crate::engine::{nchw_of, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shapes checked by caller")
}

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x * slope
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, "add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, "sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self, "mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() - x);
        self.push(value, Op::OneMinus(a), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Leaky rectifier; the subgradient at 0 takes the positive branch.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| leaky_relu(x, slope));
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Softmax over the channel axis of an `N x C x H x W` tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = nchw_of(self.shape(a), "softmax_channels")?;
        let x = self.value(a).data();
        let plane = h * w;
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut max = T::neg_infinity();
                for k in 0..c {
                    max = max.max(x[base + k * plane + p]);
                }
                let mut total = T::zero();
                for k in 0..c {
                    let e = (x[base + k * plane + p] - max).exp();
                    out[base + k * plane + p] = e;
                    total += e;
                }
                for k in 0..c {
                    out[base + k * plane + p] /= total;
                }
            }
        }
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::SoftmaxChannels(a), &[a]))
    }

    /// `sum(weights * (pred - target)^2)` as a one-element tensor.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<Var> {
        self.check_loss_operands("weighted_squared_error", pred, target, weights)?;
        let total = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
            .fold(T::zero(), |acc, ((&p, &t), &w)| acc + w * (p - t) * (p - t));
        let op = Op::WeightedSquaredError {
            pred,
            target: target.clone(),
            weights: weights.clone(),
        };
        Ok(self.push(Tensor::scalar(total), op, &[pred]))
    }

    /// `sum(weights * |pred - target|)` as a one-element tensor.
    pub fn weighted_abs_error(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<Var> {
        self.check_loss_operands("weighted_abs_error", pred, target, weights)?;
        let total = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
            .fold(T::zero(), |acc, ((&p, &t), &w)| acc + w * (p - t).abs());
        let op = Op::WeightedAbsError {
            pred,
            target: target.clone(),
            weights: weights.clone(),
        };
        Ok(self.push(Tensor::scalar(total), op, &[pred]))
    }

    fn check_loss_operands(
        &self,
        op: &'static str,
        pred: Var,
        target: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<()> {
        if self.shape(pred) != target.shape() || target.shape() != weights.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "prediction {:?}, target {:?} and weights {:?} must agree",
                    self.shape(pred),
                    target.shape(),
                    weights.shape()
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn softmax_channels_backward<T: Scalar>(
    node: &Node<T>,
    input: Var,
    gout: &Tensor<T>,
    acc: &mut GradAcc<T>,
) {
    let [n, c, h, w] = nchw_of(node.value.shape(), "softmax_channels").expect("validated");
    let y = node.value.data();
    let g = gout.data();
    let plane = h * w;
    acc.accumulate_map(input, node.value.shape(), |dx| {
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut dot = T::zero();
                for k in 0..c {
                    let i = base + k * plane + p;
                    dot += g[i] * y[i];
                }
                for k in 0..c {
                    let i = base + k * plane + p;
                    dx[i] += y[i] * (g[i] - dot);
                }
            }
        }
    });
}
