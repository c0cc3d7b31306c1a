use std::collections::VecDeque;

use super::Model;
use crate::engine::optim::{AdaGrad, AdaGradConfig};
use crate::engine::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{intensity_weight_map, training_loss, LossMode};
use crate::networks::{Mode, Network};

/// `K` copies of the last observed frame. `frames` is `J x H x W`.
pub fn last_frame_predict<T: Scalar>(frames: &Tensor<T>, horizon: usize) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::shape("last_frame_predict", format!("need J x H x W with J >= 1, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let last = &frames.data()[(s[0] - 1) * plane..];
    let mut out = Vec::with_capacity(horizon * plane);
    for _ in 0..horizon {
        out.extend_from_slice(last);
    }
    Tensor::from_vec(&[horizon, s[1], s[2]], out)
}

/// Persistence baseline.
#[derive(Clone, Debug, Default)]
pub struct LastFrame {
    latest: Option<Tensor<f64>>,
}

impl Model for LastFrame {
    fn name(&self) -> String {
        "last-frame".into()
    }

    fn store(&mut self, frames: &Tensor<f64>, _mask: &Tensor<f64>, _new_episode: bool) -> Result<()> {
        self.latest = Some(frames.clone());
        Ok(())
    }

    fn update(&mut self) -> Result<bool> {
        Ok(false)
    }

    fn predict(&mut self, horizon: usize) -> Result<Tensor<f64>> {
        let frames = self
            .latest
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("predict before any frames were stored".into()))?;
        last_frame_predict(frames, horizon)
    }
}

/// Frames received in the current episode, oldest first, capped at
/// `capacity`.
#[derive(Clone, Debug)]
pub struct OnlineBuffer {
    capacity: usize,
    height: usize,
    width: usize,
    frames: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl OnlineBuffer {
    pub fn new(capacity: usize, height: usize, width: usize) -> Self {
        OnlineBuffer {
            capacity,
            height,
            width,
            frames: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Append `J x H x W` frames and masks.
    pub fn push(&mut self, frames: &Tensor<f64>, mask: &Tensor<f64>) -> Result<()> {
        let s = frames.shape();
        if s.len() != 3 || s[1..] != [self.height, self.width] || mask.shape() != s {
            return Err(Error::shape(
                "online_buffer",
                format!("frames {s:?} / mask {:?} for a {}x{} buffer", mask.shape(), self.height, self.width),
            ));
        }
        let plane = self.height * self.width;
        for t in 0..s[0] {
            let span = t * plane..(t + 1) * plane;
            self.frames
                .push_back((frames.data()[span.clone()].to_vec(), mask.data()[span].to_vec()));
            if self.frames.len() > self.capacity {
                self.frames.pop_front();
            }
        }
        Ok(())
    }

    /// The most recent `len` frames and masks as `len x H x W`, if held.
    pub fn window(&self, len: usize) -> Option<(Tensor<f64>, Tensor<f64>)> {
        if len == 0 || self.frames.len() < len {
            return None;
        }
        let skip = self.frames.len() - len;
        let recent = self.frames.iter().skip(skip);
        let f: Vec<f64> = recent.clone().flat_map(|(f, _)| f.iter().copied()).collect();
        let m: Vec<f64> = recent.flat_map(|(_, m)| m.iter().copied()).collect();
        let shape = [len, self.height, self.width];
        Some((Tensor::from_vec(&shape, f).ok()?, Tensor::from_vec(&shape, m).ok()?))
    }
}

/// A network in the protocol. Online updates take one AdaGrad step on the
/// most recent `J + K` buffered frames; the accumulator lives as long as the
/// adapter.
pub struct NetworkModel<T: Scalar> {
    pub network: Network<T>,
    pub label: String,
    pub loss: LossMode,
    optimizer: AdaGrad<T>,
    buffer: OnlineBuffer,
    latest: Option<(Tensor<T>, Tensor<T>)>,
    updates: usize,
}

impl<T: Scalar> NetworkModel<T> {
    pub fn new(network: Network<T>, label: impl Into<String>) -> Self {
        Self::with_optimizer(network, label, AdaGradConfig::default())
    }

    pub fn with_optimizer(network: Network<T>, label: impl Into<String>, config: AdaGradConfig) -> Self {
        let c = &network.config;
        let buffer = OnlineBuffer::new(c.in_frames + c.out_frames, c.frame_res[0], c.frame_res[1]);
        NetworkModel {
            optimizer: AdaGrad::new(&network.params, config),
            network,
            label: label.into(),
            loss: LossMode::Balanced,
            buffer,
            latest: None,
            updates: 0,
        }
    }

    pub fn buffer(&self) -> &OnlineBuffer {
        &self.buffer
    }

    /// Updates that changed the parameters.
    pub fn updates(&self) -> usize {
        self.updates
    }

    fn batch(t: &Tensor<f64>) -> Tensor<T> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.cast::<T>().reshape(&shape).expect("same element count")
    }

    /// Loss of the current update window, if one is available.
    pub fn window_loss(&self) -> Result<Option<f64>> {
        let c = &self.network.config;
        let Some((frames, mask)) = self.buffer.window(c.in_frames + c.out_frames) else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let loss = self.window_objective(&mut tape, &frames, &mask)?;
        Ok(Some(tape.value(loss).item().to_f64().unwrap()))
    }

    fn window_objective(&self, tape: &mut Tape<T>, frames: &Tensor<f64>, mask: &Tensor<f64>) -> Result<crate::Var> {
        let c = &self.network.config;
        let (j, k) = (c.in_frames, c.out_frames);
        let plane = c.frame_res[0] * c.frame_res[1];
        let part = |t: &Tensor<f64>, from: usize, n: usize| {
            Tensor::from_vec(&[n, c.frame_res[0], c.frame_res[1]], t.data()[from * plane..(from + n) * plane].to_vec())
        };
        let (input, input_mask) = (Self::batch(&part(frames, 0, j)?), Self::batch(&part(mask, 0, j)?));
        let (target, target_mask) = (Self::batch(&part(frames, j, k)?), Self::batch(&part(mask, j, k)?));
        let fwd = self.network.forward(tape, &input, Some(&input_mask), Mode::Eval)?;
        let weights = intensity_weight_map(&target, Some(&target_mask), self.loss)?;
        training_loss(tape, fwd.prediction, &target, &weights, k)
    }
}

impl<T: Scalar> Model for NetworkModel<T> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn store(&mut self, frames: &Tensor<f64>, mask: &Tensor<f64>, new_episode: bool) -> Result<()> {
        let c = &self.network.config;
        if frames.shape() != [c.in_frames, c.frame_res[0], c.frame_res[1]] {
            return Err(Error::shape(
                "network_model",
                format!(
                    "observed {:?}, network expects {} x {} x {}",
                    frames.shape(),
                    c.in_frames,
                    c.frame_res[0],
                    c.frame_res[1]
                ),
            ));
        }
        if new_episode {
            self.buffer.clear();
        }
        self.buffer.push(frames, mask)?;
        self.latest = Some((Self::batch(frames), Self::batch(mask)));
        Ok(())
    }

    fn update(&mut self) -> Result<bool> {
        let c = &self.network.config;
        let Some((frames, mask)) = self.buffer.window(c.in_frames + c.out_frames) else {
            return Ok(false);
        };
        let mut tape = Tape::new();
        let loss = self.window_objective(&mut tape, &frames, &mask)?;
        let value = tape.value(loss).item().to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: self.updates,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?;
        let grads = tape.param_grads(&grads, &self.network.params);
        self.optimizer.step(&mut self.network.params, &grads)?;
        self.updates += 1;
        Ok(true)
    }

    fn predict(&mut self, horizon: usize) -> Result<Tensor<f64>> {
        let (frames, mask) = self
            .latest
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("predict before any frames were stored".into()))?;
        let c = &self.network.config;
        if horizon != c.out_frames {
            return Err(Error::InvalidArgument(format!(
                "network forecasts {} frames, {horizon} requested",
                c.out_frames
            )));
        }
        let out = self.network.predict(frames, Some(mask))?;
        let s = out.shape()[1..].to_vec();
        Ok(out.cast::<f64>().reshape(&s)?)
    }
}
