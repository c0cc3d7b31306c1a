//! Encoder-forecaster networks and the 2D CNN baseline, built from
//! [`NetworkConfig`] descriptions.

mod config;
pub mod presets;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    input_channels, Activation, Architecture, LayerKind, LayerSpec, NetworkConfig, ABSENT_SOURCE, INPUT_SOURCE,
};

use crate::cells::{CellSpec, ConvGruCell, ConvLayer, DfnHead, FlowMode, RnnCell, TrajGruCell, LEAKY_SLOPE};
use crate::engine::{BatchMoments, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch normalisation; output unclamped.
    Train,
    /// Running statistics; output unclamped (use [`Network::predict`] for the
    /// clamped forecast).
    Eval,
}

#[derive(Clone, Debug)]
struct BatchNormLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        conv: ConvLayer,
        activation: Activation,
        bn: Option<BatchNormLayer>,
    },
    Rnn {
        cell: RnnCell,
        /// Index into the encoder's recurrent layers.
        state_from: Option<usize>,
    },
    Dfn(DfnHead),
}

/// Output of a forward pass.
pub struct Forward<T: Scalar> {
    /// `N x K x H x W`.
    pub prediction: Var,
    /// Batch statistics per batch-normalised layer (training mode only), to
    /// be folded into the running statistics with
    /// [`Network::update_running_stats`].
    pub moments: Vec<(String, BatchMoments<T>)>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    /// Non-trainable state (batch-normalisation running statistics).
    pub buffers: ParamStore<T>,
    encoder: Vec<Layer>,
    forecaster: Vec<Layer>,
}

/// `2 x H x W`: row coordinate then column coordinate, each spanning
/// `[-1, 1]`.
pub fn coordinate_grid<T: Scalar>(height: usize, width: usize) -> Tensor<T> {
    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    Tensor::from_fn(&[2, height, width], |k| {
        let (c, p) = (k / (height * width), k % (height * width));
        let v = if c == 0 { coord(p / width, height) } else { coord(p % width, width) };
        T::from_f64_lossy(v)
    })
}

/// Frame `t` of an `N x T x H x W` tensor as `N x 1 x H x W`.
pub fn frame_at<T: Scalar>(seq: &Tensor<T>, t: usize) -> Tensor<T> {
    let [n, len, h, w]: [usize; 4] = seq.shape().try_into().expect("rank-4 sequence");
    assert!(t < len, "frame {t} out of {len}");
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let start = (b * len + t) * plane;
        out.extend_from_slice(&seq.data()[start..start + plane]);
    }
    Tensor::from_vec(&[n, 1, h, w], out).unwrap()
}

impl<T: Scalar> Network<T> {
    /// Validate `config` and initialise parameters deterministically from
    /// `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let enc_rnn: Vec<&str> = NetworkConfig::rnn_layers(&config.encoder)
            .map(|l| l.name.as_str())
            .collect();
        let mut build_rows = |rows: &[LayerSpec]| -> Result<Vec<Layer>> {
            let mut out = Vec::with_capacity(rows.len());
            for l in rows {
                let layer = match l.kind {
                    LayerKind::Conv | LayerKind::Deconv => {
                        let conv = ConvLayer::new(
                            &mut params,
                            &mut rng,
                            &l.name,
                            l.channels[0],
                            l.channels[1],
                            l.kernel,
                            l.geometry(),
                            l.kind == LayerKind::Deconv,
                        )?;
                        let bn = if l.batch_norm {
                            let c = l.channels[1];
                            Some(BatchNormLayer {
                                gamma: params.insert(format!("{}.bn.gamma", l.name), Tensor::ones(&[c]))?,
                                beta: params.insert(format!("{}.bn.beta", l.name), Tensor::zeros(&[c]))?,
                                running_mean: buffers
                                    .insert(format!("{}.bn.running_mean", l.name), Tensor::zeros(&[c]))?,
                                running_var: buffers
                                    .insert(format!("{}.bn.running_var", l.name), Tensor::ones(&[c]))?,
                            })
                        } else {
                            None
                        };
                        Layer::Conv {
                            conv,
                            activation: config.activation_of(l),
                            bn,
                        }
                    }
                    LayerKind::Convgru | LayerKind::Trajgru => {
                        let spec = CellSpec {
                            input_channels: l.channels[0],
                            has_input: l.has_input(),
                            hidden: l.channels[1],
                            in_kernel: l.kernel,
                            in_stride: l.stride,
                            in_pad: l.pad,
                        };
                        let cell = if l.kind == LayerKind::Convgru {
                            RnnCell::ConvGru(ConvGruCell::new(
                                &mut params,
                                &mut rng,
                                &l.name,
                                spec,
                                l.state_kernel.unwrap_or(3),
                                l.state_dilation.unwrap_or(1),
                            )?)
                        } else {
                            RnnCell::TrajGru(TrajGruCell::new(
                                &mut params,
                                &mut rng,
                                &l.name,
                                spec,
                                l.links.unwrap_or(1),
                            )?)
                        };
                        let state_from = l
                            .state
                            .as_ref()
                            .and_then(|s| enc_rnn.iter().position(|e| e == s));
                        Layer::Rnn { cell, state_from }
                    }
                    LayerKind::DfnHead => {
                        let window = (l.channels[1] as f64).sqrt().round() as usize;
                        Layer::Dfn(DfnHead::new(
                            &mut params,
                            &mut rng,
                            &l.name,
                            l.channels[0],
                            l.kernel,
                            l.pad,
                            window,
                        )?)
                    }
                };
                out.push(layer);
            }
            Ok(out)
        };
        let encoder = build_rows(&config.encoder)?;
        let forecaster = build_rows(&config.forecaster)?;
        Ok(Network {
            config: config.clone(),
            params,
            buffers,
            encoder,
            forecaster,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Trainable scalars per layer row, in declaration order.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        self.config
            .encoder
            .iter()
            .chain(&self.config.forecaster)
            .map(|l| (l.name.clone(), self.params.scalar_count_with_prefix(&format!("{}.", l.name))))
            .collect()
    }

    /// Set the flow mode of every TrajGRU layer.
    pub fn set_flow_mode(&mut self, mode: FlowMode) {
        for layer in self.encoder.iter_mut().chain(self.forecaster.iter_mut()) {
            if let Layer::Rnn { cell, .. } = layer {
                cell.set_flow_mode(mode);
            }
        }
    }

    pub fn rnn_cell(&self, name: &str) -> Option<&RnnCell> {
        self.encoder.iter().chain(&self.forecaster).find_map(|l| match l {
            Layer::Rnn { cell, .. } if cell.name() == name => Some(cell),
            _ => None,
        })
    }

    fn check_inputs(&self, frames: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<usize> {
        let [h, w] = self.config.frame_res;
        let j = self.config.in_frames;
        let s = frames.shape();
        if s.len() != 4 || s[1] != j || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "network_forward",
                format!(
                    "`{}` expects N x {j} x {h} x {w} input frames, got {s:?}",
                    self.config.name
                ),
            ));
        }
        if let Some(m) = mask {
            if m.shape() != s {
                return Err(Error::shape(
                    "network_forward",
                    format!("mask shape {:?} differs from frames {s:?}", m.shape()),
                ));
            }
        }
        Ok(s[0])
    }

    /// Run the network on `N x J x H x W` observed frames (with an optional
    /// validity mask of the same shape, default all ones) and return the
    /// `N x K x H x W` forecast on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        frames: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Forward<T>> {
        let n = self.check_inputs(frames, mask)?;
        match self.config.architecture {
            Architecture::EncoderForecaster => self.forward_rnn(tape, frames, mask, n),
            Architecture::Cnn2d => self.forward_cnn(tape, frames, mode),
        }
    }

    fn apply_conv(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        conv: &ConvLayer,
        activation: Activation,
        bn: Option<&BatchNormLayer>,
        mode: Mode,
        moments: &mut Vec<(String, BatchMoments<T>)>,
    ) -> Result<Var> {
        let mut y = conv.forward(tape, &self.params, x)?;
        if let Some(bn) = bn {
            let g = tape.param(&self.params, bn.gamma);
            let b = tape.param(&self.params, bn.beta);
            let eps = T::from_f64_lossy(BN_EPS);
            y = match mode {
                Mode::Train => {
                    let (out, m) = tape.batch_norm_train(y, g, b, eps)?;
                    moments.push((conv.name.clone(), m));
                    out
                }
                Mode::Eval => tape.batch_norm_eval(
                    y,
                    g,
                    b,
                    self.buffers.get(bn.running_mean).data(),
                    self.buffers.get(bn.running_var).data(),
                    eps,
                )?,
            };
        }
        Ok(match activation {
            Activation::LeakyRelu => tape.leaky_relu(y, T::from_f64_lossy(LEAKY_SLOPE)),
            Activation::None => y,
        })
    }

    fn forward_rnn(
        &self,
        tape: &mut Tape<T>,
        frames: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        n: usize,
    ) -> Result<Forward<T>> {
        let [h, w] = self.config.frame_res;
        let grid = coordinate_grid::<T>(h, w);
        let mut grid_n = Vec::with_capacity(n * grid.len());
        for _ in 0..n {
            grid_n.extend_from_slice(grid.data());
        }
        let grid_var = tape.input(Tensor::from_vec(&[n, 2, h, w], grid_n)?);
        let mut moments = Vec::new();

        let rows = |layers: &[Layer]| -> Vec<usize> {
            layers
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l, Layer::Rnn { .. }))
                .map(|(i, _)| i)
                .collect()
        };
        let bind = |tape: &mut Tape<T>, layers: &[Layer]| -> Result<Vec<Option<crate::cells::BoundCell>>> {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Rnn { cell, .. } => cell.bind(tape, &self.params).map(Some),
                    _ => Ok(None),
                })
                .collect()
        };
        let enc_bound = bind(tape, &self.encoder)?;
        let fore_bound = bind(tape, &self.forecaster)?;

        // Encoder states start at zero.
        let enc_rows = rows(&self.encoder);
        let mut states: Vec<Option<Var>> = vec![None; self.encoder.len()];
        for &i in &enc_rows {
            let spec = &self.config.encoder[i];
            let c = spec.channels[1];
            states[i] = Some(tape.input(Tensor::zeros(&[n, c, spec.out_res[0], spec.out_res[1]])));
        }
        let mut last_frame = None;
        for t in 0..self.config.in_frames {
            let f = tape.input(frame_at(frames, t));
            last_frame = Some(f);
            let mut parts = vec![f, grid_var];
            if self.config.mask_channel {
                let m = match mask {
                    Some(m) => frame_at(m, t),
                    None => Tensor::ones(&[n, 1, h, w]),
                };
                parts.push(tape.input(m));
            }
            let mut x = tape.concat(&parts, 1)?;
            for (i, layer) in self.encoder.iter().enumerate() {
                x = match layer {
                    Layer::Conv { conv, activation, bn } => {
                        self.apply_conv(tape, x, conv, *activation, bn.as_ref(), Mode::Eval, &mut moments)?
                    }
                    Layer::Rnn { cell, .. } => {
                        let hn = cell.step(tape, &self.params, enc_bound[i].as_ref().unwrap(), Some(x), states[i].unwrap())?;
                        states[i] = Some(hn);
                        hn
                    }
                    Layer::Dfn(_) => unreachable!("validated"),
                };
            }
        }
        let final_enc: Vec<Var> = enc_rows.iter().map(|&i| states[i].unwrap()).collect();

        let mut fstates: Vec<Option<Var>> = self
            .forecaster
            .iter()
            .map(|l| match l {
                Layer::Rnn { state_from, .. } => state_from.map(|k| final_enc[k]),
                _ => None,
            })
            .collect();
        let mut prev = last_frame.expect("in_frames >= 1");
        let mut outputs = Vec::with_capacity(self.config.out_frames);
        for _ in 0..self.config.out_frames {
            let mut x: Option<Var> = None;
            for (i, layer) in self.forecaster.iter().enumerate() {
                let y = match layer {
                    Layer::Rnn { cell, .. } => {
                        let h_prev = match fstates[i] {
                            Some(s) => s,
                            None => {
                                let spec = &self.config.forecaster[i];
                                tape.input(Tensor::zeros(&[n, spec.channels[1], spec.out_res[0], spec.out_res[1]]))
                            }
                        };
                        let hn = cell.step(tape, &self.params, fore_bound[i].as_ref().unwrap(), x, h_prev)?;
                        fstates[i] = Some(hn);
                        hn
                    }
                    Layer::Conv { conv, activation, bn } => {
                        let input = x.expect("validated chain");
                        self.apply_conv(tape, input, conv, *activation, bn.as_ref(), Mode::Eval, &mut moments)?
                    }
                    Layer::Dfn(head) => head.forward(tape, &self.params, x.expect("validated chain"), prev)?,
                };
                x = Some(y);
            }
            let out = x.unwrap();
            prev = out;
            outputs.push(out);
        }
        let prediction = tape.concat(&outputs, 1)?;
        Ok(Forward { prediction, moments })
    }

    fn forward_cnn(&self, tape: &mut Tape<T>, frames: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let mut moments = Vec::new();
        let mut x = tape.input(frames.clone());
        for layer in self.encoder.iter().chain(&self.forecaster) {
            let Layer::Conv { conv, activation, bn } = layer else {
                unreachable!("validated");
            };
            x = self.apply_conv(tape, x, conv, *activation, bn.as_ref(), mode, &mut moments)?;
        }
        Ok(Forward { prediction: x, moments })
    }

    /// Fold batch statistics into the running estimates:
    /// `running = m * running + (1 - m) * batch`.
    pub fn update_running_stats(&mut self, moments: &[(String, BatchMoments<T>)]) -> Result<()> {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (name, bm) in moments {
            for (suffix, batch) in [("running_mean", &bm.mean), ("running_var", &bm.var)] {
                let key = format!("{name}.bn.{suffix}");
                let id = self
                    .buffers
                    .id(&key)
                    .ok_or_else(|| Error::InvalidArgument(format!("no running statistics `{key}`")))?;
                let buf = self.buffers.get_mut(id);
                if buf.len() != batch.len() {
                    return Err(Error::shape("update_running_stats", format!("`{key}` length mismatch")));
                }
                for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
        Ok(())
    }

    /// Inference: forecast clamped to `[0, 1]`, `N x K x H x W`.
    pub fn predict(&self, frames: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, frames, mask, Mode::Eval)?;
        Ok(tape.value(fwd.prediction).clamp(T::zero(), T::one()))
    }

    /// Parameters and buffers in one store, for checkpointing.
    pub fn state_dict(&self) -> ParamStore<T> {
        let mut all = self.params.clone();
        for (_, name, t) in self.buffers.iter() {
            all.insert(name, t.clone()).expect("buffer names are distinct from parameter names");
        }
        all
    }

    /// Restore parameters and buffers saved by [`Network::state_dict`].
    pub fn load_state_dict(&mut self, state: &ParamStore<T>) -> Result<()> {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for (_, name, t) in state.iter() {
            if self.buffers.id(name).is_some() {
                buffers.insert(name, t.clone())?;
            } else {
                params.insert(name, t.clone())?;
            }
        }
        self.params.load_from(&params)?;
        self.buffers.load_from(&buffers)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            encoder: self.encoder.clone(),
            forecaster: self.forecaster.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spans_unit_interval() {
        let g = coordinate_grid::<f64>(3, 5);
        assert_eq!(g.shape(), &[2, 3, 5]);
        assert_eq!(g.data()[0], -1.0);
        assert_eq!(g.data()[14], 1.0);
        assert_eq!(g.data()[15], -1.0);
        assert_eq!(g.data()[15 + 2], 0.0);
    }

    #[test]
    fn frame_extraction() {
        let s = Tensor::<f64>::from_fn(&[2, 3, 1, 2], |i| i as f64);
        assert_eq!(frame_at(&s, 1).data(), &[2.0, 3.0, 8.0, 9.0]);
    }
}
