//! Declarative network descriptions. Each layer row carries the same columns
//! as the layer listings of the original model descriptions: kernel, stride,
//! pad, state kernel/dilation or link count, channels in/out, input and
//! output resolution, type, input source and initial-state source.

use serde::{Deserialize, Serialize};

use crate::engine::Conv2dGeometry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderForecaster,
    Cnn2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Deconv,
    Convgru,
    Trajgru,
    DfnHead,
}

impl LayerKind {
    pub fn is_rnn(self) -> bool {
        matches!(self, LayerKind::Convgru | LayerKind::Trajgru)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    None,
}

/// Source name meaning "the network input".
pub const INPUT_SOURCE: &str = "in";
/// Source name meaning "no input link".
pub const ABSENT_SOURCE: &str = "-";

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Kernel of the layer (input-to-state kernel for RNN rows).
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    /// State-to-state kernel (ConvGRU).
    #[serde(default)]
    pub state_kernel: Option<usize>,
    /// State-to-state dilation (ConvGRU).
    #[serde(default)]
    pub state_dilation: Option<usize>,
    /// Number of links (TrajGRU).
    #[serde(default)]
    pub links: Option<usize>,
    /// `[in, out]`.
    pub channels: [usize; 2],
    /// `[height, width]`.
    pub in_res: [usize; 2],
    pub out_res: [usize; 2],
    /// Source layer, [`INPUT_SOURCE`] or [`ABSENT_SOURCE`].
    pub input: String,
    /// Initial-state source for forecaster RNNs.
    #[serde(default)]
    pub state: Option<String>,
    /// Defaults to leaky ReLU for hidden conv/deconv rows and none for the
    /// output row.
    #[serde(default)]
    pub activation: Option<Activation>,
    /// Batch normalisation after the convolution (2D CNN rows).
    #[serde(default)]
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry::new([self.stride; 2], [self.pad; 2])
    }

    /// Output resolution implied by kernel, stride and pad.
    pub fn computed_out_res(&self) -> Option<[usize; 2]> {
        let g = self.geometry();
        let ext = |axis: usize| match self.kind {
            LayerKind::Deconv => g.transposed_extent(axis, self.in_res[axis], self.kernel),
            _ => g.conv_extent(axis, self.in_res[axis], self.kernel),
        };
        Some([ext(0)?, ext(1)?])
    }

    pub fn has_input(&self) -> bool {
        self.input != ABSENT_SOURCE
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::config(&self.name, detail)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    pub architecture: Architecture,
    /// Frame resolution `[height, width]`.
    pub frame_res: [usize; 2],
    /// `J`: observed frames.
    pub in_frames: usize,
    /// `K`: predicted frames.
    pub out_frames: usize,
    /// Append the validity mask as an input channel.
    #[serde(default = "default_true")]
    pub mask_channel: bool,
    pub encoder: Vec<LayerSpec>,
    pub forecaster: Vec<LayerSpec>,
}

/// Frame (1) + coordinate grid (2) [+ mask (1)].
pub fn input_channels(mask_channel: bool) -> usize {
    3 + usize::from(mask_channel)
}

impl NetworkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn rnn_layers<'a>(layers: &'a [LayerSpec]) -> impl Iterator<Item = &'a LayerSpec> + 'a {
        layers.iter().filter(|l| l.kind.is_rnn())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.encoder.iter().chain(&self.forecaster).find(|l| l.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_frames == 0 || self.out_frames == 0 {
            return Err(Error::config(&self.name, "in_frames and out_frames must be >= 1"));
        }
        if self.encoder.is_empty() || self.forecaster.is_empty() {
            return Err(Error::config(&self.name, "encoder and forecaster must both have layers"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in self.encoder.iter().chain(&self.forecaster) {
            if !seen.insert(l.name.as_str()) || l.name == INPUT_SOURCE || l.name == ABSENT_SOURCE {
                return Err(l.err("layer names must be unique and not reserved"));
            }
            self.validate_row(l)?;
        }
        match self.architecture {
            Architecture::EncoderForecaster => self.validate_encoder_forecaster(),
            Architecture::Cnn2d => self.validate_cnn2d(),
        }
    }

    fn validate_row(&self, l: &LayerSpec) -> Result<()> {
        if l.kernel == 0 || l.stride == 0 || l.channels.contains(&0) {
            return Err(l.err("kernel, stride and channels must be positive"));
        }
        let Some(out) = l.computed_out_res() else {
            return Err(l.err(format!(
                "kernel {} stride {} pad {} gives a non-positive output for input {:?}",
                l.kernel, l.stride, l.pad, l.in_res
            )));
        };
        if l.kind.is_rnn() {
            if out != l.in_res || l.out_res != l.in_res {
                return Err(l.err(format!(
                    "recurrent rows must keep resolution: input-to-state gives {out:?}, declared {:?} -> {:?}",
                    l.in_res, l.out_res
                )));
            }
        } else if out != l.out_res {
            return Err(l.err(format!(
                "declared output resolution {:?} but kernel {} stride {} pad {} on {:?} gives {out:?}",
                l.out_res, l.kernel, l.stride, l.pad, l.in_res
            )));
        }
        match l.kind {
            LayerKind::Convgru => {
                let k = l.state_kernel.ok_or_else(|| l.err("convgru rows need state_kernel"))?;
                if k % 2 == 0 || l.state_dilation == Some(0) {
                    return Err(l.err("state_kernel must be odd and state_dilation >= 1"));
                }
                if l.links.is_some() {
                    return Err(l.err("links only apply to trajgru rows"));
                }
            }
            LayerKind::Trajgru => {
                if l.links.unwrap_or(0) == 0 {
                    return Err(l.err("trajgru rows need links >= 1"));
                }
                if l.state_kernel.is_some() {
                    return Err(l.err("state_kernel only applies to convgru rows"));
                }
            }
            _ => {
                if l.state.is_some() {
                    return Err(l.err("only recurrent rows take an initial state"));
                }
            }
        }
        if l.batch_norm && self.architecture != Architecture::Cnn2d {
            return Err(l.err("batch_norm is only supported in cnn2d networks"));
        }
        Ok(())
    }

    /// Each row must read from the row above it (the first encoder row reads
    /// the network input); resolutions and channels must chain.
    fn validate_chain(&self, rows: &[LayerSpec], first_in: Option<(&str, [usize; 2], usize)>) -> Result<()> {
        let mut prev: Option<(&str, [usize; 2], usize)> = first_in;
        for (i, l) in rows.iter().enumerate() {
            if l.has_input() {
                let Some((pname, pres, pch)) = prev else {
                    return Err(l.err(format!("input `{}` has no preceding layer", l.input)));
                };
                if l.input != pname {
                    return Err(l.err(format!(
                        "input `{}` is dangling: this row must read from `{pname}`",
                        l.input
                    )));
                }
                if l.in_res != pres {
                    return Err(l.err(format!(
                        "input resolution {:?} does not match `{pname}` output {pres:?}",
                        l.in_res
                    )));
                }
                if l.channels[0] != pch {
                    return Err(l.err(format!(
                        "{} input channels but `{pname}` produces {pch}",
                        l.channels[0]
                    )));
                }
            } else if i != 0 || !l.kind.is_rnn() {
                return Err(l.err("only the first forecaster row may omit its input"));
            }
            prev = Some((l.name.as_str(), l.out_res, l.channels[1]));
        }
        Ok(())
    }

    fn validate_encoder_forecaster(&self) -> Result<()> {
        let cin = input_channels(self.mask_channel);
        self.validate_chain(&self.encoder, Some((INPUT_SOURCE, self.frame_res, cin)))?;
        let first = &self.forecaster[0];
        if first.has_input() || !first.kind.is_rnn() {
            return Err(first.err(format!(
                "the first forecaster row must be recurrent with input `{ABSENT_SOURCE}`"
            )));
        }
        self.validate_chain(&self.forecaster, None)?;
        if self.encoder.iter().any(|l| matches!(l.kind, LayerKind::Deconv | LayerKind::DfnHead)) {
            return Err(Error::config(&self.name, "encoder rows must be conv or recurrent"));
        }
        if self.encoder.iter().any(|l| l.state.is_some()) {
            return Err(Error::config(&self.name, "encoder rows take no initial state"));
        }

        let enc: Vec<&LayerSpec> = Self::rnn_layers(&self.encoder).collect();
        let fore: Vec<&LayerSpec> = Self::rnn_layers(&self.forecaster).collect();
        if enc.len() != fore.len() || enc.is_empty() {
            return Err(Error::config(
                &self.name,
                format!(
                    "encoder has {} recurrent rows, forecaster has {}; they must be equal and non-zero",
                    enc.len(),
                    fore.len()
                ),
            ));
        }
        // Reversed order: the first forecaster RNN starts from the top encoder RNN.
        for (f, e) in fore.iter().zip(enc.iter().rev()) {
            let Some(src) = &f.state else {
                return Err(f.err("forecaster recurrent rows must name an initial-state source"));
            };
            let Some(src_row) = enc.iter().find(|l| &l.name == src) else {
                return Err(f.err(format!("initial-state source `{src}` is not an encoder recurrent row")));
            };
            if src_row.name != e.name {
                return Err(f.err(format!(
                    "states are handed over in reverse order: expected `{}`, got `{src}`",
                    e.name
                )));
            }
            if src_row.channels[1] != f.channels[1] || src_row.out_res != f.out_res {
                return Err(f.err(format!(
                    "initial state from `{src}` is {} x {:?} but this row holds {} x {:?}",
                    src_row.channels[1], src_row.out_res, f.channels[1], f.out_res
                )));
            }
        }

        let last = self.forecaster.last().unwrap();
        match last.kind {
            LayerKind::Conv | LayerKind::Deconv if last.channels[1] == 1 => {}
            LayerKind::DfnHead => {
                let w = (last.channels[1] as f64).sqrt() as usize;
                if w * w != last.channels[1] || w % 2 == 0 {
                    return Err(last.err("dfn-head output channels must be an odd square (window^2)"));
                }
            }
            _ => return Err(last.err("the last forecaster row must be a 1-channel conv/deconv or a dfn-head")),
        }
        if self.forecaster[..self.forecaster.len() - 1]
            .iter()
            .any(|l| l.kind == LayerKind::DfnHead)
        {
            return Err(Error::config(&self.name, "dfn-head must be the last forecaster row"));
        }
        if last.out_res != self.frame_res {
            return Err(last.err(format!(
                "output resolution {:?} differs from frame resolution {:?}",
                last.out_res, self.frame_res
            )));
        }
        Ok(())
    }

    fn validate_cnn2d(&self) -> Result<()> {
        if self
            .encoder
            .iter()
            .chain(&self.forecaster)
            .any(|l| !matches!(l.kind, LayerKind::Conv | LayerKind::Deconv))
        {
            return Err(Error::config(&self.name, "cnn2d networks contain only conv/deconv rows"));
        }
        self.validate_chain(&self.encoder, Some((INPUT_SOURCE, self.frame_res, self.in_frames)))?;
        let top = self.encoder.last().unwrap();
        self.validate_chain(&self.forecaster, Some((top.name.as_str(), top.out_res, top.channels[1])))?;
        let last = self.forecaster.last().unwrap();
        if last.channels[1] != self.out_frames || last.out_res != self.frame_res {
            return Err(last.err(format!(
                "output must be {} channels at {:?}, got {} at {:?}",
                self.out_frames, self.frame_res, last.channels[1], last.out_res
            )));
        }
        Ok(())
    }

    /// Activation applied after a non-recurrent row.
    pub fn activation_of(&self, l: &LayerSpec) -> Activation {
        if let Some(a) = l.activation {
            return a;
        }
        let is_last = self.forecaster.last().map(|x| x.name.as_str()) == Some(l.name.as_str());
        if is_last || l.kind == LayerKind::DfnHead {
            Activation::None
        } else {
            Activation::LeakyRelu
        }
    }
}
