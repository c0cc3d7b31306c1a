//! Recurrent cells (ConvGRU, TrajGRU with its flow generator) and the
//! dynamic-filter output head.
//!
//! Cells own [`ParamId`]s into a shared [`ParamStore`]. Before running a
//! sequence, a cell is *bound* to a tape, which records its parameters once
//! and pre-concatenates the per-gate weights; the bound cell is then stepped
//! once per frame.

use rand::Rng;

use crate::engine::init::{fan_in, msra, msra_with_fan_in};
use crate::engine::{Conv2dGeometry, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Hidden width of the flow generator.
pub const FLOW_HIDDEN: usize = 32;
/// Kernel of both flow-generator convolutions.
pub const FLOW_KERNEL: usize = 5;

/// Side length of the dynamic-filter window.
pub const DFN_WINDOW: usize = 11;

fn insert_weight<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
    rng: &mut R,
) -> Result<ParamId> {
    store.insert(name, msra(shape, rng))
}

/// Biases are drawn like the weights of their layer.
fn insert_bias<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    channels: usize,
    layer_fan_in: usize,
    rng: &mut R,
) -> Result<ParamId> {
    store.insert(name, msra_with_fan_in(&[channels], layer_fan_in, rng))
}

fn bind_all<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| tape.param(store, id)).collect()
}

/// A single convolution or transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Conv2dGeometry,
    pub transposed: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: Conv2dGeometry,
        transposed: bool,
    ) -> Result<Self> {
        let shape = if transposed {
            [in_channels, out_channels, kernel, kernel]
        } else {
            [out_channels, in_channels, kernel, kernel]
        };
        let fan = fan_in(&shape);
        let weight = insert_weight(store, format!("{name}.w"), &shape, rng)?;
        let bias = insert_bias(store, format!("{name}.b"), out_channels, fan, rng)?;
        Ok(ConvLayer {
            name: name.to_string(),
            weight,
            bias,
            geom,
            transposed,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        if self.transposed {
            tape.conv_transpose2d(x, w, Some(b), self.geom)
        } else {
            tape.conv2d(x, w, Some(b), self.geom)
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Hyperparameters shared by both recurrent cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    /// Channels of the input link; the input may still be absent at runtime
    /// (then it is treated as zeros).
    pub input_channels: usize,
    /// Whether the layer has an input link at all. Without one, the
    /// input-to-state kernels are not allocated.
    pub has_input: bool,
    pub hidden: usize,
    pub in_kernel: usize,
    pub in_stride: usize,
    pub in_pad: usize,
}

impl CellSpec {
    fn i2h_geom(&self) -> Conv2dGeometry {
        Conv2dGeometry::new([self.in_stride; 2], [self.in_pad; 2])
    }
}

/// The three input-to-state kernels and biases.
#[derive(Clone, Debug)]
struct InputGates {
    w: [ParamId; 3],
    b: [ParamId; 3],
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl InputGates {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        spec: &CellSpec,
    ) -> Result<Option<Self>> {
        if !spec.has_input {
            return Ok(None);
        }
        let shape = [spec.hidden, spec.input_channels, spec.in_kernel, spec.in_kernel];
        let fan = fan_in(&shape);
        let mut w = Vec::with_capacity(3);
        let mut b = Vec::with_capacity(3);
        for g in GATES {
            w.push(insert_weight(store, format!("{prefix}.wx{g}"), &shape, rng)?);
        }
        for g in GATES {
            b.push(insert_bias(store, format!("{prefix}.bx{g}"), spec.hidden, fan, rng)?);
        }
        Ok(Some(InputGates {
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
        }))
    }

    fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<(Var, Var)> {
        let w = bind_all(tape, store, &self.w);
        let b = bind_all(tape, store, &self.b);
        Ok((tape.concat(&w, 0)?, tape.concat(&b, 0)?))
    }

    fn ids(&self) -> Vec<ParamId> {
        self.w.iter().chain(&self.b).copied().collect()
    }
}

/// Gate pre-activations from the input link, each `N x Ch x H x W`. A layer
/// with input kernels but no input this step convolves zeros.
fn input_contribution<T: Scalar>(
    tape: &mut Tape<T>,
    fused: Option<(Var, Var)>,
    spec: &CellSpec,
    x: Option<Var>,
    h_prev: Var,
) -> Result<Option<Vec<Var>>> {
    let Some((w, b)) = fused else {
        return Ok(None);
    };
    let x = match x {
        Some(x) => x,
        None => zero_like_input(tape, h_prev, spec.input_channels)?,
    };
    let y = tape.conv2d(x, w, Some(b), spec.i2h_geom())?;
    let axis = channel_axis(tape, y);
    Ok(Some(tape.chunk(y, axis, 3)?))
}

/// The GRU update shared by both cells: gate pre-activations from the input
/// link (`xi`, optional) and from the state link (`hs`).
fn gru_update<T: Scalar>(
    tape: &mut Tape<T>,
    xi: Option<Vec<Var>>,
    hs: Vec<Var>,
    h_prev: Var,
) -> Result<Var> {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    let (z_pre, r_pre, x_h) = match xi {
        Some(xi) => (tape.add(xi[0], hs[0])?, tape.add(xi[1], hs[1])?, Some(xi[2])),
        None => (hs[0], hs[1], None),
    };
    let z = tape.sigmoid(z_pre);
    let r = tape.sigmoid(r_pre);
    let gated = tape.mul(r, hs[2])?;
    let cand_pre = match x_h {
        Some(xh) => tape.add(xh, gated)?,
        None => gated,
    };
    let cand = tape.leaky_relu(cand_pre, slope);
    let keep = tape.one_minus(z);
    let a = tape.mul(keep, cand)?;
    let b = tape.mul(z, h_prev)?;
    tape.add(a, b)
}

/// Channel axis of a `C x H x W` or `N x C x H x W` value.
fn channel_axis<T: Scalar>(tape: &Tape<T>, v: Var) -> usize {
    tape.shape(v).len().saturating_sub(3)
}

fn check_state<T: Scalar>(tape: &Tape<T>, name: &str, hidden: usize, h: Var) -> Result<()> {
    let shape = tape.shape(h);
    let c = match shape.len() {
        4 => shape[1],
        3 => shape[0],
        _ => usize::MAX,
    };
    if c != hidden {
        return Err(Error::shape(
            "rnn_step",
            format!("{name}: state {shape:?} does not have {hidden} channels"),
        ));
    }
    Ok(())
}

fn check_input<T: Scalar>(tape: &Tape<T>, name: &str, spec: &CellSpec, x: Option<Var>) -> Result<()> {
    if let Some(x) = x {
        let shape = tape.shape(x);
        let c = match shape.len() {
            4 => shape[1],
            3 => shape[0],
            _ => usize::MAX,
        };
        if c != spec.input_channels {
            return Err(Error::shape(
                "rnn_step",
                format!(
                    "{name}: input {shape:?} does not have {} channels",
                    spec.input_channels
                ),
            ));
        }
        if !spec.has_input {
            return Err(Error::shape(
                "rnn_step",
                format!("{name}: layer has no input link but received {shape:?}"),
            ));
        }
    }
    Ok(())
}

/// ConvGRU: all six transforms are convolutions.
#[derive(Clone, Debug)]
pub struct ConvGruCell {
    pub name: String,
    pub spec: CellSpec,
    pub state_kernel: usize,
    pub state_dilation: usize,
    input: Option<InputGates>,
    wh: [ParamId; 3],
    bh: [ParamId; 3],
}

/// A [`ConvGruCell`] whose parameters are recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundConvGru {
    input: Option<(Var, Var)>,
    wh: Var,
    bh: Var,
    h2h: Conv2dGeometry,
}

impl ConvGruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: CellSpec,
        state_kernel: usize,
        state_dilation: usize,
    ) -> Result<Self> {
        if state_kernel % 2 == 0 {
            return Err(Error::config(
                name,
                format!("state kernel {state_kernel} must be odd to preserve the state extent"),
            ));
        }
        let input = InputGates::new(store, rng, name, &spec)?;
        let shape = [spec.hidden, spec.hidden, state_kernel, state_kernel];
        let fan = fan_in(&shape);
        let mut wh = Vec::new();
        let mut bh = Vec::new();
        for g in GATES {
            wh.push(insert_weight(store, format!("{name}.wh{g}"), &shape, rng)?);
        }
        for g in GATES {
            bh.push(insert_bias(store, format!("{name}.bh{g}"), spec.hidden, fan, rng)?);
        }
        Ok(ConvGruCell {
            name: name.to_string(),
            spec,
            state_kernel,
            state_dilation,
            input,
            wh: wh.try_into().unwrap(),
            bh: bh.try_into().unwrap(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.as_ref().map(InputGates::ids).unwrap_or_default();
        ids.extend(self.wh);
        ids.extend(self.bh);
        ids
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<BoundConvGru> {
        let input = match &self.input {
            Some(g) => Some(g.bind(tape, store)?),
            None => None,
        };
        let wh = bind_all(tape, store, &self.wh);
        let bh = bind_all(tape, store, &self.bh);
        Ok(BoundConvGru {
            input,
            wh: tape.concat(&wh, 0)?,
            bh: tape.concat(&bh, 0)?,
            h2h: Conv2dGeometry::same([self.state_kernel; 2], [self.state_dilation; 2]),
        })
    }

    /// One step of the recurrence. An absent `x` is treated as zeros.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundConvGru,
        x: Option<Var>,
        h_prev: Var,
    ) -> Result<Var> {
        check_state(tape, &self.name, self.spec.hidden, h_prev)?;
        check_input(tape, &self.name, &self.spec, x)?;
        let xi = input_contribution(tape, bound.input, &self.spec, x, h_prev)?;
        let hconv = tape.conv2d(h_prev, bound.wh, Some(bound.bh), bound.h2h)?;
        let hs = tape.chunk(hconv, channel_axis(tape, hconv), 3)?;
        gru_update(tape, xi, hs, h_prev)
    }
}

/// Zeros with `channels` channels and the batch and spatial extents of `h`.
fn zero_like_input<T: Scalar>(tape: &mut Tape<T>, h: Var, channels: usize) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let zshape = match shape.len() {
        4 => vec![shape[0], channels, shape[2], shape[3]],
        3 => vec![channels, shape[1], shape[2]],
        _ => return Err(Error::shape("rnn_step", format!("state must be rank 3 or 4, got {shape:?}"))),
    };
    Ok(tape.input(Tensor::zeros(&zshape)))
}

/// The structure-generating network: two 5x5 convolutions producing `2L`
/// flow channels (U first, then V). Zero-initialised.
#[derive(Clone, Debug)]
pub struct FlowGenerator {
    pub links: usize,
    pub input_channels: usize,
    pub hidden: usize,
    l1: ConvLayer,
    l2: ConvLayer,
}

impl FlowGenerator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_channels: usize,
        hidden: usize,
        links: usize,
    ) -> Result<Self> {
        let geom = Conv2dGeometry::new([1, 1], [FLOW_KERNEL / 2; 2]);
        let mut zero_layer = |name: String, cin: usize, cout: usize| -> Result<ConvLayer> {
            let weight = store.insert(format!("{name}.w"), Tensor::zeros(&[cout, cin, FLOW_KERNEL, FLOW_KERNEL]))?;
            let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
            Ok(ConvLayer {
                name,
                weight,
                bias,
                geom,
                transposed: false,
                in_channels: cin,
                out_channels: cout,
                kernel: FLOW_KERNEL,
            })
        };
        let l1 = zero_layer(format!("{prefix}.gamma.l1"), input_channels + hidden, FLOW_HIDDEN)?;
        let l2 = zero_layer(format!("{prefix}.gamma.l2"), FLOW_HIDDEN, 2 * links)?;
        Ok(FlowGenerator {
            links,
            input_channels,
            hidden,
            l1,
            l2,
        })
    }

    pub fn layers(&self) -> [&ConvLayer; 2] {
        [&self.l1, &self.l2]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.l1.param_ids();
        ids.extend(self.l2.param_ids());
        ids
    }

    /// `(U, V)`, each `[N x] L x H x W`. An absent `x` is replaced by zeros of
    /// the declared input width.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Option<Var>,
        h_prev: Var,
    ) -> Result<(Var, Var)> {
        let x = match x {
            Some(x) => x,
            None => zero_like_input(tape, h_prev, self.input_channels)?,
        };
        let axis = tape.shape(h_prev).len() - 3;
        let cat = tape.concat(&[x, h_prev], axis).map_err(|e| {
            Error::shape("flow_gen", format!("input and state do not concatenate: {e}"))
        })?;
        let hid = self.l1.forward(tape, store, cat)?;
        let hid = tape.leaky_relu(hid, T::from_f64_lossy(LEAKY_SLOPE));
        let flows = self.l2.forward(tape, store, hid)?;
        let u = tape.slice(flows, axis, 0, self.links)?;
        let v = tape.slice(flows, axis, self.links, self.links)?;
        Ok((u, v))
    }
}

/// How a TrajGRU obtains its flows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FlowMode {
    /// From the structure-generating network.
    #[default]
    Learned,
    /// Forced to zero (every link reads the state in place).
    Pinned,
}

/// TrajGRU: state-to-state transitions follow `L` learned flow fields, each
/// followed by a 1x1 projection.
#[derive(Clone, Debug)]
pub struct TrajGruCell {
    pub name: String,
    pub spec: CellSpec,
    pub links: usize,
    pub flow_mode: FlowMode,
    input: Option<InputGates>,
    pub gamma: FlowGenerator,
    link_w: Vec<[ParamId; 3]>,
    bh: [ParamId; 3],
}

#[derive(Clone, Debug)]
pub struct BoundTrajGru {
    input: Option<(Var, Var)>,
    /// `3Ch x L*Ch x 1 x 1`, link-major along the input axis.
    wlinks: Var,
    bh: Var,
}

impl TrajGruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: CellSpec,
        links: usize,
    ) -> Result<Self> {
        if links == 0 {
            return Err(Error::config(name, "a TrajGRU needs at least one link"));
        }
        if spec.input_channels == 0 {
            return Err(Error::config(name, "the flow generator needs a declared input width"));
        }
        if spec.has_input && (spec.in_stride != 1 || 2 * spec.in_pad + 1 != spec.in_kernel) {
            return Err(Error::config(
                name,
                "the input-to-state convolution must preserve resolution so the flow generator can see input and state together",
            ));
        }
        let input = InputGates::new(store, rng, name, &spec)?;
        let gamma = FlowGenerator::new(store, name, spec.input_channels, spec.hidden, links)?;
        let shape = [spec.hidden, spec.hidden, 1, 1];
        let fan = links * spec.hidden;
        let mut link_w = Vec::with_capacity(links);
        for l in 0..links {
            let mut w = Vec::with_capacity(3);
            for g in GATES {
                // The L projections of a gate act as one L*Ch -> Ch 1x1 convolution.
                w.push(store.insert(format!("{name}.link.{l}.wh{g}"), msra_with_fan_in(&shape, fan, rng))?);
            }
            link_w.push(w.try_into().unwrap());
        }
        let mut bh = Vec::new();
        for g in GATES {
            bh.push(insert_bias(store, format!("{name}.bh{g}"), spec.hidden, fan, rng)?);
        }
        Ok(TrajGruCell {
            name: name.to_string(),
            spec,
            links,
            flow_mode: FlowMode::Learned,
            input,
            gamma,
            link_w,
            bh: bh.try_into().unwrap(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.as_ref().map(InputGates::ids).unwrap_or_default();
        ids.extend(self.gamma.param_ids());
        for l in &self.link_w {
            ids.extend(l);
        }
        ids.extend(self.bh);
        ids
    }

    /// Parameter ids of the state-to-state projections of link `l` (z, r, h).
    pub fn link_params(&self, l: usize) -> [ParamId; 3] {
        self.link_w[l]
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<BoundTrajGru> {
        let input = match &self.input {
            Some(g) => Some(g.bind(tape, store)?),
            None => None,
        };
        let mut per_link = Vec::with_capacity(self.links);
        for ids in &self.link_w {
            let w = bind_all(tape, store, ids);
            per_link.push(tape.concat(&w, 0)?);
        }
        let wlinks = tape.concat(&per_link, 1)?;
        let bh = bind_all(tape, store, &self.bh);
        Ok(BoundTrajGru {
            input,
            wlinks,
            bh: tape.concat(&bh, 0)?,
        })
    }

    pub fn flows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Option<Var>,
        h_prev: Var,
    ) -> Result<(Var, Var)> {
        match self.flow_mode {
            FlowMode::Learned => self.gamma.forward(tape, store, x, h_prev),
            FlowMode::Pinned => {
                let u = zero_like_input(tape, h_prev, self.links)?;
                let v = zero_like_input(tape, h_prev, self.links)?;
                Ok((u, v))
            }
        }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bound: &BoundTrajGru,
        x: Option<Var>,
        h_prev: Var,
    ) -> Result<Var> {
        check_state(tape, &self.name, self.spec.hidden, h_prev)?;
        check_input(tape, &self.name, &self.spec, x)?;
        let (u, v) = self.flows(tape, store, x, h_prev)?;
        let xi = input_contribution(tape, bound.input, &self.spec, x, h_prev)?;
        let warped = tape.bilinear_warp(h_prev, u, v)?;
        let proj = tape.conv2d(warped, bound.wlinks, Some(bound.bh), Conv2dGeometry::default())?;
        let hs = tape.chunk(proj, channel_axis(tape, proj), 3)?;
        gru_update(tape, xi, hs, h_prev)
    }
}

/// Either recurrent cell.
#[derive(Clone, Debug)]
pub enum RnnCell {
    ConvGru(ConvGruCell),
    TrajGru(TrajGruCell),
}

#[derive(Clone, Debug)]
pub enum BoundCell {
    ConvGru(BoundConvGru),
    TrajGru(BoundTrajGru),
}

impl RnnCell {
    pub fn name(&self) -> &str {
        match self {
            RnnCell::ConvGru(c) => &c.name,
            RnnCell::TrajGru(c) => &c.name,
        }
    }

    pub fn spec(&self) -> &CellSpec {
        match self {
            RnnCell::ConvGru(c) => &c.spec,
            RnnCell::TrajGru(c) => &c.spec,
        }
    }

    pub fn hidden(&self) -> usize {
        self.spec().hidden
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            RnnCell::ConvGru(c) => c.param_ids(),
            RnnCell::TrajGru(c) => c.param_ids(),
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<BoundCell> {
        Ok(match self {
            RnnCell::ConvGru(c) => BoundCell::ConvGru(c.bind(tape, store)?),
            RnnCell::TrajGru(c) => BoundCell::TrajGru(c.bind(tape, store)?),
        })
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bound: &BoundCell,
        x: Option<Var>,
        h_prev: Var,
    ) -> Result<Var> {
        match (self, bound) {
            (RnnCell::ConvGru(c), BoundCell::ConvGru(b)) => c.step(tape, b, x, h_prev),
            (RnnCell::TrajGru(c), BoundCell::TrajGru(b)) => c.step(tape, store, b, x, h_prev),
            _ => Err(Error::InvalidArgument(format!(
                "{}: bound parameters belong to a different cell type",
                self.name()
            ))),
        }
    }

    pub fn set_flow_mode(&mut self, mode: FlowMode) {
        if let RnnCell::TrajGru(c) = self {
            c.flow_mode = mode;
        }
    }
}

/// Dynamic-filter head: a convolution producing `window^2` logits per pixel,
/// softmax-normalised into a local filter applied to the previous frame.
#[derive(Clone, Debug)]
pub struct DfnHead {
    pub conv: ConvLayer,
    pub window: usize,
}

impl DfnHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        kernel: usize,
        pad: usize,
        window: usize,
    ) -> Result<Self> {
        let conv = ConvLayer::new(
            store,
            rng,
            name,
            in_channels,
            window * window,
            kernel,
            Conv2dGeometry::new([1, 1], [pad, pad]),
            false,
        )?;
        Ok(DfnHead { conv, window })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.conv.param_ids()
    }

    /// Features to filter logits, then the filtered previous frame.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        prev_frame: Var,
    ) -> Result<Var> {
        let logits = self.conv.forward(tape, store, features)?;
        dfn_apply(tape, logits, prev_frame, self.window)
    }
}

/// Softmax over the `window^2` logit channels, then the per-pixel local
/// filter over the previous frame (zero outside the frame).
pub fn dfn_apply<T: Scalar>(tape: &mut Tape<T>, logits: Var, prev_frame: Var, window: usize) -> Result<Var> {
    let weights = tape.softmax_channels(logits)?;
    tape.local_filter(weights, prev_frame, window)
}

/// Exact scalar count of the given parameters.
pub fn param_count<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.get(id).len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(ci: usize, ch: usize) -> CellSpec {
        CellSpec {
            input_channels: ci,
            has_input: true,
            hidden: ch,
            in_kernel: 3,
            in_stride: 1,
            in_pad: 1,
        }
    }

    #[test]
    fn single_conv_param_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ConvLayer::new(&mut store, &mut rng, "c", 2, 4, 3, Conv2dGeometry::default(), false).unwrap();
        assert_eq!(param_count(&store, &c.param_ids()), 76);
    }

    #[test]
    fn trajgru_state_params_scale_with_links() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = TrajGruCell::new(&mut store, &mut rng, "t", spec(4, 8), 5).unwrap();
        let links: usize = (0..5).map(|l| param_count(&store, &cell.link_params(l))).sum();
        assert_eq!(links, 3 * 5 * 8 * 8);
    }
}
