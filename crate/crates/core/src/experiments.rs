//! Small end-to-end experiments: the MovingMNIST++ model ordering, the
//! balanced-loss comparison and offline vs online evaluation on a drifting
//! radar stream. The acceptance tests and the CLI share these drivers.

use log::info;

use crate::data::codec::THRESHOLDS;
use crate::data::mnist::{GlyphBank, MovingMnistConfig};
use crate::data::radar::RadarStreamConfig;
use crate::data::{mnist_dataset, radar_dataset, Dataset};
use crate::error::Result;
use crate::metrics::{HssVariant, LossMode, SkillReport};
use crate::networks::{presets, Network};
use crate::protocol::{run_protocol, train_offline, NetworkModel, ProtocolStream, RunMode, Schedule, TrainData};

pub const ORDERING_PRESETS: [&str; 3] = ["mnistpp-trajgru-l13-desk", "mnistpp-convgru-k5-desk", "mnistpp-cnn2d-desk"];
pub const RADAR_PRESET: &str = "radar-convgru-tiny";

/// Offline skill of `network` on `records` of `ds`.
pub fn evaluate(network: Network<f32>, ds: &Dataset, records: std::ops::Range<usize>, mode: RunMode) -> Result<SkillReport> {
    let c = &network.config;
    let stream = ProtocolStream::from_dataset(ds, records, c.in_frames, c.out_frames)?;
    let mut model = NetworkModel::new(network, "model");
    let (report, _) = run_protocol(&mut model, &stream, mode, &THRESHOLDS, HssVariant::Printed)?;
    Ok(report.aggregate)
}

#[derive(Clone, Debug)]
pub struct OrderingTrial {
    pub seed: u64,
    /// `(preset, test MSE)` in [`ORDERING_PRESETS`] order.
    pub mse: Vec<(String, f64)>,
}

impl OrderingTrial {
    /// TrajGRU below ConvGRU below Conv2D.
    pub fn ordered(&self) -> bool {
        self.mse.windows(2).all(|w| w[0].1 < w[1].1)
    }
}

/// Train each ordering preset on one 32x32 MovingMNIST++ draw and score
/// the test split.
pub fn mnist_ordering(seed: u64, iterations: usize, counts: [usize; 3]) -> Result<OrderingTrial> {
    let bank = GlyphBank::procedural(10, seed);
    let config = MovingMnistConfig {
        frame_size: 32,
        ..Default::default()
    };
    let ds = mnist_dataset(&config, &bank, counts, seed)?;
    let [_, _, test] = ds.split_ranges();
    let mut mse = Vec::new();
    for name in ORDERING_PRESETS {
        let mut net = Network::<f32>::build(&presets::load(name)?, seed)?;
        let schedule = Schedule {
            iterations,
            seed,
            ..Schedule::mnist_desk()
        };
        train_offline(&mut net, &TrainData::from_split(&ds), &schedule)?;
        let score = evaluate(net, &ds, test.clone(), RunMode::Offline)?;
        info!("seed {seed} {name}: test mse {:.6}", score.mse);
        mse.push((name.to_string(), score.mse));
    }
    Ok(OrderingTrial { seed, mse })
}

/// Radar-like stream at 32x32 with a heavy-tailed intensity distribution.
pub fn radar_stream_config() -> RadarStreamConfig {
    RadarStreamConfig {
        size: 32,
        frames_per_episode: 30,
        cells: crate::data::mnist::Interval::new(1.0, 3.0),
        cell_sigma: crate::data::mnist::Interval::new(2.0, 4.0),
        drift_start: [1.0, 0.5],
        drift_end: [1.0, 0.5],
        ..Default::default()
    }
}

#[derive(Clone, Debug)]
pub struct LossTrial {
    pub seed: u64,
    pub balanced: SkillReport,
    pub plain: SkillReport,
}

impl LossTrial {
    /// Balanced CSI above plain CSI at the two highest thresholds.
    pub fn balanced_wins(&self) -> bool {
        let n = THRESHOLDS.len();
        (n - 2..n).all(|i| self.balanced.csi[i] > self.plain.csi[i])
    }
}

/// Train the tiny radar ConvGRU twice from one initialization, once per
/// loss mode, and score both on the held-out episodes.
pub fn balanced_loss(seed: u64, iterations: usize) -> Result<LossTrial> {
    let ds = radar_dataset(&radar_stream_config(), [24, 2, 6], seed)?;
    let [_, _, test] = ds.split_ranges();
    let config = presets::load(RADAR_PRESET)?;
    let mut scores = Vec::new();
    for loss in [LossMode::Balanced, LossMode::Plain] {
        let mut net = Network::<f32>::build(&config, seed)?;
        let schedule = Schedule {
            iterations,
            loss,
            validate_every: 0,
            seed,
            ..Schedule::radar_rnn()
        };
        train_offline(&mut net, &TrainData::from_split(&ds), &schedule)?;
        let s = evaluate(net, &ds, test.clone(), RunMode::Offline)?;
        info!("seed {seed} {loss:?}: csi {:?}", s.csi);
        scores.push(s);
    }
    let plain = scores.pop().unwrap();
    let balanced = scores.pop().unwrap();
    Ok(LossTrial { seed, balanced, plain })
}

#[derive(Clone, Debug)]
pub struct OnlineTrial {
    pub seed: u64,
    pub offline: SkillReport,
    pub online: SkillReport,
}

/// A stream whose drift and intensity move away from the training period.
pub fn shifting_stream_config() -> RadarStreamConfig {
    RadarStreamConfig {
        drift_start: [1.0, 0.5],
        drift_end: [-1.0, 1.5],
        intensity_start: 1.0,
        intensity_end: 2.0,
        ..radar_stream_config()
    }
}

/// Train on the early episodes of a shifting stream, then run the same
/// checkpoint offline and online over the late episodes.
pub fn online_vs_offline(seed: u64, iterations: usize) -> Result<OnlineTrial> {
    let ds = radar_dataset(&shifting_stream_config(), [16, 0, 8], seed)?;
    let [_, _, test] = ds.split_ranges();
    let mut net = Network::<f32>::build(&presets::load(RADAR_PRESET)?, seed)?;
    let schedule = Schedule {
        iterations,
        validate_every: 0,
        seed,
        ..Schedule::radar_rnn()
    };
    train_offline(&mut net, &TrainData::from_split(&ds), &schedule)?;
    let offline = evaluate(net.clone(), &ds, test.clone(), RunMode::Offline)?;
    let online = evaluate(net, &ds, test, RunMode::Online)?;
    info!("seed {seed}: offline b-mse {:.5}, online b-mse {:.5}", offline.bmse, online.bmse);
    Ok(OnlineTrial { seed, offline, online })
}
