use std::fs;
use std::ops::Range;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window_tensors, Dataset};
use crate::engine::optim::{clip_global_norm, Adam, AdamConfig};
use crate::engine::serialize::save_checkpoint;
use crate::engine::{ParamStore, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{intensity_weight_map, training_loss, LossMode, SkillAccumulator};
use crate::networks::{Mode, Network};

fn default_patience() -> usize {
    5
}
fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_valid_windows() -> usize {
    64
}

/// Offline training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub iterations: usize,
    pub batch_size: usize,
    /// Global gradient-norm clipping threshold.
    pub clip: f64,
    #[serde(default)]
    pub loss: LossMode,
    /// Validate every this many iterations; 0 disables validation.
    pub validate_every: usize,
    /// Validations without improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Cap on validation windows.
    #[serde(default = "default_valid_windows")]
    pub valid_windows: usize,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

impl Schedule {
    fn base(iterations: usize, batch_size: usize, clip: f64) -> Self {
        Schedule {
            iterations,
            batch_size,
            clip,
            loss: LossMode::Balanced,
            validate_every: 0,
            patience: default_patience(),
            valid_windows: default_valid_windows(),
            seed: 0,
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
        }
    }

    /// Recurrent networks on MovingMNIST++.
    pub fn mnist_rnn() -> Self {
        Self::base(200_000, 4, 10.0).plain()
    }

    /// 2D CNN on MovingMNIST++.
    pub fn mnist_cnn() -> Self {
        Self::base(100_000, 32, 50.0).plain()
    }

    /// The 10k-iteration desk-scale counterpart of [`Schedule::mnist_rnn`].
    pub fn mnist_desk() -> Self {
        Self::base(10_000, 4, 10.0).plain()
    }

    fn plain(self) -> Self {
        Schedule {
            loss: LossMode::Plain,
            ..self
        }
    }

    /// Recurrent networks on radar data, with early stopping.
    pub fn radar_rnn() -> Self {
        Schedule {
            validate_every: 1000,
            ..Self::base(100_000, 4, 10.0)
        }
    }

    /// 2D CNN on radar data, with early stopping.
    pub fn radar_cnn() -> Self {
        Schedule {
            validate_every: 1000,
            ..Self::base(100_000, 8, 50.0)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serialises")
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.clip > 0.0) || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(
                "schedule needs a positive batch size, clip threshold and learning rate".into(),
            ));
        }
        Ok(())
    }
}

/// Training and validation record ranges of a dataset.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub train: Range<usize>,
    pub valid: Range<usize>,
}

impl<'a> TrainData<'a> {
    /// Ranges from the dataset's split metadata.
    pub fn from_split(dataset: &'a Dataset) -> Self {
        let [train, valid, _] = dataset.split_ranges();
        TrainData { dataset, train, valid }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters and buffers of the returned model (the best validated
    /// state when validation ran).
    pub checkpoint: ParamStore<T>,
    pub curve: Vec<CurvePoint>,
    /// `(iteration, B-MSE + B-MAE)` per validation.
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: Option<usize>,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Write `checkpoint.nwk`, `train_curve.csv` and `valid_curve.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.checkpoint, &dir.join("checkpoint.nwk"))?;
        let mut w = csv::Writer::from_path(dir.join("train_curve.csv"))?;
        w.write_record(["iteration", "loss", "grad_norm"])?;
        for p in &self.curve {
            w.write_record([p.iteration.to_string(), p.loss.to_string(), p.grad_norm.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("valid_curve.csv"))?;
        w.write_record(["iteration", "bmse_plus_bmae"])?;
        for (i, v) in &self.validation {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn windows_of(dataset: &Dataset, records: Range<usize>, len: usize) -> Vec<(usize, usize)> {
    records
        .flat_map(|r| {
            let n = dataset.records[r].frame_count(dataset.height, dataset.width);
            (0..n.saturating_sub(len) + usize::from(n >= len)).map(move |s| (r, s))
        })
        .collect()
}

/// Split `N x (J+K) x H x W` into inputs and targets along time.
fn split_time<T: Scalar>(t: &Tensor<T>, j: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, len, h, w]: [usize; 4] = t.shape().try_into().map_err(|_| Error::shape("split_time", "rank 4"))?;
    let plane = h * w;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in 0..n {
        let base = s * len * plane;
        a.extend_from_slice(&t.data()[base..base + j * plane]);
        b.extend_from_slice(&t.data()[base + j * plane..base + len * plane]);
    }
    Ok((Tensor::from_vec(&[n, j, h, w], a)?, Tensor::from_vec(&[n, len - j, h, w], b)?))
}

/// B-MSE + B-MAE of clamped forecasts over fixed validation windows.
pub(crate) fn validation_score<T: Scalar>(
    network: &Network<T>,
    dataset: &Dataset,
    windows: &[(usize, usize)],
    batch: usize,
) -> Result<f64> {
    let (j, k) = (network.config.in_frames, network.config.out_frames);
    let plane = dataset.height * dataset.width;
    let mut acc = SkillAccumulator::default();
    for chunk in windows.chunks(batch.max(1)) {
        let (frames, mask) = window_tensors::<T>(dataset, chunk, j + k)?;
        let (input, truth) = split_time(&frames, j)?;
        let (input_mask, truth_mask) = split_time(&mask, j)?;
        let pred = network.predict(&input, Some(&input_mask))?;
        for f in 0..chunk.len() * k {
            let span = f * plane..(f + 1) * plane;
            let p: Vec<f64> = pred.data()[span.clone()].iter().map(|v| v.to_f64().unwrap()).collect();
            let t: Vec<f64> = truth.data()[span.clone()].iter().map(|v| v.to_f64().unwrap()).collect();
            let m: Vec<bool> = truth_mask.data()[span].iter().map(|&v| v > T::zero()).collect();
            acc.add_frame(&p, &t, Some(&m))?;
        }
    }
    let r = acc.finish();
    Ok(r.bmse + r.bmae)
}

/// Adam with global-norm clipping on randomly sampled `J + K` windows, with
/// early stopping on validation B-MSE + B-MAE. The network is left holding
/// the returned checkpoint.
pub fn train_offline<T: Scalar>(
    network: &mut Network<T>,
    data: &TrainData<'_>,
    schedule: &Schedule,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    let (j, k) = (network.config.in_frames, network.config.out_frames);
    let ds = data.dataset;
    if [ds.height, ds.width] != network.config.frame_res {
        return Err(Error::shape(
            "train_offline",
            format!("{}x{} data for a {:?} network", ds.height, ds.width, network.config.frame_res),
        ));
    }
    let train_windows = windows_of(ds, data.train.clone(), j + k);
    if schedule.iterations > 0 && train_windows.is_empty() {
        return Err(Error::InvalidArgument(format!("no training record holds {} frames", j + k)));
    }
    let mut valid_windows = windows_of(ds, data.valid.clone(), j + k);
    if valid_windows.len() > schedule.valid_windows {
        let stride = valid_windows.len().div_ceil(schedule.valid_windows);
        valid_windows = valid_windows.into_iter().step_by(stride).collect();
    }
    let validate = schedule.validate_every > 0 && !valid_windows.is_empty();

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(
        &network.params,
        AdamConfig {
            lr: schedule.lr,
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            ..AdamConfig::default()
        },
    );
    let clip = T::from_f64_lossy(schedule.clip);
    let mut out = TrainOutcome {
        checkpoint: network.state_dict(),
        curve: Vec::with_capacity(schedule.iterations),
        validation: Vec::new(),
        best_iteration: None,
        iterations_run: 0,
        stopped_early: false,
    };
    let mut best = f64::INFINITY;
    let mut stall = 0;

    for it in 0..schedule.iterations {
        let batch: Vec<(usize, usize)> = (0..schedule.batch_size)
            .map(|_| train_windows[rng.random_range(0..train_windows.len())])
            .collect();
        let (frames, mask) = window_tensors::<T>(ds, &batch, j + k)?;
        let (input, truth) = split_time(&frames, j)?;
        let (input_mask, truth_mask) = split_time(&mask, j)?;
        let mut tape = Tape::new();
        let fwd = network.forward(&mut tape, &input, Some(&input_mask), Mode::Train)?;
        let weights = intensity_weight_map(&truth, Some(&truth_mask), schedule.loss)?;
        let loss = training_loss(&mut tape, fwd.prediction, &truth, &weights, batch.len() * k)?;
        let value = tape.value(loss).item().to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::Divergence { iteration: it, loss: value });
        }
        let grads = tape.backward(loss)?;
        let mut grads = tape.param_grads(&grads, &network.params);
        let norm = grads.global_norm().to_f64().unwrap();
        if !norm.is_finite() {
            return Err(Error::Divergence { iteration: it, loss: norm });
        }
        clip_global_norm(grads.tensors_mut(), clip)?;
        adam.step(&mut network.params, &grads)?;
        network.update_running_stats(&fwd.moments)?;
        out.curve.push(CurvePoint {
            iteration: it,
            loss: value,
            grad_norm: norm,
        });
        out.iterations_run = it + 1;
        debug!("iteration {it}: loss {value:.6} grad norm {norm:.4}");

        if validate && (it + 1) % schedule.validate_every == 0 {
            let score = validation_score(network, ds, &valid_windows, schedule.batch_size)?;
            info!("iteration {}: validation B-MSE + B-MAE {score:.6}", it + 1);
            out.validation.push((it + 1, score));
            if score < best {
                best = score;
                stall = 0;
                out.best_iteration = Some(it + 1);
                out.checkpoint = network.state_dict();
            } else {
                stall += 1;
                if stall >= schedule.patience {
                    out.stopped_early = true;
                    break;
                }
            }
        }
    }
    if out.best_iteration.is_none() {
        out.checkpoint = network.state_dict();
    } else {
        network.load_state_dict(&out.checkpoint)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_toml_defaults() {
        let s = Schedule::from_toml("iterations = 3\nbatch_size = 2\nclip = 10.0\nvalidate_every = 0\nseed = 7\n").unwrap();
        assert_eq!(s.patience, 5);
        assert_eq!(s.lr, 1e-4);
        assert_eq!(s.beta1, 0.5);
        assert_eq!(s.loss, LossMode::Balanced);
        assert_eq!(Schedule::from_toml(&s.to_toml()).unwrap(), s);
        assert!(Schedule::from_toml("iterations = 3\nbogus = 1\n").is_err());
    }

    #[test]
    fn window_enumeration() {
        let mut ds = Dataset::new(crate::data::DatasetKind::Radar, 1, 1);
        ds.push(crate::data::Record {
            seed: 0,
            new_episode: true,
            pixels: vec![0; 5],
            mask: vec![true; 5],
        })
        .unwrap();
        assert_eq!(windows_of(&ds, 0..1, 3), vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(windows_of(&ds, 0..1, 5), vec![(0, 0)]);
        assert!(windows_of(&ds, 0..1, 6).is_empty());
    }
}
