//! Datasets: MovingMNIST++ generation, radar codecs, clutter removal,
//! synthetic radar streams and the `NWD1` file format.

pub mod codec;
pub mod denoise;
pub mod mnist;
pub mod radar;
pub mod store;

pub use denoise::RadarFrame;
pub use store::{Dataset, DatasetKind, Record, SplitMeta};

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Quantise `[0, 1]` intensities to pixels.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Store a generated MovingMNIST++ sequence as one record.
pub fn mnist_record(sample: &mnist::SequenceSample, seed: u64) -> Record {
    let pixels: Vec<u8> = sample.frames.data().iter().map(|&v| quantize(v)).collect();
    let mask = vec![true; pixels.len()];
    Record {
        seed,
        new_episode: true,
        pixels,
        mask,
    }
}

/// Stack windows of records into `N x len x H x W` intensity and mask
/// tensors. `windows` holds `(record index, first frame)`.
pub fn window_tensors<T: Scalar>(
    dataset: &Dataset,
    windows: &[(usize, usize)],
    len: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (dataset.height, dataset.width);
    let plane = h * w;
    let mut frames = Vec::with_capacity(windows.len() * len * plane);
    let mut mask = Vec::with_capacity(windows.len() * len * plane);
    for &(ri, start) in windows {
        let rec = dataset
            .records
            .get(ri)
            .ok_or_else(|| Error::InvalidArgument(format!("record {ri} out of {}", dataset.records.len())))?;
        if (start + len) * plane > rec.pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "window {start}..{} exceeds the {} frames of record {ri}",
                start + len,
                rec.frame_count(h, w)
            )));
        }
        let span = start * plane..(start + len) * plane;
        frames.extend(rec.pixels[span.clone()].iter().map(|&p| T::from_f64_lossy(p as f64 / 255.0)));
        mask.extend(rec.mask[span].iter().map(|&m| if m { T::one() } else { T::zero() }));
    }
    let shape = [windows.len(), len, h, w];
    Ok((Tensor::from_vec(&shape, frames)?, Tensor::from_vec(&shape, mask)?))
}

fn split_meta(counts: [usize; 3]) -> SplitMeta {
    SplitMeta {
        train_days: counts[0] as u32,
        valid_days: counts[1] as u32,
        test_days: counts[2] as u32,
    }
}

/// `counts = [train, valid, test]` MovingMNIST++ sequences in one dataset;
/// record `i` is generated from `sequence_seed(seed, i)`.
pub fn mnist_dataset(
    config: &mnist::MovingMnistConfig,
    bank: &mnist::GlyphBank,
    counts: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    let total: usize = counts.iter().sum();
    let samples = mnist::generate_batch(config, bank, seed, total)?;
    let mut ds = Dataset::new(DatasetKind::MovingMnist, config.frame_size, config.frame_size);
    ds.split = split_meta(counts);
    for (i, s) in samples.iter().enumerate() {
        ds.push(mnist_record(s, mnist::sequence_seed(seed, i as u64)))?;
    }
    Ok(ds)
}

/// A synthetic radar stream with one record per episode. Episodes keep
/// their generation order, so drift configured across the stream separates
/// the test period from the training period.
pub fn radar_dataset(config: &radar::RadarStreamConfig, counts: [usize; 3], seed: u64) -> Result<Dataset> {
    let config = radar::RadarStreamConfig {
        episodes: counts.iter().sum(),
        ..config.clone()
    };
    let episodes = radar::generate_stream(&config, seed)?;
    let mut ds = Dataset::new(DatasetKind::Radar, config.size, config.size);
    ds.split = split_meta(counts);
    for e in &episodes {
        ds.push(Record::from_frames(e.seed, true, &e.frames))?;
    }
    Ok(ds)
}
