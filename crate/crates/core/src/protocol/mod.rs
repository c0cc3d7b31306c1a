//! Streaming evaluation: the observe/store/update/predict/upload loop over a
//! radar-like stream, offline and online model adapters, the training driver
//! and report generation.

mod emit;
mod models;
mod train;

pub use emit::{rank_flags, report_emit, Flag, ReportArtifacts};
pub use models::{last_frame_predict, LastFrame, NetworkModel, OnlineBuffer};
pub use train::{train_offline, CurvePoint, Schedule, TrainData, TrainOutcome};

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RadarFrame};
use crate::engine::serialize::save_tensor;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{HssVariant, SkillAccumulator, SkillReport};

/// Observed frames and forecast horizon of the full-scale radar protocol.
pub const PAPER_IN_FRAMES: usize = 5;
pub const PAPER_OUT_FRAMES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Offline,
    Online,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Offline => "offline",
            RunMode::Online => "online",
        })
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(RunMode::Offline),
            "online" => Ok(RunMode::Online),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (offline|online)"))),
        }
    }
}

/// One step of the stream: `J` observed frames and the `K` frames that
/// follow them.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub episode: usize,
    /// The observed frames do not continue the previous segment.
    pub new_episode: bool,
    pub observed: Vec<RadarFrame>,
    pub target: Vec<RadarFrame>,
}

/// Segments advance by `J` frames inside an episode, so consecutive
/// observations are contiguous and every target is fully available.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolStream {
    pub in_frames: usize,
    pub out_frames: usize,
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
    pub seeds: Vec<u64>,
}

impl ProtocolStream {
    pub fn from_episodes(episodes: &[Vec<RadarFrame>], in_frames: usize, out_frames: usize) -> Result<Self> {
        if in_frames == 0 || out_frames == 0 {
            return Err(Error::InvalidArgument("stream needs J >= 1 and K >= 1".into()));
        }
        let first = episodes
            .iter()
            .find_map(|e| e.first())
            .ok_or_else(|| Error::InvalidArgument("stream has no frames".into()))?;
        let (height, width) = (first.height, first.width);
        let mut segments = Vec::new();
        for (e, frames) in episodes.iter().enumerate() {
            if frames.iter().any(|f| f.height != height || f.width != width) {
                return Err(Error::shape("protocol_stream", format!("episode {e} changes frame size")));
            }
            let mut start = 0;
            while start + in_frames + out_frames <= frames.len() {
                segments.push(Segment {
                    episode: e,
                    new_episode: start == 0,
                    observed: frames[start..start + in_frames].to_vec(),
                    target: frames[start + in_frames..start + in_frames + out_frames].to_vec(),
                });
                start += in_frames;
            }
        }
        Ok(ProtocolStream {
            in_frames,
            out_frames,
            height,
            width,
            segments,
            seeds: Vec::new(),
        })
    }

    /// Records flagged `new_episode` start an episode; unflagged records
    /// continue the previous one.
    pub fn from_dataset(
        dataset: &Dataset,
        records: std::ops::Range<usize>,
        in_frames: usize,
        out_frames: usize,
    ) -> Result<Self> {
        let recs = dataset
            .records
            .get(records.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("records {records:?} out of {}", dataset.records.len())))?;
        let mut episodes: Vec<Vec<RadarFrame>> = Vec::new();
        for r in recs {
            let frames = r.frames(dataset.height, dataset.width);
            match episodes.last_mut() {
                Some(ep) if !r.new_episode => ep.extend(frames),
                _ => episodes.push(frames),
            }
        }
        let mut s = Self::from_episodes(&episodes, in_frames, out_frames)?;
        s.seeds = recs.iter().map(|r| r.seed).collect();
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

fn frames_to_tensor(frames: &[RadarFrame], height: usize, width: usize) -> (Tensor<f64>, Tensor<f64>) {
    let shape = [frames.len(), height, width];
    let px = frames.iter().flat_map(|f| f.pixels.iter().map(|&p| p as f64 / 255.0)).collect();
    let mk = frames
        .iter()
        .flat_map(|f| f.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
        .collect();
    (
        Tensor::from_vec(&shape, px).expect("frame planes tile the shape"),
        Tensor::from_vec(&shape, mk).expect("frame planes tile the shape"),
    )
}

/// What a model sees of one segment.
#[derive(Clone, Debug)]
pub struct Observation {
    pub index: usize,
    /// `J x H x W` intensities in `[0, 1]`.
    pub frames: Tensor<f64>,
    /// `J x H x W`, 1 where the radar reading is valid.
    pub mask: Tensor<f64>,
    pub new_episode: bool,
}

/// A model driven by [`run_protocol`].
pub trait Model {
    fn name(&self) -> String;
    /// Receive the observed frames of the current segment.
    fn store(&mut self, frames: &Tensor<f64>, mask: &Tensor<f64>, new_episode: bool) -> Result<()>;
    /// Fine-tune on what has been stored so far. Returns whether parameters
    /// changed.
    fn update(&mut self) -> Result<bool>;
    /// `K x H x W` forecast following the last stored frames.
    fn predict(&mut self, horizon: usize) -> Result<Tensor<f64>>;
}

/// Holds the stream and the withheld targets; scores uploads.
pub struct Environment<'a> {
    stream: &'a ProtocolStream,
    cursor: usize,
    pending: bool,
    overall: SkillAccumulator,
    per_lead: Vec<SkillAccumulator>,
    per_sequence: Vec<SkillReport>,
    predictions: Vec<f64>,
}

impl<'a> Environment<'a> {
    pub fn new(stream: &'a ProtocolStream, thresholds: &[f64], variant: HssVariant) -> Self {
        let acc = SkillAccumulator::new(thresholds.to_vec(), variant);
        Environment {
            stream,
            cursor: 0,
            pending: false,
            per_lead: vec![acc.clone(); stream.out_frames],
            overall: acc,
            per_sequence: Vec::with_capacity(stream.len()),
            predictions: Vec::new(),
        }
    }

    /// Next observation, or `None` when the stream is exhausted. Each
    /// observation must be answered with [`Environment::upload`] first.
    pub fn observe(&mut self) -> Result<Option<Observation>> {
        if self.pending {
            return Err(Error::Protocol {
                sequence: self.cursor,
                detail: "observation requested before the forecast was uploaded".into(),
            });
        }
        let Some(seg) = self.stream.segments.get(self.cursor) else {
            return Ok(None);
        };
        self.pending = true;
        let (frames, mask) = frames_to_tensor(&seg.observed, self.stream.height, self.stream.width);
        Ok(Some(Observation {
            index: self.cursor,
            frames,
            mask,
            new_episode: seg.new_episode,
        }))
    }

    pub fn upload(&mut self, prediction: &Tensor<f64>) -> Result<()> {
        let s = self.stream;
        if !self.pending {
            return Err(Error::Protocol {
                sequence: self.cursor,
                detail: "upload without a pending observation".into(),
            });
        }
        let want = [s.out_frames, s.height, s.width];
        if prediction.shape() != want {
            return Err(Error::Protocol {
                sequence: self.cursor,
                detail: format!("prediction shape {:?}, expected {want:?}", prediction.shape()),
            });
        }
        if !prediction.is_finite() {
            return Err(Error::Protocol {
                sequence: self.cursor,
                detail: "prediction contains non-finite values".into(),
            });
        }
        let seg = &s.segments[self.cursor];
        let plane = s.height * s.width;
        let mut seq = SkillAccumulator::new(self.overall.thresholds.clone(), self.overall.variant);
        for (k, truth) in seg.target.iter().enumerate() {
            let p = &prediction.data()[k * plane..(k + 1) * plane];
            let t: Vec<f64> = truth.pixels.iter().map(|&v| v as f64 / 255.0).collect();
            seq.add_frame(p, &t, Some(&truth.mask))?;
            self.overall.add_frame(p, &t, Some(&truth.mask))?;
            self.per_lead[k].add_frame(p, &t, Some(&truth.mask))?;
        }
        self.per_sequence.push(seq.finish());
        self.predictions.extend_from_slice(prediction.data());
        self.pending = false;
        self.cursor += 1;
        Ok(())
    }

    /// All uploaded forecasts, `S x K x H x W`.
    pub fn predictions(&self) -> Tensor<f64> {
        let s = self.stream;
        Tensor::from_vec(&[self.cursor, s.out_frames, s.height, s.width], self.predictions.clone())
            .expect("uploads were shape-checked")
    }

    pub fn report(&self, model: String, config: String, mode: RunMode, wall_clock_secs: f64) -> RunReport {
        RunReport {
            model,
            config,
            mode,
            seeds: self.stream.seeds.clone(),
            wall_clock_secs,
            aggregate: self.overall.finish(),
            per_lead: self.per_lead.iter().map(SkillAccumulator::finish).collect(),
            per_sequence: self.per_sequence.clone(),
        }
    }
}

/// Scores of one protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub config: String,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub wall_clock_secs: f64,
    /// Over every evaluated frame.
    pub aggregate: SkillReport,
    /// One report per lead time.
    pub per_lead: Vec<SkillReport>,
    pub per_sequence: Vec<SkillReport>,
}

impl RunReport {
    pub fn label(&self) -> String {
        format!("{} ({})", self.model, self.mode)
    }

    /// Bit-wise equality of every score (wall clock and labels ignored).
    pub fn same_scores(&self, other: &RunReport) -> bool {
        let rows = |r: &RunReport| -> Vec<Vec<String>> {
            std::iter::once(&r.aggregate)
                .chain(&r.per_lead)
                .chain(&r.per_sequence)
                .map(|s| {
                    let mut v = s.csv_values();
                    v.push(s.frames.to_string());
                    v
                })
                .collect()
        };
        rows(self) == rows(other)
    }

    /// Per-sequence rows followed by the aggregate row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sequence".to_string(), "frames".to_string()];
        header.extend(self.aggregate.csv_header());
        w.write_record(&header)?;
        let rows = self
            .per_sequence
            .iter()
            .enumerate()
            .map(|(i, r)| (i.to_string(), r))
            .chain(std::iter::once(("all".to_string(), &self.aggregate)));
        for (id, r) in rows {
            let mut row = vec![id, r.frames.to_string()];
            row.extend(r.csv_values());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run report serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Write `run.toml`, `scores.csv` and the raw forecasts (`predictions.nwt`)
/// to `dir`.
pub fn save_run(dir: &Path, report: &RunReport, predictions: &Tensor<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.toml"), report.to_toml())?;
    fs::write(dir.join("scores.csv"), report.to_csv()?)?;
    save_tensor(predictions, &dir.join("predictions.nwt"))
}

/// Re-score saved forecasts (`S x K x H x W`) against the stream.
pub fn rescore(stream: &ProtocolStream, predictions: &Tensor<f64>, thresholds: &[f64], variant: HssVariant) -> Result<SkillReport> {
    let s = predictions.shape();
    if s.len() != 4 || s[0] != stream.len() || s[1..] != [stream.out_frames, stream.height, stream.width] {
        return Err(Error::shape("rescore", format!("predictions {s:?} do not match the stream")));
    }
    let mut env = Environment::new(stream, thresholds, variant);
    let per = s[1] * s[2] * s[3];
    let mut i = 0;
    while env.observe()?.is_some() {
        let p = Tensor::from_vec(&s[1..], predictions.data()[i * per..(i + 1) * per].to_vec())?;
        env.upload(&p)?;
        i += 1;
    }
    Ok(env.overall.finish())
}

/// Run the observe, store, (online) update, predict, upload loop over the
/// whole stream. Offline runs never call [`Model::update`].
pub fn run_protocol<M: Model + ?Sized>(
    model: &mut M,
    stream: &ProtocolStream,
    mode: RunMode,
    thresholds: &[f64],
    variant: HssVariant,
) -> Result<(RunReport, Tensor<f64>)> {
    let distinct: HashSet<u64> = thresholds.iter().map(|t| t.to_bits()).collect();
    if thresholds.is_empty() || distinct.len() != thresholds.len() {
        return Err(Error::InvalidArgument("thresholds must be a non-empty set".into()));
    }
    let started = Instant::now();
    let mut env = Environment::new(stream, thresholds, variant);
    while let Some(obs) = env.observe()? {
        let wrap = |e: Error| match e {
            Error::Protocol { .. } | Error::Divergence { .. } => e,
            other => Error::Protocol {
                sequence: obs.index,
                detail: other.to_string(),
            },
        };
        model.store(&obs.frames, &obs.mask, obs.new_episode).map_err(wrap)?;
        if mode == RunMode::Online {
            model.update().map_err(wrap)?;
        }
        let pred = model.predict(stream.out_frames).map_err(wrap)?;
        env.upload(&pred)?;
    }
    let report = env.report(model.name(), String::new(), mode, started.elapsed().as_secs_f64());
    Ok((report, env.predictions()))
}
