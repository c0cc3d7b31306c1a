//! `NWD1` dataset files.
//!
//! Layout, little-endian: magic `NWD1`, u16 version, u16 height, u16 width,
//! u8 kind (0 = MovingMNIST++, 1 = radar), split metadata as three u32
//! (train, validation, test days), u32 record count, then per record: u64
//! seed, u8 new-episode flag, u16 frame count, the frames as u8 planes and
//! the mask as a bitset (LSB first, padded to a whole byte).

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::data::denoise::RadarFrame;
use crate::engine::serialize::ByteReader;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"NWD1";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    MovingMnist = 0,
    Radar = 1,
}

/// Split bookkeeping; radar defaults mirror the 812/50/131-day split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitMeta {
    pub train_days: u32,
    pub valid_days: u32,
    pub test_days: u32,
}

impl Default for SplitMeta {
    fn default() -> Self {
        SplitMeta {
            train_days: 812,
            valid_days: 50,
            test_days: 131,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub seed: u64,
    pub new_episode: bool,
    /// `frames x height x width`.
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl Record {
    pub fn frame_count(&self, height: usize, width: usize) -> usize {
        self.pixels.len() / (height * width).max(1)
    }

    pub fn frames(&self, height: usize, width: usize) -> Vec<RadarFrame> {
        let plane = height * width;
        self.pixels
            .chunks_exact(plane)
            .zip(self.mask.chunks_exact(plane))
            .map(|(p, m)| RadarFrame {
                height,
                width,
                pixels: p.to_vec(),
                mask: m.to_vec(),
            })
            .collect()
    }

    pub fn from_frames(seed: u64, new_episode: bool, frames: &[RadarFrame]) -> Self {
        Record {
            seed,
            new_episode,
            pixels: frames.iter().flat_map(|f| f.pixels.iter().copied()).collect(),
            mask: frames.iter().flat_map(|f| f.mask.iter().copied()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub split: SplitMeta,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, height: usize, width: usize) -> Self {
        Dataset {
            kind,
            height,
            width,
            split: SplitMeta::default(),
            records: Vec::new(),
        }
    }

    /// Record index ranges of the train, validation and test splits, taken
    /// in order from the split counts and clipped to the records present.
    pub fn split_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let n = self.records.len();
        let a = (self.split.train_days as usize).min(n);
        let b = (a + self.split.valid_days as usize).min(n);
        let c = (b + self.split.test_days as usize).min(n);
        [0..a, a..b, b..c]
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        let plane = self.height * self.width;
        if plane == 0 || record.pixels.len() % plane != 0 || record.mask.len() != record.pixels.len() {
            return Err(Error::shape(
                "dataset_push",
                format!(
                    "record of {} pixels / {} mask bits does not tile {}x{} frames",
                    record.pixels.len(),
                    record.mask.len(),
                    self.height,
                    self.width
                ),
            ));
        }
        if record.pixels.len() / plane > u16::MAX as usize {
            return Err(Error::InvalidArgument("at most 65535 frames per record".into()));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let w = |out: &mut Vec<u8>, v: u16| out.write_u16::<LittleEndian>(v).expect("vec write");
        w(&mut out, DATASET_VERSION);
        w(&mut out, self.height as u16);
        w(&mut out, self.width as u16);
        out.push(self.kind as u8);
        for d in [self.split.train_days, self.split.valid_days, self.split.test_days] {
            out.write_u32::<LittleEndian>(d).expect("vec write");
        }
        out.write_u32::<LittleEndian>(self.records.len() as u32).expect("vec write");
        let plane = (self.height * self.width).max(1);
        for r in &self.records {
            out.write_u64::<LittleEndian>(r.seed).expect("vec write");
            out.push(u8::from(r.new_episode));
            w(&mut out, (r.pixels.len() / plane) as u16);
            out.extend_from_slice(&r.pixels);
            let mut bits = vec![0u8; r.mask.len().div_ceil(8)];
            for (i, &m) in r.mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Format {
                offset: at,
                detail: format!("unsupported dataset version {version}"),
            });
        }
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        if height == 0 || width == 0 {
            return r.fail("zero frame geometry");
        }
        let at = r.offset();
        let kind = match r.u8("kind")? {
            0 => DatasetKind::MovingMnist,
            1 => DatasetKind::Radar,
            k => {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("unknown dataset kind {k}"),
                })
            }
        };
        let split = SplitMeta {
            train_days: r.u32("split")?,
            valid_days: r.u32("split")?,
            test_days: r.u32("split")?,
        };
        let count = r.u32("record count")? as usize;
        let plane = height * width;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let seed = r.u64("record seed")?;
            let at = r.offset();
            let new_episode = match r.u8("episode flag")? {
                0 => false,
                1 => true,
                f => {
                    return Err(Error::Format {
                        offset: at,
                        detail: format!("episode flag must be 0 or 1, got {f}"),
                    })
                }
            };
            let frames = r.u16("frame count")? as usize;
            let pixels = r.take(frames * plane, "frame planes")?.to_vec();
            let bits = r.take((frames * plane).div_ceil(8), "mask bitset")?;
            let mask = (0..frames * plane).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            records.push(Record {
                seed,
                new_episode,
                pixels,
                mask,
            });
        }
        if !r.is_at_end() {
            return r.fail("trailing bytes after dataset");
        }
        Ok(Dataset {
            kind,
            height,
            width,
            split,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_round_trips() {
        let d = Dataset::new(DatasetKind::Radar, 4, 3);
        let b = d.to_bytes();
        assert_eq!(&b[b.len() - 4..], &0u32.to_le_bytes());
        assert_eq!(Dataset::from_bytes(&b).unwrap(), d);
    }

    #[test]
    fn record_round_trip_and_truncation() {
        let mut d = Dataset::new(DatasetKind::MovingMnist, 2, 5);
        d.push(Record {
            seed: u64::MAX - 3,
            new_episode: true,
            pixels: (0..20).collect(),
            mask: (0..20).map(|i| i % 3 != 0).collect(),
        })
        .unwrap();
        let b = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&b).unwrap(), d);
        match Dataset::from_bytes(&b[..b.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, b.len() - 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Dataset::from_bytes(b"NWD2"), Err(Error::Format { offset: 0, .. })));
    }
}
