//! MovingMNIST++: digits that move, rotate, scale and fade over time.

use std::f64::consts::PI;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const GLYPH_SIZE: usize = 28;

/// Half-open sampling interval `[lo, hi)`; `lo == hi` is a constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn constant(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        if self.hi <= self.lo {
            v == self.lo
        } else {
            v >= self.lo && v < self.hi
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovingMnistConfig {
    pub digits: usize,
    pub frame_size: usize,
    /// Speed in px/frame; the direction is uniform on the circle.
    pub velocity: Interval,
    /// Per-frame scale factor.
    pub scale: Interval,
    /// Per-frame rotation in radians.
    pub rotation: Interval,
    /// Per-frame illumination factor.
    pub illumination: Interval,
    pub length: usize,
    pub in_frames: usize,
}

impl Default for MovingMnistConfig {
    fn default() -> Self {
        MovingMnistConfig {
            digits: 3,
            frame_size: 64,
            velocity: Interval::new(0.0, 3.6),
            scale: Interval::new(1.0 / 1.1, 1.1),
            rotation: Interval::new(-PI / 12.0, PI / 12.0),
            illumination: Interval::new(0.6, 1.0),
            length: 20,
            in_frames: 10,
        }
    }
}

impl MovingMnistConfig {
    /// No motion, scaling, rotation or fading.
    pub fn static_digits() -> Self {
        MovingMnistConfig {
            velocity: Interval::constant(0.0),
            scale: Interval::constant(1.0),
            rotation: Interval::constant(0.0),
            illumination: Interval::constant(1.0),
            ..Self::default()
        }
    }

    pub fn out_frames(&self) -> usize {
        self.length - self.in_frames
    }
}

/// 28x28 grayscale digit images with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct GlyphBank {
    glyphs: Vec<Vec<f64>>,
}

impl GlyphBank {
    pub fn new(glyphs: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(g) = glyphs.iter().find(|g| g.len() != GLYPH_SIZE * GLYPH_SIZE) {
            return Err(Error::InvalidArgument(format!(
                "glyphs must be {GLYPH_SIZE}x{GLYPH_SIZE}, got {} values",
                g.len()
            )));
        }
        Ok(GlyphBank { glyphs })
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn glyph(&self, id: usize) -> &[f64] {
        &self.glyphs[id]
    }

    /// Parse an IDX3 unsigned-byte image file (the MNIST distribution
    /// format). Images other than 28x28 are rejected.
    pub fn from_idx_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: u64, detail: String| Error::Format { offset, detail };
        if bytes.len() < 16 {
            return Err(fail(bytes.len() as u64, "truncated IDX header".into()));
        }
        let magic = BigEndian::read_u32(&bytes[0..4]);
        if magic != 0x0000_0803 {
            return Err(fail(0, format!("IDX magic {magic:#010x}, expected 0x00000803 (u8, rank 3)")));
        }
        let n = BigEndian::read_u32(&bytes[4..8]) as usize;
        let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
        let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
        if rows != GLYPH_SIZE || cols != GLYPH_SIZE {
            return Err(fail(8, format!("images are {rows}x{cols}, expected 28x28")));
        }
        let plane = rows * cols;
        let need = 16 + n * plane;
        if bytes.len() < need {
            return Err(fail(bytes.len() as u64, format!("truncated IDX payload: need {need} bytes")));
        }
        let glyphs = bytes[16..need]
            .chunks_exact(plane)
            .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
            .collect();
        GlyphBank::new(glyphs)
    }

    pub fn from_idx_file(path: &Path) -> Result<Self> {
        Self::from_idx_bytes(&std::fs::read(path)?)
    }

    /// Stroke-rendered digits 0-9 with random slant, size and stroke width;
    /// a stand-in when the MNIST files are not available.
    pub fn procedural(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glyphs = (0..count)
            .map(|i| render_digit(i % 10, &mut rng))
            .collect();
        GlyphBank { glyphs }
    }
}

/// Seven-segment style strokes in a unit box (x right, y down).
fn strokes(digit: usize) -> Vec<[(f64, f64); 2]> {
    let (tl, tr, ml, mr, bl, br) = ((0.0, 0.0), (1.0, 0.0), (0.0, 0.5), (1.0, 0.5), (0.0, 1.0), (1.0, 1.0));
    match digit {
        0 => vec![[tl, tr], [tr, br], [br, bl], [bl, tl]],
        1 => vec![[(0.55, 0.0), (0.55, 1.0)], [(0.25, 0.2), (0.55, 0.0)]],
        2 => vec![[tl, tr], [tr, mr], [mr, ml], [ml, bl], [bl, br]],
        3 => vec![[tl, tr], [tr, br], [br, bl], [ml, mr]],
        4 => vec![[tl, ml], [ml, mr], [tr, br]],
        5 => vec![[tr, tl], [tl, ml], [ml, mr], [mr, br], [br, bl]],
        6 => vec![[tr, tl], [tl, bl], [bl, br], [br, mr], [mr, ml]],
        7 => vec![[tl, tr], [tr, (0.4, 1.0)]],
        8 => vec![[tl, tr], [tr, br], [br, bl], [bl, tl], [ml, mr]],
        _ => vec![[mr, ml], [ml, tl], [tl, tr], [tr, br], [br, bl]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render_digit<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Vec<f64> {
    let width = rng.random_range(9.0..13.0);
    let height = rng.random_range(17.0..21.0);
    let slant = rng.random_range(-0.25..0.25);
    let stroke = rng.random_range(1.2..2.0);
    let (x0, y0) = (14.0 - width / 2.0, 14.0 - height / 2.0);
    let segs: Vec<[(f64, f64); 2]> = strokes(digit)
        .into_iter()
        .map(|s| {
            s.map(|(u, v)| {
                let y = y0 + v * height;
                (x0 + u * width + slant * (14.0 - y), y)
            })
        })
        .collect();
    let mut img = vec![0.0; GLYPH_SIZE * GLYPH_SIZE];
    for (k, px) in img.iter_mut().enumerate() {
        let p = ((k % GLYPH_SIZE) as f64 + 0.5, (k / GLYPH_SIZE) as f64 + 0.5);
        let d = segs
            .iter()
            .map(|s| segment_distance(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min);
        *px = (stroke + 0.5 - d).clamp(0.0, 1.0);
    }
    img
}

/// Motion state of one digit at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitState {
    pub glyph: usize,
    /// Centre `(x, y)` in pixels.
    pub position: [f64; 2],
    /// `(vx, vy)` in px/frame.
    pub velocity: [f64; 2],
    pub scale: f64,
    pub rotation: f64,
    pub illumination: f64,
}

/// Per-sequence rates of one digit.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitMotion {
    pub glyph: usize,
    pub speed: f64,
    pub scale_rate: f64,
    pub rotation_rate: f64,
    pub illumination_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SequenceSample {
    /// `T x S x S` in `[0, 1]`.
    pub frames: Tensor<f64>,
    pub motions: Vec<DigitMotion>,
    /// `states[t][d]`.
    pub states: Vec<Vec<DigitState>>,
}

fn bilinear(img: &[f64], x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= GLYPH_SIZE as f64 || yi >= GLYPH_SIZE as f64 {
            0.0
        } else {
            img[yi as usize * GLYPH_SIZE + xi as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1.0, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1.0) + fx * at(x0 + 1.0, y0 + 1.0))
}

fn composite(frame: &mut [f64], size: usize, glyph: &[f64], s: &DigitState) {
    let (sin, cos) = s.rotation.sin_cos();
    let c = GLYPH_SIZE as f64 / 2.0;
    let reach = c * s.scale * std::f64::consts::SQRT_2 + 1.0;
    let lo = |v: f64| ((v - reach).floor().max(0.0)) as usize;
    let hi = |v: f64| ((v + reach).ceil().min(size as f64)) as usize;
    for y in lo(s.position[1])..hi(s.position[1]) {
        for x in lo(s.position[0])..hi(s.position[0]) {
            let dx = x as f64 + 0.5 - s.position[0];
            let dy = y as f64 + 0.5 - s.position[1];
            // Inverse rotation and scaling into glyph coordinates.
            let gx = (cos * dx + sin * dy) / s.scale + c - 0.5;
            let gy = (-sin * dx + cos * dy) / s.scale + c - 0.5;
            let v = bilinear(glyph, gx, gy) * s.illumination;
            let px = &mut frame[y * size + x];
            *px = px.max(v);
        }
    }
}

/// Reflect `p` into `[lo, hi]`, flipping `v` on each bounce.
fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *p = (lo + hi) / 2.0;
        return;
    }
    for _ in 0..4 {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        } else {
            return;
        }
    }
    *p = p.clamp(lo, hi);
}

/// One sequence, deterministic in `seed`.
pub fn generate_sequence(config: &MovingMnistConfig, bank: &GlyphBank, seed: u64) -> Result<SequenceSample> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("glyph bank is empty".into()));
    }
    if config.length == 0 || config.frame_size == 0 || config.in_frames > config.length {
        return Err(Error::InvalidArgument(format!(
            "invalid sequence geometry: length {}, in_frames {}, frame {}",
            config.length, config.in_frames, config.frame_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.frame_size;
    let half = GLYPH_SIZE as f64 / 2.0;
    let mut motions = Vec::with_capacity(config.digits);
    let mut current = Vec::with_capacity(config.digits);
    for _ in 0..config.digits {
        let glyph = rng.random_range(0..bank.len());
        let speed = config.velocity.sample(&mut rng);
        let theta = rng.random_range(0.0..2.0 * PI);
        let (lo, hi) = (half.min(size as f64 / 2.0), (size as f64 - half).max(size as f64 / 2.0));
        let position = [Interval::new(lo, hi).sample(&mut rng), Interval::new(lo, hi).sample(&mut rng)];
        let m = DigitMotion {
            glyph,
            speed,
            scale_rate: config.scale.sample(&mut rng),
            rotation_rate: config.rotation.sample(&mut rng),
            illumination_rate: config.illumination.sample(&mut rng),
        };
        current.push(DigitState {
            glyph,
            position,
            velocity: [speed * theta.cos(), speed * theta.sin()],
            scale: 1.0,
            rotation: 0.0,
            illumination: 1.0,
        });
        motions.push(m);
    }

    let mut frames = vec![0.0; config.length * size * size];
    let mut states = Vec::with_capacity(config.length);
    for t in 0..config.length {
        let frame = &mut frames[t * size * size..(t + 1) * size * size];
        for s in &current {
            composite(frame, size, bank.glyph(s.glyph), s);
        }
        states.push(current.clone());
        for (s, m) in current.iter_mut().zip(&motions) {
            s.scale *= m.scale_rate;
            s.rotation += m.rotation_rate;
            s.illumination *= m.illumination_rate;
            let extent = (half * s.scale).min(size as f64 / 2.0);
            for a in 0..2 {
                s.position[a] += s.velocity[a];
                bounce(&mut s.position[a], &mut s.velocity[a], extent, size as f64 - extent);
            }
        }
    }
    for v in &mut frames {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SequenceSample {
        frames: Tensor::from_vec(&[config.length, size, size], frames)?,
        motions,
        states,
    })
}

/// Seed of sequence `index` in a run seeded by `base` (SplitMix64 mixing).
pub fn sequence_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` sequences generated in parallel; sequence `i` uses
/// `sequence_seed(base, i)`.
pub fn generate_batch(
    config: &MovingMnistConfig,
    bank: &GlyphBank,
    base: u64,
    count: usize,
) -> Result<Vec<SequenceSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sequence(config, bank, sequence_seed(base, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend((0..2 * 784).map(|i| (i % 256) as u8));
        let bank = GlyphBank::from_idx_bytes(&bytes).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.glyph(1)[0], (784 % 256) as f64 / 255.0);
        assert!(GlyphBank::from_idx_bytes(&bytes[..100]).is_err());
    }

    #[test]
    fn procedural_glyphs_have_ink() {
        let bank = GlyphBank::procedural(10, 0);
        for i in 0..10 {
            let ink: f64 = bank.glyph(i).iter().sum();
            assert!(ink > 20.0, "digit {i} ink {ink}");
        }
    }

    #[test]
    fn bounce_reflects() {
        let (mut p, mut v) = (-1.0, -2.0);
        bounce(&mut p, &mut v, 0.0, 10.0);
        assert_eq!((p, v), (1.0, 2.0));
    }
}
