//! Radar frames, the Mahalanobis-distance clutter detector and the
//! low-intensity value filter.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// One 8-bit radar image with its validity mask (`false` = masked out).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RadarFrame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl RadarFrame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, mask: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width || mask.len() != height * width {
            return Err(Error::shape(
                "radar_frame",
                format!(
                    "{height}x{width} frame needs {} pixels and mask entries, got {} and {}",
                    height * width,
                    pixels.len(),
                    mask.len()
                ),
            ));
        }
        Ok(RadarFrame {
            height,
            width,
            pixels,
            mask,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        RadarFrame {
            height,
            width,
            pixels: vec![value; height * width],
            mask: vec![true; height * width],
        }
    }
}

/// Pixel values strictly between 0 and this are treated as clutter.
pub const CLUTTER_CEILING: u8 = 71;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ClutterAction {
    /// Set the pixel value to 0.
    #[default]
    Zero,
    /// Leave the value and clear the mask bit.
    Mask,
}

/// Remove pixels with `0 < p < 71`.
pub fn clutter_value_filter(frame: &RadarFrame, action: ClutterAction) -> RadarFrame {
    let mut out = frame.clone();
    for (p, m) in out.pixels.iter_mut().zip(out.mask.iter_mut()) {
        if *p > 0 && *p < CLUTTER_CEILING {
            match action {
                ClutterAction::Zero => *p = 0,
                ClutterAction::Mask => *m = false,
            }
        }
    }
    out
}

/// Locations inside the inscribed circle of an `h x w` grid.
pub fn circular_boundary(height: usize, width: usize) -> Vec<bool> {
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let r = cy.min(cx);
    (0..height * width)
        .map(|k| {
            let dy = (k / width) as f64 + 0.5 - cy;
            let dx = (k % width) as f64 + 0.5 - cx;
            dx * dx + dy * dy <= r * r
        })
        .collect()
}

pub const FEATURE_DIM: usize = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocationClass {
    Inlier,
    Outlier,
    OutOfBoundary,
}

/// Mahalanobis outlier model over per-location feature vectors.
#[derive(Clone, Debug)]
pub struct OutlierModel {
    /// Grid size of the fitted frames (`0 x 0` for [`OutlierModel::fit_features`]).
    pub height: usize,
    pub width: usize,
    /// Grid index of each fitted location.
    pub locations: Vec<usize>,
    pub features: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Sample covariance with `N - 1` normalisation.
    pub covariance: DMatrix<f64>,
    pub pseudo_inverse: DMatrix<f64>,
    /// Distance of each fitted location.
    pub distances: Vec<f64>,
    /// `mean(D) + 3 std(D)` (population standard deviation).
    pub threshold: f64,
}

/// Moore-Penrose pseudoinverse of a symmetric positive semi-definite
/// matrix; eigenvalues below `max * n * eps` are treated as zero.
pub fn symmetric_pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0f64, |a, &v| a.max(v.abs()));
    let tol = max * n as f64 * f64::EPSILON;
    let mut inv = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > tol && lambda != 0.0 {
            let u = eig.eigenvectors.column(k);
            inv += (u * u.transpose()) / lambda;
        }
    }
    inv
}

impl OutlierModel {
    /// Fit on one feature vector per row (at least 2 rows).
    pub fn fit_features(features: DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "outlier model needs at least 2 locations, got {n}"
            )));
        }
        let d = features.ncols();
        // Shift by the first row before averaging so identical rows centre
        // to exact zeros.
        let origin = features.row(0).clone_owned();
        let mut shifted = features.clone();
        for mut row in shifted.row_iter_mut() {
            row -= &origin;
        }
        let shift_mean = shifted.row_mean();
        let mean: DVector<f64> = (origin + &shift_mean).transpose();
        let mut centered = shifted;
        for mut row in centered.row_iter_mut() {
            row -= &shift_mean;
        }
        let covariance = centered.transpose() * &centered / (n - 1) as f64;
        let pseudo_inverse = symmetric_pseudo_inverse(&covariance);
        let distances: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = centered.row(i).transpose();
                (x.transpose() * &pseudo_inverse * &x)[(0, 0)].max(0.0).sqrt()
            })
            .collect();
        let m = distances.iter().sum::<f64>() / n as f64;
        let var = distances.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        debug_assert_eq!(mean.len(), d);
        Ok(OutlierModel {
            height: 0,
            width: 0,
            locations: (0..n).collect(),
            features,
            mean,
            covariance,
            pseudo_inverse,
            distances,
            threshold: m + 3.0 * var.sqrt(),
        })
    }

    /// `D_M(x)` for an arbitrary feature vector.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let c = x - &self.mean;
        (c.transpose() * &self.pseudo_inverse * &c)[(0, 0)].max(0.0).sqrt()
    }
}

/// Occurrence ratios of values 1..=255 at each in-boundary location.
pub fn location_features(frames: &[RadarFrame], boundary: &[bool]) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    };
    let (h, w) = (first.height, first.width);
    if frames.iter().any(|f| f.height != h || f.width != w) || boundary.len() != h * w {
        return Err(Error::shape("fit_outlier_model", "frames and boundary must share one grid"));
    }
    let locations: Vec<usize> = (0..h * w).filter(|&k| boundary[k]).collect();
    let t = frames.len() as f64;
    let mut features = DMatrix::zeros(locations.len(), FEATURE_DIM);
    for (row, &k) in locations.iter().enumerate() {
        for f in frames {
            let p = f.pixels[k];
            if p > 0 {
                features[(row, p as usize - 1)] += 1.0 / t;
            }
        }
    }
    Ok((locations, features))
}

/// Fit on a frame sequence; locations outside `boundary` are excluded.
pub fn fit_outlier_model(frames: &[RadarFrame], boundary: &[bool]) -> Result<OutlierModel> {
    let (locations, features) = location_features(frames, boundary)?;
    let mut model = OutlierModel::fit_features(features)?;
    model.height = frames[0].height;
    model.width = frames[0].width;
    model.locations = locations;
    Ok(model)
}

/// Per-location labels on the fitted grid: distances above the threshold
/// are outliers.
pub fn classify_outliers(model: &OutlierModel) -> Vec<LocationClass> {
    let mut out = vec![LocationClass::OutOfBoundary; model.height * model.width];
    if out.is_empty() {
        out = vec![LocationClass::Inlier; model.locations.len()];
    }
    for (&k, &d) in model.locations.iter().zip(&model.distances) {
        out[k] = if d > model.threshold {
            LocationClass::Outlier
        } else {
            LocationClass::Inlier
        };
    }
    out
}

/// Clear the mask at outliers and out-of-boundary locations.
pub fn apply_location_mask(frame: &mut RadarFrame, classes: &[LocationClass]) {
    for (m, c) in frame.mask.iter_mut().zip(classes) {
        if *c != LocationClass::Inlier {
            *m = false;
        }
    }
}

/// A synthetic clutter-detection scene.
#[derive(Clone, Debug)]
pub struct ClutterBenchmark {
    pub frames: Vec<RadarFrame>,
    pub boundary: Vec<bool>,
    /// Locations pinned to a constant value.
    pub clutter: Vec<usize>,
    pub clutter_value: u8,
}

impl ClutterBenchmark {
    /// `size x size` frames inside a circular boundary. Clean locations draw
    /// i.i.d. weak echoes (0 with probability 0.6, else uniform on 1..=24);
    /// `clutter_fraction` of the in-boundary locations are pinned at 200.
    pub fn generate(size: usize, frames: usize, clutter_fraction: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boundary = circular_boundary(size, size);
        let inside: Vec<usize> = (0..size * size).filter(|&k| boundary[k]).collect();
        let n_clutter = ((inside.len() as f64 * clutter_fraction).round() as usize).max(1);
        let mut clutter: Vec<usize> = rand::seq::index::sample(&mut rng, inside.len(), n_clutter)
            .into_iter()
            .map(|i| inside[i])
            .collect();
        clutter.sort_unstable();
        let clutter_value = 200;
        let mut is_clutter = vec![false; size * size];
        for &k in &clutter {
            is_clutter[k] = true;
        }
        let frames = (0..frames)
            .map(|_| {
                let pixels = (0..size * size)
                    .map(|k| {
                        if !boundary[k] {
                            0
                        } else if is_clutter[k] {
                            clutter_value
                        } else if rng.random_bool(0.6) {
                            0
                        } else {
                            rng.random_range(1..=24)
                        }
                    })
                    .collect();
                RadarFrame::new(size, size, pixels, boundary.clone()).unwrap()
            })
            .collect();
        ClutterBenchmark {
            frames,
            boundary,
            clutter,
            clutter_value,
        }
    }

    /// `(detection rate on clutter, false-positive rate on clean locations)`.
    pub fn score(&self, classes: &[LocationClass]) -> (f64, f64) {
        let mut is_clutter = vec![false; classes.len()];
        for &k in &self.clutter {
            is_clutter[k] = true;
        }
        let (mut hit, mut fp, mut clean) = (0usize, 0usize, 0usize);
        for (k, c) in classes.iter().enumerate() {
            if !self.boundary[k] {
                continue;
            }
            let flagged = *c == LocationClass::Outlier;
            if is_clutter[k] {
                hit += usize::from(flagged);
            } else {
                clean += 1;
                fp += usize::from(flagged);
            }
        }
        (hit as f64 / self.clutter.len() as f64, fp as f64 / clean.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_filter_boundaries() {
        let f = clutter_value_filter(&RadarFrame::filled(2, 2, 70), ClutterAction::Zero);
        assert!(f.pixels.iter().all(|&p| p == 0));
        let f = clutter_value_filter(&RadarFrame::filled(2, 2, 71), ClutterAction::Zero);
        assert!(f.pixels.iter().all(|&p| p == 71));
        let z = RadarFrame::filled(2, 2, 0);
        assert_eq!(clutter_value_filter(&z, ClutterAction::Zero), z);
        let m = clutter_value_filter(&RadarFrame::filled(1, 1, 5), ClutterAction::Mask);
        assert_eq!((m.pixels[0], m.mask[0]), (5, false));
    }

    #[test]
    fn identical_locations_have_no_outliers() {
        let frames: Vec<RadarFrame> = (0..5).map(|i| RadarFrame::filled(4, 4, 10 * i as u8)).collect();
        let model = fit_outlier_model(&frames, &[true; 16]).unwrap();
        assert!(model.covariance.iter().all(|&v| v == 0.0));
        assert!(model.distances.iter().all(|&d| d == 0.0));
        assert!(classify_outliers(&model).iter().all(|c| *c == LocationClass::Inlier));
    }

    #[test]
    fn too_few_locations_rejected() {
        let mut b = vec![false; 4];
        b[0] = true;
        assert!(fit_outlier_model(&[RadarFrame::filled(2, 2, 1)], &b).is_err());
    }
}
