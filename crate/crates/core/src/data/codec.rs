//! Conversions between reflectivity (dBZ), 8-bit radar pixels and rain rate.

use crate::error::{Error, Result};

/// Z-R coefficient `a`.
pub const ZR_A: f64 = 58.53;
/// Z-R exponent `b`.
pub const ZR_B: f64 = 1.56;

/// Rain-rate thresholds (mm/h) at which skill scores are reported.
pub const THRESHOLDS: [f64; 5] = [0.5, 2.0, 5.0, 10.0, 30.0];

/// Width of one pixel step in dBZ.
pub const DBZ_STEP: f64 = 70.0 / 255.0;

/// `floor(255 * (dbz + 10) / 70 + 0.5)`, clipped to `[0, 255]`. NaN maps to 0.
pub fn dbz_to_pixel(dbz: f64) -> u8 {
    let p = (255.0 * (dbz + 10.0) / 70.0 + 0.5).floor();
    if p.is_nan() {
        0
    } else {
        p.clamp(0.0, 255.0) as u8
    }
}

pub fn pixel_to_dbz(p: u8) -> f64 {
    pixel_value_to_dbz(p as f64)
}

/// [`pixel_to_dbz`] for fractional pixel values (model outputs).
pub fn pixel_value_to_dbz(p: f64) -> f64 {
    70.0 * p / 255.0 - 10.0
}

/// `10 log10(a) + 10 b log10(R)`.
pub fn rainrate_to_dbz(r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("rain rate must be positive and finite, got {r}")));
    }
    Ok(10.0 * ZR_A.log10() + 10.0 * ZR_B * r.log10())
}

pub fn dbz_to_rainrate(dbz: f64) -> f64 {
    10f64.powf((dbz - 10.0 * ZR_A.log10()) / (10.0 * ZR_B))
}

pub fn pixel_to_rainrate(p: u8) -> f64 {
    dbz_to_rainrate(pixel_to_dbz(p))
}

/// Rain rate of an intensity in `[0, 1]` (pixel / 255).
pub fn intensity_to_rainrate(v: f64) -> f64 {
    dbz_to_rainrate(pixel_value_to_dbz(255.0 * v))
}

/// Inverse of [`intensity_to_rainrate`] (unclipped).
pub fn rainrate_to_intensity(r: f64) -> Result<f64> {
    Ok((rainrate_to_dbz(r)? + 10.0) / 70.0)
}

/// Pixel value of a rain-rate threshold via R -> dBZ -> pixel.
pub fn threshold_pixel(tau: f64) -> Result<u8> {
    Ok(dbz_to_pixel(rainrate_to_dbz(tau)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_formula_edges() {
        assert_eq!(dbz_to_pixel(60.0), 255);
        assert_eq!(dbz_to_pixel(-10.0), 0);
        assert_eq!(dbz_to_pixel(100.0), 255);
        assert_eq!(dbz_to_pixel(-40.0), 0);
    }

    #[test]
    fn unit_rain_rate() {
        assert!((rainrate_to_dbz(1.0).unwrap() - 17.673_785_241_141_805).abs() < 1e-9);
        assert!(rainrate_to_dbz(0.0).is_err());
        assert!(rainrate_to_dbz(-1.0).is_err());
    }

    #[test]
    fn half_mm_threshold_is_pixel_84() {
        assert_eq!(threshold_pixel(0.5).unwrap(), 84);
    }
}
