use serde::{Deserialize, Serialize};

use super::{confusion, csi, hss, weight_map, HssVariant, LossMode};
use crate::data::codec::{intensity_to_rainrate, THRESHOLDS};
use crate::error::{Error, Result};

/// Frame-averaged scores. Skill scores average only the frames where they
/// are defined and are NaN if no frame qualified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub thresholds: Vec<f64>,
    pub csi: Vec<f64>,
    pub hss: Vec<f64>,
    pub bmse: f64,
    pub bmae: f64,
    pub mse: f64,
    pub mae: f64,
    pub frames: usize,
}

impl SkillReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.thresholds.iter().map(|t| format!("csi_{t}")).collect();
        h.extend(self.thresholds.iter().map(|t| format!("hss_{t}")));
        h.extend(["bmse", "bmae", "mse", "mae"].map(String::from));
        h
    }

    pub fn csv_values(&self) -> Vec<String> {
        self.csi
            .iter()
            .chain(&self.hss)
            .chain([&self.bmse, &self.bmae, &self.mse, &self.mae])
            .map(|v| format!("{v}"))
            .collect()
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_header())?;
        w.write_record(self.csv_values())?;
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
            .expect("csv output is UTF-8"))
    }
}

/// Running sums behind a [`SkillReport`]; frames are added one at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillAccumulator {
    pub thresholds: Vec<f64>,
    pub variant: HssVariant,
    csi_sum: Vec<f64>,
    csi_n: Vec<usize>,
    hss_sum: Vec<f64>,
    hss_n: Vec<usize>,
    bmse: f64,
    bmae: f64,
    mse: f64,
    mae: f64,
    frames: usize,
}

impl Default for SkillAccumulator {
    fn default() -> Self {
        Self::new(THRESHOLDS.to_vec(), HssVariant::Printed)
    }
}

impl SkillAccumulator {
    pub fn new(thresholds: Vec<f64>, variant: HssVariant) -> Self {
        let k = thresholds.len();
        SkillAccumulator {
            thresholds,
            variant,
            csi_sum: vec![0.0; k],
            csi_n: vec![0; k],
            hss_sum: vec![0.0; k],
            hss_n: vec![0; k],
            bmse: 0.0,
            bmae: 0.0,
            mse: 0.0,
            mae: 0.0,
            frames: 0,
        }
    }

    /// Score one frame of `[0, 1]` intensities. Errors are measured in
    /// intensity units; weights and thresholds use the rain rate of the
    /// (clamped) values.
    pub fn add_frame(&mut self, pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
            return Err(Error::shape("skill_scores", "prediction, truth and mask lengths differ"));
        }
        let rate = |v: &f64| intensity_to_rainrate(v.clamp(0.0, 1.0));
        let pr: Vec<f64> = pred.iter().map(rate).collect();
        let tr: Vec<f64> = truth.iter().map(rate).collect();
        let w = weight_map(&tr, mask, LossMode::Balanced)?;
        for (i, ((&p, &t), &wi)) in pred.iter().zip(truth).zip(&w).enumerate() {
            let d = t - p;
            self.bmse += wi * d * d;
            self.bmae += wi * d.abs();
            if mask.is_none_or(|m| m[i]) {
                self.mse += d * d;
                self.mae += d.abs();
            }
        }
        for (k, &tau) in self.thresholds.iter().enumerate() {
            let c = confusion(&pr, &tr, tau, mask)?;
            if let Some(v) = csi(&c) {
                self.csi_sum[k] += v;
                self.csi_n[k] += 1;
            }
            if let Some(v) = hss(&c, self.variant) {
                self.hss_sum[k] += v;
                self.hss_n[k] += 1;
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn finish(&self) -> SkillReport {
        let avg = |s: &[f64], n: &[usize]| -> Vec<f64> {
            s.iter()
                .zip(n)
                .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
                .collect()
        };
        let per = |v: f64| if self.frames == 0 { f64::NAN } else { v / self.frames as f64 };
        SkillReport {
            thresholds: self.thresholds.clone(),
            csi: avg(&self.csi_sum, &self.csi_n),
            hss: avg(&self.hss_sum, &self.hss_n),
            bmse: per(self.bmse),
            bmae: per(self.bmae),
            mse: per(self.mse),
            mae: per(self.mae),
            frames: self.frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_column_order() {
        let r = SkillAccumulator::default().finish();
        assert_eq!(
            r.csv_header().join(","),
            "csi_0.5,csi_2,csi_5,csi_10,csi_30,hss_0.5,hss_2,hss_5,hss_10,hss_30,bmse,bmae,mse,mae"
        );
    }

    #[test]
    fn perfect_frame() {
        let mut acc = SkillAccumulator::default();
        let f = vec![0.0, 0.5, 0.7, 0.9];
        acc.add_frame(&f, &f, None).unwrap();
        let r = acc.finish();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.csi[0], 1.0);
        assert_eq!(r.frames, 1);
    }
}
