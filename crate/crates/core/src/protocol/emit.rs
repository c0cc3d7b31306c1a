use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::RunReport;
use crate::error::{Error, Result};
use crate::metrics::kendall_tau;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flag {
    None,
    Best,
    Second,
}

impl Flag {
    fn as_str(self) -> &'static str {
        match self {
            Flag::None => "",
            Flag::Best => "best",
            Flag::Second => "second",
        }
    }
}

/// Best and second-best markers for one column. Ties share a flag, NaN is
/// never flagged and a single entry gets no flags.
pub fn rank_flags(values: &[f64], higher_is_better: bool) -> Vec<Flag> {
    let mut flags = vec![Flag::None; values.len()];
    if values.len() < 2 {
        return flags;
    }
    let better = |a: f64, b: f64| if higher_is_better { a > b } else { a < b };
    let pick = |exclude: Option<f64>| {
        values
            .iter()
            .copied()
            .filter(|v| !v.is_nan() && Some(*v) != exclude)
            .fold(None, |acc: Option<f64>, v| match acc {
                Some(a) if !better(v, a) => Some(a),
                _ => Some(v),
            })
    };
    let Some(first) = pick(None) else {
        return flags;
    };
    let second = pick(Some(first));
    for (f, &v) in flags.iter_mut().zip(values) {
        if v == first {
            *f = Flag::Best;
        } else if Some(v) == second {
            *f = Flag::Second;
        }
    }
    flags
}

/// Files written by [`report_emit`].
#[derive(Clone, Debug)]
pub struct ReportArtifacts {
    pub skill_table: PathBuf,
    /// Absent with fewer than two reports.
    pub kendall_table: Option<PathBuf>,
    pub lead_table: PathBuf,
    pub lead_plot: PathBuf,
    pub labels: Vec<String>,
    pub columns: Vec<String>,
    /// `labels.len() x columns.len()`.
    pub flags: Vec<Vec<Flag>>,
    /// Rows mse, mae, bmse, bmae; columns csi then hss per threshold. `None`
    /// where tau is undefined.
    pub kendall: Vec<Vec<Option<f64>>>,
}

fn columns_of(r: &RunReport) -> (Vec<String>, Vec<f64>) {
    let a = &r.aggregate;
    let values = a.csi.iter().chain(&a.hss).chain([&a.bmse, &a.bmae, &a.mse, &a.mae]).copied().collect();
    (a.csv_header(), values)
}

/// Write the skill table with ranking flags, the Kendall tau matrix between
/// error measures and skill scores over the pool, and per-lead error curves
/// (CSV and SVG) into `dir`.
pub fn report_emit(reports: &[RunReport], dir: &Path) -> Result<ReportArtifacts> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("report_emit needs at least one report".into()))?;
    let thresholds = &first.aggregate.thresholds;
    if let Some(bad) = reports
        .iter()
        .find(|r| &r.aggregate.thresholds != thresholds || r.per_lead.iter().any(|p| &p.thresholds != thresholds))
    {
        return Err(Error::InvalidArgument(format!(
            "inconsistent threshold sets: {:?} in `{}` vs {:?}",
            bad.aggregate.thresholds,
            bad.label(),
            thresholds
        )));
    }
    fs::create_dir_all(dir)?;
    let labels: Vec<String> = reports.iter().map(RunReport::label).collect();
    let (columns, _) = columns_of(first);
    let values: Vec<Vec<f64>> = reports.iter().map(|r| columns_of(r).1).collect();
    let nt = thresholds.len();

    let mut flags = vec![vec![Flag::None; columns.len()]; reports.len()];
    for c in 0..columns.len() {
        let col: Vec<f64> = values.iter().map(|v| v[c]).collect();
        for (r, f) in rank_flags(&col, c < 2 * nt).into_iter().enumerate() {
            flags[r][c] = f;
        }
    }
    let skill_table = dir.join("skill_table.csv");
    let mut w = csv::Writer::from_path(&skill_table)?;
    let mut header = vec!["model".to_string()];
    for c in &columns {
        header.push(c.clone());
        header.push(format!("{c}_flag"));
    }
    w.write_record(&header)?;
    for (r, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        for c in 0..columns.len() {
            row.push(values[r][c].to_string());
            row.push(flags[r][c].as_str().to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut kendall = Vec::new();
    let mut kendall_table = None;
    if reports.len() >= 2 {
        let path = dir.join("kendall_tau.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["measure".to_string()];
        header.extend(columns[..2 * nt].iter().cloned());
        w.write_record(&header)?;
        for (name, idx) in [("mse", 2 * nt + 2), ("mae", 2 * nt + 3), ("bmse", 2 * nt), ("bmae", 2 * nt + 1)] {
            let err: Vec<f64> = values.iter().map(|v| v[idx]).collect();
            let row: Vec<Option<f64>> = (0..2 * nt)
                .map(|c| {
                    let skill: Vec<f64> = values.iter().map(|v| v[c]).collect();
                    kendall_tau(&err, &skill).ok()
                })
                .collect();
            let mut rec = vec![name.to_string()];
            rec.extend(row.iter().map(|t| t.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
            kendall.push(row);
        }
        w.flush()?;
        kendall_table = Some(path);
    }

    let lead_table = dir.join("lead_curves.csv");
    let mut w = csv::Writer::from_path(&lead_table)?;
    w.write_record(["model", "lead", "mse", "mae", "bmse", "bmae"])?;
    for (r, label) in reports.iter().zip(&labels) {
        for (k, p) in r.per_lead.iter().enumerate() {
            w.write_record([
                label.clone(),
                (k + 1).to_string(),
                p.mse.to_string(),
                p.mae.to_string(),
                p.bmse.to_string(),
                p.bmae.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let lead_plot = dir.join("lead_curves.svg");
    plot_leads(reports, &labels, &lead_plot).map_err(|e| Error::Plot(e.to_string()))?;

    Ok(ReportArtifacts {
        skill_table,
        kendall_table,
        lead_table,
        lead_plot,
        labels,
        columns,
        flags,
        kendall,
    })
}

fn plot_leads(reports: &[RunReport], labels: &[String], path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (1200, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((1, 2));
    let leads = reports.iter().map(|r| r.per_lead.len()).max().unwrap_or(1).max(1);
    let series: [(&str, fn(&crate::metrics::SkillReport) -> f64); 2] = [("MSE", |p| p.mse), ("B-MSE", |p| p.bmse)];
    for (panel, (title, get)) in panels.iter().zip(series) {
        let ymax = reports
            .iter()
            .flat_map(|r| r.per_lead.iter().map(get))
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let ymax = if ymax > 0.0 { ymax * 1.05 } else { 1.0 };
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{title} by lead time"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(64)
            .build_cartesian_2d(1f64..leads as f64, 0f64..ymax)?;
        chart.configure_mesh().x_desc("lead (frames)").y_desc(title).draw()?;
        for (i, (r, label)) in reports.iter().zip(labels).enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = r
                .per_lead
                .iter()
                .enumerate()
                .filter(|(_, p)| get(p).is_finite())
                .map(|(k, p)| ((k + 1) as f64, get(p)))
                .collect();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}
