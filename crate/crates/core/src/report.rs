//! CSV tables and SVG scatter plots for fits and their standard errors.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One estimated roll call with any number of SE sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    /// Used as a file-name prefix.
    pub label: String,
    pub legislator_ids: Vec<String>,
    pub estimate: Vec<f64>,
    /// Aligned truth, for simulated data.
    pub truth: Option<Vec<f64>>,
    pub missing_rates: Vec<f64>,
    /// `(name, SE per legislator)`.
    pub se: Vec<(String, Vec<Option<f64>>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n_legislators: usize,
    pub n_bills: usize,
    pub method: String,
    pub seconds: f64,
}

const SIZE: (u32, u32) = (640, 480);

/// `(legend label, color, points)`.
type Group = (String, RGBColor, Vec<(f64, f64)>);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad)..(hi + pad)
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn scatter(
    path: &Path,
    title: &str,
    axes: (&str, &str),
    groups: &[Group],
    diagonal: bool,
) -> Result<()> {
    let all = || groups.iter().flat_map(|g| g.2.iter());
    let (mut xlo, mut xhi) = bounds(all().map(|p| p.0));
    let (mut ylo, mut yhi) = bounds(all().map(|p| p.1));
    if !xlo.is_finite() {
        (xlo, xhi, ylo, yhi) = (0.0, 1.0, 0.0, 1.0);
    }
    if diagonal {
        (xlo, xhi) = (xlo.min(ylo), xhi.max(yhi));
        (ylo, yhi) = (xlo, xhi);
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(padded(xlo, xhi), padded(ylo, yhi))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(axes.0)
        .y_desc(axes.1)
        .draw()
        .map_err(plot_err)?;
    if diagonal {
        chart
            .draw_series(LineSeries::new([(xlo, xlo), (xhi, xhi)], BLACK.stroke_width(1)))
            .map_err(plot_err)?;
    }
    for (name, color, points) in groups {
        let color = *color;
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Circle::new((x, y), 3, color.filled()));
    }
    if groups.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Terciles of the missing rates: `0` lowest, `2` highest.
pub fn missing_rate_tercile(rates: &[f64]) -> Vec<usize> {
    let mut sorted = rates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cut1 = sorted[(n / 3).min(n.saturating_sub(1))];
    let cut2 = sorted[(2 * n / 3).min(n.saturating_sub(1))];
    rates
        .iter()
        .map(|&r| if r < cut1 { 0 } else if r < cut2 { 1 } else { 2 })
        .collect()
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_table(path: &Path, entry: &ReportEntry) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["legislator_id".to_string(), "estimate".into()];
    if entry.truth.is_some() {
        header.push("truth".into());
    }
    header.push("missing_rate".into());
    header.extend(entry.se.iter().map(|(name, _)| format!("se_{name}")));
    w.write_record(&header)?;
    for (i, id) in entry.legislator_ids.iter().enumerate() {
        let mut row = vec![id.clone(), fmt(entry.estimate[i])];
        if let Some(t) = &entry.truth {
            row.push(fmt(t[i]));
        }
        row.push(fmt(entry.missing_rates[i]));
        row.extend(entry.se.iter().map(|(_, se)| se[i].map_or_else(|| "NA".into(), fmt)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn check_entry(entry: &ReportEntry) -> Result<()> {
    let n = entry.legislator_ids.len();
    let ok = entry.estimate.len() == n
        && entry.missing_rates.len() == n
        && entry.truth.as_ref().is_none_or(|t| t.len() == n)
        && entry.se.iter().all(|(_, s)| s.len() == n);
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!("report entry {} has inconsistent lengths", entry.label)))
    }
}

const PALETTE: [RGBColor; 3] = [RGBColor(0, 114, 178), RGBColor(230, 159, 0), RGBColor(204, 51, 17)];

/// Writes tables and plots under `out_dir` and returns the created paths.
///
/// Per entry: `<label>_estimates.csv`; `<label>_estimate_vs_truth.svg` when
/// the truth is known; `<label>_se_<a>_vs_<b>.svg` on log₁₀ axes with the
/// 45-degree line for every pair of SE sets; `<label>_estimate_vs_se_<name>.svg`
/// colored by missing-rate tercile. `timing.csv` when timings are given.
pub fn emit_report(entries: &[ReportEntry], timings: &[TimingRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if entries.is_empty() && timings.is_empty() {
        return Err(Error::InvalidData("nothing to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for entry in entries {
        check_entry(entry)?;
        let path = out_dir.join(format!("{}_estimates.csv", entry.label));
        write_table(&path, entry)?;
        written.push(path);

        if let Some(truth) = &entry.truth {
            let path = out_dir.join(format!("{}_estimate_vs_truth.svg", entry.label));
            let points = truth.iter().copied().zip(entry.estimate.iter().copied()).collect();
            scatter(
                &path,
                &format!("{}: estimate vs truth", entry.label),
                ("true θ", "estimated θ"),
                &[(String::new(), PALETTE[0], points)],
                true,
            )?;
            written.push(path);
        }

        for a in 0..entry.se.len() {
            for b in a + 1..entry.se.len() {
                let (na, sa) = &entry.se[a];
                let (nb, sb) = &entry.se[b];
                let points: Vec<(f64, f64)> = sa
                    .iter()
                    .zip(sb)
                    .filter_map(|(x, y)| Some((x.filter(|v| *v > 0.0)?.log10(), y.filter(|v| *v > 0.0)?.log10())))
                    .collect();
                let path = out_dir.join(format!("{}_se_{na}_vs_{nb}.svg", entry.label));
                scatter(
                    &path,
                    &format!("{}: SE {na} vs {nb}", entry.label),
                    (&format!("log10 SE ({na})"), &format!("log10 SE ({nb})")),
                    &[(String::new(), PALETTE[0], points)],
                    true,
                )?;
                written.push(path);
            }
        }

        let tercile = missing_rate_tercile(&entry.missing_rates);
        for (name, se) in &entry.se {
            let mut groups: Vec<Group> = ["low", "middle", "high"]
                .iter()
                .zip(PALETTE)
                .map(|(g, c)| (format!("{g} missing rate"), c, Vec::new()))
                .collect();
            for (i, s) in se.iter().enumerate() {
                if let Some(s) = s {
                    groups[tercile[i]].2.push((entry.estimate[i], *s));
                }
            }
            let path = out_dir.join(format!("{}_estimate_vs_se_{name}.svg", entry.label));
            scatter(
                &path,
                &format!("{}: estimate vs SE ({name})", entry.label),
                ("estimated θ", "SE"),
                &groups,
                false,
            )?;
            written.push(path);
        }
    }
    if !timings.is_empty() {
        let path = out_dir.join("timing.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for row in timings {
            w.serialize(row)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
