//! CSV reports and the rate-distortion plot.

use std::path::Path;

use deepsic_core::metrics::RDPoint;
use deepsic_core::networks::{RatePreset, Variant};
use deepsic_core::training::LossBreakdown;
use plotters::prelude::*;
use thiserror::Error;

use crate::atomic::{write_atomic, AtomicWriteError};

pub const LOSS_HEADER: [&str; 5] = ["step", "R", "D", "Lsem", "L"];
pub const RD_HEADER: [&str; 7] = ["preset", "variant", "bpp", "psnr", "msssim", "top1", "top5"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed report row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("plot: {0}")]
    Plot(String),
    #[error("nothing to plot")]
    Empty,
    #[error(transparent)]
    Write(#[from] AtomicWriteError),
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, ReportError> {
    w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))
}

pub fn loss_csv(history: &[LossBreakdown]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOSS_HEADER)?;
    for (step, l) in history.iter().enumerate() {
        w.write_record([
            step.to_string(),
            l.rate.to_string(),
            l.distortion.to_string(),
            l.semantic.to_string(),
            l.total.to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<(), ReportError> {
    write_atomic(path, &loss_csv(history)?)?;
    Ok(())
}

/// Rows of a loss CSV as `(step, R, D, Lsem, L)`.
pub fn read_loss_csv(bytes: &[u8]) -> Result<Vec<(u64, [f64; 4])>, ReportError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: &str| ReportError::Row {
            row: row + 1,
            reason: reason.to_string(),
        };
        let step = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?;
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec
                .get(k + 1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("loss value"))?;
        }
        out.push((step, v));
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn rd_csv(points: &[RDPoint]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RD_HEADER)?;
    for p in points {
        w.write_record([
            p.preset.name().to_string(),
            p.variant.name().to_string(),
            format!("{:.6}", p.bpp),
            format!("{:.4}", p.psnr),
            format!("{:.6}", p.ms_ssim),
            opt(p.top1),
            opt(p.top5),
        ])?;
    }
    finish(w)
}

pub fn write_rd_csv(path: &Path, points: &[RDPoint]) -> Result<(), ReportError> {
    write_atomic(path, &rd_csv(points)?)?;
    Ok(())
}

pub fn read_rd_csv(bytes: &[u8]) -> Result<Vec<RDPoint>, ReportError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: &str| ReportError::Row {
            row: row + 1,
            reason: reason.to_string(),
        };
        let field = |k: usize| rec.get(k).ok_or_else(|| bad("missing field"));
        let num = |k: usize| field(k)?.parse::<f64>().map_err(|_| bad("number"));
        let optional = |k: usize| -> Result<Option<f64>, ReportError> {
            let s = field(k)?;
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("accuracy"))
            }
        };
        out.push(RDPoint {
            preset: RatePreset::from_name(field(0)?).ok_or_else(|| bad("preset"))?,
            variant: Variant::from_name(field(1)?).ok_or_else(|| bad("variant"))?,
            bpp: num(2)?,
            psnr: num(3)?,
            ms_ssim: num(4)?,
            top1: optional(5)?,
            top5: optional(6)?,
        });
    }
    Ok(out)
}

/// Two stacked panels, MS-SSIM and PSNR against bpp, one line per variant.
pub fn rd_plot_svg(points: &[RDPoint]) -> Result<String, ReportError> {
    if points.is_empty() {
        return Err(ReportError::Empty);
    }
    let plot_err = |e: &dyn std::fmt::Display| ReportError::Plot(e.to_string());
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 720)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let panels = root.split_evenly((2, 1));
        let max_bpp = points.iter().map(|p| p.bpp).fold(0.0, f64::max) * 1.1;
        type Metric = fn(&RDPoint) -> f64;
        let metrics: [(&str, Metric); 2] = [("MS-SSIM", |p| p.ms_ssim), ("PSNR (dB)", |p| p.psnr)];
        for (panel, (label, metric)) in panels.iter().zip(metrics) {
            let lo = points.iter().map(metric).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(metric).fold(f64::NEG_INFINITY, f64::max);
            let pad = ((hi - lo) * 0.15).max(1e-3);
            let mut chart = ChartBuilder::on(panel)
                .margin(16)
                .x_label_area_size(36)
                .y_label_area_size(56)
                .caption(format!("{label} vs bpp"), ("sans-serif", 18))
                .build_cartesian_2d(0.0..max_bpp.max(1e-3), (lo - pad)..(hi + pad))
                .map_err(|e| plot_err(&e))?;
            chart
                .configure_mesh()
                .x_desc("bits per pixel")
                .y_desc(label)
                .draw()
                .map_err(|e| plot_err(&e))?;
            for (variant, color) in [(Variant::PostSemantic, BLUE), (Variant::PreSemantic, RED)] {
                let mut series: Vec<(f64, f64)> = points
                    .iter()
                    .filter(|p| p.variant == variant)
                    .map(|p| (p.bpp, metric(p)))
                    .collect();
                if series.is_empty() {
                    continue;
                }
                series.sort_by(|a, b| a.0.total_cmp(&b.0));
                chart
                    .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))
                    .map_err(|e| plot_err(&e))?
                    .label(variant.name())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
                chart
                    .draw_series(series.into_iter().map(|xy| Circle::new(xy, 4, color.filled())))
                    .map_err(|e| plot_err(&e))?;
            }
            chart
                .configure_series_labels()
                .border_style(BLACK)
                .background_style(WHITE)
                .draw()
                .map_err(|e| plot_err(&e))?;
        }
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

pub fn write_rd_plot(path: &Path, points: &[RDPoint]) -> Result<(), ReportError> {
    write_atomic(path, rd_plot_svg(points)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points() -> Vec<RDPoint> {
        [
            (RatePreset::Lo, 0.2, 24.0, 0.9),
            (RatePreset::Mid, 0.4, 26.5, 0.94),
            (RatePreset::Hi, 0.8, 29.0, 0.97),
        ]
        .iter()
        .map(|&(preset, bpp, psnr, ms_ssim)| RDPoint {
            preset,
            variant: Variant::PostSemantic,
            bpp,
            psnr,
            ms_ssim,
            top1: Some(0.7),
            top5: None,
        })
        .collect()
    }

    #[test]
    fn rd_csv_round_trips() {
        let bytes = rd_csv(&points()).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(
            text.starts_with("preset,variant,bpp,psnr,msssim,top1,top5\nlo,post,0.200000,24.0000,0.900000,0.700000,\n")
        );
        assert_eq!(read_rd_csv(&bytes).unwrap(), points());
    }

    #[test]
    fn loss_csv_has_one_row_per_step() {
        let h = vec![deepsic_core::training::total_loss(100.0, 0.01, 2.3, 1000.0, 10.0); 3];
        let rows = read_loss_csv(&loss_csv(&h).unwrap()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].0, 2);
        assert!((rows[0].1[3] - 133.0).abs() < 1e-9);
    }

    #[test]
    fn plot_is_an_svg_with_both_panels() {
        let svg = rd_plot_svg(&points()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("MS-SSIM vs bpp") && svg.contains("PSNR (dB) vs bpp"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(matches!(rd_plot_svg(&[]), Err(ReportError::Empty)));
    }
}
