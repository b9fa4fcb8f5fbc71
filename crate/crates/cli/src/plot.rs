//! SVG renderings of a scores file.

use demorph_core::metrics::{build_dd, det_curve, partition};
use demorph_core::types::ScoreRecord;
use demorph_core::Error;
use plotters::prelude::*;

const SIZE: (u32, u32) = (640, 480);
const BINS: usize = 40;

fn draw_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("{e:?}")))
}

/// MACER against BSCER, one vertex per candidate threshold.
pub fn det(records: &[ScoreRecord]) -> Result<String, Error> {
    let (bona, morph) = partition(records);
    let curve = det_curve(&bona, &morph)?;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("DET", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("MACER").y_desc("BSCER").draw().map_err(draw_err)?;
        chart
            .draw_series(LineSeries::new(curve.iter().map(|p| (p.macer, p.bscer)), &BLUE))
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

fn counts(xs: &[f64], lo: f64, width: f64) -> Vec<usize> {
    let mut c = vec![0; BINS];
    for &x in xs {
        let i = (((x - lo) / width) as usize).min(BINS - 1);
        c[i] += 1;
    }
    c
}

/// Step histograms of the bona fide, morph and output-versus-target scores,
/// with a dotted red line at `tau`. Series with no scores are left out.
pub fn histogram(records: &[ScoreRecord], tau: Option<f64>) -> Result<String, Error> {
    let (bona, morph) = partition(records);
    let dd = build_dd(records);
    let series: Vec<(&str, &[f64], RGBColor)> = [("D_B", &bona[..], GREEN), ("D_M", &morph[..], RED), ("D_D", &dd[..], BLUE)]
        .into_iter()
        .filter(|(_, xs, _)| !xs.is_empty())
        .collect();
    if series.is_empty() {
        return Err(Error::EmptyScoreSet("scores"));
    }
    let (lo, hi) = (-1.0, 1.0);
    let width = (hi - lo) / BINS as f64;
    let binned: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, xs, _)| counts(xs, lo, width).into_iter().map(|k| k as f64 / xs.len() as f64).collect())
        .collect();
    let top = binned.iter().flatten().fold(0.0f64, |m, &v| m.max(v)) * 1.1;

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Identity similarity", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(lo..hi, 0.0..top)
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("similarity").y_desc("fraction").draw().map_err(draw_err)?;
        for ((name, _, color), fr) in series.iter().zip(&binned) {
            let steps = fr.iter().enumerate().flat_map(|(i, &v)| {
                let x0 = lo + i as f64 * width;
                [(x0, v), (x0 + width, v)]
            });
            let color = *color;
            chart
                .draw_series(LineSeries::new(steps, color.stroke_width(2)))
                .map_err(draw_err)?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if let Some(t) = tau {
            let dots = (0..30).map(|k| {
                let y0 = top * k as f64 / 30.0;
                PathElement::new(vec![(t, y0), (t, y0 + top / 60.0)], RED.stroke_width(2))
            });
            chart.draw_series(dots).map_err(draw_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}
