//! Line plots rendered to PNG with a bundled font.

use std::path::Path;

use anyhow::{bail, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

const FONT: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
const FONT_NAME: &str = "dida-sans";

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn ensure_font() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        // Only fails on a malformed font, which is bundled at build time.
        let _ = register_font(FONT_NAME, FontStyle::Normal, FONT);
    });
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - 0.05 * span, hi + 0.05 * span)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn render(out: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        bail!("nothing to plot");
    }
    if all.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        bail!("non-finite value in plot input");
    }
    ensure_font();
    let fold = |f: fn(&(f64, f64)) -> f64| {
        all.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = padded(fold(|p| p.0).0, fold(|p| p.0).1);
    let (y0, y1) = padded(fold(|p| p.1).0.min(0.0), fold(|p| p.1).1);

    // Render to memory first so a failed draw leaves no partial file behind.
    let (w, h) = (800u32, 500u32);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, (FONT_NAME, 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart
            .configure_mesh()
            .x_desc("degradation level t")
            .x_label_formatter(&|v| format!("{v:.0}"))
            .y_desc(y_label)
            .label_style((FONT_NAME, 14))
            .draw()?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart
            .configure_series_labels()
            .label_font((FONT_NAME, 14))
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
    }
    let img = image_png(&buf, w, h)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    dida::data::write_atomic(out, &img)?;
    Ok(())
}

fn image_png(rgb: &[u8], w: u32, h: u32) -> Result<Vec<u8>> {
    let img = dida::Image::from_fn(3, h as usize, w as usize, |c, y, x| {
        rgb[(y * w as usize + x) * 3 + c] as f64 / 127.5 - 1.0
    });
    Ok(dida::data::encode_rgb_png(&img)?)
}
