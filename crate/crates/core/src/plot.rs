//! Accuracy-versus-layer curves as a standalone SVG document.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::LayerAccuracyTable;
use crate::util::write_atomic;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot: the table is empty")]
    EmptyTable,
    #[error("cannot write {path}: {source}")]
    WriteError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const WIDTH: f64 = 820.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One curve per model column, in column order.
pub fn plot_svg(table: &LayerAccuracyTable) -> Result<String, PlotError> {
    if table.is_empty() {
        return Err(PlotError::EmptyTable);
    }
    let layers: Vec<usize> = table.layers().collect();
    let (first, last) = (layers[0] as f64, *layers.last().unwrap() as f64);
    let (x_lo, x_hi) = if first == last { (first - 1.0, last + 1.0) } else { (first, last) };
    let percents: Vec<f64> = table.rows().map(|(_, _, a)| a * 100.0).collect();
    let lo = percents.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = percents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y_lo = ((lo / 10.0).floor() * 10.0).max(0.0);
    let mut y_hi = ((hi / 10.0).ceil() * 10.0).min(100.0);
    if y_hi - y_lo < 10.0 {
        if y_hi >= 100.0 {
            y_lo = y_hi - 10.0;
        } else {
            y_hi = y_lo + 10.0;
        }
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |layer: f64| LEFT + (layer - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |pct: f64| TOP + (y_hi - pct) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">Speaker-level accuracy by layer ({})</text>"#,
        LEFT + plot_w / 2.0,
        table.aggregation_mode.as_str()
    )
    .unwrap();

    // grid and y ticks every 5 points
    let mut tick = y_lo;
    while tick <= y_hi + 1e-9 {
        let y = sy(tick);
        writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.1}" y="{:.2}" text-anchor="end">{tick:.0}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        )
        .unwrap();
        tick += 5.0;
    }
    for &layer in &layers {
        let x = sx(layer as f64);
        writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{layer}</text>"##,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444444"/>"##
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Layer index</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">Accuracy (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )
    .unwrap();

    for (i, model) in table.models().iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<(f64, f64)> = layers
            .iter()
            .filter_map(|&l| table.get(l, model).map(|a| (sx(l as f64), sy(a * 100.0))))
            .collect();
        let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        writeln!(
            svg,
            r#"<polyline class="curve" data-model="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(model),
            coords.join(" ")
        )
        .unwrap();
        for (x, y) in &points {
            writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 25.0,
            lx + 32.0,
            ly + 4.0,
            escape(model)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render_plot(table: &LayerAccuracyTable, out_path: &Path) -> Result<(), PlotError> {
    let svg = plot_svg(table)?;
    write_atomic(out_path, svg.as_bytes()).map_err(|source| PlotError::WriteError {
        path: out_path.to_path_buf(),
        source,
    })
}
