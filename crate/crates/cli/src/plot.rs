//! Bar charts of `metrics.csv`: one PNG per metric, bars are seed means,
//! dots are individual seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Once;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use looc_core::eval::{read_metrics_csv, MetricsRow};
use looc_core::{LoocError, Result};

const FONT: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
static FONT_INIT: Once = Once::new();

fn plot_err(e: impl std::fmt::Display) -> LoocError {
    LoocError::Contract(format!("plotting failed: {e}"))
}

const METRICS: [&str; 5] = ["mae", "game0", "game1", "game2", "game3"];

fn metric_value(row: &MetricsRow, metric: &str) -> Option<f64> {
    match metric {
        "mae" => Some(row.mae),
        "game0" => row.game[0],
        "game1" => row.game[1],
        "game2" => row.game[2],
        "game3" => row.game[3],
        _ => None,
    }
}

/// Per-method values of one metric, methods in first-appearance order.
fn collect(rows: &[MetricsRow], metric: &str) -> Vec<(String, Vec<f64>)> {
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = metric_value(r, metric) {
            if !values.contains_key(&r.method) {
                order.push(r.method.clone());
            }
            values.entry(r.method.clone()).or_default().push(v);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let v = values.remove(&m).unwrap_or_default();
            (m, v)
        })
        .collect()
}

fn draw(path: &Path, metric: &str, series: &[(String, Vec<f64>)]) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.15;
    let n = series.len();
    let title = format!("{} (bars: mean over seeds)", metric.to_uppercase());
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5..n as f64 - 0.5, 0.0..top)
        .map_err(plot_err)?;
    let names: Vec<String> = series.iter().map(|(m, _)| m.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n + 1)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(metric)
        .label_style(("sans-serif", 14))
        .draw()
        .map_err(plot_err)?;
    let palette = [BLUE, RED, GREEN, MAGENTA, CYAN];
    for (i, (_, vals)) in series.iter().enumerate() {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let color = palette[i % palette.len()];
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(i as f64 - 0.35, 0.0), (i as f64 + 0.35, mean)],
                color.mix(0.45).filled(),
            )))
            .map_err(plot_err)?;
        chart
            .draw_series(
                vals.iter()
                    .map(|&v| Circle::new((i as f64, v), 4, color.filled())),
            )
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Reads `<out>/metrics.csv` and writes `<out>/plots/<metric>.png` for every
/// metric that has at least one value. The CSV is only read.
pub fn plot_metrics(out: &Path) -> Result<Vec<PathBuf>> {
    FONT_INIT.call_once(|| {
        // The bundled font is valid; a failure here would only drop the text.
        let _ = register_font("sans-serif", FontStyle::Normal, FONT);
    });
    let rows = read_metrics_csv(&out.join("metrics.csv"))?;
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| LoocError::io(&dir, e))?;
    let mut written = Vec::new();
    for metric in METRICS {
        let series = collect(&rows, metric);
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("{metric}.png"));
        draw(&path, metric, &series)?;
        written.push(path);
    }
    Ok(written)
}
