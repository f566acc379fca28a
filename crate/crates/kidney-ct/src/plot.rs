//! PNG rendering of evaluation artifacts: confusion-matrix heatmap and
//! per-class ROC / precision-recall charts. Rendering only reads the
//! report, so figures can be regenerated from `report.json` without a
//! model.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, EvaluationReport};

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// The pure-Rust font backend has no system font discovery, so register
/// a TTF once per process. `KIDNEY_CT_FONT` overrides the search path.
fn ensure_font() -> Result<()> {
    use std::sync::OnceLock;
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let mut candidates: Vec<String> = Vec::new();
        if let Ok(path) = std::env::var("KIDNEY_CT_FONT") {
            candidates.push(path);
        }
        candidates.extend(
            [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
                "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
                "/System/Library/Fonts/Helvetica.ttc",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        for path in &candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(
                    "sans-serif",
                    plotters::style::FontStyle::Normal,
                    leaked,
                )
                .is_ok()
                {
                    return Ok(());
                }
            }
        }
        Err(format!(
            "no usable TTF font found (searched {candidates:?}); set KIDNEY_CT_FONT"
        ))
    })
    .clone()
    .map_err(Error::Plot)
}

pub fn render_confusion_heatmap(
    cm: &ConfusionMatrix,
    classes: &[String],
    path: &Path,
) -> Result<()> {
    ensure_font()?;
    let k = classes.len();
    let root = BitMapBackend::new(path, (720, 620)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max = cm
        .counts()
        .iter()
        .flatten()
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let mut chart = ChartBuilder::on(&root)
        .caption("Confusion matrix (rows: true, cols: predicted)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(48)
        .y_label_area_size(72)
        .build_cartesian_2d(0f64..k as f64, 0f64..k as f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(k)
        .y_labels(k)
        .x_label_formatter(&|v| {
            let idx = (*v as usize).min(k.saturating_sub(1));
            classes.get(idx).cloned().unwrap_or_default()
        })
        .y_label_formatter(&|v| {
            let idx = (k as f64 - v - 0.5).max(0.0) as usize;
            classes.get(idx.min(k - 1)).cloned().unwrap_or_default()
        })
        .x_label_offset(35)
        .y_label_offset(-28)
        .draw()
        .map_err(plot_err)?;

    for (t, row) in cm.counts().iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            let intensity = (count as f64 / max).clamp(0.0, 1.0);
            let color = RGBColor(
                (255.0 * (1.0 - intensity * 0.85)) as u8,
                (255.0 * (1.0 - intensity * 0.45)) as u8,
                255,
            );
            // row 0 at the top
            let y0 = (k - 1 - t) as f64;
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(p as f64, y0), (p as f64 + 1.0, y0 + 1.0)],
                    color.filled(),
                )))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Text::new(
                    count.to_string(),
                    (p as f64 + 0.42, y0 + 0.55),
                    ("sans-serif", 20).into_font().color(&BLACK),
                )))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

fn line_chart<F>(
    path: &Path,
    caption: &str,
    x_desc: &str,
    y_desc: &str,
    series: Vec<(String, Vec<(f64, f64)>)>,
    extra: F,
) -> Result<()>
where
    F: FnOnce(
        &mut ChartContext<
            BitMapBackend,
            Cartesian2d<plotters::coord::types::RangedCoordf64, plotters::coord::types::RangedCoordf64>,
        >,
    ) -> Result<()>,
{
    ensure_font()?;
    let root = BitMapBackend::new(path, (720, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(44)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..1f64, 0f64..1.02f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;

    for (i, (label, points)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).mix(0.9);
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    extra(&mut chart)?;
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

pub fn render_roc_curves(report: &EvaluationReport, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for class in &report.classes {
        if let Some(points) = report.roc_points.get(class) {
            let auc = report.per_class[class]
                .auc
                .map(|a| format!(" (AUC {:.3})", a))
                .unwrap_or_default();
            series.push((
                format!("{class}{auc}"),
                points.iter().map(|p| (p.fpr, p.tpr)).collect(),
            ));
        }
    }
    line_chart(
        path,
        "One-vs-rest ROC",
        "false positive rate",
        "true positive rate",
        series,
        |chart| {
            chart
                .draw_series(LineSeries::new(
                    vec![(0.0, 0.0), (1.0, 1.0)],
                    BLACK.mix(0.3).stroke_width(1),
                ))
                .map_err(plot_err)?;
            Ok(())
        },
    )
}

pub fn render_pr_curves(report: &EvaluationReport, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for class in &report.classes {
        if let Some(points) = report.pr_points.get(class) {
            series.push((
                class.clone(),
                points.iter().map(|p| (p.recall, p.precision)).collect(),
            ));
        }
    }
    line_chart(
        path,
        "One-vs-rest precision vs recall",
        "recall",
        "precision",
        series,
        |_| Ok(()),
    )
}

/// Render the standard plot set into `plots_dir`.
pub fn render_all(report: &EvaluationReport, plots_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(plots_dir).map_err(|e| Error::io(plots_dir, e))?;
    render_confusion_heatmap(
        &report.confusion,
        &report.classes,
        &plots_dir.join("confusion_matrix.png"),
    )?;
    render_roc_curves(report, &plots_dir.join("roc_curves.png"))?;
    render_pr_curves(report, &plots_dir.join("pr_curves.png"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::LabelCodec;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn renders_all_plot_files() {
        let mut rng = crate::seeding::rng_for(1, "plot_test", &[]);
        let codec = LabelCodec::from_class_names(["Cyst", "Normal", "Stone", "Tumor"]);
        let n = 60;
        let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mut probs = Array2::<f32>::zeros((n, 4));
        for (i, &t) in y_true.iter().enumerate() {
            let mut sum = 0.0;
            for j in 0..4 {
                probs[[i, j]] = rng.gen::<f32>() + if j == t { 0.8 } else { 0.0 };
                sum += probs[[i, j]];
            }
            for j in 0..4 {
                probs[[i, j]] /= sum;
            }
        }
        let report = EvaluationReport::from_scores(&y_true, &probs, &codec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        render_all(&report, dir.path()).unwrap();
        for file in ["confusion_matrix.png", "roc_curves.png", "pr_curves.png"] {
            let path = dir.path().join(file);
            assert!(path.exists(), "{file} missing");
            let decoded = image::open(&path).unwrap();
            assert!(decoded.width() > 100);
        }
    }
}
