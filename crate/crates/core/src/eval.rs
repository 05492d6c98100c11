//! Metrics (PSNR, ΔJND, ΔPSNR, PLCC) and report artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::RungSource;
use crate::types::ImageBuffer;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrMode {
    /// One MSE over every sample of every channel.
    #[default]
    Joint,
    /// BT.601 luma only (single-channel images are used as-is).
    Luma,
}

pub fn psnr(reference: &ImageBuffer, distorted: &ImageBuffer) -> Result<f64> {
    psnr_with(reference, distorted, PsnrMode::Joint)
}

pub fn psnr_with(reference: &ImageBuffer, distorted: &ImageBuffer, mode: PsnrMode) -> Result<f64> {
    if !reference.same_shape(distorted) {
        return Err(Error::ShapeMismatch(format!(
            "{reference:?} vs {distorted:?}"
        )));
    }
    let mse = match (mode, reference.channels()) {
        (PsnrMode::Luma, 3) => {
            let luma = |px: &[u8]| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            let (a, b) = (reference.data(), distorted.data());
            let n = a.len() / 3;
            a.chunks_exact(3)
                .zip(b.chunks_exact(3))
                .map(|(p, q)| (luma(p) - luma(q)).powi(2))
                .sum::<f64>()
                / n as f64
        }
        _ => {
            let n = reference.data().len();
            reference
                .data()
                .iter()
                .zip(distorted.data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
                / n as f64
        }
    };
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute level error.
pub fn delta_jnd(pred: &[u32], gt: &[u32]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean absolute PSNR difference between the rungs at predicted and
/// ground-truth levels.
pub fn delta_psnr<L: RungSource>(ladders: &[L], pred: &[u32], gt: &[u32]) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    check_lengths(ladders.len(), pred.len())?;
    let mut total = 0.0;
    for ((ladder, &p), &g) in ladders.iter().zip(pred).zip(gt) {
        let reference = ladder.reference()?;
        let at = |level: u32| -> Result<f64> {
            if !ladder.codec().level_range.contains(level as i64) {
                return Err(Error::MissingRung(level));
            }
            psnr(&reference, ladder.rung(level)?.as_ref())
        };
        total += (at(p)? - at(g)?).abs();
    }
    Ok(total / pred.len() as f64)
}

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right || left == 0 {
        return Err(Error::LengthMismatch { left, right });
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= f64::EPSILON * n || syy <= f64::EPSILON * n {
        return Err(Error::DegenerateVariance(if sxx <= f64::EPSILON * n {
            "x"
        } else {
            "y"
        }));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    /// `None` when the search returned the NONE sentinel.
    pub jnd_pred: Option<u32>,
    pub jnd_gt: u32,
    pub psnr_pred: Option<f64>,
    pub psnr_gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub per_image: Vec<ImageEval>,
    /// Mean |pred − gt| over rows with a prediction.
    pub delta_jnd: Option<f64>,
    pub delta_psnr: Option<f64>,
    /// PLCC between `psnr_pred` and `psnr_gt`; `None` when undefined.
    pub plcc: Option<f64>,
    /// Rows whose prediction was the NONE sentinel; excluded from the means.
    pub none_count: usize,
}

impl EvalReport {
    pub fn from_rows(per_image: Vec<ImageEval>) -> Self {
        let scored: Vec<(&ImageEval, u32, f64)> = per_image
            .iter()
            .filter_map(|r| Some((r, r.jnd_pred?, r.psnr_pred?)))
            .collect();
        let none_count = per_image.len() - scored.len();
        let (delta_jnd, delta_psnr, plcc_value) = if scored.is_empty() {
            (None, None, None)
        } else {
            let pred: Vec<u32> = scored.iter().map(|s| s.1).collect();
            let gt: Vec<u32> = scored.iter().map(|s| s.0.jnd_gt).collect();
            let pp: Vec<f64> = scored.iter().map(|s| s.2).collect();
            let pg: Vec<f64> = scored.iter().map(|s| s.0.psnr_gt).collect();
            let dp = pp.iter().zip(&pg).map(|(a, b)| (a - b).abs()).sum::<f64>() / pp.len() as f64;
            (
                delta_jnd(&pred, &gt).ok(),
                Some(dp),
                plcc(&pp, &pg).ok(),
            )
        };
        Self {
            schema: 1,
            per_image,
            delta_jnd,
            delta_psnr,
            plcc: plcc_value,
            none_count,
        }
    }

    /// Builds one row by looking up the rung PSNRs in `ladder`.
    pub fn row<L: RungSource + ?Sized>(
        image_id: &str,
        ladder: &L,
        jnd_pred: Option<u32>,
        jnd_gt: u32,
    ) -> Result<ImageEval> {
        let reference = ladder.reference()?;
        let psnr_gt = psnr(&reference, ladder.rung(jnd_gt)?.as_ref())?;
        let psnr_pred = match jnd_pred {
            Some(level) => Some(psnr(&reference, ladder.rung(level)?.as_ref())?),
            None => None,
        };
        Ok(ImageEval {
            image_id: image_id.to_string(),
            jnd_pred,
            jnd_gt,
            psnr_pred,
            psnr_gt,
        })
    }

    pub fn abs_errors(&self) -> Vec<u32> {
        self.per_image
            .iter()
            .filter_map(|r| r.jnd_pred.map(|p| p.abs_diff(r.jnd_gt)))
            .collect()
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const HISTOGRAM_SVG: &str = "abs_error_histogram.svg";
pub const SCATTER_SVG: &str = "psnr_scatter.svg";

/// Writes `report.json`, `report.csv`, the absolute-error histogram and the
/// PSNR scatter plot into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.per_image.is_empty() {
        return Err(Error::EmptyInput("report has no rows".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, contents: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    Ok(vec![
        write(REPORT_JSON, serde_json::to_string_pretty(report)? + "\n")?,
        write(REPORT_CSV, report_csv(report))?,
        write(HISTOGRAM_SVG, histogram_svg(report))?,
        write(SCATTER_SVG, scatter_svg(report))?,
    ])
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("image_id,jnd_pred,jnd_gt,abs_err,psnr_pred_db,psnr_gt_db\n");
    for r in &report.per_image {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.image_id,
            opt(r.jnd_pred),
            r.jnd_gt,
            opt(r.jnd_pred.map(|p| p.abs_diff(r.jnd_gt))),
            opt(r.psnr_pred.map(|p| format!("{p:.4}"))),
            format_args!("{:.4}", r.psnr_gt),
        );
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
            "<text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">{y_label}</text>\n",
            "{body}</svg>\n"
        ),
        w = W,
        h = H,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN / 2.0,
        cx = W / 2.0,
        cy = H / 2.0,
        xl = H - 12.0,
        title = title,
        x_label = x_label,
        y_label = y_label,
        body = body,
    )
}

/// Bins absolute JND errors; returns `(bin_width, counts)`.
pub fn error_histogram(errors: &[u32]) -> (u32, Vec<usize>) {
    let max = errors.iter().copied().max().unwrap_or(0);
    let width = ((max + 1) as f64 / 20.0).ceil().max(1.0) as u32;
    let mut counts = vec![0usize; (max / width + 1) as usize];
    for &e in errors {
        counts[(e / width) as usize] += 1;
    }
    (width, counts)
}

fn histogram_svg(report: &EvalReport) -> String {
    let (width, counts) = error_histogram(&report.abs_errors());
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let bar_w = plot_w / counts.len() as f64;
    let mut body = String::new();
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let h = plot_h * c as f64 / peak;
        let _ = writeln!(
            body,
            "<rect class=\"bar\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"><title>[{}, {}): {}</title></rect>",
            MARGIN + i as f64 * bar_w,
            H - MARGIN - h,
            bar_w * 0.9,
            h,
            i as u32 * width,
            (i as u32 + 1) * width,
            c
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">bin width {width}, max count {}</text>",
        MARGIN + 4.0,
        MARGIN - 6.0,
        peak as usize
    );
    svg_frame("Absolute JND error", "|JND_pred - JND_gt|", "images", &body)
}

fn scatter_svg(report: &EvalReport) -> String {
    let pts: Vec<(f64, f64)> = report
        .per_image
        .iter()
        .filter_map(|r| Some((r.psnr_gt, r.psnr_pred?)))
        .collect();
    let (lo, hi) = pts
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo - 0.5, hi + 0.5)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (0.0, 1.0)
    };
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - lo) / (hi - lo) * plot_w;
    let sy = |v: f64| H - MARGIN - (v - lo) / (hi - lo) * plot_h;
    let mut body = format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for &(g, p) in &pts {
        let _ = writeln!(
            body,
            "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"firebrick\"/>",
            sx(g),
            sy(p)
        );
    }
    let plcc_text = match report.plcc {
        Some(v) => format!("PLCC = {v:.4}"),
        None => "PLCC = n/a".to_string(),
    };
    let _ = writeln!(
        body,
        "<text class=\"plcc\" x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{plcc_text}</text>",
        MARGIN + 6.0,
        MARGIN + 6.0
    );
    let _ = writeln!(
        body,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.2}</text><text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{hi:.2}</text>",
        MARGIN,
        H - MARGIN + 14.0,
        W - MARGIN * 1.5,
        H - MARGIN + 14.0,
    );
    svg_frame(
        "PSNR at predicted vs ground-truth JND",
        "PSNR at ground-truth JND (dB)",
        "PSNR at predicted JND (dB)",
        &body,
    )
}
