//! Static SVG line/scatter plots, byte-deterministic for fixed input.
//!
//! Per-layer kinds draw one polyline per series over layer indices;
//! `AccuracyVsParams` is a scatter with a log10 x axis where each series
//! is a single `[params, accuracy]` point.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    EntropyByLayer,
    ActgradByLayer,
    ParamgradByLayer,
    DeltackaByLayer,
    ProbeAccuracyByLayer,
    AccuracyVsParams,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<PlotKind> {
        match s {
            "entropy-by-layer" => Ok(PlotKind::EntropyByLayer),
            "actgrad-by-layer" => Ok(PlotKind::ActgradByLayer),
            "paramgrad-by-layer" => Ok(PlotKind::ParamgradByLayer),
            "deltacka-by-layer" => Ok(PlotKind::DeltackaByLayer),
            "probe-accuracy-by-layer" => Ok(PlotKind::ProbeAccuracyByLayer),
            "accuracy-vs-params" => Ok(PlotKind::AccuracyVsParams),
            other => Err(Error::InvalidInput(format!("unknown plot kind {other:?}"))),
        }
    }

    fn y_label(&self) -> &'static str {
        match self {
            PlotKind::EntropyByLayer => "attention entropy (nats)",
            PlotKind::ActgradByLayer => "activation grad norm",
            PlotKind::ParamgradByLayer => "parameter grad norm",
            PlotKind::DeltackaByLayer => "delta CKA",
            PlotKind::ProbeAccuracyByLayer => "probe accuracy",
            PlotKind::AccuracyVsParams => "final accuracy",
        }
    }

    fn x_label(&self) -> &'static str {
        match self {
            PlotKind::AccuracyVsParams => "trainable parameters (log scale)",
            _ => "layer",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    /// Per-layer y values, or `[x, y]` for the scatter kind.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub title: String,
    pub series: Vec<Series>,
    /// Free-form provenance embedded in the SVG `<desc>`.
    #[serde(default)]
    pub meta: String,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn fmt(v: f64) -> String {
    // fixed six decimals keeps coordinates byte-stable
    format!("{v:.6}")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = hi - lo;
    (0..=n).map(|i| lo + span * i as f64 / n as f64).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a plot spec to SVG text.
pub fn plot_svg(spec: &PlotSpec) -> Result<String> {
    if spec.series.is_empty() {
        return Err(Error::InvalidInput("plot needs at least one series".into()));
    }
    let scatter = spec.kind == PlotKind::AccuracyVsParams;
    let len = spec.series[0].values.len();
    if scatter {
        for s in &spec.series {
            if s.values.len() != 2 {
                return Err(Error::InvalidInput(format!(
                    "scatter series {:?} must be [params, accuracy]",
                    s.label
                )));
            }
            if s.values[0] <= 0.0 {
                return Err(Error::InvalidInput(
                    "scatter x (parameter count) must be positive for the log axis".into(),
                ));
            }
        }
    } else {
        if len == 0 {
            return Err(Error::InvalidInput("series are empty".into()));
        }
        for s in &spec.series {
            if s.values.len() != len {
                return Err(Error::InvalidInput(format!(
                    "series {:?} has {} values, expected {len}",
                    s.label,
                    s.values.len()
                )));
            }
        }
    }
    for s in &spec.series {
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in series {:?}", s.label)));
        }
    }

    // data ranges
    let (x_lo, x_hi) = if scatter {
        let xs: Vec<f64> = spec.series.iter().map(|s| s.values[0].log10()).collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if (hi - lo).abs() < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo))
        }
    } else {
        (0.0, (len - 1).max(1) as f64)
    };
    let ys: Vec<f64> = if scatter {
        spec.series.iter().map(|s| s.values[1]).collect()
    } else {
        spec.series.iter().flat_map(|s| s.values.iter().copied()).collect()
    };
    let mut y_lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut y_hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (y_hi - y_lo).abs() < 1e-12 {
        // constant series: symmetric padding
        let pad = (0.05 * y_lo.abs()).max(0.5);
        y_lo -= pad;
        y_hi += pad;
    } else {
        let pad = 0.08 * (y_hi - y_lo);
        y_lo -= pad;
        y_hi += pad;
    }

    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        WIDTH as u32, HEIGHT as u32, WIDTH as u32, HEIGHT as u32
    );
    let _ = write!(svg, "<desc>{}</desc>\n", escape(&spec.meta));
    let _ = write!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        WIDTH as u32, HEIGHT as u32
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        escape(&spec.title)
    );

    // axes box
    let _ = write!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#222222\" stroke-width=\"1\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(WIDTH - MARGIN_L - MARGIN_R),
        fmt(HEIGHT - MARGIN_T - MARGIN_B)
    );

    // y ticks and grid
    for t in nice_ticks(y_lo, y_hi, 5) {
        let y = py(t);
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            fmt(MARGIN_L),
            fmt(y),
            fmt(WIDTH - MARGIN_R),
            fmt(y)
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 6.0),
            fmt(y + 4.0),
            fmt_tick(t)
        );
    }

    // x ticks: per-layer integers or log decades
    if scatter {
        let lo_dec = x_lo.floor() as i64;
        let hi_dec = x_hi.ceil() as i64;
        for d in lo_dec..=hi_dec {
            let x = px(d as f64);
            if x < MARGIN_L - 1.0 || x > WIDTH - MARGIN_R + 1.0 {
                continue;
            }
            let _ = write!(
                svg,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
                fmt(x),
                fmt(MARGIN_T),
                fmt(x),
                fmt(HEIGHT - MARGIN_B)
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">1e{}</text>\n",
                fmt(x),
                fmt(HEIGHT - MARGIN_B + 16.0),
                d
            );
        }
    } else {
        for i in 0..len {
            let x = px(i as f64);
            let _ = write!(
                svg,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbbbbb\" stroke-width=\"1\"/>\n",
                fmt(x),
                fmt(HEIGHT - MARGIN_B),
                fmt(x),
                fmt(HEIGHT - MARGIN_B + 4.0)
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                fmt(x),
                fmt(HEIGHT - MARGIN_B + 16.0),
                i
            );
        }
    }

    // axis labels
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 12.0),
        escape(spec.kind.x_label())
    );
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        escape(spec.kind.y_label())
    );

    // series
    for (si, s) in spec.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if scatter {
            let x = px(s.values[0].log10());
            let y = py(s.values[1]);
            let _ = write!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"{}\"/>\n",
                fmt(x),
                fmt(y),
                color
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
                fmt(x),
                fmt(y - 9.0),
                escape(&s.label)
            );
        } else {
            let mut d = String::new();
            for (i, &v) in s.values.iter().enumerate() {
                let cmd = if i == 0 { 'M' } else { 'L' };
                let _ = write!(d, "{}{} {} ", cmd, fmt(px(i as f64)), fmt(py(v)));
            }
            let _ = write!(
                svg,
                "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
                d.trim_end(),
                color
            );
            for (i, &v) in s.values.iter().enumerate() {
                let _ = write!(
                    svg,
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.6\" fill=\"{}\"/>\n",
                    fmt(px(i as f64)),
                    fmt(py(v)),
                    color
                );
            }
        }
    }

    // legend (line plots only; scatter labels sit at the points)
    if !scatter {
        let lx = MARGIN_L + 10.0;
        for (si, s) in spec.series.iter().enumerate() {
            let ly = MARGIN_T + 14.0 + 16.0 * si as f64;
            let color = PALETTE[si % PALETTE.len()];
            let _ = write!(
                svg,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                fmt(lx),
                fmt(ly - 4.0),
                fmt(lx + 18.0),
                fmt(ly - 4.0),
                color
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                fmt(lx + 24.0),
                fmt(ly),
                escape(&s.label)
            );
        }
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render and write to disk.
pub fn render_plot(spec: &PlotSpec, path: &Path) -> Result<()> {
    let svg = plot_svg(spec)?;
    super::write_text(path, &svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_series_spec() -> PlotSpec {
        PlotSpec {
            kind: PlotKind::EntropyByLayer,
            title: "entropy by layer".into(),
            series: vec![
                Series {
                    label: "under".into(),
                    values: vec![2.9, 2.7, 2.6, 2.75, 2.8, 2.85],
                },
                Series {
                    label: "over".into(),
                    values: vec![2.8, 2.5, 2.3, 2.55, 2.7, 2.8],
                },
            ],
            meta: "seed=42".into(),
        }
    }

    #[test]
    fn renders_two_labeled_polylines() {
        let svg = plot_svg(&two_series_spec()).unwrap();
        assert_eq!(svg.matches("<path ").count(), 2);
        assert!(svg.contains(">under</text>"));
        assert!(svg.contains(">over</text>"));
        assert!(svg.contains("seed=42"));
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn output_is_byte_deterministic() {
        let a = plot_svg(&two_series_spec()).unwrap();
        let b = plot_svg(&two_series_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_series_pads_symmetrically() {
        let spec = PlotSpec {
            kind: PlotKind::DeltackaByLayer,
            title: "flat".into(),
            series: vec![Series {
                label: "zero".into(),
                values: vec![0.0; 4],
            }],
            meta: String::new(),
        };
        let svg = plot_svg(&spec).unwrap();
        // padded range centers the constant line: the y=0 gridline sits
        // midway between the top/bottom ticks (-0.5 and 0.5)
        assert!(svg.contains(">-0.500<"));
        assert!(svg.contains(">0.500<"));
    }

    #[test]
    fn mismatched_series_lengths_are_invalid() {
        let mut spec = two_series_spec();
        spec.series[1].values.pop();
        assert!(matches!(plot_svg(&spec), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn scatter_uses_log_axis_and_point_labels() {
        let spec = PlotSpec {
            kind: PlotKind::AccuracyVsParams,
            title: "accuracy vs params".into(),
            series: vec![
                Series {
                    label: "selective".into(),
                    values: vec![4000.0, 0.91],
                },
                Series {
                    label: "full".into(),
                    values: vec![300000.0, 0.88],
                },
            ],
            meta: String::new(),
        };
        let svg = plot_svg(&spec).unwrap();
        assert_eq!(svg.matches("<circle ").count(), 2);
        assert!(svg.contains(">1e4</text>"));
        assert!(svg.contains(">1e5</text>"));
        assert!(svg.contains("log scale"));
        // bad scatter series
        let bad = PlotSpec {
            kind: PlotKind::AccuracyVsParams,
            title: String::new(),
            series: vec![Series {
                label: "x".into(),
                values: vec![1.0, 2.0, 3.0],
            }],
            meta: String::new(),
        };
        assert!(plot_svg(&bad).is_err());
    }

    #[test]
    fn kind_parsing_roundtrip() {
        for (name, kind) in [
            ("entropy-by-layer", PlotKind::EntropyByLayer),
            ("actgrad-by-layer", PlotKind::ActgradByLayer),
            ("paramgrad-by-layer", PlotKind::ParamgradByLayer),
            ("deltacka-by-layer", PlotKind::DeltackaByLayer),
            ("probe-accuracy-by-layer", PlotKind::ProbeAccuracyByLayer),
            ("accuracy-vs-params", PlotKind::AccuracyVsParams),
        ] {
            assert_eq!(PlotKind::parse(name).unwrap(), kind);
        }
        assert!(PlotKind::parse("pie-chart").is_err());
    }
}
