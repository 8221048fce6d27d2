//! Minimal deterministic SVG plotting: line charts with shaded bands,
//! scatter plots, axis ticks, and a legend. Output is plain text with
//! fixed float formatting so identical inputs yield identical bytes.

use std::fmt::Write as _;

pub const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const W: f64 = 720.0;
const H: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 160.0;
const MT: f64 = 36.0;
const MB: f64 = 48.0;

pub struct Plot {
    title: String,
    comment: String,
    x_label: String,
    y_label: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
    log_y: bool,
    body: String,
    legend: Vec<(String, String)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

impl Plot {
    pub fn new(title: &str, comment: &str, x_label: &str, y_label: &str) -> Self {
        Plot {
            title: title.to_string(),
            comment: comment.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            log_y: false,
            body: String::new(),
            legend: Vec::new(),
        }
    }

    pub fn set_ranges(&mut self, x: (f64, f64), y: (f64, f64)) {
        let pad = |(lo, hi): (f64, f64)| {
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        self.x_range = pad(x);
        self.y_range = pad(y);
    }

    pub fn set_log_y(&mut self, log: bool) {
        self.log_y = log;
    }

    fn ty(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        let (y, lo, hi) = if self.log_y {
            (y.max(1e-12).log10(), lo.max(1e-12).log10(), hi.max(1e-12).log10())
        } else {
            (y, lo, hi)
        };
        let frac = (y - lo) / (hi - lo);
        MT + (H - MT - MB) * (1.0 - frac)
    }

    fn tx(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        let frac = (x - lo) / (hi - lo);
        ML + (W - ML - MR) * frac
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: &str, width: f64) {
        if pts.is_empty() {
            return;
        }
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(self.tx(x)), fmt(self.ty(y))))
            .collect();
        let _ = writeln!(
            self.body,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>",
            path.join(" ")
        );
    }

    /// Shaded band between a lower and an upper curve over shared x values.
    pub fn band(&mut self, xs: &[f64], lo: &[f64], hi: &[f64], color: &str) {
        let mut pts = Vec::with_capacity(2 * xs.len());
        for (i, &x) in xs.iter().enumerate() {
            pts.push(format!("{},{}", fmt(self.tx(x)), fmt(self.ty(hi[i]))));
        }
        for (i, &x) in xs.iter().enumerate().rev() {
            pts.push(format!("{},{}", fmt(self.tx(x)), fmt(self.ty(lo[i]))));
        }
        let _ = writeln!(
            self.body,
            "  <polygon fill=\"{color}\" fill-opacity=\"0.18\" stroke=\"none\" points=\"{}\"/>",
            pts.join(" ")
        );
    }

    pub fn scatter(&mut self, pts: &[(f64, f64)], color: &str, r: f64) {
        for &(x, y) in pts {
            let _ = writeln!(
                self.body,
                "  <circle cx=\"{}\" cy=\"{}\" r=\"{r}\" fill=\"{color}\"/>",
                fmt(self.tx(x)),
                fmt(self.ty(y))
            );
        }
    }

    pub fn hline(&mut self, y: f64, color: &str, dash: &str, label: &str) {
        let _ = writeln!(
            self.body,
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1\" stroke-dasharray=\"{dash}\"/>",
            fmt(ML),
            fmt(self.ty(y)),
            fmt(W - MR),
            fmt(self.ty(y))
        );
        if !label.is_empty() {
            let _ = writeln!(
                self.body,
                "  <text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{label}</text>",
                fmt(ML + 4.0),
                fmt(self.ty(y) - 4.0)
            );
        }
    }

    pub fn point_label(&mut self, x: f64, y: f64, text: &str, color: &str) {
        let _ = writeln!(
            self.body,
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{text}</text>",
            fmt(self.tx(x) + 6.0),
            fmt(self.ty(y) - 4.0)
        );
    }

    pub fn legend_entry(&mut self, label: &str, color: &str) {
        self.legend.push((label.to_string(), color.to_string()));
    }

    fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
        );
        let _ = writeln!(out, "<!-- {} -->", self.comment);
        let _ = writeln!(
            out,
            "  <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>"
        );
        let _ = writeln!(
            out,
            "  <text x=\"{}\" y=\"20\" font-size=\"14\" font-weight=\"bold\">{}</text>",
            fmt(ML),
            self.title
        );
        // axes
        let _ = writeln!(
            out,
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            fmt(ML),
            fmt(H - MB),
            fmt(W - MR),
            fmt(H - MB)
        );
        let _ = writeln!(
            out,
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            fmt(ML),
            fmt(MT),
            fmt(ML),
            fmt(H - MB)
        );
        for t in Self::ticks(self.x_range.0, self.x_range.1, 6) {
            let x = self.tx(t);
            let _ = writeln!(
                out,
                "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
                fmt(x),
                fmt(H - MB),
                fmt(x),
                fmt(H - MB + 4.0)
            );
            let _ = writeln!(
                out,
                "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
                fmt(x),
                fmt(H - MB + 16.0),
                fmt(t)
            );
        }
        let yticks = if self.log_y {
            let lo = self.y_range.0.max(1e-12).log10().floor() as i32;
            let hi = self.y_range.1.max(1e-12).log10().ceil() as i32;
            (lo..=hi).map(|e| 10f64.powi(e)).collect::<Vec<f64>>()
        } else {
            Self::ticks(self.y_range.0, self.y_range.1, 6)
        };
        for t in yticks {
            let y = self.ty(t);
            if !(MT..=H - MB).contains(&y) {
                continue;
            }
            let _ = writeln!(
                out,
                "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
                fmt(ML - 4.0),
                fmt(y),
                fmt(ML),
                fmt(y)
            );
            let label = if self.log_y { format!("{t:e}") } else { fmt(t) };
            let _ = writeln!(
                out,
                "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{label}</text>",
                fmt(ML - 6.0),
                fmt(y + 3.0)
            );
        }
        let _ = writeln!(
            out,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            fmt((ML + W - MR) / 2.0),
            fmt(H - 10.0),
            self.x_label
        );
        let _ = writeln!(
            out,
            "  <text x=\"14\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
            fmt((MT + H - MB) / 2.0),
            fmt((MT + H - MB) / 2.0),
            self.y_label
        );
        out.push_str(&self.body);
        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = MT + 14.0 * i as f64;
            let _ = writeln!(
                out,
                "  <rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
                fmt(W - MR + 10.0),
                fmt(y)
            );
            let _ = writeln!(
                out,
                "  <text x=\"{}\" y=\"{}\" font-size=\"10\">{label}</text>",
                fmt(W - MR + 24.0),
                fmt(y + 9.0)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
