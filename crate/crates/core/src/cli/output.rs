use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "IDVAE_OUT";
pub const CSV_FORMAT_VERSION: u32 = 1;

/// Everything that determines a run's outputs. The output directory is not
/// part of it, so identical runs into different directories match byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

impl RunConfig {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "artifact": "idvae",
            "version": ARTIFACT_VERSION,
            "csv_format": CSV_FORMAT_VERSION,
            "command": self.command,
            "seed": self.seed,
            "config": self.params,
        })
    }

    /// `#`-prefixed provenance lines for CSV outputs.
    pub fn csv_header(&self) -> String {
        format!(
            "# idvae {ARTIFACT_VERSION} (csv format {CSV_FORMAT_VERSION})\n# command: {}\n# config: {}\n# seed: {}\n",
            self.command, self.params, self.seed
        )
    }
}

pub struct OutDir {
    pub root: PathBuf,
    pub written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    /// Writes `body` under the provenance header.
    pub fn csv(&mut self, name: &str, run: &RunConfig, body: &str) -> Result<PathBuf> {
        self.raw(name, &(run.csv_header() + body))
    }

    pub fn svg(&mut self, name: &str, run: &RunConfig, svg: &str) -> Result<PathBuf> {
        let comment = format!("<!-- {} -->\n", run.to_json().to_string().replace("--", "- -"));
        self.raw(name, &(comment + svg))
    }

    pub fn raw(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, text)?;
        self.written.push(path.clone());
        Ok(path)
    }
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            f = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 <= f.x0 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 <= f.y0 {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn open(&self, title: &str) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
             <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
             <text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n",
            W / 2.0,
            escape(title),
            W - 2.0 * PAD,
            H - 2.0 * PAD,
            H - PAD + 14.0,
            self.x0,
            W - PAD,
            H - PAD + 14.0,
            self.x1
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot; the third tuple entry selects the colour.
pub fn svg_scatter(title: &str, points: &[(f64, f64, usize)]) -> String {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.0, p.1)).collect();
    let f = Frame::fit(xy.iter());
    let mut s = f.open(title);
    for &(x, y, c) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{}\"/>", f.px(x), f.py(y), PALETTE[c % PALETTE.len()]);
    }
    s + "</svg>\n"
}

/// Line plot of named series.
pub fn svg_lines(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()));
    let mut s = f.open(title);
    for (i, (name, pts)) in series.iter().enumerate() {
        let path: Vec<String> =
            pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{colour}\">{}</text>",
            W - PAD - 4.0,
            PAD + 12.0 * (i + 1) as f64,
            escape(name)
        );
    }
    s + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_excludes_output_directory_and_time() {
        let run = RunConfig { command: "oracle gmm".into(), seed: 3, params: serde_json::json!({ "n": 10 }) };
        let h = run.csv_header();
        assert!(h.lines().all(|l| l.starts_with("# ")));
        assert!(h.contains("\"n\":10") && h.contains("seed: 3"));
        assert_eq!(h, run.csv_header());
    }

    #[test]
    fn svg_is_well_formed_for_degenerate_input() {
        let s = svg_scatter("a<b", &[(1.0, 1.0, 0), (f64::NAN, 0.0, 1)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>") && s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 1);
        let l = svg_lines("t", &[("kl".into(), vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert_eq!(l.matches("<polyline").count(), 1);
    }
}
