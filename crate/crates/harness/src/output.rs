//! Run directories, CSV rows and minimal SVG line charts.

use std::fs;
use std::path::{Path, PathBuf};

use asyncflow::rewards::fmt_f64;
use asyncflow::Result;
use sha2::{Digest, Sha256};

/// Content hash of everything that determines a command's outputs.
#[derive(Default)]
pub struct RunKey(Sha256);

impl RunKey {
    pub fn new(command: &str, config_toml: &str) -> Self {
        let mut k = RunKey(Sha256::new());
        k.add("command", command.as_bytes());
        k.add("config", config_toml.as_bytes());
        k
    }

    /// Length-prefixed so that adjacent parts cannot run together.
    pub fn add(&mut self, label: &str, bytes: &[u8]) {
        for part in [label.as_bytes(), bytes] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
    }

    pub fn add_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.add(label, &bytes);
        Ok(())
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())[..12].to_string()
    }
}

/// `<root>/<command>-<hash>`, created if needed.
pub fn run_dir(root: &Path, command: &str, key: RunKey) -> Result<PathBuf> {
    let dir = root.join(format!("{command}-{}", key.finish()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn floats(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|x| fmt_f64(*x)).collect()
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A polyline chart with axis extents labelled. Output depends only on the
/// data, so identical runs give identical files.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let finite = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    s.push_str(&format!(
        "<path d=\"M{m} {} V{} H{}\" stroke=\"black\" fill=\"none\"/>\n",
        m,
        h - m,
        w - m
    ));
    let label = |x: f64, y: f64, anchor: &str, text: &str| {
        format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            xml_escape(text)
        )
    };
    s.push_str(&label(m, h - m + 16.0, "start", &format!("{x0:.4}")));
    s.push_str(&label(w - m, h - m + 16.0, "end", &format!("{x1:.4}")));
    s.push_str(&label(m - 6.0, h - m, "end", &format!("{y0:.4}")));
    s.push_str(&label(m - 6.0, m + 4.0, "end", &format!("{y1:.4}")));
    s.push_str(&label(w / 2.0, h - 18.0, "middle", x_label));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    ));
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{colour}\">{}</text>\n",
            w - m + 4.0,
            m + 14.0 * i as f64,
            xml_escape(&ser.name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    fs::write(path, line_chart(title, x_label, y_label, series))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_key_depends_on_every_part() {
        let a = RunKey::new("evaluate", "seed = 1").finish();
        assert_eq!(a, RunKey::new("evaluate", "seed = 1").finish());
        assert_ne!(a, RunKey::new("evaluate", "seed = 2").finish());
        assert_ne!(a, RunKey::new("sweep-gamma", "seed = 1").finish());
        let mut k = RunKey::new("evaluate", "seed = 1");
        k.add("tpm", b"x");
        assert_ne!(a, k.finish());
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn chart_is_deterministic_and_tolerates_degenerate_data() {
        let s = vec![Series::new("a", vec![(0.0, 1.0), (1.0, 1.0)]), Series::new("b<", vec![])];
        let c = line_chart("t", "x", "y", &s);
        assert_eq!(c, line_chart("t", "x", "y", &s));
        assert!(c.starts_with("<svg") && c.ends_with("</svg>\n"));
        assert!(c.contains("b&lt;"));
        assert!(!c.contains("NaN"));
    }
}
