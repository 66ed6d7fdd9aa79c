//! Artifact writers. CSV files start with a `#` metadata line; JSON files
//! carry the same metadata under a leading `meta` key.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub tool: String,
    pub tool_version: String,
    pub library_version: String,
    pub config_sha256: String,
}

impl Meta {
    pub fn new(config_text: &str) -> Self {
        let digest = Sha256::digest(config_text.as_bytes());
        Self {
            tool: "wgm-cli".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            library_version: wgm::VERSION.into(),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    pub fn header_line(&self) -> String {
        format!(
            "# {} {}; wgm {}; config sha256 {}",
            self.tool, self.tool_version, self.library_version, self.config_sha256
        )
    }
}

pub struct Sink {
    pub dir: PathBuf,
    pub meta: Meta,
    pub written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct WithMeta<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    data: &'a T,
}

impl Sink {
    pub fn new(dir: &Path, meta: Meta) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), meta, written: Vec::new() })
    }

    fn create(&mut self, name: &str) -> io::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = BufWriter::new(File::create(&path)?);
        self.written.push(path);
        Ok(f)
    }

    /// Writes `rows` under `columns` after the metadata line.
    pub fn csv<R, I>(&mut self, name: &str, columns: &[&str], rows: I) -> io::Result<()>
    where
        R: IntoIterator<Item = f64>,
        I: IntoIterator<Item = R>,
    {
        let mut f = self.create(name)?;
        writeln!(f, "{}", self.meta.header_line())?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(columns)?;
        for row in rows {
            w.write_record(row.into_iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()
    }

    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> io::Result<()> {
        let mut f = self.create(name)?;
        serde_json::to_writer_pretty(&mut f, &WithMeta { meta: &self.meta, data })?;
        writeln!(f)?;
        f.flush()
    }

    pub fn text(&mut self, name: &str, body: &str) -> io::Result<()> {
        let mut f = self.create(name)?;
        f.write_all(body.as_bytes())?;
        f.flush()
    }
}

fn color(v: f64) -> String {
    // white → dark blue ramp
    let t = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - t)) as u8;
    let g = (255.0 * (1.0 - 0.8 * t)) as u8;
    let b = (255.0 * (1.0 - 0.45 * t)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heat map of `values[i][j]` (row `i` along ρ, column `j` along `s`) with an
/// optional overlay curve, as a self-contained SVG document.
pub fn heatmap_svg(
    values: &[Vec<f64>],
    s_range: (f64, f64),
    rho_range: (f64, f64),
    overlay: &[(f64, f64)],
    meta: &Meta,
) -> String {
    let (w, h, pad) = (720.0, 360.0, 40.0);
    let rows = values.len().max(1);
    let cols = values.first().map_or(1, |r| r.len().max(1));
    let vmax = values.iter().flatten().fold(0.0f64, |m, v| m.max(*v)).max(f64::MIN_POSITIVE);
    let (cw, ch) = (w / cols as f64, h / rows as f64);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        w + 2.0 * pad,
        h + 2.0 * pad,
        w + 2.0 * pad,
        h + 2.0 * pad
    ));
    out.push_str(&format!("<!-- {} -->\n", meta.header_line().trim_start_matches("# ")));
    out.push_str(&format!("<g transform=\"translate({pad},{pad})\" shape-rendering=\"crispEdges\">\n"));
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let y = h - (i + 1) as f64 * ch;
            out.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
                j as f64 * cw,
                y,
                cw + 0.05,
                ch + 0.05,
                color(v / vmax)
            ));
        }
    }
    out.push_str("</g>\n");
    let sx = |s: f64| pad + (s - s_range.0) / (s_range.1 - s_range.0) * w;
    let sy = |r: f64| pad + h - (r - rho_range.0) / (rho_range.1 - rho_range.0) * h;
    if overlay.len() > 1 {
        let pts: Vec<String> = overlay.iter().map(|&(s, r)| format!("{:.2},{:.2}", sx(s), sy(r))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    let label = |x: f64, y: f64, t: String| format!("<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"12\" font-family=\"sans-serif\">{t}</text>\n");
    out.push_str(&label(pad, h + pad + 16.0, format!("s = {:.3}", s_range.0)));
    out.push_str(&label(pad + w - 70.0, h + pad + 16.0, format!("s = {:.3}", s_range.1)));
    out.push_str(&label(4.0, pad + 12.0, format!("ρ = {:.1}", rho_range.1)));
    out.push_str(&label(pad, pad - 10.0, "|w(ρ, s)| with caustic ρ_c(s)".into()));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_hash_is_stable() {
        let m = Meta::new("");
        assert_eq!(m.config_sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert!(m.header_line().starts_with("# wgm-cli "));
    }

    #[test]
    fn svg_is_well_formed() {
        let v = vec![vec![0.0, 1.0], vec![0.5, 0.25]];
        let svg = heatmap_svg(&v, (0.0, 1.0), (0.0, 2.0), &[(0.0, 1.0), (1.0, 1.5)], &Meta::new("x"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 5);
        assert!(svg.contains("<polyline"));
    }
}
