//! Run manifests and renderings of JSON reports as Markdown tables or SVG
//! spider charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::store::sha256_hex;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub tool_version: String,
    pub status: String,
    pub error: Option<String>,
}

/// Content hash of a file, or of a directory's `manifest.jsonl` when present,
/// or of every file under a directory in sorted path order.
pub fn hash_input(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?));
    }
    let manifest = path.join(crate::store::MANIFEST_FILE);
    if manifest.is_file() {
        return hash_input(&manifest);
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut listing = Vec::new();
    for f in files {
        let rel = f
            .strip_prefix(path)
            .unwrap_or(&f)
            .to_string_lossy()
            .replace('\\', "/");
        let digest = sha256_hex(&fs::read(&f).map_err(|e| Error::io(&f, e))?);
        listing.extend_from_slice(format!("{rel} {digest}\n").as_bytes());
    }
    Ok(sha256_hex(&listing))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: Utc::now(),
            finished_at: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            status: "running".into(),
            error: None,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hash_input(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, outcome: &Result<()>) {
        self.finished_at = Some(Utc::now());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "error".into();
                self.error = Some(format!("{}: {e}", e.code()));
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Where the manifest for an output goes: inside it for directories,
/// `{stem}.run.json` beside it for files.
pub fn run_manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() || out.extension().is_none() {
        out.join(RUN_MANIFEST_FILE)
    } else {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy();
        out.with_file_name(format!("{stem}.run.json"))
    }
}

/// One labeled report with its scalar metrics flattened to dotted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, f64>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.insert(prefix.to_string(), x);
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => {}
    }
}

impl NamedReport {
    pub fn from_json(name: &str, value: &Value) -> Self {
        let mut metrics = BTreeMap::new();
        flatten("", value, &mut metrics);
        Self {
            name: name.to_string(),
            metrics,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let name = path.file_stem().unwrap_or_default().to_string_lossy();
        Ok(Self::from_json(&name, &value))
    }
}

/// Keys that read as headline metrics, in display order.
fn is_headline(key: &str) -> bool {
    let last = key.rsplit('.').next().unwrap_or(key);
    (last.starts_with("top") && last[3..].parse::<usize>().is_ok())
        || matches!(
            last,
            "accuracy" | "sparsity" | "intra_class_l2" | "redundancy" | "coding_length"
        )
}

fn headline_columns(reports: &[NamedReport]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in reports {
        for k in r.metrics.keys().filter(|k| is_headline(k)) {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    cols
}

/// Markdown table with one row per report and one column per headline
/// metric. Accuracies are shown as percentages.
pub fn render_table(reports: &[NamedReport]) -> String {
    let cols = headline_columns(reports);
    let mut out = String::new();
    let _ = writeln!(out, "| report | {} |", cols.join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(cols.len()));
    for r in reports {
        let cells: Vec<String> = cols
            .iter()
            .map(|c| match r.metrics.get(c) {
                Some(v) if is_accuracy(c) => format!("{:.1}", v * 100.0),
                Some(v) => format!("{v:.4}"),
                None => "–".to_string(),
            })
            .collect();
        let _ = writeln!(out, "| {} | {} |", r.name, cells.join(" | "));
    }
    out
}

fn is_accuracy(key: &str) -> bool {
    let last = key.rsplit('.').next().unwrap_or(key);
    last.starts_with("top") || last == "accuracy"
}

fn spider_metric(r: &NamedReport) -> Option<(String, f64)> {
    ["top5", "top1", "accuracy"]
        .iter()
        .find_map(|k| r.metrics.get(*k).map(|v| (k.to_string(), *v)))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Spider chart with one axis per report, plotting its top-5 accuracy (or
/// top-1, or probe accuracy when top-5 is absent) on a 0–100 radial scale.
pub fn render_spider(reports: &[NamedReport]) -> Result<String> {
    if reports.len() < 3 {
        return Err(Error::Contract(
            "a spider chart needs at least three reports".into(),
        ));
    }
    let values: Vec<(String, f64)> = reports
        .iter()
        .map(|r| {
            spider_metric(r)
                .ok_or_else(|| Error::InvalidData(format!("report {} has no accuracy", r.name)))
        })
        .collect::<Result<_>>()?;
    let (size, cx, cy, radius) = (480.0, 240.0, 240.0, 170.0);
    let n = reports.len();
    let point = |i: usize, frac: f64| {
        let angle = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        (
            cx + radius * frac * angle.cos(),
            cy + radius * frac * angle.sin(),
        )
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="12">"#
    );
    for ring in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<String> = (0..n)
            .map(|i| {
                let (x, y) = point(i, ring);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r##"  <polygon class="grid" points="{}" fill="none" stroke="#ccc"/>"##,
            pts.join(" ")
        );
    }
    for (i, r) in reports.iter().enumerate() {
        let (x, y) = point(i, 1.0);
        let (lx, ly) = point(i, 1.18);
        let _ = writeln!(
            svg,
            r##"  <line class="axis" x1="{cx}" y1="{cy}" x2="{x:.2}" y2="{y:.2}" stroke="#888"/>"##
        );
        let _ = writeln!(
            svg,
            r#"  <text x="{lx:.2}" y="{ly:.2}" text-anchor="middle">{} ({}: {:.1})</text>"#,
            xml_escape(&r.name),
            values[i].0,
            values[i].1 * 100.0
        );
    }
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, (_, v))| {
            let (x, y) = point(i, v.clamp(0.0, 1.0));
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r##"  <polygon class="series" points="{}" fill="#4a7bd0" fill-opacity="0.3" stroke="#4a7bd0" stroke-width="2"/>"##,
        pts.join(" ")
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn eval(name: &str, top1: f64, top5: f64) -> NamedReport {
        NamedReport::from_json(name, &json!({"top1": top1, "top5": top5, "n": 200}))
    }

    #[test]
    fn table_has_headline_columns() {
        let md = render_table(&[eval("a", 0.5, 0.75), eval("b", 0.25, 1.0)]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| report | top1 | top5 |");
        assert_eq!(lines[2], "| a | 50.0 | 75.0 |");
        assert_eq!(lines[3], "| b | 25.0 | 100.0 |");
    }

    #[test]
    fn spider_has_one_axis_per_report() {
        let reports: Vec<_> = (0..5)
            .map(|i| eval(&format!("set{i}"), 0.1, 0.2 * i as f64))
            .collect();
        let svg = render_spider(&reports).unwrap();
        assert_eq!(svg.matches(r#"class="axis""#).count(), 5);
        assert_eq!(svg.matches(r#"class="series""#).count(), 1);
        assert!(render_spider(&reports[..2]).is_err());
    }

    #[test]
    fn directory_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.txt"), b"x").unwrap();
        fs::write(dir.path().join("y.txt"), b"y").unwrap();
        let h1 = hash_input(dir.path()).unwrap();
        assert_eq!(h1, hash_input(dir.path()).unwrap());
        fs::write(dir.path().join("y.txt"), b"z").unwrap();
        assert_ne!(h1, hash_input(dir.path()).unwrap());
    }

    #[test]
    fn manifest_path_rules() {
        assert_eq!(
            run_manifest_path(Path::new("out/plan.jsonl")),
            Path::new("out/plan.run.json")
        );
        assert_eq!(
            run_manifest_path(Path::new("ckpt")),
            Path::new("ckpt/run_manifest.json")
        );
    }
}
