//! Tables, CSV serialization and SVG plots for experiment results.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a rerun
//! with the same inputs produces byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::ExperimentError;

/// One CSV field.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn opt(v: Option<f64>) -> Cell {
        v.map_or(Cell::Empty, Cell::Float)
    }

    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) if v.is_nan() => "NaN".into(),
            Cell::Float(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }
}

/// A rectangular table with named columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column, `None` where the cell is not a number.
    pub fn numeric_column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j].as_f64()).collect())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| ExperimentError::Io {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        };
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(io)?;
        }
        w.into_inner().map_err(|e| ExperimentError::Io {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        })
    }
}

/// One plotted curve: `y` against `x`, both read from table columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    /// Column holding the plotted values.
    pub column: String,
    /// Free-form group label, such as `alpha=0.05`.
    pub group: String,
    pub points: Vec<(f64, f64)>,
}

/// A log-scale probability plot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plot {
    pub title: String,
    pub x_column: String,
    pub series: Vec<Series>,
}

/// Smallest probability shown on the log axis; zeros are dropped.
const PLOT_FLOOR: f64 = 1e-6;

impl Plot {
    /// One series per `(column, group)` pair from `table`, grouping rows by
    /// the value of `group_column` when given.
    pub fn from_table(title: &str, table: &Table, x_column: &str, y_columns: &[&str], group_column: Option<&str>) -> Plot {
        let xs = table.numeric_column(x_column).unwrap_or_default();
        let groups: Vec<String> = match group_column.and_then(|g| table.column_index(g)) {
            Some(j) => table.rows.iter().map(|r| format!("{}={}", table.columns[j], r[j].render())).collect(),
            None => vec![String::from("all"); table.rows.len()],
        };
        let mut order: Vec<String> = Vec::new();
        for g in &groups {
            if !order.contains(g) {
                order.push(g.clone());
            }
        }
        let mut series = Vec::new();
        for col in y_columns {
            let Some(ys) = table.numeric_column(col) else {
                continue;
            };
            for g in &order {
                let points: Vec<(f64, f64)> = (0..table.rows.len())
                    .filter(|&i| &groups[i] == g)
                    .filter_map(|i| Some((xs.get(i).copied().flatten()?, ys[i]?)))
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .collect();
                if !points.is_empty() {
                    series.push(Series {
                        column: col.to_string(),
                        group: g.clone(),
                        points,
                    });
                }
            }
        }
        Plot {
            title: title.to_string(),
            x_column: x_column.to_string(),
            series,
        }
    }

    /// Columns drawn by this plot, in first-use order.
    pub fn columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![self.x_column.as_str()];
        for s in &self.series {
            if !out.contains(&s.column.as_str()) {
                out.push(&s.column);
            }
        }
        out
    }

    /// Plain-text companion: one block per series, `x y` per line.
    pub fn to_dat(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.title);
        for s in &self.series {
            let _ = writeln!(out, "# column={} group={}", s.column, s.group);
            let _ = writeln!(out, "# {} {}", self.x_column, s.column);
            for (x, y) in &s.points {
                let _ = writeln!(out, "{x} {y}");
            }
            out.push_str("\n\n");
        }
        out
    }

    /// Self-contained SVG with a linear x axis and a log10 y axis.
    pub fn to_svg(&self) -> String {
        let (w, h) = (720.0, 480.0);
        let (left, right, top, bottom) = (70.0, 200.0, 40.0, 50.0);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let all: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        let (xmin, xmax) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
        let (xmin, xmax) = if xmin.is_finite() && xmax > xmin { (xmin, xmax) } else { (0.0, 1.0) };
        let ylog = |y: f64| y.max(PLOT_FLOOR).log10();
        let ymin_data = all.iter().map(|(_, y)| ylog(*y)).fold(0.0f64, f64::min);
        let ymin = ymin_data.floor().min(-1.0);
        let ymax = 0.0;
        let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
        let sy = |ly: f64| top + (ymax - ly) / (ymax - ymin) * ph;

        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(out, r#"<title>{}</title>"#, escape(&self.title));
        let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<g id="axes" stroke="black" fill="none"><rect x="{left}" y="{top}" width="{pw}" height="{ph}"/></g>"#
        );
        let _ = writeln!(out, r#"<g id="y-ticks" font-size="11" font-family="sans-serif">"#);
        let mut e = ymin as i64;
        while e <= 0 {
            let y = sy(e as f64);
            let _ = writeln!(
                out,
                r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
                left + pw,
                left - 6.0,
                y + 4.0
            );
            e += 1;
        }
        let _ = writeln!(out, "</g>");
        let _ = writeln!(out, r#"<g id="x-ticks" font-size="11" font-family="sans-serif">"#);
        for i in 0..=4 {
            let xv = xmin + (xmax - xmin) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                sx(xv),
                top + ph + 18.0,
                (xv * 100.0).round() / 100.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text></g>"#,
            left + pw / 2.0,
            h - 10.0,
            escape(&self.x_column)
        );
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
        for (i, s) in self.series.iter().enumerate() {
            let color = palette[i % palette.len()];
            let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(ylog(*y)))).collect();
            let _ = writeln!(
                out,
                r#"<polyline data-column="{}" data-group="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(&s.column),
                escape(&s.group),
                pts.join(" ")
            );
            let ly = top + 14.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" font-family="sans-serif" fill="{color}">{} ({})</text>"#,
                left + pw + 10.0,
                ly + 4.0,
                escape(&s.column),
                escape(&s.group)
            );
        }
        let _ = writeln!(out, "</svg>");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reads the `data-column` attributes back out of an SVG written by
/// [`Plot::to_svg`].
pub fn svg_columns(svg: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in svg.split("data-column=\"").skip(1) {
        if let Some(end) = part.find('"') {
            let c = part[..end].replace("&quot;", "\"").replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf, ExperimentError> {
    fs::write(path, bytes).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(path.to_path_buf())
}
