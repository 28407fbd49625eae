use std::fmt::Write as _;
use std::str::FromStr;

use super::{EvalError, MetricReport, MetricRow};

pub const CSV_HEADER: &str = "method,tau,K,min_ade,min_fde,mr,n_samples";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "svg" => Ok(Self::Svg),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

/// `(file name, contents)` pairs: `report.csv`, `report.md`, or one
/// `<metric>.svg` per metric.
pub fn render_report(report: &MetricReport, format: ReportFormat) -> Vec<(String, String)> {
    match format {
        ReportFormat::Csv => vec![("report.csv".into(), render_csv(report))],
        ReportFormat::Markdown => vec![("report.md".into(), render_markdown(report))],
        ReportFormat::Svg => Metric::ALL.iter().map(|m| (format!("{}.svg", m.key()), render_svg(report, *m))).collect(),
    }
}

pub fn render_csv(report: &MetricReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.method, r.tau, r.k, r.min_ade, r.min_fde, r.mr, r.n_samples);
    }
    s
}

pub fn parse_csv(text: &str) -> Result<MetricReport, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(EvalError::Csv { line: 1, detail: format!("unexpected header {h:?}") }),
        None => return Err(EvalError::Csv { line: 1, detail: "missing header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| EvalError::Csv { line: i + 1, detail };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let float = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        rows.push(MetricRow {
            method: f[0].to_string(),
            tau: int(f[1])?,
            k: int(f[2])?,
            min_ade: float(f[3])?,
            min_fde: float(f[4])?,
            mr: float(f[5])?,
            n_samples: int(f[6])?,
        });
    }
    Ok(MetricReport { rows })
}

pub fn render_markdown(report: &MetricReport) -> String {
    let taus = report.taus();
    let mut s = String::new();
    for k in report.ks() {
        let _ = writeln!(s, "### K = {k}\n");
        s.push_str("| method |");
        for t in &taus {
            let _ = write!(s, " minADE τ={t} | minFDE τ={t} | MR τ={t} |");
        }
        s.push_str("\n|---|");
        for _ in &taus {
            s.push_str("---:|---:|---:|");
        }
        s.push('\n');
        for m in report.methods() {
            let _ = write!(s, "| {m} |");
            for &t in &taus {
                match report.row(&m, t, k) {
                    Ok(r) => {
                        let _ = write!(s, " {:.3} | {:.3} | {:.3} |", r.min_ade, r.min_fde, r.mr);
                    }
                    Err(_) => s.push_str(" - | - | - |"),
                }
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MinAde,
    MinFde,
    MissRate,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MinAde, Metric::MinFde, Metric::MissRate];

    pub fn key(self) -> &'static str {
        match self {
            Metric::MinAde => "min_ade",
            Metric::MinFde => "min_fde",
            Metric::MissRate => "mr",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::MinAde => "minADE",
            Metric::MinFde => "minFDE",
            Metric::MissRate => "MR",
        }
    }

    pub fn of(self, r: &MetricRow) -> f64 {
        match self {
            Metric::MinAde => r.min_ade,
            Metric::MinFde => r.min_fde,
            Metric::MissRate => r.mr,
        }
    }
}

/// One line per method of `metric` against τ, one panel per K.
pub fn render_svg(report: &MetricReport, metric: Metric) -> String {
    let (pw, ph, pad) = (300.0, 200.0, 48.0);
    let ks = report.ks();
    let taus = report.taus();
    let methods = report.methods();
    let width = ks.len().max(1) as f64 * (pw + pad) + pad;
    let height = ph + 2.0 * pad + 18.0 * methods.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let (tmin, tmax) = match (taus.first(), taus.last()) {
        (Some(a), Some(b)) => (*a as f64, *b as f64),
        _ => (0.0, 0.0),
    };
    for (p, &k) in ks.iter().enumerate() {
        let x0 = pad + p as f64 * (pw + pad);
        let y0 = pad;
        let hi = report.rows.iter().filter(|r| r.k == k).map(|r| metric.of(r)).fold(0.0, f64::max).max(1e-9) * 1.1;
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="gray"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{} (K={k})</text>"#, x0 + pw / 2.0, y0 - 10.0, metric.label());
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.2}</text>"#, x0 - 4.0, y0 + 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, x0 - 4.0, y0 + ph);
        let px = |t: usize| {
            if tmax > tmin {
                x0 + 12.0 + (t as f64 - tmin) / (tmax - tmin) * (pw - 24.0)
            } else {
                x0 + pw / 2.0
            }
        };
        let py = |v: f64| y0 + ph - v / hi * ph;
        for &t in &taus {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">τ={t}</text>"#, px(t), y0 + ph + 14.0);
        }
        for (mi, m) in methods.iter().enumerate() {
            let color = PALETTE[mi % PALETTE.len()];
            let pts: Vec<String> = taus
                .iter()
                .filter_map(|&t| report.row(m, t, k).ok().map(|r| format!("{:.2},{:.2}", px(t), py(metric.of(r)))))
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        }
    }
    for (mi, m) in methods.iter().enumerate() {
        let y = ph + 2.0 * pad + 18.0 * mi as f64;
        let color = PALETTE[mi % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{pad}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{m}</text>"#, pad + 18.0);
    }
    s.push_str("</svg>\n");
    s
}
