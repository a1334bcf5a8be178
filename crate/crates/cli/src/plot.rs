//! Self-contained SVG line charts of metric against labeled-set size.
//!
//! One chart per (metric, test split); x is log-scaled, each method is a
//! line through the seed means with a shaded ±1 std band.

use std::collections::BTreeMap;
use std::fmt::Write;

use satlearn::metrics::{AggregateRecord, Split};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    AucPr,
    AucRoc,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::AucPr => "auc_pr",
            Metric::AucRoc => "auc_roc",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::AucPr => "AUC-PR",
            Metric::AucRoc => "AUC-ROC",
        }
    }

    fn of(self, a: &AggregateRecord) -> (f64, f64) {
        match self {
            Metric::AucPr => (a.auc_pr_mean, a.auc_pr_std),
            Metric::AucRoc => (a.auc_roc_mean, a.auc_roc_std),
        }
    }
}

pub const CHARTS: [(Metric, Split); 4] = [
    (Metric::AucPr, Split::InDomain),
    (Metric::AucRoc, Split::InDomain),
    (Metric::AucPr, Split::OutOfDomain),
    (Metric::AucRoc, Split::OutOfDomain),
];

pub fn file_name(metric: Metric, split: Split) -> String {
    format!("{}_{split}.svg", metric.key())
}

fn color(method: &str, fallback: usize) -> &'static str {
    match method {
        "supervised" => "#1f77b4",
        "pretrain_finetune" => "#ff7f0e",
        "few_shot" => "#2ca02c",
        _ => ["#d62728", "#9467bd", "#8c564b", "#7f7f7f"][fallback % 4],
    }
}

fn split_title(split: Split) -> &'static str {
    match split {
        Split::InDomain => "in-domain test",
        Split::OutOfDomain => "out-of-domain test",
        Split::Validation => "validation",
    }
}

/// Pixel x of each distinct sample size, spaced by log10.
pub fn log_ticks(ns: &[usize]) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = ns.iter().copied().filter(|&n| n > 0).collect();
    ns.sort_unstable();
    ns.dedup();
    let (lo, hi) = match (ns.first(), ns.last()) {
        (Some(&a), Some(&b)) if a < b => ((a as f64).log10(), (b as f64).log10()),
        (Some(&a), _) => ((a as f64).log10() - 0.5, (a as f64).log10() + 0.5),
        _ => return Vec::new(),
    };
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = W - LEFT - RIGHT;
    ns.into_iter()
        .map(|n| (n, LEFT + ((n as f64).log10() - lo) / (hi - lo) * plot_w))
        .collect()
}

fn y_range(values: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (m, s) in values {
        lo = lo.min(m - s);
        hi = hi.max(m + s);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = (lo * 10.0).floor() / 10.0;
    let hi = (hi * 10.0).ceil() / 10.0;
    let (lo, hi) = (lo.max(0.0), hi.min(1.0));
    if hi - lo < 0.1 {
        ((hi - 0.1).max(0.0), (lo + 0.1).min(1.0))
    } else {
        (lo, hi)
    }
}

/// Renders one chart. Output depends only on the inputs.
pub fn render(summary: &[AggregateRecord], metric: Metric, split: Split, hash: &str) -> String {
    let rows: Vec<&AggregateRecord> = summary.iter().filter(|a| a.split == split).collect();
    let ns: Vec<usize> = rows.iter().map(|a| a.n_labeled).collect();
    let ticks = log_ticks(&ns);
    let x_of: BTreeMap<usize, f64> = ticks.iter().copied().collect();
    let (y_lo, y_hi) = y_range(rows.iter().map(|a| metric.of(a)));
    let plot_h = H - TOP - BOTTOM;
    let y = |v: f64| TOP + (y_hi - v.clamp(y_lo, y_hi)) / (y_hi - y_lo) * plot_h;
    let x_right = W - RIGHT;

    let mut by_method: Vec<(String, Vec<&AggregateRecord>)> = Vec::new();
    for a in &rows {
        match by_method.iter_mut().find(|(m, _)| *m == a.method) {
            Some((_, v)) => v.push(a),
            None => by_method.push((a.method.clone(), vec![a])),
        }
    }
    by_method.sort_by_key(|(m, _)| {
        (
            ["supervised", "pretrain_finetune", "few_shot"]
                .iter()
                .position(|k| k == m)
                .unwrap_or(usize::MAX),
            m.clone(),
        )
    });

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- config {hash} -->");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}, {}</text>"#,
        (LEFT + x_right) / 2.0,
        metric.title(),
        split_title(split)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x_right - LEFT,
        plot_h
    );
    for i in 0..=5 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let py = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{x_right:.2}" y2="{py:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            LEFT - 6.0,
            py + 4.0
        );
    }
    for (n, px) in &ticks {
        let _ = writeln!(
            s,
            r#"<line class="xtick" x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{n}</text>"#,
            H - BOTTOM,
            H - BOTTOM + 5.0,
            H - BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">labeled training sessions (log scale)</text>"#,
        (LEFT + x_right) / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        metric.title()
    );

    for (i, (method, mut pts)) in by_method.into_iter().enumerate() {
        pts.sort_by_key(|a| a.n_labeled);
        let c = color(&method, i);
        let upper: Vec<String> = pts
            .iter()
            .map(|a| {
                let (m, sd) = metric.of(a);
                format!("{:.2},{:.2}", x_of[&a.n_labeled], y(m + sd))
            })
            .collect();
        let lower: Vec<String> = pts
            .iter()
            .rev()
            .map(|a| {
                let (m, sd) = metric.of(a);
                format!("{:.2},{:.2}", x_of[&a.n_labeled], y(m - sd))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{} {}" fill="{c}" fill-opacity="0.18" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts
            .iter()
            .map(|a| format!("{:.2},{:.2}", x_of[&a.n_labeled], y(metric.of(a).0)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-method="{method}" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for p in &line {
            let (px, py) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{c}"/>"#);
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{method}</text>"#,
            x_right + 12.0,
            x_right + 32.0,
            x_right + 38.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
