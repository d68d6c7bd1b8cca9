//! Overlaid per-class distance histograms as CSV data and SVG images.

use std::fmt::Write as _;

use crate::dataset::Category;
use crate::profiles::{distances_by_class, DistanceRecord};

pub const DEFAULT_BINS: usize = 40;

pub fn color(category: Category) -> &'static str {
    match category {
        Category::Train => "#2ca02c",
        Category::Test => "#1f77b4",
        Category::Random => "#d62728",
        Category::Rotation => "#c000c0",
    }
}

/// Shared-bin histograms of one class, one series per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHistogram {
    pub class_id: usize,
    pub edges: Vec<f64>,
    /// Category, record count and per-bin fraction of that category's records.
    pub series: Vec<(Category, usize, Vec<f64>)>,
}

/// Builds one histogram per class over the records of every category.
pub fn class_histograms(
    groups: &[(Category, &[DistanceRecord])],
    num_classes: usize,
    bins: usize,
) -> Vec<ClassHistogram> {
    let bins = bins.max(1);
    let per_cat: Vec<(Category, Vec<Vec<f64>>)> =
        groups.iter().map(|(c, r)| (*c, distances_by_class(r, num_classes))).collect();
    (0..num_classes)
        .map(|k| {
            let all = per_cat.iter().flat_map(|(_, d)| d[k].iter().copied());
            let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
            let step = (hi - lo) / bins as f64;
            let edges: Vec<f64> = (0..=bins).map(|i| lo + step * i as f64).collect();
            let series = per_cat
                .iter()
                .map(|(cat, d)| {
                    let mut counts = vec![0usize; bins];
                    for &v in &d[k] {
                        let i = (((v - lo) / step) as usize).min(bins - 1);
                        counts[i] += 1;
                    }
                    let n = d[k].len();
                    let fr = counts.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
                    (*cat, n, fr)
                })
                .collect();
            ClassHistogram { class_id: k, edges, series }
        })
        .collect()
}

pub fn histogram_csv(h: &ClassHistogram, header: &str) -> String {
    let mut s = String::from(header);
    s.push_str("bin_low,bin_high");
    for (cat, _, _) in &h.series {
        let _ = write!(s, ",{cat}");
    }
    s.push('\n');
    for b in 0..h.edges.len() - 1 {
        let _ = write!(s, "{:.6},{:.6}", h.edges[b], h.edges[b + 1]);
        for (_, _, fr) in &h.series {
            let _ = write!(s, ",{:.6}", fr[b]);
        }
        s.push('\n');
    }
    s
}

/// Renders the histogram as filled, outlined step bars per category.
pub fn histogram_svg(h: &ClassHistogram, comment: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 150.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;
    let plot_w = W - L - R;
    let plot_h = H - T - B;
    let ymax = h
        .series
        .iter()
        .flat_map(|(_, _, fr)| fr.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let (lo, hi) = (h.edges[0], h.edges[h.edges.len() - 1]);
    let x = |v: f64| L + (v - lo) / (hi - lo) * plot_w;
    let y = |v: f64| T + plot_h - v / ymax * plot_h;

    let mut s = String::new();
    if !comment.is_empty() {
        let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
    }
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">class {} distance distributions</text>"#,
        L + plot_w / 2.0,
        h.class_id
    );
    for (cat, n, fr) in &h.series {
        if *n == 0 {
            continue;
        }
        let mut path = format!("M{:.2},{:.2}", x(lo), y(0.0));
        for (b, &f) in fr.iter().enumerate() {
            let _ = write!(path, " L{:.2},{:.2} L{:.2},{:.2}", x(h.edges[b]), y(f), x(h.edges[b + 1]), y(f));
        }
        let _ = write!(path, " L{:.2},{:.2} Z", x(hi), y(0.0));
        let c = color(*cat);
        let _ = writeln!(
            s,
            r#"<path d="{path}" fill="{c}" fill-opacity="0.25" stroke="{c}" stroke-width="1.2"/>"#
        );
    }
    let _ = writeln!(
        s,
        r#"<path d="M{L},{T} L{L},{:.2} L{:.2},{:.2}" fill="none" stroke="black"/>"#,
        T + plot_h,
        L + plot_w,
        T + plot_h
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.1}</text>"#,
            x(v),
            T + plot_h + 16.0,
            v
        );
        let f = ymax * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
            L - 6.0,
            y(f) + 4.0,
            f
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">distance (nats)</text>"#,
        L + plot_w / 2.0,
        H - 10.0
    );
    for (i, (cat, n, _)) in h.series.iter().enumerate() {
        let ly = T + 10.0 + 20.0 * i as f64;
        let c = color(*cat);
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="14" height="10" fill="{c}" fill-opacity="0.4" stroke="{c}"/>"#,
            L + plot_w + 12.0,
            ly
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{cat} (n={n})</text>"#,
            L + plot_w + 32.0,
            ly + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}
