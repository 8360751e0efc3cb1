//! Standalone SVG charts: a grouped token-length histogram and a cosine
//! similarity heatmap. Output bytes depend only on the input values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anatomy_core::{AnatomyError, Result};

const PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round, human-sized tick step covering `max` in about five intervals.
fn tick_step(max: f64) -> f64 {
    let raw = (max / 5.0).max(1.0);
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// source -> token length -> prompt count, one bar series per source.
pub fn histogram(data: &BTreeMap<String, BTreeMap<usize, u64>>, title: &str) -> Result<String> {
    let series: Vec<(&String, &BTreeMap<usize, u64>)> =
        data.iter().filter(|(_, h)| h.values().any(|&c| c > 0)).collect();
    if series.is_empty() {
        return Err(AnatomyError::Validation("histogram has no counts".into()));
    }
    let lo = series.iter().filter_map(|(_, h)| h.keys().next()).min().copied().unwrap();
    let hi = series.iter().filter_map(|(_, h)| h.keys().next_back()).max().copied().unwrap();
    let ymax = series.iter().flat_map(|(_, h)| h.values()).max().copied().unwrap() as f64;

    let (w, h) = (760.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let bins = (hi - lo + 1) as f64;
    let bin_w = pw / bins;
    let bar_w = bin_w * 0.9 / series.len() as f64;
    let ystep = tick_step(ymax);
    let ytop = (ymax / ystep).ceil() * ystep;
    let y_of = |c: f64| top + ph - ph * c / ytop;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));

    let mut t = 0.0;
    while t <= ytop + 0.5 * ystep {
        let y = y_of(t);
        let _ = writeln!(s, r##"<line x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, t);
        t += ystep;
    }

    for (k, (_, counts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (&len, &c) in counts.iter() {
            if c == 0 {
                continue;
            }
            let x = left + (len - lo) as f64 * bin_w + bin_w * 0.05 + k as f64 * bar_w;
            let y = y_of(c as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{color}"/>"#,
                top + ph - y
            );
        }
    }

    let xstep = tick_step(bins).max(1.0) as usize;
    for len in (lo..=hi).filter(|l| (l - lo) % xstep == 0) {
        let x = left + ((len - lo) as f64 + 0.5) * bin_w;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{len}</text>"#, top + ph + 18.0);
    }
    let _ = writeln!(
        s,
        r##"<path d="M{left:.2},{top:.2}V{:.2}H{:.2}" fill="none" stroke="#333"/>"##,
        top + ph,
        left + pw
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">tokens per prompt</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">prompts</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (k, (name, _)) in series.iter().enumerate() {
        let y = top + 10.0 + 20.0 * k as f64;
        let x = left + pw + 16.0;
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{}"/>"#, y - 10.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 18.0, escape(name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Diverging blue-white-red map over [-1, 1].
fn color(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (end, t) = if v < 0.0 { ((33.0, 102.0, 172.0), -v) } else { ((178.0, 24.0, 43.0), v) };
    let mix = |c: f64| (255.0 + (c - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(end.0), mix(end.1), mix(end.2))
}

/// Row/column-labeled color grid with a legend spanning [-1, 1].
pub fn heatmap(matrix: &[Vec<f64>], title: &str) -> Result<String> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(AnatomyError::Validation("heatmap matrix is empty".into()));
    }
    if matrix.iter().any(|r| r.len() != cols) {
        return Err(AnatomyError::Validation("heatmap rows differ in length".into()));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnatomyError::Validation("heatmap has non-finite entries".into()));
    }
    let cell = (480.0 / rows.max(cols) as f64).clamp(4.0, 40.0);
    let (left, top) = (50.0, 50.0);
    let (gw, gh) = (cell * cols as f64, cell * rows as f64);
    let legend_x = left + gw + 30.0;
    let legend_h = gh.max(120.0);
    let w = legend_x + 70.0;
    let h = top + legend_h.max(gh) + 40.0;
    let label_every = (rows.max(cols) / 32).max(1);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.2}" height="{h:.2}" viewBox="0 0 {w:.2} {h:.2}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{w:.2}" height="{h:.2}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + gw / 2.0, escape(title));
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"><title>{i},{j}: {v:.4}</title></rect>"#,
                left + j as f64 * cell,
                top + i as f64 * cell,
                color(v)
            );
        }
    }
    for i in (0..rows).step_by(label_every) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{i}</text>"#, left - 4.0, top + (i as f64 + 0.5) * cell + 3.0);
    }
    for j in (0..cols).step_by(label_every) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{j}</text>"#, left + (j as f64 + 0.5) * cell, top - 6.0);
    }

    let steps = 40;
    let seg = legend_h / steps as f64;
    for k in 0..steps {
        let v = 1.0 - 2.0 * (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{legend_x:.2}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            top + k as f64 * seg,
            seg + 0.5,
            color(v)
        );
    }
    for (label, frac) in [("1", 0.0), ("0.5", 0.25), ("0", 0.5), ("-0.5", 0.75), ("-1", 1.0)] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, legend_x + 20.0, top + frac * legend_h + 3.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}
