//! Bar, line and raster charts as plain SVG text. Coordinates are printed
//! with fixed precision so identical data gives identical bytes.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        escape(title)
    )
}

fn axes(s: &mut String, y_lo: f64, y_hi: f64, y_label: &str, log: bool) {
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{:.1}\" stroke=\"black\"/>", H - PAD);
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let v = y_lo + t * (y_hi - y_lo);
        let y = H - PAD - t * (H - 2.0 * PAD);
        let label = if log { format!("{:.1e}", 10f64.powf(v)) } else { format!("{v:.3}") };
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>", PAD - 4.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// Vertical bars with a dashed reference line at `reference`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)], reference: Option<f64>) -> String {
    let mut s = open(title, W, H);
    let hi = bars.iter().map(|b| b.1).chain(reference).fold(0.0f64, f64::max) * 1.1;
    let hi = if hi > 0.0 { hi } else { 1.0 };
    axes(&mut s, 0.0, hi, y_label, false);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let y_of = |v: f64| H - PAD - v / hi * (H - 2.0 * PAD);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        let y = y_of(*v);
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            slot * 0.7,
            H - PAD - y,
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>", y - 4.0);
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - PAD + 16.0, escape(label));
    }
    if let Some(r) = reference {
        let y = y_of(r);
        let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>", W - PAD);
    }
    s.push_str("</svg>\n");
    s
}

/// Polylines with a legend; `log_y` plots `log10(y)` (non-positive values are
/// dropped).
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(n, p)| (n.clone(), p.iter().filter(|(_, y)| !log_y || *y > 0.0).map(|&(x, y)| (x, tf(y))).collect()))
        .collect();
    let all = pts.iter().flat_map(|(_, p)| p.iter());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let mut s = open(title, W, H);
    axes(&mut s, y_lo, y_hi, y_label, log_y);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{:.1}\">{x_lo}</text><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{x_hi}</text>", H - PAD + 16.0, W - PAD, H - PAD + 16.0);
    for (i, (name, p)) in pts.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p
            .iter()
            .map(|&(x, y)| {
                let px = PAD + (x - x_lo) / (x_hi - x_lo) * (W - 2.0 * PAD);
                let py = H - PAD - (y - y_lo) / (y_hi - y_lo) * (H - 2.0 * PAD);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", coords.join(" "));
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", W - PAD - 150.0, ly - 9.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>", W - PAD - 135.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Grid of cells shaded from white (minimum) to dark red (maximum).
pub fn raster(title: &str, rows: usize, cols: usize, values: &[f64]) -> String {
    let cell = 40.0;
    let (w, h) = (cols as f64 * cell + 2.0 * PAD, rows as f64 * cell + 2.0 * PAD);
    let mut s = open(title, w, h);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for r in 0..rows {
        for c in 0..cols {
            let v = values[r * cols + c];
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let g = (255.0 * (1.0 - t)).round() as u8;
            let red = (255.0 - 100.0 * t).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"#{red:02x}{g:02x}{g:02x}\"><title>({r},{c}) {v:.6}</title></rect>",
                PAD + c as f64 * cell,
                PAD + r as f64 * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
