//! Standalone SVG line plots of NMSE against SNR.

use std::fmt::Write as _;

use super::sweep::MetricRow;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn nice_bounds(lo: f64, hi: f64) -> (f64, f64) {
    let (lo, hi) = if (hi - lo).abs() < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    ((lo / 2.0).floor() * 2.0, (hi / 2.0).ceil() * 2.0)
}

/// One polyline per method, for the rows of a single density.
pub fn nmse_svg(density: &str, rows: &[MetricRow]) -> String {
    let rows: Vec<&MetricRow> = rows.iter().filter(|r| r.density == density && r.nmse_db.is_finite()).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let xs = rows.iter().map(|r| r.snr_db);
    let ys = rows.iter().map(|r| r.nmse_db);
    let (x0, x1) = nice_bounds(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = nice_bounds(ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">NMSE, pilot density {density}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#, px(x), H - PAD + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#, PAD - 6.0, py(y) + 4.0);
        let _ = writeln!(s, r##"<line x1="{PAD}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, W - PAD, py(y), py(y));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">SNR (dB)</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">NMSE (dB)</text>"#, H / 2.0, H / 2.0);
    for (k, m) in methods.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.method == *m)
            .map(|r| format!("{:.1},{:.1}", px(r.snr_db), py(r.nmse_db)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = PAD + 8.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - PAD - 110.0, W - PAD - 86.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{m}</text>"#, W - PAD - 80.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_method() {
        let row = |m: &str, snr: f64, v: f64| MetricRow {
            method: m.into(),
            density: "2/8".into(),
            snr_db: snr,
            nmse_db: v,
            n_samples: 1,
            seed: 0,
        };
        let rows = vec![row("ls", 0.0, -1.0), row("ls", 10.0, -5.0), row("lmmse", 0.0, -3.0), row("lmmse", 10.0, -9.0)];
        let svg = nmse_svg("2/8", &rows);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
