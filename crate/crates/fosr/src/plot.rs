//! Tidy power tables and self-contained SVG power curves.

use std::fmt::Write;

use fosr_core::kernel::KernelFamily;
use fosr_core::sim::{BenchResult, Method};

/// `scenario,method,delta,power`, one row per (delta, method).
pub fn power_csv(bench: &BenchResult) -> String {
    let mut out = String::from("scenario,method,delta,power\n");
    for (delta, method, power) in bench.power_rows() {
        writeln!(
            out,
            "{},{},{},{}",
            bench.scenario,
            method.name(),
            delta,
            power
        )
        .unwrap();
    }
    out
}

struct Style {
    dash: &'static str,
    color: &'static str,
}

fn style(m: Method) -> Style {
    match m {
        Method::Kernel(KernelFamily::Linear) => Style {
            dash: "6,4",
            color: "#1f77b4",
        },
        Method::Kernel(KernelFamily::Quadratic) => Style {
            dash: "2,3",
            color: "#2ca02c",
        },
        Method::Kernel(KernelFamily::Gaussian) => Style {
            dash: "8,3,2,3",
            color: "#d62728",
        },
        Method::F => Style {
            dash: "3,3,9,3",
            color: "#555555",
        },
    }
}

fn marker(out: &mut String, m: Method, x: f64, y: f64, color: &str) {
    let s = 4.0;
    match m {
        Method::Kernel(KernelFamily::Linear) => writeln!(
            out,
            r#"<path d="M{:.2},{:.2} L{:.2},{:.2} L{:.2},{:.2} Z" fill="none" stroke="{color}"/>"#,
            x,
            y - s,
            x - s,
            y + s,
            x + s,
            y + s
        ),
        Method::Kernel(KernelFamily::Quadratic) => writeln!(
            out,
            r#"<path d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="{color}"/>"#,
            x - s,
            y,
            x + s,
            y,
            x,
            y - s,
            x,
            y + s
        ),
        Method::Kernel(KernelFamily::Gaussian) => writeln!(
            out,
            r#"<path d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="{color}"/>"#,
            x - s,
            y - s,
            x + s,
            y + s,
            x - s,
            y + s,
            x + s,
            y - s
        ),
        Method::F => writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{s}" fill="none" stroke="{color}"/>"#
        ),
    }
    .unwrap();
}

/// Power against delta, one line and marker style per method, with a
/// horizontal reference at the nominal level.
pub fn power_svg(bench: &BenchResult) -> String {
    let (w, h) = (480.0, 360.0);
    let (left, right, top, bottom) = (56.0, 120.0, 30.0, 46.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let rows = bench.power_rows();
    let dmax = rows.iter().map(|r| r.0).fold(0.0f64, f64::max);
    let dmax = if dmax > 0.0 { dmax } else { 1.0 };
    let sx = |d: f64| left + pw * d / dmax;
    let sy = |p: f64| top + ph * (1.0 - p);

    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{:.2}" y="18" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        bench.scenario
    )
    .unwrap();
    writeln!(
        out,
        r#"<path d="M{left},{top} L{left},{:.2} L{:.2},{:.2}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    )
    .unwrap();
    for k in 0..=5 {
        let p = k as f64 / 5.0;
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{p:.1}</text>"#,
            left - 6.0,
            sy(p) + 4.0
        )
        .unwrap();
        let d = dmax * p;
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{d:.2}</text>"#,
            sx(d),
            top + ph + 16.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">delta</text>"#,
        left + pw / 2.0,
        h - 8.0
    )
    .unwrap();
    writeln!(out, r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">power</text>"#, top + ph / 2.0, top + ph / 2.0).unwrap();
    let alpha = bench.config.alpha_power;
    writeln!(
        out,
        r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="0.8"/>"#,
        sy(alpha),
        left + pw,
        sy(alpha)
    )
    .unwrap();

    for (k, &method) in bench.config.methods.iter().enumerate() {
        let st = style(method);
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.1 == method)
            .map(|r| (sx(r.0), sy(r.2)))
            .collect();
        if pts.len() > 1 {
            let d: Vec<String> = pts
                .iter()
                .enumerate()
                .map(|(i, (x, y))| format!("{}{x:.2},{y:.2}", if i == 0 { "M" } else { "L" }))
                .collect();
            writeln!(
                out,
                r#"<path d="{}" fill="none" stroke="{}" stroke-dasharray="{}"/>"#,
                d.join(" "),
                st.color,
                st.dash
            )
            .unwrap();
        }
        for &(x, y) in &pts {
            marker(&mut out, method, x, y, st.color);
        }
        let ly = top + 12.0 + 18.0 * k as f64;
        let lx = left + pw + 14.0;
        writeln!(out, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-dasharray="{}"/>"#, lx + 30.0, st.color, st.dash).unwrap();
        marker(&mut out, method, lx + 15.0, ly, st.color);
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 36.0,
            ly + 4.0,
            method.name()
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
