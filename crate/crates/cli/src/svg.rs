//! Minimal static SVG charts (line, scatter, grouped bars) for the report.

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 56.0; // left margin
const MR: f64 = 16.0;
const MT: f64 = 36.0;
const MB: f64 = 46.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for &(x, y) in pts {
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        if !f.x_min.is_finite() {
            f = Frame {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
            };
        }
        if f.x_max == f.x_min {
            f.x_max = f.x_min + 1.0;
        }
        if f.y_max == f.y_min {
            f.y_max = f.y_min + 1.0;
        }
        let pad = (f.y_max - f.y_min) * 0.08;
        f.y_min -= pad;
        f.y_max += pad;
        f
    }

    fn sx(&self, x: f64) -> f64 {
        ML + (x - self.x_min) / (self.x_max - self.x_min) * (W - ML - MR)
    }

    fn sy(&self, y: f64) -> f64 {
        H - MB - (y - self.y_min) / (self.y_max - self.y_min) * (H - MT - MB)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn axes(f: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x_min + t * (f.x_max - f.x_min);
        let yv = f.y_min + t * (f.y_max - f.y_min);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            f.sx(xv),
            H - MB + 16.0,
            trim_num(xv)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            f.sy(yv) + 4.0,
            trim_num(yv)
        ));
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            f.sy(yv),
            W - MR,
            f.sy(yv)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (W + ML - MR) / 2.0,
        H - 10.0,
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        (H + MT - MB) / 2.0,
        (H + MT - MB) / 2.0,
        escape(y_label)
    ));
    s
}

fn legend(names: &[String]) -> String {
    let mut s = String::new();
    for (i, name) in names.iter().enumerate() {
        let y = MT + 6.0 + i as f64 * 16.0;
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            W - MR - 150.0,
            y - 9.0,
            color(i),
            W - MR - 136.0,
            y,
            escape(name)
        ));
    }
    s
}

fn trim_num(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Polyline series over shared axes.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let frame = Frame::from_points(series.iter().flat_map(|(_, pts)| pts.iter()));
    let mut s = header(title);
    s.push_str(&axes(&frame, x_label, y_label));
    for (i, (_, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.sx(x), frame.sy(y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            path.join(" "),
            color(i)
        ));
        for &(x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.6\" fill=\"{}\"/>\n",
                frame.sx(x),
                frame.sy(y),
                color(i)
            ));
        }
    }
    s.push_str(&legend(&series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()));
    s.push_str("</svg>\n");
    s
}

/// Labeled 2-D point clouds (feature projections).
pub fn scatter_chart(title: &str, groups: &[(String, Vec<[f64; 2]>)]) -> String {
    let pts: Vec<(f64, f64)> = groups
        .iter()
        .flat_map(|(_, g)| g.iter().map(|p| (p[0], p[1])))
        .collect();
    let frame = Frame::from_points(pts.iter());
    let mut s = header(title);
    s.push_str(&axes(&frame, "pc1", "pc2"));
    for (i, (_, g)) in groups.iter().enumerate() {
        for p in g {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.55\"/>\n",
                frame.sx(p[0]),
                frame.sy(p[1]),
                color(i)
            ));
        }
    }
    s.push_str(&legend(&groups.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()));
    s.push_str("</svg>\n");
    s
}

/// Normalized histogram overlay (confidence-score shift plots).
pub fn histogram_chart(title: &str, series: &[(String, Vec<u64>)]) -> String {
    let mut lines: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (name, counts) in series {
        let total: u64 = counts.iter().sum();
        let denom = if total == 0 { 1.0 } else { total as f64 };
        let bins = counts.len().max(1);
        let pts: Vec<(f64, f64)> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| ((i as f64 + 0.5) / bins as f64, c as f64 / denom))
            .collect();
        lines.push((name.clone(), pts));
    }
    line_chart(title, "score", "fraction", &lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_wellformed_svg() {
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[("a".into(), vec![(0.0, 0.1), (1.0, 0.4)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
        let svg = scatter_chart("s", &[("g".into(), vec![[0.0, 0.0], [1.0, 1.0]])]);
        assert!(svg.contains("circle"));
        let svg = histogram_chart("h", &[("d".into(), vec![1, 2, 3])]);
        assert!(svg.contains("polyline"));
    }
}
