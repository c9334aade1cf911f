//! Minimal SVG line/log-log plots for campaign CSVs. Plots are convenience
//! artifacts; nothing downstream depends on them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::results::line_fit;
use crate::BenchError;

pub struct PlotRequest {
    pub x_column: String,
    pub y_column: String,
    /// Optional column whose distinct values become separate series.
    pub group_column: Option<String>,
    pub loglog: bool,
    pub title: String,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: f64 = 60.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Reads a headered CSV and renders the requested columns as an SVG plot.
/// Log-log plots carry a least-squares slope annotation per series.
pub fn plot_csv(input: &Path, output: &Path, req: &PlotRequest) -> Result<(), BenchError> {
    let raw = std::fs::read_to_string(input)
        .map_err(|e| BenchError::Runtime(format!("cannot read {input:?}: {e}")))?;
    let mut lines = raw.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| BenchError::Runtime("empty CSV".into()))?
        .split(',')
        .collect();
    let col = |name: &str| -> Result<usize, BenchError> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| BenchError::Config(format!("no column {name:?} in {input:?}")))
    };
    let xi = col(&req.x_column)?;
    let yi = col(&req.y_column)?;
    let gi = match &req.group_column {
        Some(g) => Some(col(g)?),
        None => None,
    };

    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let (Ok(x), Ok(y)) = (parts[xi].parse::<f64>(), parts[yi].parse::<f64>()) else {
            continue;
        };
        let key = gi.map(|g| parts[g].to_string()).unwrap_or_default();
        series.entry(key).or_default().push((x, y));
    }
    if series.is_empty() {
        return Err(BenchError::Runtime("no plottable rows".into()));
    }

    let tx = |v: f64| if req.loglog { v.ln() } else { v };
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for pts in series.values() {
        for &(x, y) in pts {
            if req.loglog && (x <= 0.0 || y <= 0.0) {
                continue;
            }
            xmin = xmin.min(tx(x));
            xmax = xmax.max(tx(x));
            ymin = ymin.min(tx(y));
            ymax = ymax.max(tx(y));
        }
    }
    if !(xmin.is_finite() && ymin.is_finite()) {
        return Err(BenchError::Runtime("no finite points to plot".into()));
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut xmin, &mut xmax);
    pad(&mut ymin, &mut ymax);
    let sx = |v: f64| MARGIN + (tx(v) - xmin) / (xmax - xmin) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - (tx(v) - ymin) / (ymax - ymin) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        xml_escape(&req.title)
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    let axis_label = |v: f64| {
        let shown = if req.loglog { v.exp() } else { v };
        if shown != 0.0 && (shown.abs() >= 1e4 || shown.abs() < 1e-2) {
            format!("{shown:.2e}")
        } else {
            format!("{shown:.3}")
        }
    };
    for k in 0..=4 {
        let fx = xmin + (xmax - xmin) * k as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * k as f64 / 4.0;
        let px = MARGIN + (W - 2.0 * MARGIN) * k as f64 / 4.0;
        let py = H - MARGIN - (H - 2.0 * MARGIN) * k as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            H - MARGIN + 18.0,
            axis_label(fx)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{py}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            axis_label(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 14.0,
        xml_escape(&req.x_column)
    ));

    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        // Aggregate duplicates of x into their mean so trial scatter plots
        // read as one line per series.
        let mut byx: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for &(x, y) in pts {
            if req.loglog && (x <= 0.0 || y <= 0.0) {
                continue;
            }
            byx.entry(x.to_bits()).or_insert((x, Vec::new())).1.push(y);
        }
        let mut agg: Vec<(f64, f64)> = byx
            .values()
            .map(|(x, ys)| (*x, ys.iter().sum::<f64>() / ys.len() as f64))
            .collect();
        agg.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = agg
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in &agg {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.6\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let mut legend = if name.is_empty() {
            req.y_column.clone()
        } else {
            name.clone()
        };
        if req.loglog && agg.len() >= 2 {
            let xs: Vec<f64> = agg.iter().map(|(x, _)| x.ln()).collect();
            let ys: Vec<f64> = agg.iter().map(|(_, y)| y.ln()).collect();
            let (slope, _, _) = line_fit(&xs, &ys);
            legend.push_str(&format!(" (slope {slope:.3})"));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - MARGIN - 220.0,
            MARGIN + 16.0 * (si + 1) as f64,
            xml_escape(&legend)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(output, svg)
        .map_err(|e| BenchError::Runtime(format!("cannot write {output:?}: {e}")))?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
