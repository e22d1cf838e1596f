//! Loss and representation-std curves from metrics CSVs, rendered as SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ssl_lab::train::{MetricRow, METRICS_HEADER};

use crate::Failure;

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 760.0;
const PANEL_H: f64 = 240.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 30.0;
const GAP: f64 = 70.0;

#[derive(Clone, Debug)]
pub struct Run {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

/// Parses one metrics CSV; errors name the file and line.
pub fn parse_metrics(path: &Path, text: &str) -> Result<Vec<MetricRow>, Failure> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Err(Failure::Input(format!("{}: empty CSV", path.display()))),
        Some((_, h)) if h.trim() != METRICS_HEADER => {
            return Err(Failure::Input(format!(
                "{}:1: expected header `{METRICS_HEADER}`, got `{h}`",
                path.display()
            )))
        }
        Some(_) => {}
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Failure::Input(format!("{}:{}: {what}: `{line}`", path.display(), n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        rows.push(MetricRow {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            step: f[1].parse().map_err(|_| bad("bad step"))?,
            split: f[2].to_string(),
            metric: f[3].to_string(),
            value: f[4].parse().map_err(|_| bad("bad value"))?,
            lr: f[5].parse().map_err(|_| bad("bad lr"))?,
        });
    }
    if rows.is_empty() {
        return Err(Failure::Input(format!("{}: empty CSV (no rows after the header)", path.display())));
    }
    Ok(rows)
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<Run>, Failure> {
    let mut runs: Vec<Run> = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
        let mut name = run_name(path);
        if runs.iter().any(|r| r.name == name) {
            name = format!("{name}-{}", runs.len() + 1);
        }
        runs.push(Run {
            name,
            rows: parse_metrics(path, &text)?,
        });
    }
    Ok(runs)
}

/// Per-epoch mean of `train/metric`.
fn per_epoch(rows: &[MetricRow], metric: &str) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "train" && r.metric == metric) {
        let e = acc.entry(r.epoch).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(ep, (s, n))| (ep as f64, s / n as f64)).collect()
}

/// Epoch loss, falling back to the mean of per-step losses.
pub fn loss_series(rows: &[MetricRow]) -> Vec<(f64, f64)> {
    let epoch = per_epoch(rows, "epoch_loss");
    if epoch.is_empty() {
        per_epoch(rows, "loss")
    } else {
        epoch
    }
}

pub fn std_series(rows: &[MetricRow]) -> Vec<(f64, f64)> {
    per_epoch(rows, "representation_std")
}

struct Panel<'a> {
    title: &'a str,
    y_label: &'a str,
    y_range: (f64, f64),
    top: f64,
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

fn draw_panel(svg: &mut String, p: &Panel<'_>, x_max: f64, series: &[(&str, &str, Vec<(f64, f64)>)]) {
    let plot_w = WIDTH - LEFT - RIGHT;
    let (y0, y1) = p.y_range;
    let sx = |x: f64| LEFT + plot_w * if x_max > 1.0 { (x - 1.0) / (x_max - 1.0) } else { 0.5 };
    let sy = |y: f64| p.top + PANEL_H * (1.0 - (y.clamp(y0, y1) - y0) / (y1 - y0));
    let bottom = p.top + PANEL_H;
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"##,
        LEFT + plot_w / 2.0,
        p.top - 10.0,
        p.title
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{:.1}" width="{plot_w:.1}" height="{PANEL_H}" fill="none" stroke="#333"/>"##,
        p.top
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{LEFT}" y2="{py:.1}" stroke="#333"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{y:.2}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let ticks = (x_max as usize).clamp(1, 10);
    for i in 0..=ticks {
        let x = 1.0 + (x_max - 1.0).max(0.0) * i as f64 / ticks as f64;
        let px = sx(x);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{bottom:.1}" x2="{px:.1}" y2="{:.1}" stroke="#333"/><text x="{px:.1}" y="{:.1}" font-size="11" text-anchor="middle">{x:.0}</text>"##,
            bottom + 5.0,
            bottom + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">epoch</text>"##,
        LEFT + plot_w / 2.0,
        bottom + 34.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"##,
        p.top + PANEL_H / 2.0,
        p.top + PANEL_H / 2.0,
        p.y_label
    );
    for (name, color, pts) in series {
        if pts.is_empty() {
            continue;
        }
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="series" data-run="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##,
            coords.join(" ")
        );
    }
}

/// Two stacked panels (loss clamped to `[-1, 0]`, representation std) and a legend.
pub fn render_svg(runs: &[Run]) -> String {
    let losses: Vec<_> = runs.iter().map(|r| loss_series(&r.rows)).collect();
    let stds: Vec<_> = runs.iter().map(|r| std_series(&r.rows)).collect();
    let has_std = stds.iter().any(|s| !s.is_empty());
    let x_max = losses
        .iter()
        .chain(&stds)
        .flat_map(|s| s.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let height = TOP + PANEL_H + 50.0 + if has_std { GAP + PANEL_H } else { 0.0 };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let color = |i: usize| COLORS[i % COLORS.len()];
    let loss_series: Vec<_> = runs
        .iter()
        .zip(losses)
        .enumerate()
        .map(|(i, (r, s))| (r.name.as_str(), color(i), s))
        .collect();
    draw_panel(
        &mut svg,
        &Panel {
            title: "symmetric cosine loss",
            y_label: "loss",
            y_range: (-1.0, 0.0),
            top: TOP,
        },
        x_max,
        &loss_series,
    );
    if has_std {
        let top = TOP + PANEL_H + GAP;
        let y_max = nice_max(stds.iter().flatten().map(|p| p.1).fold(0.0, f64::max));
        let std_series: Vec<_> = runs
            .iter()
            .zip(stds)
            .enumerate()
            .map(|(i, (r, s))| (r.name.as_str(), color(i), s))
            .collect();
        draw_panel(
            &mut svg,
            &Panel {
                title: "representation std",
                y_label: "std of l2-normalized z",
                y_range: (0.0, y_max),
                top,
            },
            x_max,
            &std_series,
        );
    }
    let lx = WIDTH - RIGHT + 20.0;
    let _ = writeln!(svg, r##"<g class="legend">"##);
    for (i, r) in runs.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r##"<line x1="{lx:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="3"/><text x="{:.1}" y="{:.1}" font-size="12">{}</text>"##,
            lx + 24.0,
            color(i),
            lx + 30.0,
            y + 4.0,
            escape(&r.name)
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// All rows of all runs with a leading `run` column.
pub fn merged_csv(runs: &[Run]) -> String {
    let mut s = format!("run,{METRICS_HEADER}\n");
    for r in runs {
        for row in &r.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name, row.epoch, row.step, row.split, row.metric, row.value, row.lr
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "epoch,step,split,metric,value,lr\n1,1,train,loss,-0.2,0.001\n1,2,train,loss,-0.4,0.001\n1,2,train,epoch_loss,-0.3,0.001\n2,4,train,epoch_loss,-0.9,0.0005\n2,4,train,representation_std,0.1,0.0005\n";

    #[test]
    fn parses_and_builds_series() {
        let rows = parse_metrics(Path::new("m.csv"), CSV).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(loss_series(&rows), vec![(1.0, -0.3), (2.0, -0.9)]);
        assert_eq!(std_series(&rows), vec![(2.0, 0.1)]);
    }

    #[test]
    fn malformed_lines_are_named() {
        let text = "epoch,step,split,metric,value,lr\n1,1,train,loss,-0.2,0.001\n1,x,train,loss,-0.2,0.001\n";
        match parse_metrics(Path::new("m.csv"), text) {
            Err(Failure::Input(msg)) => assert!(msg.contains("m.csv:3"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_metrics(Path::new("m.csv"), ""), Err(Failure::Input(_))));
        assert!(matches!(parse_metrics(Path::new("m.csv"), "epoch,step,split,metric,value,lr\n"), Err(Failure::Input(_))));
    }

    #[test]
    fn loss_near_minus_one_sits_at_the_bottom() {
        let rows = parse_metrics(Path::new("m.csv"), CSV).unwrap();
        let runs = vec![Run { name: "a".into(), rows }];
        let svg = render_svg(&runs);
        let bottom = TOP + PANEL_H;
        let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        let last_y: f64 = points.split(' ').last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!(bottom - last_y < 0.15 * PANEL_H, "{last_y}");
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
    }

    #[test]
    fn nice_max_rounds_up() {
        assert_eq!(nice_max(0.13), 0.2);
        assert_eq!(nice_max(0.0), 1.0);
        assert_eq!(nice_max(3.0), 5.0);
    }
}
