//! Plain SVG charts built from metrics logs. Output depends only on the
//! input data, so identical inputs give identical bytes.

use std::fmt::Write;

use apo_core::pipeline::{MetricsLog, MetricsRow, Stage};

pub struct Run {
    /// Legend label, normally the CSV file name.
    pub name: String,
    pub log: MetricsLog,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 250.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 15.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const COLUMNS: usize = 3;
const LEGEND_ROW: f64 = 18.0;

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Tick spacing from {1, 2, 5} × 10^k giving about `target` intervals.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let m = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    /// Padded to whole ticks; a fixed `[0, 1]` when there is no data.
    fn covering(values: impl Iterator<Item = f64>, include_zero: bool) -> (Self, f64) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            (lo, hi) = (0.0, 1.0);
        }
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let step = nice_step(hi - lo, 5.0);
        (
            Self {
                lo: (lo / step).floor() * step,
                hi: (hi / step).ceil() * step,
            },
            step,
        )
    }

    fn ticks(&self, step: f64) -> Vec<f64> {
        let n = ((self.hi - self.lo) / step).round() as usize;
        (0..=n).map(|i| self.lo + i as f64 * step).collect()
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    x: Range,
    y: Range,
}

impl Frame {
    fn inner_w() -> f64 {
        PANEL_W - MARGIN_L - MARGIN_R
    }

    fn inner_h() -> f64 {
        PANEL_H - MARGIN_T - MARGIN_B
    }

    fn px(&self, v: f64) -> f64 {
        self.x0 + MARGIN_L + (v - self.x.lo) / (self.x.hi - self.x.lo) * Self::inner_w()
    }

    fn py(&self, v: f64) -> f64 {
        self.y0 + MARGIN_T + (self.y.hi - v) / (self.y.hi - self.y.lo) * Self::inner_h()
    }
}

/// Draws the panel box, title, ticks and axis labels.
fn axes(out: &mut String, f: &Frame, title: &str, xlabel: &str, ylabel: &str, xstep: Option<f64>, ystep: f64) {
    let (left, top) = (f.x0 + MARGIN_L, f.y0 + MARGIN_T);
    let (w, h) = (Frame::inner_w(), Frame::inner_h());
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-weight="bold">{}</text>"#,
        left + w / 2.0,
        f.y0 + 20.0,
        escape(title)
    );
    for v in f.y.ticks(ystep) {
        let y = f.py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 4.0,
            tick_label(v, ystep)
        );
    }
    if let Some(xstep) = xstep {
        for v in f.x.ticks(xstep) {
            let x = f.px(v);
            let bottom = top + h;
            let _ = writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                bottom + 4.0,
                bottom + 16.0,
                tick_label(v, xstep)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + w / 2.0,
        f.y0 + PANEL_H - 6.0,
        escape(xlabel)
    );
    let (lx, ly) = (f.x0 + 14.0, top + h / 2.0);
    let _ = writeln!(
        out,
        r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#,
        escape(ylabel)
    );
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn legend(out: &mut String, runs: &[Run], top: f64) {
    for (i, run) in runs.iter().enumerate() {
        let y = top + i as f64 * LEGEND_ROW;
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            MARGIN_L,
            y,
            color(i),
            MARGIN_L + 18.0,
            y + 10.0,
            escape(&run.name)
        );
    }
}

/// Stages present in any run, in curriculum order.
fn stages_present(runs: &[Run], keep: impl Fn(&MetricsRow) -> bool) -> Vec<Stage> {
    Stage::ALL
        .into_iter()
        .filter(|&s| runs.iter().any(|r| r.log.for_stage(s).any(&keep)))
        .collect()
}

/// One panel per stage, one polyline per run.
fn line_panels(runs: &[Run], metric: fn(&MetricsRow) -> Option<f64>, ylabel: &str, include_zero: bool) -> String {
    let stages = stages_present(runs, |r| metric(r).is_some());
    let panels: Vec<Option<Stage>> = if stages.is_empty() {
        vec![None]
    } else {
        stages.into_iter().map(Some).collect()
    };
    let cols = panels.len().min(COLUMNS);
    let grid_rows = panels.len().div_ceil(COLUMNS);
    let width = cols as f64 * PANEL_W;
    let legend_top = grid_rows as f64 * PANEL_H + 10.0;
    let height = legend_top + runs.len() as f64 * LEGEND_ROW + 10.0;

    let mut body = String::new();
    for (p, stage) in panels.iter().enumerate() {
        let series: Vec<Vec<(f64, f64)>> = runs
            .iter()
            .map(|run| match stage {
                Some(s) => run
                    .log
                    .for_stage(*s)
                    .filter_map(|r| metric(r).map(|v| (r.step as f64, v)))
                    .collect(),
                None => Vec::new(),
            })
            .collect();
        let points = || series.iter().flatten();
        let (x, xstep) = Range::covering(points().map(|p| p.0), true);
        let (y, ystep) = Range::covering(points().map(|p| p.1), include_zero);
        let frame = Frame {
            x0: (p % COLUMNS) as f64 * PANEL_W,
            y0: (p / COLUMNS) as f64 * PANEL_H,
            x,
            y,
        };
        let title = stage.map_or("no data", |s| s.name());
        axes(&mut body, &frame, title, "step", ylabel, Some(xstep), ystep);
        for (i, pts) in series.iter().enumerate() {
            let coords: Vec<String> = pts
                .iter()
                .map(|&(sx, sy)| format!("{:.2},{:.2}", frame.px(sx), frame.py(sy)))
                .collect();
            match coords.len() {
                0 => {}
                1 => {
                    let _ = writeln!(
                        body,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                        frame.px(pts[0].0),
                        frame.py(pts[0].1),
                        color(i)
                    );
                }
                _ => {
                    let _ = writeln!(
                        body,
                        r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                        color(i),
                        coords.join(" ")
                    );
                }
            }
        }
    }
    legend(&mut body, runs, legend_top);
    document(width, height, &body)
}

/// Training loss against step for every stage.
pub fn loss_overlay(runs: &[Run]) -> String {
    line_panels(runs, |r| r.loss, "loss", false)
}

/// Evaluated defect rate against step for every stage.
pub fn defect_curves(runs: &[Run]) -> String {
    line_panels(runs, |r| r.defect_rate, "defect rate", true)
}

/// Final defect rate of each stage, one bar per run, grouped by stage.
pub fn comparison_bars(runs: &[Run]) -> String {
    let stages = stages_present(runs, |r| r.defect_rate.is_some());
    let values: Vec<Vec<Option<f64>>> = stages
        .iter()
        .map(|&s| runs.iter().map(|r| r.log.last_eval(s).and_then(|row| row.defect_rate)).collect())
        .collect();
    let group_w = 120.0;
    let plot_w = (stages.len().max(1) as f64 * group_w).max(PANEL_W - MARGIN_L - MARGIN_R);
    let width = MARGIN_L + plot_w + MARGIN_R;
    let legend_top = PANEL_H + 10.0;
    let height = legend_top + runs.len() as f64 * LEGEND_ROW + 10.0;

    let (y, ystep) = Range::covering(values.iter().flatten().flatten().copied(), true);
    let frame = Frame {
        x0: 0.0,
        y0: 0.0,
        x: Range { lo: 0.0, hi: 1.0 },
        y,
    };
    let mut body = String::new();
    // The shared frame assumes a standard panel; widen the box for many stages.
    let inner_h = Frame::inner_h();
    let _ = writeln!(
        body,
        r##"<rect x="{MARGIN_L:.2}" y="{MARGIN_T:.2}" width="{plot_w:.2}" height="{inner_h:.2}" fill="none" stroke="#333"/>"##
    );
    axes_y_only(&mut body, &frame, "final defect rate by stage", ystep, plot_w);

    let n_runs = runs.len().max(1) as f64;
    let bar_w = (group_w - 20.0) / n_runs;
    for (g, stage) in stages.iter().enumerate() {
        let gx = MARGIN_L + g as f64 * group_w + 10.0;
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + (group_w - 20.0) / 2.0,
            MARGIN_T + inner_h + 16.0,
            stage.name()
        );
        for (i, v) in values[g].iter().enumerate() {
            let Some(v) = v else { continue };
            let (top, base) = (frame.py(v.max(0.0)), frame.py(0.0));
            let x = gx + i as f64 * bar_w;
            let _ = writeln!(
                body,
                r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/><text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{v:.3}</text>"#,
                bar_w - 2.0,
                base - top,
                color(i),
                x + (bar_w - 2.0) / 2.0,
                top - 3.0
            );
        }
    }
    legend(&mut body, runs, legend_top);
    document(width, height, &body)
}

fn axes_y_only(out: &mut String, f: &Frame, title: &str, ystep: f64, plot_w: f64) {
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20.00" text-anchor="middle" font-weight="bold">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        escape(title)
    );
    for v in f.y.ticks(ystep) {
        let y = f.py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_L:.2}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_L - 4.0,
            MARGIN_L - 6.0,
            y + 4.0,
            tick_label(v, ystep)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, rows: Vec<MetricsRow>) -> Run {
        Run {
            name: name.into(),
            log: MetricsLog { rows },
        }
    }

    fn row(stage: Stage, step: usize, loss: Option<f64>, defect: Option<f64>) -> MetricsRow {
        MetricsRow {
            loss,
            defect_rate: defect,
            ..MetricsRow::new(stage, step)
        }
    }

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(1.0, 5.0), 0.2);
        assert_eq!(nice_step(300.0, 5.0), 100.0);
        assert_eq!(nice_step(0.07, 5.0), 0.02);
    }

    #[test]
    fn range_covers_data_on_tick_boundaries() {
        let (r, step) = Range::covering([0.13, 0.71].into_iter(), true);
        assert_eq!(step, 0.2);
        assert!(r.lo <= 0.0 && r.hi >= 0.71);
        let (empty, _) = Range::covering(std::iter::empty(), false);
        assert_eq!((empty.lo, empty.hi), (0.0, 1.0));
    }

    #[test]
    fn escapes_markup_in_names() {
        let doc = loss_overlay(&[run("a<b>&\"c\".csv", vec![])]);
        assert!(doc.contains("a&lt;b&gt;&amp;&quot;c&quot;.csv"));
    }

    #[test]
    fn empty_logs_give_empty_axes() {
        let doc = defect_curves(&[run("empty.csv", vec![])]);
        assert!(doc.contains("no data"));
        assert!(!doc.contains("<polyline"));
        let bars = comparison_bars(&[run("empty.csv", vec![])]);
        assert!(bars.starts_with("<svg"));
    }

    #[test]
    fn one_panel_per_stage_and_series_per_run() {
        let a = run(
            "apo.csv",
            vec![
                row(Stage::Pretrain, 10, Some(1.0), None),
                row(Stage::Pretrain, 20, Some(0.8), None),
                row(Stage::Offline, 10, Some(0.69), Some(0.1)),
                row(Stage::Offline, 20, Some(0.6), Some(0.05)),
            ],
        );
        let b = run("uniform.csv", vec![row(Stage::Offline, 10, Some(0.7), Some(0.2))]);
        let doc = loss_overlay(&[a, b]);
        assert!(doc.contains(">pretrain<") && doc.contains(">offline<"));
        assert_eq!(doc.matches("<polyline").count(), 2);
        assert_eq!(doc.matches("<circle").count(), 1);
        assert!(doc.contains(">apo.csv<") && doc.contains(">uniform.csv<"));
    }

    #[test]
    fn bars_use_last_evaluation() {
        let a = run(
            "a.csv",
            vec![
                row(Stage::Offline, 0, None, Some(0.4)),
                row(Stage::Offline, 300, None, Some(0.125)),
            ],
        );
        let doc = comparison_bars(&[a]);
        assert!(doc.contains(">0.125<"));
        assert!(!doc.contains(">0.400<"));
    }
}
