//! Static SVG line charts of error against iteration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::output::{load_run, PLOT_FILE};
use super::stats::{slope_fit_range, SlopeFit, SummaryRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotStyle {
    Linear,
    LogLog,
}

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
/// Slope of `log mean` against `log k` over the last decade of logged iterations.
pub fn tail_slope(summary: &[SummaryRow]) -> Option<SlopeFit> {
    let k_max = summary.iter().map(|r| r.k).max()? as f64;
    slope_fit_range(&positive_points(summary), k_max / 10.0, k_max).ok()
}

fn positive_points(summary: &[SummaryRow]) -> Vec<(f64, f64)> {
    summary.iter().filter(|r| r.k > 0 && r.mean > 0.0).map(|r| (r.k as f64, r.mean)).collect()
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(vals: impl Iterator<Item = f64>, log: bool, zero_floor: bool) -> Self {
        let (mut lo, mut hi) = vals
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() || (log && lo <= 0.0) {
            (lo, hi) = if log { (1.0, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            lo = lo.log10().floor();
            hi = hi.log10().ceil();
        } else if zero_floor {
            lo = lo.min(0.0);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let x = if self.log { v.log10() } else { v };
        (x - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo as i32, self.hi as i32);
            let step = ((b - a) / 8).max(1);
            (a..=b).step_by(step as usize).map(|e| (10f64.powi(e), format!("1e{e}"))).collect()
        } else {
            (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format!("{}", (v * 1e4).round() / 1e4))
                })
                .collect()
        }
    }
}

fn px(ax: &Axis, v: f64) -> f64 {
    LEFT + ax.frac(v) * (W - LEFT - RIGHT)
}

fn py(ax: &Axis, v: f64) -> f64 {
    H - BOTTOM - ax.frac(v) * (H - TOP - BOTTOM)
}

/// Render a summary as SVG. `diverged` of `total` repetitions were cut short.
pub fn render_svg(summary: &[SummaryRow], diverged: usize, total: usize, style: PlotStyle) -> String {
    let log = style == PlotStyle::LogLog;
    let all_diverged = total > 0 && diverged == total;
    let rows: Vec<&SummaryRow> = summary.iter().filter(|r| !log || (r.k > 0 && r.mean > 0.0)).collect();
    let band_lo = |r: &SummaryRow| {
        let lo = r.mean - r.std;
        if log && lo <= 0.0 {
            r.mean * 1e-3
        } else {
            lo
        }
    };
    let xa = Axis::new(rows.iter().map(|r| r.k as f64), log, false);
    let ya = Axis::new(rows.iter().flat_map(|r| [band_lo(r), r.mean + r.std]), log, true);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
    for (v, label) in xa.ticks() {
        let x = px(&xa, v);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle">{label}</text>"#, y0 + 20.0);
    }
    for (v, label) in ya.ticks() {
        let y = py(&ya, v);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{label}</text>"#, x0 - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">iteration k</text>"#, (x0 + x1) / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {:.2})">error</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    if all_diverged || rows.is_empty() {
        let _ = writeln!(
            s,
            r#"<text class="divergence" x="{:.2}" y="{:.2}" font-size="18" fill="firebrick" text-anchor="middle">all {total} repetitions diverged</text>"#,
            (x0 + x1) / 2.0,
            (y0 + y1) / 2.0
        );
        s.push_str("</svg>\n");
        return s;
    }

    let upper: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", px(&xa, r.k as f64), py(&ya, r.mean + r.std))).collect();
    let lower: Vec<String> = rows.iter().rev().map(|r| format!("{:.2},{:.2}", px(&xa, r.k as f64), py(&ya, band_lo(r)))).collect();
    let _ = writeln!(
        s,
        r#"<polygon class="band" points="{} {}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#,
        upper.join(" "),
        lower.join(" ")
    );
    let line: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", px(&xa, r.k as f64), py(&ya, r.mean))).collect();
    let _ = writeln!(s, r#"<polyline class="mean" points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, line.join(" "));

    if log {
        if let Some(fit) = tail_slope(summary) {
            let _ = writeln!(
                s,
                r#"<text class="slope" x="{:.2}" y="{:.2}" font-size="14" text-anchor="end">tail slope {:.2} ± {:.2}</text>"#,
                x1 - 10.0,
                y1 + 20.0,
                fit.slope,
                fit.stderr
            );
        }
    }
    if diverged > 0 {
        let _ = writeln!(
            s,
            r#"<text class="divergence" x="{:.2}" y="{:.2}" font-size="14" fill="firebrick" text-anchor="end">{diverged} of {total} repetitions diverged</text>"#,
            x1 - 10.0,
            y1 + 40.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Read a run directory and write `plot.svg` into it.
pub fn emit_plot(run_dir: impl AsRef<Path>, style: PlotStyle) -> Result<PathBuf> {
    let dir = run_dir.as_ref();
    let run = load_run(dir)?;
    let diverged = run.meta.diverged.iter().filter(|d| **d).count();
    if run.summary.is_empty() && diverged == 0 {
        return Err(Error::InvalidTrace(format!("{} holds no data", dir.display())));
    }
    let svg = render_svg(&run.summary, diverged, run.meta.repetitions, style);
    let path = dir.join(PLOT_FILE);
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
