//! File formats: CSV writers/readers and SVG rendering.
//!
//! CSV is UTF-8, comma-separated, `.` decimal. Floats are written with
//! Rust's shortest-roundtrip formatting, so identical runs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use tca_core::diffmath::Mat;
use tca_core::metaloop::OuterObjectiveRecord;

use crate::metrics::SuiteSummary;
use crate::runner::UmbrellaActionStats;
use crate::HarnessError;

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

// ---- matrices -----------------------------------------------------------

/// Dense matrix with a header row of state ids:
/// `state,0,1,...` then one `row_id,entries...` line per state.
pub fn matrix_csv(m: &Mat) -> String {
    let mut out = String::from("state");
    for j in 0..m.cols() {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for i in 0..m.rows() {
        let _ = write!(out, "{i}");
        for j in 0..m.cols() {
            let _ = write!(out, ",{}", m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<(), HarnessError> {
    write_file(path, &matrix_csv(m))
}

pub fn parse_matrix_csv(text: &str) -> Result<Mat, HarnessError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Runtime("empty matrix CSV".into()))?;
    let cols = header.split(',').count() - 1;
    if cols == 0 {
        return Err(HarnessError::Runtime("matrix CSV has no columns".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 1 {
            return Err(HarnessError::Runtime(format!(
                "matrix CSV line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols + 1
            )));
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| {
                HarnessError::Runtime(format!("matrix CSV line {}: bad number '{f}'", lineno + 2))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(HarnessError::Runtime("matrix CSV has no rows".into()));
    }
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn read_matrix_csv(path: &Path) -> Result<Mat, HarnessError> {
    let text = fs::read_to_string(path)?;
    parse_matrix_csv(&text)
}

/// A reachability mask as 0/1 entries in the matrix schema.
pub fn reachability_csv(mask: &[Vec<bool>]) -> String {
    let n = mask.len();
    let mut m = Mat::zeros(n, n);
    for (i, row) in mask.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            if r {
                m[(i, j)] = 1.0;
            }
        }
    }
    matrix_csv(&m)
}

/// Agent tables for inspection. Schema: `state,theta_0,...,theta_A,psi,phi`.
pub fn agent_csv(agent: &tca_core::agent::TabularActorCritic) -> String {
    let actions = agent.theta.cols();
    let mut out = String::from("state");
    for a in 0..actions {
        let _ = write!(out, ",theta_{a}");
    }
    out.push_str(",psi,phi\n");
    for s in 0..agent.theta.rows() {
        let _ = write!(out, "{s}");
        for a in 0..actions {
            let _ = write!(out, ",{}", agent.theta[(s, a)]);
        }
        let _ = writeln!(out, ",{},{}", agent.psi[s], agent.phi[s]);
    }
    out
}

// ---- learning curves ----------------------------------------------------

/// Schema: episode,return,method,seed
pub fn curve_csv(returns: &[f64], method: &str, seed: u64) -> String {
    let mut out = String::from("episode,return,method,seed\n");
    for (i, r) in returns.iter().enumerate() {
        let _ = writeln!(out, "{i},{r},{method},{seed}");
    }
    out
}

pub fn write_curve_csv(
    path: &Path,
    returns: &[f64],
    method: &str,
    seed: u64,
) -> Result<(), HarnessError> {
    write_file(path, &curve_csv(returns, method, seed))
}

/// One curve group: (method, seed, per-episode returns).
pub type CurveGroup = (String, u64, Vec<f64>);

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveGroup>, HarnessError> {
    let mut groups: Vec<CurveGroup> = Vec::new();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "episode,return,method,seed" {
        return Err(HarnessError::Runtime(format!("unexpected curve CSV header '{header}'")));
    }
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(HarnessError::Runtime(format!(
                "curve CSV line {}: {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        let ret: f64 = fields[1]
            .parse()
            .map_err(|_| HarnessError::Runtime(format!("curve CSV line {}: bad return", lineno + 2)))?;
        let seed: u64 = fields[3]
            .parse()
            .map_err(|_| HarnessError::Runtime(format!("curve CSV line {}: bad seed", lineno + 2)))?;
        let method = fields[2].to_string();
        match groups.iter_mut().find(|(m, s, _)| *m == method && *s == seed) {
            Some((_, _, rs)) => rs.push(ret),
            None => groups.push((method, seed, vec![ret])),
        }
    }
    Ok(groups)
}

// ---- logs and summaries ---------------------------------------------------

/// Schema: outer_step,objective,grad_norm_pre_clip,grad_norm_post_clip,snapshot
pub fn outer_log_csv(log: &[OuterObjectiveRecord]) -> String {
    let mut out = String::from("outer_step,objective,grad_norm_pre_clip,grad_norm_post_clip,snapshot\n");
    for r in log {
        let snap = r.snapshot.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.outer_step, r.objective, r.grad_norm_pre_clip, r.grad_norm_post_clip, snap
        );
    }
    out
}

pub fn write_outer_log_csv(path: &Path, log: &[OuterObjectiveRecord]) -> Result<(), HarnessError> {
    write_file(path, &outer_log_csv(log))
}

/// Schema: method,seed,episodes_to_threshold,episodes_ran, with one
/// `method,median,...` row per method after the per-seed rows. Wall-clock
/// stays on stdout so outputs are byte-identical across reruns.
pub fn summary_csv(summary: &SuiteSummary) -> String {
    let mut out = String::from("method,seed,episodes_to_threshold,episodes_ran\n");
    for row in &summary.rows {
        let crossed = row.episodes_to_threshold.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", row.method, row.seed, crossed, row.episodes_ran);
    }
    for (method, median) in &summary.medians {
        let _ = writeln!(out, "{method},median,{median},");
    }
    out
}

pub fn write_summary_csv(path: &Path, summary: &SuiteSummary) -> Result<(), HarnessError> {
    write_file(path, &summary_csv(summary))
}

/// Schema: action,samples,mc_mean,mc_variance,pwr_mean,pwr_variance
pub fn umbrella_report_csv(stats: &[UmbrellaActionStats]) -> String {
    let mut out = String::from("action,samples,mc_mean,mc_variance,pwr_mean,pwr_variance\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.action, s.samples, s.mc_mean, s.mc_variance, s.pwr_mean, s.pwr_variance
        );
    }
    out
}

// ---- SVG ------------------------------------------------------------------

fn viridis(t: f64) -> (u8, u8, u8) {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let lerp = |a: f64, b: f64| a + (b - a) * f;
    (
        lerp(STOPS[i].0, STOPS[i + 1].0).round() as u8,
        lerp(STOPS[i].1, STOPS[i + 1].1).round() as u8,
        lerp(STOPS[i].2, STOPS[i + 1].2).round() as u8,
    )
}

/// Render a weight matrix as an SVG grid. Values map through a monotone
/// color ramp over [0, 1]; masked-out (unreachable) pairs render white.
pub fn heatmap_svg(m: &Mat, mask: Option<&Mat>) -> Result<String, HarnessError> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(HarnessError::Runtime(format!(
                "mask shape {:?} does not match matrix shape {:?}",
                mask.shape(),
                m.shape()
            )));
        }
    }
    let cell = 12usize;
    let margin = 24usize;
    let width = margin + m.cols() * cell + 4;
    let height = margin + m.rows() * cell + 4;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let masked = mask.map(|mk| mk[(i, j)] == 0.0).unwrap_or(false);
            let fill = if masked {
                "#ffffff".to_string()
            } else {
                let (r, g, b) = viridis(m[(i, j)]);
                format!("#{r:02x}{g:02x}{b:02x}")
            };
            let x = margin + j * cell;
            let y = margin + i * cell;
            let _ = writeln!(
                out,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#dddddd" stroke-width="0.5"/>"##
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{margin}" y="14" font-family="monospace" font-size="10">rows: credited state, cols: reward state</text>"#
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Count of cells that would be painted non-white.
pub fn heatmap_filled_cells(m: &Mat, mask: Option<&Mat>) -> usize {
    let mut n = 0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if mask.map(|mk| mk[(i, j)] != 0.0).unwrap_or(true) && m[(i, j)] > 0.0 {
                n += 1;
            }
        }
    }
    n
}

const CURVE_COLORS: [&str; 6] = ["#4053d3", "#dd7337", "#00833d", "#b51d14", "#8a2be2", "#00a0a0"];

/// Render learning curves (trailing-mean smoothed) as SVG polylines, one per
/// (method, seed) group, colored by method.
pub fn curves_svg(groups: &[CurveGroup], smoothing_window: usize) -> Result<String, HarnessError> {
    if groups.is_empty() {
        return Err(HarnessError::Runtime("no curves to render".into()));
    }
    let width = 640usize;
    let height = 400usize;
    let margin = 40usize;

    let smoothed: Vec<(String, u64, Vec<f64>)> = groups
        .iter()
        .map(|(m, s, rs)| {
            let mut out = Vec::with_capacity(rs.len());
            let mut rolling = 0.0;
            for (i, r) in rs.iter().enumerate() {
                rolling += r;
                if i >= smoothing_window {
                    rolling -= rs[i - smoothing_window];
                }
                out.push(rolling / smoothing_window.min(i + 1) as f64);
            }
            (m.clone(), *s, out)
        })
        .collect();

    let max_len = smoothed.iter().map(|(_, _, rs)| rs.len()).max().unwrap_or(1).max(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, _, rs) in &smoothed {
        for &r in rs {
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }

    let mut methods: Vec<&str> = Vec::new();
    for (m, _, _) in &smoothed {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    let plot_w = (width - 2 * margin) as f64;
    let plot_h = (height - 2 * margin) as f64;
    let _ = writeln!(
        out,
        r##"<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888888"/>"##
    );
    for (m, _, rs) in &smoothed {
        let color = CURVE_COLORS[methods.iter().position(|x| x == m).unwrap() % CURVE_COLORS.len()];
        let mut points = String::new();
        for (i, &r) in rs.iter().enumerate() {
            let x = margin as f64 + plot_w * i as f64 / (max_len - 1) as f64;
            let y = margin as f64 + plot_h * (1.0 - (r - lo) / (hi - lo));
            let _ = write!(points, "{x:.1},{y:.1} ");
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1" opacity="0.8"/>"#,
            points.trim_end()
        );
    }
    for (k, m) in methods.iter().enumerate() {
        let y = margin + 14 * (k + 1);
        let color = CURVE_COLORS[k % CURVE_COLORS.len()];
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" font-family="monospace" font-size="10" fill="{color}">{m}</text>"#,
            margin + 8
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{margin}" y="{}" font-family="monospace" font-size="10">episodes (smoothed returns, window {smoothing_window})</text>"#,
        height - 8
    );
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    write_file(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_roundtrip() {
        let m = Mat::from_vec(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.125, 0.1]);
        let text = matrix_csv(&m);
        assert!(text.starts_with("state,0,1,2\n"));
        let back = parse_matrix_csv(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn curve_csv_roundtrip() {
        let text = curve_csv(&[1.0, -2.5, 3.0], "h_pwr", 7);
        let groups = parse_curve_csv(&text).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].0, "h_pwr");
        assert_eq!(groups[0].1, 7);
        assert_eq!(groups[0].2, vec![1.0, -2.5, 3.0]);
    }

    #[test]
    fn identity_heatmap_paints_exactly_n_cells() {
        let n = 5;
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        assert_eq!(heatmap_filled_cells(&m, None), n);
        let svg = heatmap_svg(&m, None).unwrap();
        // n^2 cells plus the background rect.
        assert_eq!(svg.matches("<rect").count(), n * n + 1);
    }

    #[test]
    fn uniform_half_matrix_renders_one_mid_color() {
        let m = Mat::full(3, 3, 0.5);
        let svg = heatmap_svg(&m, None).unwrap();
        let (r, g, b) = viridis(0.5);
        let mid = format!("#{r:02x}{g:02x}{b:02x}");
        assert_eq!(svg.matches(&mid as &str).count(), 9);
    }

    #[test]
    fn masked_cells_render_white() {
        let m = Mat::full(2, 2, 0.9);
        let mut mask = Mat::zeros(2, 2);
        mask[(0, 1)] = 1.0;
        let svg = heatmap_svg(&m, Some(&mask)).unwrap();
        // 3 masked cells + background are white.
        assert_eq!(svg.matches("#ffffff").count(), 4);
    }

    #[test]
    fn colormap_is_monotone_in_luminance_direction() {
        let lum = |t: f64| {
            let (r, g, b) = viridis(t);
            0.2126 * r as f64 + 0.7152 * g as f64 + 0.0722 * b as f64
        };
        let mut prev = lum(0.0);
        for k in 1..=20 {
            let l = lum(k as f64 / 20.0);
            assert!(l > prev, "luminance not increasing at {k}");
            prev = l;
        }
    }
}
